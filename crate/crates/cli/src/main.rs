//! `loom`: headless driver for loom documents.
//!
//! Exit codes: 0 success, 1 usage, 2 document, 3 provider.

mod address;
mod error;

use std::collections::BTreeMap;
use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use loom_core::branching::FixedInterval;
use loom_core::persistence;
use loom_core::provider::ProviderConfig;
use loom_core::{
    BranchPolicy, Document, ExpansionReport, GenerationParams, LanguageModel, NodeId, SearchScope, SelectionMode,
};
use serde::Serialize;

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "loom", version, about = "Create, grow, search and serve loom documents")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    #[command(flatten)]
    provider: ProviderArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ProviderArgs {
    /// Provider spec: table:m1, table:PATH, ngram:ORDER:PATH,
    /// ngram-chars:ORDER:PATH or remote:MODEL@URL. Overrides the document's provider.
    #[arg(long, global = true, conflicts_with = "provider_config")]
    provider: Option<String>,

    /// Provider configuration as a JSON file.
    #[arg(long, global = true)]
    provider_config: Option<PathBuf>,

    /// Environment variable holding the remote provider's bearer token.
    #[arg(long, global = true, value_name = "VAR")]
    auth_env: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Create a document whose root holds the prompt.
    New {
        path: PathBuf,
        #[arg(long, required_unless_present = "import", conflicts_with = "import")]
        prompt: Option<String>,
        /// Build the document from linear text; `## title` lines start chapters.
        #[arg(long, value_name = "TEXT_FILE")]
        import: Option<PathBuf>,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Grow the tree under a node with adaptive branching (or a fixed interval).
    Expand {
        path: PathBuf,
        #[arg(long, default_value = "root")]
        node: String,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        /// Maximum children per branch point.
        #[arg(long, default_value_t = 3, conflicts_with = "no_cap")]
        cap: usize,
        /// Do not limit children per branch point.
        #[arg(long)]
        no_cap: bool,
        /// Total node budget.
        #[arg(long, default_value_t = 20)]
        budget: usize,
        /// Token budget per segment.
        #[arg(long, default_value_t = 32)]
        segment: usize,
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long, value_enum, default_value_t = Mode::Topk)]
        mode: Mode,
        /// Fixed-interval baseline: tokens per segment.
        #[arg(long, value_name = "N_TOKENS", requires = "branch_factor", requires = "depth")]
        fixed: Option<usize>,
        #[arg(long, requires = "fixed")]
        branch_factor: Option<usize>,
        #[arg(long, requires = "fixed")]
        depth: Option<usize>,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Add independent completions as children of a node.
    Siblings {
        path: PathBuf,
        #[arg(long, default_value = "root")]
        node: String,
        #[arg(short, long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Find text occurrences.
    Search {
        path: PathBuf,
        query: String,
        /// all, subtree:NODE, ancestry:NODE or both:NODE.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long)]
        case_sensitive: bool,
    },
    /// Print the text along the path from the root to a node.
    Read {
        path: PathBuf,
        #[arg(long, default_value = "root")]
        node: String,
    },
    /// Write a linear text of a path, or the whole document as JSON.
    Export {
        path: PathBuf,
        #[arg(long, default_value = "root")]
        node: String,
        /// Insert `## title` lines at chapter starts.
        #[arg(long)]
        chapters: bool,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write to a file instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Prompt-template tools.
    Tools {
        #[command(subcommand)]
        command: ToolsCommand,
    },
    /// Serve documents over HTTP.
    Serve {
        /// Document directory, or a document file to open on start.
        path: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8040")]
        bind: String,
        #[arg(long, default_value_t = 2)]
        max_jobs: usize,
        /// Snapshot interval in seconds; 0 disables snapshots.
        #[arg(long, default_value_t = 30)]
        autosave_secs: u64,
        #[arg(long, default_value_t = 20)]
        snapshots: usize,
        /// Shared bearer token required on every request.
        #[arg(long, env = "LOOM_TOKEN", hide_env_values = true)]
        token: Option<String>,
    },
    /// Load a document and run the full invariant sweep.
    Validate { path: PathBuf },
}

#[derive(Subcommand)]
enum ToolsCommand {
    List {
        path: PathBuf,
    },
    Run {
        path: PathBuf,
        name: String,
        #[arg(long, default_value = "root")]
        node: String,
        /// Binds `{var:NAME}`; repeatable.
        #[arg(long = "var", value_name = "NAME=VALUE", value_parser = parse_var)]
        vars: Vec<(String, String)>,
        /// Text for `{selection}`.
        #[arg(long)]
        selection: Option<String>,
        /// Text for `{summary}` instead of computing one.
        #[arg(long)]
        summary: Option<String>,
    },
}

#[derive(Args)]
struct Sampling {
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop sequence; repeatable.
    #[arg(long)]
    stop: Vec<String>,
}

impl Sampling {
    fn params(&self) -> GenerationParams {
        let d = GenerationParams::default();
        GenerationParams {
            temperature: self.temperature.unwrap_or(d.temperature),
            top_p: self.top_p.unwrap_or(d.top_p),
            stop: self.stop.clone(),
            rng_seed: self.seed,
            ..d
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Topk,
    Sample,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn parse_var(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))?;
    if k.is_empty() {
        return Err("variable name is empty".into());
    }
    Ok((k.to_owned(), v.to_owned()))
}

struct Out {
    json: bool,
    color: bool,
}

impl Out {
    fn new(json: bool) -> Self {
        let color = no_color_unset() && std::io::stdout().is_terminal();
        Self { json, color }
    }

    fn id(&self, id: NodeId) -> String {
        if self.color {
            format!("\x1b[1;36m{id}\x1b[0m")
        } else {
            id.to_string()
        }
    }

    fn value<T: Serialize>(&self, v: &T) {
        println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
    }
}

fn load(path: &Path) -> Result<Document, CliError> {
    Ok(persistence::load(path)?)
}

fn save(doc: &mut Document, path: &Path) -> Result<(), CliError> {
    Ok(persistence::save(doc, path)?)
}

impl ProviderArgs {
    /// The provider from the flags, else the document's own.
    fn config(
        &self,
        doc: Option<&Document>,
        doc_path: Option<&Path>,
    ) -> Result<(ProviderConfig, Option<PathBuf>), CliError> {
        let (mut config, base) = if let Some(spec) = &self.provider {
            (ProviderConfig::from_spec(spec)?, None)
        } else if let Some(file) = &self.provider_config {
            let raw = std::fs::read_to_string(file).map_err(|e| CliError::usage(format!("{}: {e}", file.display())))?;
            let config: ProviderConfig =
                serde_json::from_str(&raw).map_err(|e| CliError::usage(format!("{}: {e}", file.display())))?;
            (config, file.parent().map(Path::to_path_buf))
        } else if let Some(config) = doc.and_then(Document::provider_config) {
            (config.clone(), doc_path.and_then(Path::parent).map(Path::to_path_buf))
        } else {
            return Err(CliError::usage(
                "no provider: pass --provider or --provider-config, or configure one in the document",
            ));
        };
        if let (Some(var), ProviderConfig::Remote(remote)) = (&self.auth_env, &mut config) {
            remote.auth_env = Some(var.clone());
        }
        Ok((config, base))
    }

    fn model(&self, doc: &Document, doc_path: &Path) -> Result<Arc<dyn LanguageModel>, CliError> {
        let (config, base) = self.config(Some(doc), Some(doc_path))?;
        let base = base.filter(|p| !p.as_os_str().is_empty());
        Ok(config.build(base.as_deref())?)
    }

    fn given(&self) -> bool {
        self.provider.is_some() || self.provider_config.is_some()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let out = Out::new(cli.json);
    match run(&cli, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if out.json {
                eprintln!("{}", e.to_json());
            } else {
                eprintln!("loom: {}", e.message());
                if let CliError::Document { nodes, .. } = &e {
                    for n in nodes {
                        eprintln!("  offending node: {n}");
                    }
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli, out: &Out) -> Result<(), CliError> {
    match &cli.command {
        Command::New { path, prompt, import, force } => {
            if path.exists() && !force {
                return Err(CliError::usage(format!("{} exists; pass --force to overwrite", path.display())));
            }
            let mut doc = match (prompt, import) {
                (Some(p), _) => Document::new(p.clone()),
                (None, Some(file)) => {
                    let text = std::fs::read_to_string(file)
                        .map_err(|e| CliError::usage(format!("{}: {e}", file.display())))?;
                    Document::import_linear(&text).0
                }
                (None, None) => unreachable!("clap requires one"),
            };
            if cli.provider.given() {
                let (config, _) = cli.provider.config(None, None)?;
                doc.set_provider_config(Some(config));
            }
            save(&mut doc, path)?;
            if out.json {
                out.value(&serde_json::json!({ "path": path, "root": doc.root(), "nodes": doc.len() }));
            } else {
                println!("created {} (root {}, {} nodes)", path.display(), out.id(doc.root()), doc.len());
            }
            Ok(())
        }
        Command::Expand {
            path,
            node,
            tau,
            cap,
            no_cap,
            budget,
            segment,
            max_depth,
            mode,
            fixed,
            branch_factor,
            depth,
            sampling,
        } => {
            let mut doc = load(path)?;
            let start = address::resolve(&doc, node)?;
            let model = cli.provider.model(&doc, path)?;
            let params = sampling.params();
            let report = match fixed {
                Some(n_tokens) => {
                    let shape = FixedInterval {
                        n_tokens: *n_tokens,
                        branch_factor: branch_factor.expect("clap requires it"),
                        depth: depth.expect("clap requires it"),
                    };
                    shape.validate().map_err(|e| CliError::usage(e.to_string()))?;
                    doc.fixed_interval_expand(start, shape, &params, &*model)?
                }
                None => {
                    let policy = BranchPolicy {
                        tau: *tau,
                        branch_cap: if *no_cap { None } else { Some(*cap) },
                        segment_token_budget: *segment,
                        total_node_budget: *budget,
                        max_depth: *max_depth,
                        mode: match mode {
                            Mode::Topk => SelectionMode::TopK,
                            Mode::Sample => SelectionMode::Sample,
                        },
                        params,
                    };
                    policy.validate().map_err(|e| CliError::usage(e.to_string()))?;
                    doc.adaptive_expand(start, &policy, &*model)?
                }
            };
            finish_generation(doc, path, report, out)
        }
        Command::Siblings { path, node, n, max_tokens, sampling } => {
            if *n == 0 {
                return Err(CliError::usage("-n must be >= 1"));
            }
            let mut doc = load(path)?;
            let at = address::resolve(&doc, node)?;
            let model = cli.provider.model(&doc, path)?;
            let params = GenerationParams { max_tokens: *max_tokens, ..sampling.params() };
            params.validate().map_err(|e| CliError::usage(e.to_string()))?;
            let report = doc.generate_siblings(at, *n, &params, &*model)?;
            finish_generation(doc, path, report, out)
        }
        Command::Search { path, query, scope, case_sensitive } => {
            if query.is_empty() {
                return Err(CliError::usage("search query must not be empty"));
            }
            let doc = load(path)?;
            let scope = parse_scope(&doc, scope)?;
            let matches = doc.search(query, scope, *case_sensitive)?;
            if out.json {
                out.value(&matches);
            } else {
                for m in &matches {
                    println!("{}:{}-{}  {}", out.id(m.node), m.start, m.end, m.snippet.replace('\n', " "));
                }
                eprintln!("{} match(es)", matches.len());
            }
            Ok(())
        }
        Command::Read { path, node } => {
            let doc = load(path)?;
            let at = address::resolve(&doc, node)?;
            let text = doc.read_view(at)?;
            if out.json {
                out.value(&text);
            } else {
                print_text(&text);
            }
            Ok(())
        }
        Command::Export { path, node, chapters, format, output } => {
            let doc = load(path)?;
            let text = match format {
                Format::Json => persistence::to_canonical_string(&doc),
                Format::Text => {
                    let at = address::resolve(&doc, node)?;
                    doc.export_linear(at, *chapters)?
                }
            };
            match output {
                Some(file) => {
                    std::fs::write(file, &text).map_err(|e| CliError::document(format!("{}: {e}", file.display())))?;
                    if out.json {
                        out.value(&serde_json::json!({ "path": file, "bytes": text.len() }));
                    }
                }
                None if out.json && *format == Format::Text => out.value(&text),
                None => print_text(&text),
            }
            Ok(())
        }
        Command::Tools { command: ToolsCommand::List { path } } => {
            let doc = load(path)?;
            if out.json {
                out.value(&doc.templates());
            } else {
                for t in doc.templates() {
                    println!("{}  ({})", t.name, serde_json::to_value(t.output).expect("enum").as_str().unwrap_or(""));
                }
            }
            Ok(())
        }
        Command::Tools { command: ToolsCommand::Run { path, name, node, vars, selection, summary } } => {
            let mut doc = load(path)?;
            let at = address::resolve(&doc, node)?;
            let model = cli.provider.model(&doc, path)?;
            let mut bound: BTreeMap<String, String> = vars.iter().cloned().collect();
            if let Some(s) = selection {
                bound.insert("selection".into(), s.clone());
            }
            if let Some(s) = summary {
                bound.insert("summary".into(), s.clone());
            }
            let result = doc.run_tool(name, at, &bound, &*model)?;
            if result.created.is_some() {
                save(&mut doc, path)?;
            }
            if out.json {
                out.value(&result);
            } else {
                print_text(&result.text);
                if let Some(c) = &result.created {
                    eprintln!("created {c}");
                }
            }
            Ok(())
        }
        Command::Serve { path, bind, max_jobs, autosave_secs, snapshots, token } => {
            serve(cli, path, bind, *max_jobs, *autosave_secs, *snapshots, token.clone())
        }
        Command::Validate { path } => {
            let doc = load(path)?;
            if out.json {
                out.value(&serde_json::json!({ "valid": true, "nodes": doc.len() }));
            } else {
                println!("{}: ok ({} nodes)", path.display(), doc.len());
            }
            Ok(())
        }
    }
}

/// Save what was created, print the report, then surface a mid-run error.
fn finish_generation(mut doc: Document, path: &Path, report: ExpansionReport, out: &Out) -> Result<(), CliError> {
    if !report.created.is_empty() {
        save(&mut doc, path)?;
    }
    if out.json {
        out.value(&report);
    } else {
        for &id in &report.created {
            let node = doc.node(id)?;
            let parent = node.active_parent().map(|p| out.id(p)).unwrap_or_default();
            println!("{} <- {}  {:?}", out.id(id), parent, node.text());
        }
        for note in &report.notes {
            eprintln!("note: {note}");
        }
        eprintln!(
            "created {} node(s), {} branch point(s), {} branch(es) skipped",
            report.created.len(),
            report.branch_factors.len(),
            report.skipped
        );
    }
    match report.error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn parse_scope(doc: &Document, raw: &str) -> Result<SearchScope, CliError> {
    if raw == "all" {
        return Ok(SearchScope::All);
    }
    let (kind, reference) = raw.split_once(':').ok_or_else(|| CliError::usage(format!("unknown scope {raw:?}")))?;
    let node = address::resolve(doc, reference)?;
    match kind {
        "subtree" => Ok(SearchScope::Subtree(node)),
        "ancestry" => Ok(SearchScope::Ancestry(node)),
        "both" => Ok(SearchScope::Both(node)),
        _ => Err(CliError::usage(format!("unknown scope kind {kind:?}"))),
    }
}

fn no_color_unset() -> bool {
    !std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty())
}

fn print_text(text: &str) {
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(text.as_bytes());
    if !text.ends_with('\n') {
        let _ = stdout.write_all(b"\n");
    }
}

fn serve(
    cli: &Cli,
    path: &Path,
    bind: &str,
    max_jobs: usize,
    autosave_secs: u64,
    snapshots: usize,
    token: Option<String>,
) -> Result<(), CliError> {
    let (dir, file) = if path.is_file() {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        (dir.to_path_buf(), Some(path.to_path_buf()))
    } else {
        (path.to_path_buf(), None)
    };
    let mut config = loom_service::ServiceConfig::new(dir);
    config.max_jobs = max_jobs;
    config.autosave_every = (autosave_secs > 0).then(|| Duration::from_secs(autosave_secs));
    config.snapshots = snapshots;
    config.token = token.filter(|t| !t.is_empty());
    if cli.provider.given() {
        config.default_provider = Some(cli.provider.config(None, None)?.0);
    }
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .with_ansi(no_color_unset() && std::io::stderr().is_terminal())
        .try_init();
    let state =
        loom_service::AppState::new(config).map_err(|e| CliError::document(format!("{}: {e}", path.display())))?;
    if let Some(file) = file {
        state.open_file(&file).map_err(|e| CliError::document(format!("{}: {}", file.display(), e.body.message)))?;
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::document(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| CliError::usage(format!("cannot bind {bind}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::document(e.to_string()))?;
        eprintln!("listening on http://{addr}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        loom_service::run(state, listener, shutdown).await.map_err(|e| CliError::document(e.to_string()))
    })
}
