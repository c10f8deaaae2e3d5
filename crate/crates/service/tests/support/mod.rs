//! A live server on an ephemeral port plus a small blocking HTTP client.
#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use loom_service::{AppState, ServiceConfig};
use serde_json::Value;

pub mod dual_path;

pub struct Server {
    pub base: String,
    pub state: Arc<AppState>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl Server {
    pub fn start(config: ServiceConfig) -> Self {
        let state = AppState::new(config).expect("service state");
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel::<SocketAddr>();
        let st = state.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
                addr_tx.send(listener.local_addr()?).expect("address receiver");
                loom_service::run(st, listener, async {
                    let _ = stop_rx.await;
                })
                .await
            })
        });
        let addr = addr_rx.recv_timeout(Duration::from_secs(10)).expect("server did not start");
        Server { base: format!("http://{addr}/api"), state, stop: Some(stop_tx), thread: Some(thread) }
    }

    /// Graceful shutdown; returns once documents are flushed.
    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().expect("server thread panicked"),
            None => Ok(()),
        }
    }

    pub fn client(&self) -> Client {
        Client::new(&self.base, None)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

pub struct Client {
    agent: ureq::Agent,
    base: String,
    token: Option<String>,
}

pub struct Reply {
    pub status: u16,
    pub text: String,
    pub headers: Vec<(String, String)>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.text))
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

impl Client {
    pub fn new(base: &str, token: Option<&str>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Client { agent, base: base.to_owned(), token: token.map(str::to_owned) }
    }

    fn finish(r: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Reply {
        let mut r = r.expect("request failed");
        let headers =
            r.headers().iter().map(|(k, v)| (k.to_string(), v.to_str().unwrap_or_default().to_owned())).collect();
        Reply { status: r.status().as_u16(), text: r.body_mut().read_to_string().unwrap_or_default(), headers }
    }

    pub fn get(&self, path: &str) -> Reply {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        Self::finish(req.call())
    }

    pub fn delete(&self, path: &str) -> Reply {
        let mut req = self.agent.delete(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        Self::finish(req.call())
    }

    pub fn send(&self, method: &str, path: &str, body: &Value) -> Reply {
        let url = format!("{}{path}", self.base);
        let mut req = match method {
            "POST" => self.agent.post(url),
            "PATCH" => self.agent.patch(url),
            "PUT" => self.agent.put(url),
            _ => panic!("unsupported method {method}"),
        };
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        Self::finish(req.send_json(body))
    }

    pub fn post(&self, path: &str, body: &Value) -> Reply {
        self.send("POST", path, body)
    }

    pub fn post_raw(&self, path: &str, body: &str) -> Reply {
        let req = self.agent.post(format!("{}{path}", self.base)).header("Content-Type", "application/json");
        Self::finish(req.send(body))
    }

    /// Read server-sent events until `done` returns true on the events so far.
    pub fn events_until(&self, path: &str, mut done: impl FnMut(&[Value]) -> bool) -> Vec<Value> {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let resp = req.call().expect("event stream");
        assert_eq!(resp.status().as_u16(), 200, "event stream status");
        let mut reader = BufReader::new(resp.into_body().into_reader());
        let mut out = Vec::new();
        let mut line = String::new();
        if done(&out) {
            return out;
        }
        loop {
            line.clear();
            if reader.read_line(&mut line).expect("event stream read") == 0 {
                return out;
            }
            if let Some(data) = line.trim_end().strip_prefix("data:") {
                out.push(serde_json::from_str(data.trim_start()).expect("event JSON"));
                if done(&out) {
                    return out;
                }
            }
        }
    }

    /// Poll a job until it leaves the queued/running states.
    pub fn wait_job(&self, doc: &str, job: &str) -> Value {
        for _ in 0..1000 {
            let status = self.get(&format!("/doc/{doc}/jobs/{job}")).json();
            if !matches!(status["state"].as_str(), Some("queued" | "running")) {
                return status;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        panic!("job {job} did not finish");
    }
}
