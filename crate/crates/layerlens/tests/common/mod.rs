#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use layerlens::client::{decode_states, ResumeRequest, ResumeResponse, ServiceInfo};
use layerlens::config::RunConfig;
use layerlens_core::intervene::{ResumeBackend, ToyBackend};
use layerlens_core::toy::ToyModel;

/// Small run over the bundled toy model that finishes in seconds.
pub fn small_config(out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.toy.train_sequences = 24;
    cfg.toy.test_sequences = 4;
    cfg.toy.seq_len = 32;
    cfg.toy.positions = 8;
    cfg.positions = 8;
    cfg.k = 48;
    cfg.ranks = vec![8];
    cfg.out = out.to_path_buf();
    cfg
}

/// In-process stand-in for the resume service, backed by the toy model.
pub struct ToyServer {
    pub endpoint: String,
    pub hits: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
    handle: Option<JoinHandle<()>>,
}

impl Drop for ToyServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

struct State {
    model: ToyModel,
    sequences: BTreeMap<u32, Vec<u32>>,
    seq_len: u32,
    /// Number of initial `/v1/kl` requests answered with 503.
    fail_first: usize,
    hits: Arc<AtomicUsize>,
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        503 => "Service Unavailable",
        _ => "Error",
    };
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}

fn error(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn handle(state: &State, mut stream: TcpStream) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut line = String::new();
    if reader.read_line(&mut line).is_err() || line.is_empty() {
        return;
    }
    let mut parts = line.split_whitespace();
    let (method, path) = (
        parts.next().unwrap_or("").to_string(),
        parts.next().unwrap_or("").to_string(),
    );
    let mut length = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).is_err() || h == "\r\n" || h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let c = *state.model.config();
    match (method.as_str(), path.as_str()) {
        ("GET", "/v1/info") => {
            let info = ServiceInfo {
                model_name: "toy-byte-decoder".into(),
                num_layers: c.num_layers as u32,
                hidden_dim: c.dim as u32,
                seq_len: state.seq_len,
            };
            respond(&mut stream, 200, &serde_json::to_string(&info).unwrap());
        }
        ("POST", "/v1/kl") => {
            if state.hits.fetch_add(1, Ordering::SeqCst) < state.fail_first {
                return respond(&mut stream, 503, &error("warming up"));
            }
            let Ok(req) = serde_json::from_slice::<ResumeRequest>(&body) else {
                return respond(&mut stream, 400, &error("malformed JSON"));
            };
            let Some(tokens) = state.sequences.get(&req.seq_id) else {
                return respond(&mut stream, 404, &error("unknown seq_id"));
            };
            let Some(states) = decode_states(&req.states_b64) else {
                return respond(&mut stream, 400, &error("malformed states_b64"));
            };
            if states.len() != tokens.len() * c.dim {
                return respond(&mut stream, 400, &error("states shape mismatch"));
            }
            if req.layer == 0 || req.layer as usize > c.num_layers {
                return respond(&mut stream, 400, &error("layer out of range"));
            }
            let seqs = vec![(req.seq_id, tokens.clone())];
            let backend = ToyBackend::new(&state.model, &seqs).unwrap();
            let kl = match backend.kl_at(req.seq_id, req.layer as usize, &states, &req.positions) {
                Ok(k) => k,
                Err(e) => return respond(&mut stream, 400, &error(&e.to_string())),
            };
            let base = state.model.forward(tokens).unwrap().log_probs;
            let pert = state.model.resume(tokens, req.layer as usize, &states).unwrap();
            let v = c.vocab_size;
            // Realized next-token log-probability; the last position scores its own token.
            let realized = |lp: &[f32]| -> Vec<f64> {
                req.positions
                    .iter()
                    .map(|&p| {
                        let p = p as usize;
                        let next = tokens.get(p + 1).copied().unwrap_or(tokens[p]) as usize;
                        f64::from(lp[p * v + next])
                    })
                    .collect()
            };
            let resp = ResumeResponse {
                kl,
                baseline_logprob: realized(&base),
                perturbed_logprob: realized(&pert),
            };
            respond(&mut stream, 200, &serde_json::to_string(&resp).unwrap());
        }
        _ => respond(&mut stream, 404, &error("no such route")),
    }
}

pub fn serve(model: ToyModel, sequences: Vec<(u32, Vec<u32>)>, fail_first: usize) -> ToyServer {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let addr = listener.local_addr().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let hits = Arc::new(AtomicUsize::new(0));
    let seq_len = sequences.iter().map(|s| s.1.len()).max().unwrap_or(0) as u32;
    let state = Arc::new(State {
        model,
        sequences: sequences.into_iter().collect(),
        seq_len,
        fail_first,
        hits: hits.clone(),
    });
    let stop2 = stop.clone();
    let handle = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if stop2.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let state = state.clone();
            std::thread::spawn(move || handle(&state, stream));
        }
    });
    ToyServer {
        endpoint: format!("http://{addr}"),
        hits,
        stop,
        addr,
        handle: Some(handle),
    }
}

/// A loopback port with nothing listening on it.
pub fn dead_endpoint() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}
