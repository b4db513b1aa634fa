//! Client for the resume-from-layer KL service.
//!
//! `POST /v1/kl` takes `{seq_id, layer, states_b64, positions}` where
//! `states_b64` is base64 of the `seq_len × d` replacement states as
//! little-endian f32, and answers `{kl, baseline_logprob, perturbed_logprob}`.
//! `GET /v1/info` describes the served model.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use layerlens_core::intervene::ResumeBackend;
use layerlens_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::ClientError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub model_name: String,
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub seq_len: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeRequest {
    pub seq_id: u32,
    /// First layer to run, `ℓ + 1`.
    pub layer: u32,
    pub states_b64: String,
    pub positions: Vec<u32>,
}

impl ResumeRequest {
    pub fn new(seq_id: u32, layer: u32, states: &[f32], positions: Vec<u32>) -> Self {
        ResumeRequest {
            seq_id,
            layer,
            states_b64: encode_states(states),
            positions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeResponse {
    pub kl: Vec<f64>,
    pub baseline_logprob: Vec<f64>,
    pub perturbed_logprob: Vec<f64>,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

pub fn encode_states(states: &[f32]) -> String {
    let bytes: Vec<u8> = states.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

/// Inverse of [`encode_states`]; `None` for malformed input.
pub fn decode_states(b64: &str) -> Option<Vec<f32>> {
    let bytes = STANDARD.decode(b64).ok()?;
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientOptions {
    pub timeout: Duration,
    /// Upper bound on concurrent requests.
    pub max_in_flight: usize,
    /// Extra attempts after a retryable failure.
    pub retries: u32,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            timeout: Duration::from_secs(30),
            max_in_flight: 4,
            retries: 2,
        }
    }
}

/// Counting semaphore bounding requests in flight.
struct Slots {
    free: Mutex<usize>,
    ready: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.ready.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.ready.notify_one();
    }
}

pub struct ResumeClient {
    endpoint: String,
    agent: ureq::Agent,
    info: ServiceInfo,
    retries: u32,
    max_in_flight: usize,
    slots: Slots,
}

impl std::fmt::Debug for ResumeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResumeClient")
            .field("endpoint", &self.endpoint)
            .field("info", &self.info)
            .finish()
    }
}

impl ResumeClient {
    /// Connects and fetches `/v1/info`, so an unreachable service fails here.
    pub fn connect(endpoint: &str, opts: ClientOptions) -> Result<ResumeClient, ClientError> {
        let endpoint = endpoint.trim_end_matches('/').to_string();
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(opts.timeout))
            .http_status_as_error(false)
            .build();
        let agent = ureq::Agent::new_with_config(config);
        let mut client = ResumeClient {
            endpoint,
            agent,
            info: ServiceInfo {
                model_name: String::new(),
                num_layers: 0,
                hidden_dim: 0,
                seq_len: 0,
            },
            retries: opts.retries,
            max_in_flight: opts.max_in_flight.max(1),
            slots: Slots {
                free: Mutex::new(opts.max_in_flight.max(1)),
                ready: Condvar::new(),
            },
        };
        client.info = client.with_retries(|| client.fetch_info())?;
        Ok(client)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn info(&self) -> &ServiceInfo {
        &self.info
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut attempt = 0;
        loop {
            match call() {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    attempt += 1;
                    std::thread::sleep(Duration::from_millis(50 << attempt));
                }
                other => return other,
            }
        }
    }

    fn transport(&self, e: ureq::Error) -> ClientError {
        match e {
            ureq::Error::Timeout(_) => ClientError::Timeout {
                endpoint: self.endpoint.clone(),
            },
            ureq::Error::Json(e) => ClientError::Protocol {
                status: 200,
                msg: format!("malformed response body: {e}"),
            },
            other => ClientError::Unreachable {
                endpoint: self.endpoint.clone(),
                msg: other.to_string(),
            },
        }
    }

    fn fetch_info(&self) -> Result<ServiceInfo, ClientError> {
        let mut resp = self
            .agent
            .get(format!("{}/v1/info", self.endpoint))
            .call()
            .map_err(|e| self.transport(e))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(error_status(
                status,
                resp.body_mut().read_to_string().unwrap_or_default(),
                None,
            ));
        }
        resp.body_mut().read_json().map_err(|e| self.transport(e))
    }

    fn post_kl(&self, req: &ResumeRequest) -> Result<ResumeResponse, ClientError> {
        let _slot = self.slots.acquire();
        let mut resp = self
            .agent
            .post(format!("{}/v1/kl", self.endpoint))
            .send_json(req)
            .map_err(|e| self.transport(e))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(error_status(status, body, Some(req.seq_id)));
        }
        let out: ResumeResponse = resp.body_mut().read_json().map_err(|e| self.transport(e))?;
        let n = req.positions.len();
        if out.kl.len() != n || out.baseline_logprob.len() != n || out.perturbed_logprob.len() != n {
            return Err(ClientError::Protocol {
                status,
                msg: format!("expected {n} values per field"),
            });
        }
        if out.kl.iter().any(|k| k.is_nan() || *k < 0.0) {
            return Err(ClientError::Protocol {
                status,
                msg: "negative or NaN KL in response".into(),
            });
        }
        Ok(out)
    }

    /// One resume call, retried on timeouts and transient failures.
    pub fn kl(&self, req: &ResumeRequest) -> Result<ResumeResponse, ClientError> {
        self.with_retries(|| self.post_kl(req))
    }

    /// Issues `reqs` with at most the configured number in flight; results
    /// keep request order.
    pub fn kl_batch(&self, reqs: &[ResumeRequest]) -> Vec<Result<ResumeResponse, ClientError>> {
        let workers = self.max_in_flight.min(reqs.len()).max(1);
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<Result<ResumeResponse, ClientError>>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(req) = reqs.get(i) else { break };
                    let out = self.kl(req);
                    *results[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(out);
                });
            }
        });
        results
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .unwrap_or_else(|e| e.into_inner())
                    .expect("every request answered")
            })
            .collect()
    }
}

fn error_status(status: u16, body: String, seq_id: Option<u32>) -> ClientError {
    let msg = serde_json::from_str::<ErrorBody>(&body).map_or(body, |b| b.error);
    match (status, seq_id) {
        (404, Some(seq_id)) => ClientError::UnknownSequence { seq_id },
        _ => ClientError::Protocol { status, msg },
    }
}

impl ResumeBackend for ResumeClient {
    fn num_layers(&self) -> usize {
        self.info.num_layers as usize
    }

    fn dim(&self) -> usize {
        self.info.hidden_dim as usize
    }

    fn kl_at(&self, seq_id: u32, layer: usize, states: &[f32], positions: &[u32]) -> layerlens_core::Result<Vec<f64>> {
        let req = ResumeRequest::new(seq_id, layer as u32, states, positions.to_vec());
        match self.kl(&req) {
            Ok(resp) => Ok(resp.kl),
            Err(ClientError::UnknownSequence { seq_id }) => Err(CoreError::UnknownSequence { seq_id }),
            Err(e) => Err(CoreError::Backend(e.to_string())),
        }
    }
}
