//! Blocking HTTP client for the inference sidecar.
//!
//! Requests are JSON bodies carrying either `{"image": <base64 PNG/JPEG>}` or
//! `{"text": ...}`; errors come back as `{"error", "detail"}` with a non-2xx
//! status. Request and response schemas live in the repository's `schemas/`
//! directory.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use ureq::Agent;

use crate::filter::CategoryScores;
use crate::panelsplit::SubfigureBox;
use crate::raster::Raster;

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// The detector emits at most this many boxes per image.
pub const MAX_DETECTIONS: usize = 32;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("cannot encode payload: {0}")]
    Encode(String),
    #[error("request to {url} failed: {reason}")]
    Http { url: String, reason: String },
    #[error("server returned {code}: {error}{}", detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
    Status {
        code: u16,
        error: String,
        detail: Option<String>,
    },
    #[error("invalid response from {endpoint}: {reason}")]
    InvalidResponse { endpoint: &'static str, reason: String },
}

/// Anything that maps crops and texts into a shared embedding space.
pub trait EmbeddingScorer: Sync {
    fn embed_image(&self, png: &[u8]) -> Result<Vec<f32>, InferError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, InferError>;
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Payload<'a> {
    Image(String),
    Text(&'a str),
}

#[derive(Debug, Deserialize)]
struct ClassifyResponse {
    scores: Vec<f64>,
    categories: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct WireBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

#[derive(Debug, Deserialize)]
struct DetectResponse {
    boxes: Vec<WireBox>,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vector: Vec<f32>,
    dim: usize,
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
    #[serde(default)]
    detail: Option<String>,
}

/// Counting semaphore capping concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub endpoint: String,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

/// Sidecar client. Cheap to share across threads; at most `max_in_flight`
/// requests are outstanding at once.
#[derive(Debug)]
pub struct InferenceClient {
    base: String,
    agent: Agent,
    gate: Gate,
}

impl InferenceClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self::with_config(ClientConfig::new(endpoint))
    }

    pub fn with_config(cfg: ClientConfig) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        Self {
            base: cfg.endpoint.trim_end_matches('/').to_string(),
            agent,
            gate: Gate::new(cfg.max_in_flight),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    /// True when `/healthz` answers 2xx.
    pub fn healthz(&self) -> Result<bool, InferError> {
        let url = format!("{}/healthz", self.base);
        let _permit = self.gate.acquire();
        let resp = self.agent.get(&url).call().map_err(|e| InferError::Http {
            url,
            reason: e.to_string(),
        })?;
        Ok(resp.status().is_success())
    }

    pub fn classify(&self, image_bytes: &[u8]) -> Result<CategoryScores, InferError> {
        let resp: ClassifyResponse = self.post("/v1/classify", &image_payload(image_bytes))?;
        let invalid = |reason: String| InferError::InvalidResponse {
            endpoint: "/v1/classify",
            reason,
        };
        let sum: f64 = resp.scores.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("scores sum to {sum}")));
        }
        CategoryScores::new(resp.scores, resp.categories).map_err(|e| invalid(e.to_string()))
    }

    /// Detector boxes for `image`, rounded to pixels and clipped to its bounds.
    /// Boxes that vanish after clipping are dropped.
    pub fn detect(&self, image: &Raster) -> Result<Vec<SubfigureBox>, InferError> {
        let png = image.encode_png().map_err(|e| InferError::Encode(e.to_string()))?;
        let resp: DetectResponse = self.post("/v1/detect", &image_payload(&png))?;
        boxes_in_bounds(&resp.boxes, image.width(), image.height())
    }

    fn embed(&self, payload: &Payload<'_>) -> Result<Vec<f32>, InferError> {
        let resp: EmbedResponse = self.post("/v1/embed", payload)?;
        let invalid = |reason: String| InferError::InvalidResponse {
            endpoint: "/v1/embed",
            reason,
        };
        if resp.vector.len() != resp.dim || resp.dim == 0 {
            return Err(invalid(format!("dim {} but {} values", resp.dim, resp.vector.len())));
        }
        if resp.vector.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite component".into()));
        }
        Ok(resp.vector)
    }

    fn post<T: DeserializeOwned>(&self, path: &'static str, payload: &Payload<'_>) -> Result<T, InferError> {
        let url = format!("{}{path}", self.base);
        let http = |e: ureq::Error| InferError::Http {
            url: url.clone(),
            reason: e.to_string(),
        };
        let _permit = self.gate.acquire();
        let mut resp = self.agent.post(&url).send_json(payload).map_err(http)?;
        let code = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(http)?;
        if !resp.status().is_success() {
            let (error, detail) = match serde_json::from_str::<ErrorBody>(&body) {
                Ok(b) => (b.error, b.detail),
                Err(_) => (body, None),
            };
            return Err(InferError::Status { code, error, detail });
        }
        serde_json::from_str(&body).map_err(|e| InferError::InvalidResponse {
            endpoint: path,
            reason: e.to_string(),
        })
    }
}

impl EmbeddingScorer for InferenceClient {
    fn embed_image(&self, png: &[u8]) -> Result<Vec<f32>, InferError> {
        self.embed(&image_payload(png))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, InferError> {
        self.embed(&Payload::Text(text))
    }
}

fn image_payload(bytes: &[u8]) -> Payload<'static> {
    Payload::Image(base64::engine::general_purpose::STANDARD.encode(bytes))
}

fn boxes_in_bounds(raw: &[WireBox], width: u32, height: u32) -> Result<Vec<SubfigureBox>, InferError> {
    let invalid = |reason: String| InferError::InvalidResponse {
        endpoint: "/v1/detect",
        reason,
    };
    if raw.len() > MAX_DETECTIONS {
        return Err(invalid(format!("{} boxes exceeds {MAX_DETECTIONS}", raw.len())));
    }
    let mut out = Vec::with_capacity(raw.len());
    for b in raw {
        if ![b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite()) || !(0.0..=1.0).contains(&b.score) {
            return Err(invalid(format!("malformed box {b:?}")));
        }
        let x0 = b.x.round().clamp(0.0, width as f64) as u32;
        let y0 = b.y.round().clamp(0.0, height as f64) as u32;
        let x1 = (b.x + b.w).round().clamp(0.0, width as f64) as u32;
        let y1 = (b.y + b.h).round().clamp(0.0, height as f64) as u32;
        if x1 > x0 && y1 > y0 {
            out.push(SubfigureBox::new(x0, y0, x1 - x0, y1 - y0, b.score));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{gate_medical, FIGURE_CATEGORIES};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::thread;

    struct Mock {
        url: String,
        hits: Arc<AtomicUsize>,
        peak: Arc<AtomicUsize>,
    }

    /// Serves `handler(path, body) -> (status, body)` on a random port, one
    /// thread per request.
    fn mock<F>(handler: F) -> Mock
    where
        F: Fn(&str, &serde_json::Value) -> (u16, String) + Send + Sync + 'static,
    {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let handler = Arc::new(handler);
        let hits = Arc::new(AtomicUsize::new(0));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (h2, p2) = (hits.clone(), peak.clone());
        thread::spawn(move || {
            for mut req in server.incoming_requests() {
                let (handler, hits, active, peak) = (handler.clone(), h2.clone(), active.clone(), p2.clone());
                thread::spawn(move || {
                    hits.fetch_add(1, Ordering::SeqCst);
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    let mut body = String::new();
                    req.as_reader().read_to_string(&mut body).unwrap();
                    let json = serde_json::from_str(&body).unwrap_or(serde_json::Value::Null);
                    let (code, out) = handler(req.url(), &json);
                    thread::sleep(Duration::from_millis(20));
                    active.fetch_sub(1, Ordering::SeqCst);
                    let _ = req.respond(tiny_http::Response::from_string(out).with_status_code(code));
                });
            }
        });
        Mock { url, hits, peak }
    }

    fn softmax_scores(medical_logit: f64) -> Vec<f64> {
        let logits: Vec<f64> = (0..28).map(|i| if i == 15 { medical_logit } else { (i % 5) as f64 * 0.1 }).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        logits.iter().map(|l| l.exp() / z).collect()
    }

    #[test]
    fn classify_round_trip() {
        let m = mock(|path, body| {
            assert_eq!(path, "/v1/classify");
            let image = body["image"].as_str().unwrap();
            assert_eq!(base64::engine::general_purpose::STANDARD.decode(image).unwrap(), b"png-bytes");
            let reply = serde_json::json!({ "scores": softmax_scores(3.0), "categories": FIGURE_CATEGORIES });
            (200, reply.to_string())
        });
        let client = InferenceClient::new(&m.url);
        let scores = client.classify(b"png-bytes").unwrap();
        assert!(gate_medical(&scores, 1).unwrap());
    }

    #[test]
    fn classify_rejects_unnormalized_scores() {
        let m = mock(|_, _| {
            let reply = serde_json::json!({ "scores": vec![0.5; 28], "categories": FIGURE_CATEGORIES });
            (200, reply.to_string())
        });
        let err = InferenceClient::new(&m.url).classify(b"x").unwrap_err();
        assert!(matches!(err, InferError::InvalidResponse { endpoint: "/v1/classify", .. }));
    }

    #[test]
    fn error_body_is_surfaced() {
        let m = mock(|_, _| (503, r#"{"error":"model unavailable","detail":"no weights"}"#.into()));
        match InferenceClient::new(&m.url).classify(b"x").unwrap_err() {
            InferError::Status { code, error, detail } => {
                assert_eq!(code, 503);
                assert_eq!(error, "model unavailable");
                assert_eq!(detail.as_deref(), Some("no weights"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn detect_clips_to_bounds() {
        let m = mock(|path, _| {
            assert_eq!(path, "/v1/detect");
            let reply = serde_json::json!({ "boxes": [
                {"x": -3.2, "y": 0.0, "w": 50.4, "h": 40.0, "score": 0.9},
                {"x": 60.0, "y": 10.0, "w": 80.0, "h": 90.0, "score": 0.8},
                {"x": 150.0, "y": 10.0, "w": 5.0, "h": 5.0, "score": 0.7}
            ]});
            (200, reply.to_string())
        });
        let img = Raster::filled(100, 80, 3, 255);
        let boxes = InferenceClient::new(&m.url).detect(&img).unwrap();
        assert_eq!(boxes, vec![SubfigureBox::new(0, 0, 47, 40, 0.9), SubfigureBox::new(60, 10, 40, 70, 0.8)]);
        assert!(boxes.iter().all(|b| b.fits_in(100, 80)));
    }

    #[test]
    fn detect_rejects_bad_score() {
        let m = mock(|_, _| (200, r#"{"boxes":[{"x":0,"y":0,"w":1,"h":1,"score":1.5}]}"#.into()));
        let err = InferenceClient::new(&m.url).detect(&Raster::filled(4, 4, 1, 0)).unwrap_err();
        assert!(matches!(err, InferError::InvalidResponse { .. }));
    }

    #[test]
    fn embed_payloads_and_dim_check() {
        let m = mock(|path, body| {
            assert_eq!(path, "/v1/embed");
            let obj = body.as_object().unwrap();
            assert_eq!(obj.len(), 1, "exactly one payload");
            if obj.contains_key("text") {
                (200, r#"{"vector":[0.6,0.8],"dim":2}"#.into())
            } else {
                (200, r#"{"vector":[1.0,0.0,0.0],"dim":2}"#.into())
            }
        });
        let client = InferenceClient::new(&m.url);
        assert_eq!(client.embed_text("CT").unwrap(), vec![0.6, 0.8]);
        assert!(matches!(client.embed_image(b"png"), Err(InferError::InvalidResponse { .. })));
    }

    #[test]
    fn healthz_status() {
        let m = mock(|path, _| if path == "/healthz" { (200, "{}".into()) } else { (404, String::new()) });
        assert!(InferenceClient::new(format!("{}/", m.url)).healthz().unwrap());
    }

    #[test]
    fn unreachable_server_is_http_error() {
        let client = InferenceClient::with_config(ClientConfig {
            timeout: Duration::from_secs(2),
            ..ClientConfig::new("http://127.0.0.1:9")
        });
        assert!(matches!(client.embed_text("x"), Err(InferError::Http { .. })));
    }

    #[test]
    fn in_flight_requests_are_bounded() {
        let m = mock(|_, _| (200, r#"{"vector":[1.0],"dim":1}"#.into()));
        let client = Arc::new(InferenceClient::with_config(ClientConfig {
            max_in_flight: 3,
            ..ClientConfig::new(&m.url)
        }));
        let handles: Vec<_> = (0..12)
            .map(|i| {
                let c = client.clone();
                thread::spawn(move || c.embed_text(&format!("t{i}")).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(m.hits.load(Ordering::SeqCst), 12);
        assert!(m.peak.load(Ordering::SeqCst) <= 3);
    }
}
