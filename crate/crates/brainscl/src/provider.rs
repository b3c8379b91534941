//! Text embedding provider selection, including the HTTP provider.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use brainscl_core::text::{PrecomputedProvider, ProviderKind, StubProvider, TextEmbeddingProvider};
use brainscl_core::{Error, Result, Subject};
use serde::{Deserialize, Serialize};

use crate::config::{ProviderChoice, TextConfig};
use crate::error::{AppError, AppResult};

#[derive(Serialize)]
struct Request<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct Response {
    vector: Vec<f64>,
}

/// Posts `{"text": ...}` to an endpoint and expects `{"vector": [...]}` back.
/// Failures surface as provider errors; there is no fallback.
pub struct ExternalProvider {
    name: String,
    endpoint: String,
    dim: usize,
    agent: ureq::Agent,
    min_interval: Duration,
    last_call: Mutex<Option<Instant>>,
}

impl ExternalProvider {
    pub fn new(name: impl Into<String>, endpoint: impl Into<String>, dim: usize, timeout: Duration, min_interval: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { name: name.into(), endpoint: endpoint.into(), dim, agent, min_interval, last_call: Mutex::new(None) }
    }

    fn throttle(&self) {
        let mut last = self.last_call.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(t) = *last {
            let since = t.elapsed();
            if since < self.min_interval {
                std::thread::sleep(self.min_interval - since);
            }
        }
        *last = Some(Instant::now());
    }
}

impl TextEmbeddingProvider for ExternalProvider {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn kind(&self) -> ProviderKind {
        ProviderKind::External
    }
    fn embed(&self, subject: &Subject) -> Result<Vec<f64>> {
        let text = subject.text.as_deref().ok_or_else(|| Error::Subject {
            subject: subject.id.clone(),
            message: "no clinical text for the external provider".into(),
        })?;
        self.throttle();
        let unreachable = |e: ureq::Error| Error::Provider(format!("{} at {}: {e}", self.name, self.endpoint));
        let resp: Response = self
            .agent
            .post(&self.endpoint)
            .send_json(Request { text })
            .map_err(unreachable)?
            .body_mut()
            .read_json()
            .map_err(unreachable)?;
        Ok(resp.vector)
    }
}

/// Builds the configured provider; `None` disables the text view.
pub fn make_provider(cfg: &TextConfig) -> AppResult<Option<Box<dyn TextEmbeddingProvider>>> {
    Ok(match cfg.provider {
        ProviderChoice::Stub => Some(Box::new(StubProvider::new(cfg.dim, cfg.seed))),
        ProviderChoice::Precomputed => Some(Box::new(PrecomputedProvider { dim: cfg.dim })),
        ProviderChoice::External => {
            let endpoint = cfg
                .endpoint
                .clone()
                .ok_or_else(|| AppError::Config("text.endpoint is required for the external provider".into()))?;
            Some(Box::new(ExternalProvider::new(
                cfg.name.clone().unwrap_or_else(|| "external".into()),
                endpoint,
                cfg.dim,
                Duration::from_secs(cfg.timeout_secs.max(1)),
                Duration::from_millis(cfg.min_interval_ms),
            )))
        }
        ProviderChoice::None => None,
    })
}
