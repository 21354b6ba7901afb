//! HTTP client for a remote per-token log-probability service.
//!
//! Scoring: `POST {base_url}/v1/score` with
//! `{"model", "prompt", "completion", "request_id"}`, answered by
//! `{"tokens": [..], "token_logprobs": [..]}` (natural log, one per
//! completion token).
//!
//! Generation: `POST {base_url}/v1/generate` with
//! `{"model", "prompt", "max_tokens", "seed", "request_id"}`, answered by
//! `{"text": ".."}`.
//!
//! `request_id` and the `Idempotency-Key` header are the SHA-256 of the
//! request content, so retried requests are recognisable server-side.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{tokenize, LanguageModel, LmError, SerializedPrompt};
use crate::guard::GuardedContext;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    pub token_env: Option<String>,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
    pub max_prompt_tokens: Option<usize>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://127.0.0.1:8080".into(),
            model: "default".into(),
            token_env: None,
            max_in_flight: 4,
            max_retries: 3,
            backoff_ms: 200,
            timeout_ms: 60_000,
            max_prompt_tokens: None,
        }
    }
}

#[derive(Serialize)]
struct ScoreBody<'a> {
    model: &'a str,
    prompt: &'a str,
    completion: &'a str,
    request_id: String,
}

#[derive(Deserialize)]
struct ScoreReply {
    #[serde(default)]
    tokens: Vec<String>,
    token_logprobs: Vec<f64>,
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    seed: u64,
    request_id: String,
}

#[derive(Deserialize)]
struct GenerateReply {
    text: String,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.free.lock().expect("semaphore lock");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore lock");
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteLm {
    id: String,
    config: RemoteConfig,
    token: Option<String>,
    agent: ureq::Agent,
    slots: Semaphore,
}

fn request_id(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

impl RemoteLm {
    pub fn new(config: RemoteConfig) -> Result<Self, LmError> {
        if config.max_in_flight == 0 {
            return Err(LmError::InvalidParameter("max_in_flight must be at least 1".into()));
        }
        let token = match &config.token_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| LmError::InvalidParameter(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteLm {
            id: format!("remote:{}@{}", config.model, config.base_url),
            slots: Semaphore { free: Mutex::new(config.max_in_flight), cv: Condvar::new() },
            config,
            token,
            agent,
        })
    }

    fn post<T: serde::de::DeserializeOwned>(&self, path: &str, body: &impl Serialize) -> Result<T, LmError> {
        let bytes = serde_json::to_vec(body).map_err(|e| LmError::Protocol(e.to_string()))?;
        let key = hex::encode(Sha256::digest(&bytes));
        let url = format!("{}{}", self.config.base_url.trim_end_matches('/'), path);
        let _permit = self.slots.acquire();
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1).min(16)));
            }
            let mut req =
                self.agent.post(&url).header("Content-Type", "application/json").header("Idempotency-Key", &key);
            if let Some(t) = &self.token {
                req = req.header("Authorization", &format!("Bearer {t}"));
            }
            match req.send(&bytes[..]) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 429 || status >= 500 {
                        last = format!("HTTP {status}");
                        continue;
                    }
                    if status >= 400 {
                        let text = resp.body_mut().read_to_string().unwrap_or_default();
                        return Err(LmError::Unavailable(format!("HTTP {status}: {text}")));
                    }
                    return resp.body_mut().read_json::<T>().map_err(|e| LmError::Protocol(e.to_string()));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(LmError::Unavailable(format!("{url}: giving up after {} attempts: {last}", self.config.max_retries + 1)))
    }

    fn check_length(&self, prompt: &str) -> Result<(), LmError> {
        if let Some(limit) = self.config.max_prompt_tokens {
            let needed = tokenize(prompt).len();
            if needed > limit {
                return Err(LmError::TokenLimit { needed, limit });
            }
        }
        Ok(())
    }
}

impl LanguageModel for RemoteLm {
    fn id(&self) -> &str {
        &self.id
    }

    fn score_whole(&self, prompt: &SerializedPrompt, completion: &[String]) -> Result<Vec<f64>, LmError> {
        let text = prompt.text();
        self.check_length(&text)?;
        let completion = completion.join(" ");
        let body = ScoreBody {
            model: &self.config.model,
            prompt: &text,
            completion: &completion,
            request_id: request_id(&["score", &self.config.model, &text, &completion]),
        };
        let reply: ScoreReply = self.post("/v1/score", &body)?;
        if reply.token_logprobs.is_empty() {
            return Err(LmError::Protocol("no token log-probabilities returned".into()));
        }
        if !reply.tokens.is_empty() && reply.tokens.len() != reply.token_logprobs.len() {
            return Err(LmError::Protocol("tokens and token_logprobs differ in length".into()));
        }
        Ok(reply.token_logprobs)
    }

    fn generate(
        &self,
        prompt: &str,
        context: &GuardedContext,
        max_tokens: usize,
        seed: u64,
    ) -> Result<String, LmError> {
        let text = SerializedPrompt::new(prompt, context.documents()).text();
        self.check_length(&text)?;
        let body = GenerateBody {
            model: &self.config.model,
            prompt: &text,
            max_tokens,
            seed,
            request_id: request_id(&[
                "generate",
                &self.config.model,
                &text,
                &max_tokens.to_string(),
                &seed.to_string(),
            ]),
        };
        let reply: GenerateReply = self.post("/v1/generate", &body)?;
        Ok(reply.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Context;
    use crate::lm::{score, ScoreRequest};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `replies` in order, one connection each, and records request heads.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let hits = Arc::new(AtomicUsize::new(0));
        let (seen2, hits2) = (seen.clone(), hits.clone());
        std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok((mut stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    head.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                head.push_str(&String::from_utf8(buf).unwrap());
                seen2.lock().unwrap().push(head);
                hits2.fetch_add(1, Ordering::SeqCst);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (addr, seen, hits)
    }

    fn config(base_url: String) -> RemoteConfig {
        RemoteConfig { base_url, backoff_ms: 1, max_retries: 2, timeout_ms: 5_000, ..RemoteConfig::default() }
    }

    #[test]
    fn scores_with_retry_and_idempotency_key() {
        let ok = r#"{"tokens":["a","b"],"token_logprobs":[-0.6931471805599453,-0.6931471805599453]}"#;
        let (url, seen, hits) = serve(vec![(503, "{}".into()), (200, ok.into())]);
        let lm = RemoteLm::new(config(url)).unwrap();
        let c = Context::empty();
        let u = score(&lm, &ScoreRequest::new("q", &c, "a b")).unwrap().utility().unwrap();
        assert!((u + 2.0).abs() < 1e-12);
        assert_eq!(hits.load(Ordering::SeqCst), 2);
        let seen = seen.lock().unwrap();
        let key =
            |h: &str| h.lines().find(|l| l.to_ascii_lowercase().starts_with("idempotency-key")).map(str::to_string);
        assert!(key(&seen[0]).is_some());
        assert_eq!(key(&seen[0]), key(&seen[1]));
        assert!(seen[1].contains("/v1/score"));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, _, hits) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let lm = RemoteLm::new(config(url)).unwrap();
        let c = Context::empty();
        assert!(matches!(score(&lm, &ScoreRequest::new("q", &c, "a")), Err(LmError::Unavailable(_))));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn generation_and_auth() {
        std::env::set_var("LP_REMOTE_TEST_TOKEN", "s3cret");
        let (url, seen, _) = serve(vec![(200, r#"{"text":"hello"}"#.into())]);
        let lm = RemoteLm::new(RemoteConfig { token_env: Some("LP_REMOTE_TEST_TOKEN".into()), ..config(url) }).unwrap();
        let g = GuardedContext::new(Context::empty());
        assert_eq!(lm.generate("q", &g, 5, 9).unwrap(), "hello");
        let seen = seen.lock().unwrap();
        assert!(seen[0].contains("Bearer s3cret"));
        assert!(seen[0].contains("\"seed\":9"));
    }

    #[test]
    fn unreachable_server_is_unavailable() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let lm = RemoteLm::new(RemoteConfig { max_retries: 1, ..config(format!("http://127.0.0.1:{port}")) }).unwrap();
        let c = Context::empty();
        assert!(matches!(score(&lm, &ScoreRequest::new("q", &c, "a")), Err(LmError::Unavailable(_))));
    }

    #[test]
    fn prompt_limit() {
        let lm = RemoteLm::new(RemoteConfig { max_prompt_tokens: Some(3), ..RemoteConfig::default() }).unwrap();
        let c = Context::empty();
        assert!(matches!(score(&lm, &ScoreRequest::new("q", &c, "a")), Err(LmError::TokenLimit { .. })));
    }
}
