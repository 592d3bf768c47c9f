//! LLM backends. `MockBackend` replays a transcript file keyed by
//! (stage, item id) and is the test default; `HttpBackend` posts prompts
//! plus the encoded image to a JSON endpoint with retry on transient
//! failures.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::orchestrator::{BackendConfig, BackendKind, OrchestratorError, Stage};

pub trait LlmBackend: Send + Sync {
    /// One round trip: prompt in, response text out. `image` is the path of
    /// the item's image feature file; whether and how it travels is
    /// backend-specific.
    fn send(
        &self,
        stage: Stage,
        item_id: &str,
        prompt: &str,
        image: &Path,
    ) -> Result<String, OrchestratorError>;
}

/// One canned exchange in a mock transcript file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub stage: Stage,
    pub item_id: String,
    pub response: String,
}

#[derive(Debug)]
pub struct MockBackend {
    entries: HashMap<(Stage, String), String>,
    strict: bool,
}

impl MockBackend {
    /// Load a JSON-lines transcript. Later entries for the same
    /// (stage, item id) replace earlier ones.
    pub fn from_transcript(path: &Path, strict: bool) -> Result<Self, OrchestratorError> {
        let file = std::fs::File::open(path).map_err(|source| OrchestratorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut entries = HashMap::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| OrchestratorError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry =
                serde_json::from_str(&line).map_err(|source| OrchestratorError::ParseAt {
                    path: path.display().to_string(),
                    line: idx + 1,
                    source,
                })?;
            entries.insert((entry.stage, entry.item_id), entry.response);
        }
        Ok(MockBackend { entries, strict })
    }
}

fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl LlmBackend for MockBackend {
    fn send(
        &self,
        stage: Stage,
        item_id: &str,
        prompt: &str,
        _image: &Path,
    ) -> Result<String, OrchestratorError> {
        match self.entries.get(&(stage, item_id.to_string())) {
            Some(response) => Ok(response.clone()),
            None if self.strict => Err(OrchestratorError::MissingEntry {
                stage,
                item_id: item_id.to_string(),
            }),
            // Fallback must be a pure function of the prompt so reruns stay
            // byte-identical.
            None => Ok(format!("mock:{}", sha256_hex(prompt))),
        }
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    stage: Stage,
    item_id: &'a str,
    prompt: &'a str,
    image_path: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff_ms: u64,
}

impl HttpBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| OrchestratorError::Config("http backend requires an endpoint".into()))?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| OrchestratorError::MissingApiKey { var: var.clone() })?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| OrchestratorError::Config(format!("http client: {e}")))?;
        Ok(HttpBackend {
            client,
            endpoint,
            api_key,
            max_retries: cfg.max_retries,
            backoff_ms: cfg.backoff_ms,
        })
    }
}

impl LlmBackend for HttpBackend {
    fn send(
        &self,
        stage: Stage,
        item_id: &str,
        prompt: &str,
        image: &Path,
    ) -> Result<String, OrchestratorError> {
        let image_b64 = std::fs::read(image)
            .ok()
            .map(|bytes| base64::engine::general_purpose::STANDARD.encode(bytes));
        let body = HttpRequest {
            stage,
            item_id,
            prompt,
            image_path: &image.display().to_string(),
            image_b64,
        };

        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let mut req = self.client.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let transient = match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: HttpResponse =
                        resp.json().map_err(|e| OrchestratorError::Transport {
                            attempts,
                            message: format!("bad response body: {e}"),
                        })?;
                    return Ok(parsed.text);
                }
                Ok(resp) if resp.status().is_server_error() => {
                    format!("server error {}", resp.status())
                }
                Ok(resp) => {
                    // Client errors are not retried: the request itself is bad.
                    return Err(OrchestratorError::Transport {
                        attempts,
                        message: format!("request rejected with {}", resp.status()),
                    });
                }
                Err(e) => e.to_string(),
            };
            if attempts > self.max_retries {
                return Err(OrchestratorError::Transport {
                    attempts,
                    message: transient,
                });
            }
            std::thread::sleep(Duration::from_millis(
                self.backoff_ms << (attempts - 1).min(16),
            ));
        }
    }
}

/// Build the backend described by a config.
pub fn make_backend(cfg: &BackendConfig) -> Result<Box<dyn LlmBackend>, OrchestratorError> {
    cfg.validate()?;
    match cfg.kind {
        BackendKind::Mock => {
            let path = cfg.transcript.as_ref().ok_or_else(|| {
                OrchestratorError::Config("mock backend requires a transcript path".into())
            })?;
            Ok(Box::new(MockBackend::from_transcript(path, cfg.strict)?))
        }
        BackendKind::Http => Ok(Box::new(HttpBackend::from_config(cfg)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read as _, Write as _};
    use std::net::TcpListener;

    fn transcript(dir: &Path, lines: &[&str]) -> std::path::PathBuf {
        let p = dir.join("transcript.jsonl");
        std::fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn mock_returns_canned_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = transcript(
            dir.path(),
            &[
                r#"{"stage":"initial","item_id":"a","response":"the left lobe shows a mass"}"#,
                r#"{"stage":"followup","item_id":"a","response":"VERDICT: EFFECTIVE"}"#,
            ],
        );
        let b = MockBackend::from_transcript(&p, true).unwrap();
        let out = b
            .send(Stage::Initial, "a", "whatever", Path::new("img"))
            .unwrap();
        assert_eq!(out, "the left lobe shows a mass");
    }

    #[test]
    fn strict_mock_rejects_missing_entries() {
        let dir = tempfile::tempdir().unwrap();
        let p = transcript(
            dir.path(),
            &[r#"{"stage":"initial","item_id":"a","response":"x"}"#],
        );
        let b = MockBackend::from_transcript(&p, true).unwrap();
        assert!(matches!(
            b.send(Stage::Caption, "a", "p", Path::new("img")),
            Err(OrchestratorError::MissingEntry {
                stage: Stage::Caption,
                ..
            })
        ));
    }

    #[test]
    fn lenient_mock_falls_back_to_prompt_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = transcript(dir.path(), &[]);
        let b = MockBackend::from_transcript(&p, false).unwrap();
        let one = b.send(Stage::Initial, "a", "p1", Path::new("i")).unwrap();
        let two = b.send(Stage::Initial, "a", "p1", Path::new("i")).unwrap();
        let other = b.send(Stage::Initial, "a", "p2", Path::new("i")).unwrap();
        assert_eq!(one, two);
        assert_ne!(one, other);
        assert!(one.starts_with("mock:"));
        assert_eq!(one.len(), "mock:".len() + 64);
    }

    #[test]
    fn transcript_parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = transcript(
            dir.path(),
            &[
                r#"{"stage":"initial","item_id":"a","response":"x"}"#,
                r#"{"stage":"nonsense","item_id":"b"}"#,
            ],
        );
        match MockBackend::from_transcript(&p, true) {
            Err(OrchestratorError::ParseAt { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_api_key_env_is_a_config_error() {
        let mut cfg = BackendConfig::http("http://127.0.0.1:1/");
        cfg.api_key_env = Some("MEDVQA_TEST_KEY_THAT_DOES_NOT_EXIST".into());
        assert!(matches!(
            HttpBackend::from_config(&cfg),
            Err(OrchestratorError::MissingApiKey { .. })
        ));
    }

    #[test]
    fn unreachable_endpoint_exhausts_retries_with_attempt_count() {
        // Bind then drop a listener so the port is known-refused.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);

        let mut cfg = BackendConfig::http(format!("http://{addr}/"));
        cfg.max_retries = 2;
        cfg.backoff_ms = 1;
        let b = HttpBackend::from_config(&cfg).unwrap();
        match b.send(Stage::Initial, "a", "p", Path::new("i")) {
            Err(OrchestratorError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    fn serve_once(listener: &TcpListener, status_line: &str, body: &str) {
        let (mut sock, _) = listener.accept().unwrap();
        // Drain the request: headers, then content-length bytes of body.
        let mut buf = Vec::new();
        let mut tmp = [0u8; 1024];
        let mut content_length = 0usize;
        let header_end = loop {
            let n = sock.read(&mut tmp).unwrap();
            buf.extend_from_slice(&tmp[..n]);
            if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                let headers = String::from_utf8_lossy(&buf[..pos]).to_lowercase();
                for line in headers.lines() {
                    if let Some(v) = line.strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                }
                break pos + 4;
            }
        };
        while buf.len() < header_end + content_length {
            let n = sock.read(&mut tmp).unwrap();
            buf.extend_from_slice(&tmp[..n]);
        }
        let response = format!(
            "HTTP/1.1 {status_line}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        sock.write_all(response.as_bytes()).unwrap();
    }

    #[test]
    fn http_retries_a_server_error_then_succeeds() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            serve_once(&listener, "500 Internal Server Error", "");
            serve_once(&listener, "200 OK", r#"{"text":"recovered"}"#);
        });

        let mut cfg = BackendConfig::http(format!("http://{addr}/"));
        cfg.max_retries = 2;
        cfg.backoff_ms = 1;
        let b = HttpBackend::from_config(&cfg).unwrap();
        let out = b.send(Stage::Initial, "a", "p", Path::new("i")).unwrap();
        assert_eq!(out, "recovered");
        server.join().unwrap();
    }

    #[test]
    fn http_does_not_retry_client_errors() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            serve_once(&listener, "400 Bad Request", "");
        });

        let mut cfg = BackendConfig::http(format!("http://{addr}/"));
        cfg.max_retries = 5;
        cfg.backoff_ms = 1;
        let b = HttpBackend::from_config(&cfg).unwrap();
        match b.send(Stage::Initial, "a", "p", Path::new("i")) {
            Err(OrchestratorError::Transport { attempts, .. }) => assert_eq!(attempts, 1),
            other => panic!("expected transport error, got {other:?}"),
        }
        server.join().unwrap();
    }
}
