//! Embedding clients.
//!
//! [`MockClient`] hashes the tokens of a text into a fixed-size vector, so
//! identical texts map to identical vectors and texts that share many tokens
//! land close together. [`HttpClient`] talks to an OpenAI-compatible server:
//! optionally a chat endpoint first turns each prompt into a
//! `{"summarization", "reasoning"}` answer, and that answer (or the prompt
//! itself when no generator is configured) is sent to the embeddings
//! endpoint.

use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::numerics::rng::{fnv1a, splitmix64};
use crate::numerics::Tensor;

pub trait EmbeddingClient: Sync {
    /// One vector per text, in order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug)]
pub struct MockClient {
    pub dim: usize,
    pub seed: u64,
}

impl MockClient {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockClient { dim, seed }
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let tokens = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty());
        for tok in tokens {
            let mut state = splitmix64(self.seed ^ fnv1a(tok.as_bytes()));
            for x in v.iter_mut() {
                state = splitmix64(state);
                // Uniform in [-1, 1).
                *x += (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingClient for MockClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    pub embedding_model: String,
    /// Chat model used to turn prompts into descriptions; embed prompts
    /// directly when absent.
    #[serde(default)]
    pub generation_model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

fn default_timeout() -> u64 {
    60
}
fn default_batch() -> usize {
    32
}
fn default_concurrency() -> usize {
    4
}

pub struct HttpClient {
    config: HttpConfig,
    token: Option<String>,
    agent: ureq::Agent,
    /// Base delay between retries.
    pub backoff: Duration,
}

const ATTEMPTS: u32 = 3;

impl HttpClient {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let token = match &config.token_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .new_agent();
        Ok(HttpClient {
            config,
            token,
            agent,
            backoff: Duration::from_millis(500),
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/{path}", self.config.endpoint.trim_end_matches('/'));
        let payload = body.to_string();
        let mut last = String::new();
        for attempt in 0..ATTEMPTS {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            let mut req = self
                .agent
                .post(&url)
                .header("Content-Type", "application/json");
            if let Some(t) = &self.token {
                req = req.header("Authorization", &format!("Bearer {t}"));
            }
            match req.send(payload.as_str()) {
                Ok(mut resp) => {
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
                    return serde_json::from_str(&text)
                        .map_err(|e| Error::Transport(format!("{url}: invalid JSON: {e}")));
                }
                Err(e) => {
                    log::warn!("{url}: attempt {} failed: {e}", attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(Error::Transport(format!(
            "{url}: {ATTEMPTS} attempts failed, last error: {last}"
        )))
    }

    fn generate(&self, model: &str, prompt: &str) -> Result<String> {
        let resp = self.post(
            "chat/completions",
            &json!({"model": model, "messages": [{"role": "user", "content": prompt}]}),
        )?;
        let content = resp["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| Error::Transport("chat response has no message content".into()))?;
        Ok(description_text(content))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<String> = match &self.config.generation_model {
            Some(model) => texts
                .iter()
                .map(|t| self.generate(model, t))
                .collect::<Result<_>>()?,
            None => texts.to_vec(),
        };
        let resp = self.post(
            "embeddings",
            &json!({"model": self.config.embedding_model, "input": inputs}),
        )?;
        parse_embeddings(&resp, texts.len())
    }
}

/// Text to embed from a generator answer: summarization and reasoning when
/// the answer is the requested JSON object, the raw answer otherwise.
pub fn description_text(content: &str) -> String {
    let trimmed = content
        .trim()
        .trim_start_matches("```json")
        .trim_start_matches("```")
        .trim_end_matches("```")
        .trim();
    match serde_json::from_str::<Value>(trimmed) {
        Ok(v) if v["summarization"].is_string() => format!(
            "{}\n{}",
            v["summarization"].as_str().unwrap_or_default(),
            v["reasoning"].as_str().unwrap_or_default()
        ),
        _ => content.to_string(),
    }
}

/// Extract `data[*].embedding` in `index` order.
pub fn parse_embeddings(resp: &Value, expected: usize) -> Result<Vec<Vec<f64>>> {
    let data = resp["data"]
        .as_array()
        .ok_or_else(|| Error::Transport("embedding response has no data array".into()))?;
    if data.len() != expected {
        return Err(Error::Transport(format!(
            "embedding response has {} items for {expected} inputs",
            data.len()
        )));
    }
    let mut out = vec![Vec::new(); expected];
    for (pos, item) in data.iter().enumerate() {
        let idx = item["index"].as_u64().map_or(pos, |i| i as usize);
        let vec = item["embedding"]
            .as_array()
            .ok_or_else(|| Error::Transport(format!("item {pos} has no embedding")))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| Error::Transport(format!("item {pos}: non-numeric value")))
            })
            .collect::<Result<Vec<f64>>>()?;
        *out.get_mut(idx)
            .ok_or_else(|| Error::Transport(format!("item index {idx} out of range")))? = vec;
    }
    Ok(out)
}

impl EmbeddingClient for HttpClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<&[String]> = texts.chunks(self.config.batch_size.max(1)).collect();
        let results: Mutex<Vec<Option<Result<Vec<Vec<f64>>>>>> =
            Mutex::new((0..chunks.len()).map(|_| None).collect());
        let next = Mutex::new(0usize);
        let workers = self.config.max_concurrency.clamp(1, chunks.len().max(1));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = {
                        let mut n = next.lock().expect("queue lock");
                        let i = *n;
                        *n += 1;
                        i
                    };
                    if i >= chunks.len() {
                        break;
                    }
                    let r = self.embed_batch(chunks[i]);
                    results.lock().expect("result lock")[i] = Some(r);
                });
            }
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in results.into_inner().expect("result lock") {
            out.extend(r.expect("every chunk processed")?);
        }
        Ok(out)
    }
}

/// Embed every text and stack the vectors. All vectors must share one
/// dimension.
pub fn fetch_embeddings(texts: &[String], client: &dyn EmbeddingClient) -> Result<Tensor> {
    let vecs = client.embed(texts)?;
    if vecs.len() != texts.len() {
        return Err(Error::Transport(format!(
            "client returned {} vectors for {} texts",
            vecs.len(),
            texts.len()
        )));
    }
    let dim = vecs.first().map_or(0, Vec::len);
    if let Some((i, v)) = vecs.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(Error::Data(format!(
            "embedding dimension drift: vector {i} has {} entries, expected {dim}",
            v.len()
        )));
    }
    if dim == 0 && !texts.is_empty() {
        return Err(Error::Data("client returned empty embeddings".into()));
    }
    Ok(Tensor::matrix(texts.len(), dim, vecs.concat()))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Ragged;
    impl EmbeddingClient for Ragged {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            Ok(texts
                .iter()
                .enumerate()
                .map(|(i, _)| vec![0.5; 3 + i % 2])
                .collect())
        }
    }

    #[test]
    fn mock_is_deterministic() {
        let c = MockClient::new(16, 1);
        let t = vec!["right_num 3 Fractions".to_string(); 2];
        let e = fetch_embeddings(&t, &c).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.cols(), 16);
    }

    #[test]
    fn mock_separates_distinct_texts() {
        let c = MockClient::new(32, 9);
        let texts: Vec<String> = (0..500).map(|i| format!("prompt number {i}")).collect();
        let e = fetch_embeddings(&texts, &c).unwrap();
        for i in 0..500 {
            for j in i + 1..500 {
                assert_ne!(e.row(i), e.row(j), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn mixed_dimensions_are_an_error() {
        let t = vec!["a".to_string(), "b".to_string()];
        let err = fetch_embeddings(&t, &Ragged).unwrap_err();
        assert!(err.to_string().contains("drift"), "{err}");
    }

    #[test]
    fn generator_answers_are_unwrapped() {
        let s = description_text("```json\n{\"summarization\": \"S\", \"reasoning\": \"R\"}\n```");
        assert_eq!(s, "S\nR");
        assert_eq!(description_text("plain"), "plain");
    }

    #[test]
    fn embeddings_follow_index_field() {
        let v = json!({"data": [
            {"index": 1, "embedding": [3.0, 4.0]},
            {"index": 0, "embedding": [1.0, 2.0]}
        ]});
        assert_eq!(
            parse_embeddings(&v, 2).unwrap(),
            vec![vec![1.0, 2.0], vec![3.0, 4.0]]
        );
        assert!(parse_embeddings(&v, 3).is_err());
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        let mut c = HttpClient::new(HttpConfig {
            endpoint: "http://127.0.0.1:9".into(),
            token_env: None,
            embedding_model: "m".into(),
            generation_model: None,
            timeout_secs: 2,
            batch_size: 8,
            max_concurrency: 2,
        })
        .unwrap();
        c.backoff = Duration::from_millis(1);
        let err = c.embed(&["x".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Transport(_)), "{err}");
    }
}
