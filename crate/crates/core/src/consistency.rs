//! Consistency ratings between a clip's visual and audio narrations.
//!
//! Ratings come from a chat-completion endpoint prompted with a fixed
//! instruction, or from a deterministic embedding-similarity fallback. Both
//! paths write through an append-only JSON-lines cache so a rerun over an
//! already rated dataset performs no network calls.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::Dataset;
use crate::numerics::{NumericsError, Tape, Tensor};

/// Instruction sent ahead of the two narrations.
pub const CONSISTENCY_PROMPT: &str = "Rate the consistency between two narrations from the same video out of 100. The first narration describes the visual aspect, and the second describes the audio. Consider how well the audio narration overlaps with and complements the visual narration. Output only the percentage score.";

pub const API_KEY_ENV: &str = "MMDG_LLM_API_KEY";

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("invalid rating request for clip {clip_id}: {msg}")]
    Request { clip_id: String, msg: String },
    #[error("no rating in response {0:?}")]
    Parse(String),
    #[error("endpoint {url} failed after {attempts} attempts: {msg}")]
    Transport {
        url: String,
        attempts: u32,
        msg: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Cache {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RatingRequest {
    pub clip_id: String,
    pub visual_narration_text: String,
    pub audio_narration_text: String,
}

impl RatingRequest {
    pub fn new(
        clip_id: impl Into<String>,
        visual: impl Into<String>,
        audio: impl Into<String>,
    ) -> Result<Self, ConsistencyError> {
        let req = Self {
            clip_id: clip_id.into(),
            visual_narration_text: visual.into(),
            audio_narration_text: audio.into(),
        };
        req.check()?;
        Ok(req)
    }

    fn check(&self) -> Result<(), ConsistencyError> {
        let bad = |msg: &str| ConsistencyError::Request {
            clip_id: self.clip_id.clone(),
            msg: msg.into(),
        };
        if self.visual_narration_text.trim().is_empty() {
            return Err(bad("visual narration is empty"));
        }
        if self.audio_narration_text.trim().is_empty() {
            return Err(bad("audio narration is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingSource {
    Llm,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingCacheEntry {
    pub clip_id: String,
    pub rating: f32,
    pub source: RatingSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

/// The prompt followed by the labelled narrations.
pub fn build_prompt(req: &RatingRequest) -> Result<String, ConsistencyError> {
    req.check()?;
    Ok(format!(
        "{CONSISTENCY_PROMPT}\nVisual: {}\nAudio: {}",
        req.visual_narration_text.trim(),
        req.audio_narration_text.trim()
    ))
}

/// Numbers appearing in `raw`, in order. A leading `-` is kept.
fn numbers(raw: &str) -> Vec<f64> {
    let bytes = raw.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = if i > 0 && bytes[i - 1] == b'-' {
                i - 1
            } else {
                i
            };
            let mut end = i;
            while end < bytes.len() && bytes[end].is_ascii_digit() {
                end += 1;
            }
            if end + 1 < bytes.len() && bytes[end] == b'.' && bytes[end + 1].is_ascii_digit() {
                end += 1;
                while end < bytes.len() && bytes[end].is_ascii_digit() {
                    end += 1;
                }
            }
            if let Ok(v) = raw[start..end].parse() {
                out.push(v);
            }
            i = end;
        } else {
            i += 1;
        }
    }
    out
}

/// Extracts a percentage score and maps it to [0, 1].
///
/// The first number within [0, 100] wins; failing that, the first number is
/// clamped.
pub fn parse_rating(raw: &str) -> Result<f32, ConsistencyError> {
    let nums = numbers(raw);
    let pick = nums
        .iter()
        .copied()
        .find(|v| (0.0..=100.0).contains(v))
        .or_else(|| nums.first().copied())
        .ok_or_else(|| ConsistencyError::Parse(raw.to_string()))?;
    Ok(((pick / 100.0).clamp(0.0, 1.0)) as f32)
}

/// `(cos(vis, aud) + 1) / 2`.
pub fn rate_fallback(vis: &[f32], aud: &[f32]) -> Result<f32, ConsistencyError> {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(Tensor::vector(vis.iter().map(|v| *v as f64).collect()));
    let v = tape.constant(Tensor::vector(aud.iter().map(|v| *v as f64).collect()));
    let s = tape.cosine(u, v)?;
    let r = (tape.value(s).item() + 1.0) / 2.0;
    Ok(r.clamp(0.0, 1.0) as f32)
}

/// Append-only rating log with an in-memory index. Later lines override earlier ones.
pub struct RatingCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, RatingCacheEntry>>,
}

impl RatingCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: Mutex::new(HashMap::new()),
        }
    }

    /// Opens (or starts) the cache at `path`.
    pub fn open(path: &Path) -> Result<Self, ConsistencyError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|source| ConsistencyError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|source| ConsistencyError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: RatingCacheEntry =
                    serde_json::from_str(&line).map_err(|e| ConsistencyError::Cache {
                        path: path.to_path_buf(),
                        line: n + 1,
                        msg: e.to_string(),
                    })?;
                if !(0.0..=1.0).contains(&e.rating) {
                    return Err(ConsistencyError::Cache {
                        path: path.to_path_buf(),
                        line: n + 1,
                        msg: format!("rating {} outside [0, 1]", e.rating),
                    });
                }
                entries.insert(e.clip_id.clone(), e);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
        })
    }

    pub fn get(&self, clip_id: &str) -> Option<RatingCacheEntry> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(clip_id)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, entry: RatingCacheEntry) -> Result<(), ConsistencyError> {
        let mut map = self.entries.lock().expect("cache lock");
        if let Some(path) = &self.path {
            let io = |source| ConsistencyError::Io {
                path: path.clone(),
                source,
            };
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io)?;
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(io)?;
        }
        map.insert(entry.clip_id.clone(), entry);
        Ok(())
    }
}

/// Chat-completion endpoint settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    pub max_attempts: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
    pub timeout_s: u64,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: "http://localhost:8000/v1/chat/completions".into(),
            model: "llama".into(),
            max_attempts: 3,
            backoff_ms: 500,
            timeout_s: 60,
            max_in_flight: 4,
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

/// Client for the rating endpoint.
pub struct LlmRater {
    cfg: EndpointConfig,
    api_key: String,
    agent: ureq::Agent,
    attempts: AtomicUsize,
}

impl LlmRater {
    pub fn new(cfg: EndpointConfig, api_key: impl Into<String>) -> Result<Self, ConsistencyError> {
        if cfg.url.is_empty() {
            return Err(ConsistencyError::Config("endpoint url is empty".into()));
        }
        if cfg.max_attempts == 0 {
            return Err(ConsistencyError::Config("max_attempts must be >= 1".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_s.max(1))))
            .build()
            .into();
        Ok(Self {
            cfg,
            api_key: api_key.into(),
            agent,
            attempts: AtomicUsize::new(0),
        })
    }

    /// Reads the credential from `MMDG_LLM_API_KEY`.
    pub fn from_env(cfg: EndpointConfig) -> Result<Self, ConsistencyError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| {
            ConsistencyError::Config(format!(
                "{API_KEY_ENV} is not set; export it or rate with the fallback"
            ))
        })?;
        Self::new(cfg, key)
    }

    /// HTTP attempts made so far, including retries.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::Relaxed)
    }

    fn post_once(&self, body: &str) -> Result<String, String> {
        self.attempts.fetch_add(1, Ordering::Relaxed);
        let mut resp = self
            .agent
            .post(&self.cfg.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }

    /// Sends the prompt, retrying transport and HTTP failures with exponential backoff.
    pub fn complete(&self, prompt: &str) -> Result<String, ConsistencyError> {
        let body = serde_json::to_string(&ChatRequest {
            model: &self.cfg.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
        })
        .expect("request serializes");
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut last = String::new();
        for attempt in 1..=self.cfg.max_attempts {
            match self.post_once(&body) {
                Ok(text) => {
                    let parsed: ChatResponse = serde_json::from_str(&text)
                        .map_err(|e| ConsistencyError::Parse(format!("{e}: {text}")))?;
                    return parsed
                        .choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content)
                        .ok_or(ConsistencyError::Parse(text));
                }
                Err(e) => {
                    log::warn!("rating request attempt {attempt} failed: {e}");
                    last = e;
                    if attempt < self.cfg.max_attempts {
                        thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(ConsistencyError::Transport {
            url: self.cfg.url.clone(),
            attempts: self.cfg.max_attempts,
            msg: last,
        })
    }

    /// Rates one clip, consulting the cache first.
    pub fn rate(
        &self,
        req: &RatingRequest,
        cache: &RatingCache,
    ) -> Result<RatingCacheEntry, ConsistencyError> {
        if let Some(hit) = cache.get(&req.clip_id) {
            return Ok(hit);
        }
        let prompt = build_prompt(req)?;
        let raw = self.complete(&prompt)?;
        let entry = RatingCacheEntry {
            clip_id: req.clip_id.clone(),
            rating: parse_rating(&raw)?,
            source: RatingSource::Llm,
            raw_response: Some(raw),
        };
        cache.insert(entry.clone())?;
        Ok(entry)
    }
}

/// Which rater fills the dataset.
pub enum Rater<'a> {
    Llm(&'a LlmRater),
    Fallback,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RateSummary {
    pub rated: usize,
    pub from_cache: usize,
    pub skipped_no_audio: usize,
}

/// Fills `consistency` for every audio-complete clip of `dataset`.
///
/// Up to `max_in_flight` LLM requests run concurrently; results are applied
/// in record order.
pub fn rate_dataset(
    dataset: &mut Dataset,
    rater: Rater<'_>,
    cache: &RatingCache,
    max_in_flight: usize,
) -> Result<RateSummary, ConsistencyError> {
    let mut summary = RateSummary::default();
    let targets: Vec<usize> = (0..dataset.records.len())
        .filter(|&i| dataset.records[i].has_audio())
        .collect();
    summary.skipped_no_audio = dataset.records.len() - targets.len();

    let mut ratings: Vec<Option<f32>> = vec![None; targets.len()];
    let mut todo = Vec::new();
    for (k, &i) in targets.iter().enumerate() {
        match cache.get(&dataset.records[i].clip_id) {
            Some(hit) => {
                ratings[k] = Some(hit.rating);
                summary.from_cache += 1;
            }
            None => todo.push(k),
        }
    }

    match rater {
        Rater::Fallback => {
            for &k in &todo {
                let r = &dataset.records[targets[k]];
                let rating = rate_fallback(
                    &r.vis_narration,
                    r.aud_narration.as_deref().expect("audio-complete"),
                )?;
                cache.insert(RatingCacheEntry {
                    clip_id: r.clip_id.clone(),
                    rating,
                    source: RatingSource::Fallback,
                    raw_response: None,
                })?;
                ratings[k] = Some(rating);
            }
        }
        Rater::Llm(client) => {
            let requests = todo
                .iter()
                .map(|&k| {
                    let r = &dataset.records[targets[k]];
                    let missing = |what: &str| ConsistencyError::Request {
                        clip_id: r.clip_id.clone(),
                        msg: format!("no {what} narration text"),
                    };
                    RatingRequest::new(
                        r.clip_id.clone(),
                        r.vis_narration_text
                            .clone()
                            .ok_or_else(|| missing("visual"))?,
                        r.aud_narration_text
                            .clone()
                            .ok_or_else(|| missing("audio"))?,
                    )
                    .map(|req| (k, req))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let queue = Mutex::new(requests.into_iter());
            let results = Mutex::new(Vec::new());
            let workers = max_in_flight.max(1);
            thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(|| loop {
                        let next = queue.lock().expect("queue lock").next();
                        let Some((k, req)) = next else { break };
                        let out = client.rate(&req, cache).map(|e| (k, e.rating));
                        let failed = out.is_err();
                        results.lock().expect("results lock").push(out);
                        if failed {
                            break;
                        }
                    });
                }
            });
            for r in results.into_inner().expect("results lock") {
                let (k, rating) = r?;
                ratings[k] = Some(rating);
            }
        }
    }

    for (k, &i) in targets.iter().enumerate() {
        if let Some(r) = ratings[k] {
            dataset.records[i].consistency = Some(r);
            summary.rated += 1;
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(v: &str, a: &str) -> RatingRequest {
        RatingRequest {
            clip_id: "c".into(),
            visual_narration_text: v.into(),
            audio_narration_text: a.into(),
        }
    }

    #[test]
    fn prompt_contains_instruction_and_narrations() {
        let p = build_prompt(&req("C cuts a cable", "snipping sound")).unwrap();
        assert!(p.contains("Output only the percentage score."));
        assert!(p.starts_with(CONSISTENCY_PROMPT));
        assert!(p.ends_with("Visual: C cuts a cable\nAudio: snipping sound"));
    }

    #[test]
    fn prompts_differ_only_in_narration_lines() {
        let a = build_prompt(&req("one", "two")).unwrap();
        let b = build_prompt(&req("three", "four")).unwrap();
        let (ha, ta) = a.split_at(CONSISTENCY_PROMPT.len());
        let (hb, tb) = b.split_at(CONSISTENCY_PROMPT.len());
        assert_eq!(ha, hb);
        assert_ne!(ta, tb);
        assert_eq!(ta.lines().count(), 3);
    }

    #[test]
    fn empty_visual_text_is_rejected() {
        assert!(build_prompt(&req("  ", "audio")).is_err());
        assert!(RatingRequest::new("c", "", "audio").is_err());
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_rating("85").unwrap(), 0.85);
        assert_eq!(parse_rating("Score: 100%").unwrap(), 1.0);
        assert!(matches!(
            parse_rating("no idea"),
            Err(ConsistencyError::Parse(_))
        ));
        assert_eq!(parse_rating("  72.5 %\n").unwrap(), 0.725);
        assert_eq!(parse_rating("I'd say 250").unwrap(), 1.0);
    }

    #[test]
    fn fallback_examples() {
        assert!((rate_fallback(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-6);
        assert!(rate_fallback(&[1.0, 2.0], &[-1.0, -2.0]).unwrap().abs() < 1e-6);
        assert_eq!(rate_fallback(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.5);
        assert!(rate_fallback(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn file_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.jsonl");
        let cache = RatingCache::open(&path).unwrap();
        let e = RatingCacheEntry {
            clip_id: "a".into(),
            rating: 0.37,
            source: RatingSource::Llm,
            raw_response: Some("37".into()),
        };
        cache.insert(e.clone()).unwrap();
        let reopened = RatingCache::open(&path).unwrap();
        assert_eq!(reopened.get("a"), Some(e));
        assert_eq!(reopened.len(), 1);
    }
}
