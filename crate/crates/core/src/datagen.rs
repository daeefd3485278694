//! Two-step synthesis of seven-pair training records.
//!
//! Step one turns each image into a dense caption with a multimodal chat
//! provider. Step two asks a text-only provider for seven tagged
//! query/positive pairs in a single call. Captions are cached on disk so the
//! expensive step runs once per image, and finished records are appended to
//! a JSONL corpus so an interrupted run resumes where it stopped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::template::Tokenizer;
use crate::types::{MultiTurnSample, TaskTag, TurnPair};

/// Minimum size of the larger image side accepted by the resolution filter.
pub const MIN_RESOLUTION: u32 = 512;

/// Required pairs per record, in canonical order.
pub const PAIR_LAYOUT: [(TaskTag, usize); 5] = [
    (TaskTag::Cls, 1),
    (TaskTag::Ret, 1),
    (TaskTag::GlobalVqa, 2),
    (TaskTag::LocalVqa, 2),
    (TaskTag::CreativeVqa, 1),
];

pub const PAIRS_PER_RECORD: usize = 7;

const DEFAULT_CAPTION_PROMPT: &str = include_str!("../prompts/caption.txt");
const DEFAULT_PAIRGEN_PROMPT: &str = include_str!("../prompts/pairgen.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_caption: Option<String>,
}

impl ImageRecord {
    pub fn passes_resolution_filter(&self) -> bool {
        self.width.max(self.height) >= MIN_RESOLUTION
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPair {
    pub task: TaskTag,
    pub query: String,
    pub positive: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRecord {
    pub image_id: String,
    pub dense_caption: String,
    pub pairs: Vec<SynthPair>,
}

impl SynthRecord {
    /// Checks the seven-pair layout, the retrieval positive and query
    /// distinctness.
    pub fn validate(&self) -> Result<()> {
        if self.dense_caption.trim().is_empty() {
            return Err(Error::ParseFailure("empty dense caption".into()));
        }
        check_layout(&self.pairs)?;
        for pair in &self.pairs {
            if pair.query.trim().is_empty() || pair.positive.trim().is_empty() {
                return Err(Error::ParseFailure(format!("empty {} pair text", pair.task)));
            }
            if pair.task == TaskTag::Ret && pair.positive != self.dense_caption {
                return Err(Error::ParseFailure("retrieval positive differs from the dense caption".into()));
            }
        }
        let mut seen = HashSet::new();
        for pair in &self.pairs {
            if !seen.insert(pair.query.as_str()) {
                return Err(Error::DuplicateQuery(pair.query.clone()));
            }
        }
        Ok(())
    }
}

impl SynthRecord {
    /// Training sample with one turn per synthesized pair, in record order.
    pub fn to_sample(&self, image_tokens: usize) -> MultiTurnSample {
        MultiTurnSample {
            image_id: self.image_id.clone(),
            image_tokens,
            pairs: self
                .pairs
                .iter()
                .map(|p| TurnPair::new(p.query.clone(), p.positive.clone(), p.task))
                .collect(),
        }
    }
}

fn check_layout(pairs: &[SynthPair]) -> Result<()> {
    if pairs.len() != PAIRS_PER_RECORD {
        return Err(Error::CardinalityViolation(format!("got {} pairs", pairs.len())));
    }
    for (tag, expected) in PAIR_LAYOUT {
        let got = pairs.iter().filter(|p| p.task == tag).count();
        if got != expected {
            return Err(Error::CardinalityViolation(format!("{got} {tag} pairs, expected {expected}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderError {
    /// 5xx, timeouts, connection failures.
    Retryable(String),
    Fatal(String),
}

/// A chat-completion service: role-tagged messages in, text out.
pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model_name: String,
    pub caption_prompt: String,
    pub pairgen_prompt: String,
    pub max_retries: u32,
    pub timeout_ms: u64,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/complete".into(),
            model_name: "mock".into(),
            caption_prompt: DEFAULT_CAPTION_PROMPT.into(),
            pairgen_prompt: DEFAULT_PAIRGEN_PROMPT.into(),
            max_retries: 3,
            timeout_ms: 60_000,
            backoff_ms: 500,
        }
    }
}

impl ProviderConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Loads a TOML provider file. Prompts may be given inline
    /// (`caption_prompt`) or as paths relative to the file
    /// (`caption_prompt_file`); missing prompts fall back to the bundled
    /// defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            endpoint: Option<String>,
            model_name: Option<String>,
            caption_prompt: Option<String>,
            caption_prompt_file: Option<PathBuf>,
            pairgen_prompt: Option<String>,
            pairgen_prompt_file: Option<PathBuf>,
            max_retries: Option<u32>,
            timeout_ms: Option<u64>,
            backoff_ms: Option<u64>,
        }
        let path = path.as_ref();
        let raw: Raw = toml::from_str(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let prompt = |inline: Option<String>, file: Option<PathBuf>, default: &str| -> Result<String> {
            Ok(match (inline, file) {
                (Some(text), _) => text,
                (None, Some(f)) => std::fs::read_to_string(dir.join(f))?,
                (None, None) => default.to_string(),
            })
        };
        let d = Self::default();
        Ok(Self {
            endpoint: raw.endpoint.unwrap_or(d.endpoint),
            model_name: raw.model_name.unwrap_or(d.model_name),
            caption_prompt: prompt(raw.caption_prompt, raw.caption_prompt_file, DEFAULT_CAPTION_PROMPT)?,
            pairgen_prompt: prompt(raw.pairgen_prompt, raw.pairgen_prompt_file, DEFAULT_PAIRGEN_PROMPT)?,
            max_retries: raw.max_retries.unwrap_or(d.max_retries),
            timeout_ms: raw.timeout_ms.unwrap_or(d.timeout_ms),
            backoff_ms: raw.backoff_ms.unwrap_or(d.backoff_ms),
        })
    }
}

/// JSON-over-HTTP provider: POSTs a [`ChatRequest`] and reads a
/// [`ChatResponse`].
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
}

impl HttpProvider {
    pub fn new(cfg: &ProviderConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout())
            .build()
            .map_err(|e| Error::ProviderUnavailable(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: cfg.endpoint.clone(),
        })
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, ProviderError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(request)
            .send()
            .map_err(|e| ProviderError::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(ProviderError::Retryable(format!("server error {status}")));
        }
        if !status.is_success() {
            return Err(ProviderError::Fatal(format!("request rejected with {status}")));
        }
        let body: ChatResponse = resp
            .json()
            .map_err(|e| ProviderError::Fatal(format!("malformed response body: {e}")))?;
        Ok(body.content)
    }
}

/// Deterministic stand-in provider. Its output is a pure function of the
/// system prompt and the user message (which carries the image id or the
/// caption).
#[derive(Debug, Clone, Copy, Default)]
pub struct MockProvider;

const MOCK_NOUNS: [&str; 12] = [
    "bicycle", "lighthouse", "teapot", "sailboat", "violin", "cactus", "tram", "kite", "lantern", "tortoise", "windmill",
    "typewriter",
];
const MOCK_COLORS: [&str; 8] = ["red", "teal", "amber", "violet", "white", "olive", "navy", "coral"];
const MOCK_PLACES: [&str; 6] = ["harbor", "kitchen", "meadow", "station", "library", "rooftop"];

impl MockProvider {
    fn caption(&self, system: &str, user: &str) -> String {
        let h = seed::hash_str(&format!("{system}\u{0}{user}"));
        let pick = |list: &[&'static str], shift: u32| list[((h >> shift) % list.len() as u64) as usize];
        let id = user
            .lines()
            .find_map(|l| l.strip_prefix("image_id:"))
            .unwrap_or("")
            .trim();
        format!(
            "A {} {} stands beside a {} {} in a {} at midday, with a small sign reading \"{}\" on the left",
            pick(&MOCK_COLORS, 0),
            pick(&MOCK_NOUNS, 8),
            pick(&MOCK_COLORS, 16),
            pick(&MOCK_NOUNS, 24),
            pick(&MOCK_PLACES, 32),
            id
        )
    }

    fn pairs(&self, caption: &str) -> String {
        let h = seed::hash_str(caption);
        let words: Vec<&str> = caption.split_whitespace().collect();
        let w = |i: u64| words[((h >> (i * 5)) % words.len() as u64) as usize];
        let blocks = [
            ("CLS", "What is the main subject of this image?".to_string(), format!("{} scene", w(1))),
            ("RET", format!("Find an image showing a {} near a {}", w(2), w(3)), String::new()),
            ("GLOBAL_VQA", "What is the overall setting of the scene?".into(), format!("a scene with {}", w(4))),
            ("GLOBAL_VQA", "What time of day does the scene suggest?".into(), "midday".into()),
            ("LOCAL_VQA", "What does the small sign read?".into(), format!("it mentions {}", w(5))),
            ("LOCAL_VQA", format!("What color is the {}?", w(6)), w(7).to_string()),
            ("CREATIVE_VQA", "Why might someone visit this place?".into(), format!("to see the {}", w(8))),
        ];
        let mut out = String::new();
        for (tag, q, p) in blocks {
            out.push_str(&format!("### {tag}\nQuery: {q}\nPositive: {p}\n\n"));
        }
        out
    }
}

impl ChatProvider for MockProvider {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, ProviderError> {
        let system = request
            .messages
            .iter()
            .find(|m| m.role == "system")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let user = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .ok_or_else(|| ProviderError::Fatal("no user message".into()))?;
        if let Some(caption) = user.strip_prefix("caption:") {
            Ok(self.pairs(caption.trim()))
        } else {
            Ok(self.caption(system, user))
        }
    }
}

fn call_with_retry(provider: &dyn ChatProvider, request: &ChatRequest, cfg: &ProviderConfig) -> Result<String> {
    let mut last_empty = false;
    let mut last_error = String::new();
    for attempt in 0..=cfg.max_retries {
        if attempt > 0 && cfg.backoff_ms > 0 {
            let delay = cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
            std::thread::sleep(Duration::from_millis(delay));
        }
        match provider.complete(request) {
            Ok(text) if !text.trim().is_empty() => return Ok(text),
            Ok(_) => {
                debug!("empty provider response (attempt {attempt})");
                last_empty = true;
            }
            Err(ProviderError::Retryable(e)) => {
                debug!("provider error (attempt {attempt}): {e}");
                last_empty = false;
                last_error = e;
            }
            Err(ProviderError::Fatal(e)) => return Err(Error::ProviderUnavailable(e)),
        }
    }
    if last_empty {
        Err(Error::EmptyResponse)
    } else {
        Err(Error::ProviderUnavailable(last_error))
    }
}

fn request(cfg: &ProviderConfig, system: &str, user: String) -> ChatRequest {
    ChatRequest {
        model: cfg.model_name.clone(),
        messages: vec![
            ChatMessage {
                role: "system".into(),
                content: system.into(),
            },
            ChatMessage {
                role: "user".into(),
                content: user,
            },
        ],
    }
}

/// Dense caption for one image. Records that already carry a caption are
/// returned as-is; records failing the resolution filter are rejected
/// before any provider call.
pub fn caption(record: &ImageRecord, provider: &dyn ChatProvider, cfg: &ProviderConfig) -> Result<String> {
    if !record.passes_resolution_filter() {
        return Err(Error::BelowResolution {
            image_id: record.image_id.clone(),
            width: record.width,
            height: record.height,
            min: MIN_RESOLUTION,
        });
    }
    if let Some(c) = record.dense_caption.as_ref().filter(|c| !c.trim().is_empty()) {
        return Ok(c.clone());
    }
    let user = format!(
        "image_id: {}\nwidth: {}\nheight: {}",
        record.image_id, record.width, record.height
    );
    let text = call_with_retry(provider, &request(cfg, &cfg.caption_prompt, user), cfg)?;
    Ok(text.trim().to_string())
}

/// Seven tagged pairs for one caption, from a single provider call.
pub fn synth_pairs(
    image_id: &str,
    caption: &str,
    provider: &dyn ChatProvider,
    cfg: &ProviderConfig,
) -> Result<SynthRecord> {
    if caption.trim().is_empty() {
        return Err(Error::ParseFailure("cannot synthesize pairs from an empty caption".into()));
    }
    let text = call_with_retry(provider, &request(cfg, &cfg.pairgen_prompt, format!("caption: {caption}")), cfg)?;
    let mut pairs = parse_pair_blocks(&text)?;
    for pair in &mut pairs {
        if pair.task == TaskTag::Ret {
            pair.positive = caption.to_string();
        }
    }
    let record = SynthRecord {
        image_id: image_id.to_string(),
        dense_caption: caption.to_string(),
        pairs,
    };
    record.validate()?;
    Ok(record)
}

fn parse_tag(s: &str) -> Option<TaskTag> {
    match s.trim().to_ascii_uppercase().replace([' ', '-'], "_").as_str() {
        "CLS" | "CLASSIFICATION" => Some(TaskTag::Cls),
        "RET" | "RETRIEVAL" => Some(TaskTag::Ret),
        "GLOBAL_VQA" => Some(TaskTag::GlobalVqa),
        "LOCAL_VQA" => Some(TaskTag::LocalVqa),
        "CREATIVE_VQA" => Some(TaskTag::CreativeVqa),
        _ => None,
    }
}

/// Parses `### TAG` blocks with `Query:` and `Positive:` lines.
///
/// Blank lines and any preamble before the first block are ignored. Inside
/// blocks, unknown lines, unknown tags, and missing fields are errors. The
/// retrieval block may omit its positive.
pub fn parse_pair_blocks(text: &str) -> Result<Vec<SynthPair>> {
    struct Block {
        tag: TaskTag,
        query: Option<String>,
        positive: Option<String>,
    }
    let mut blocks: Vec<Block> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let header = line
            .strip_prefix("###")
            .or_else(|| line.strip_prefix('[').and_then(|l| l.strip_suffix(']')));
        if let Some(tag) = header {
            let tag = parse_tag(tag).ok_or_else(|| Error::ParseFailure(format!("line {}: unknown tag `{tag}`", n + 1)))?;
            blocks.push(Block {
                tag,
                query: None,
                positive: None,
            });
            continue;
        }
        let Some(block) = blocks.last_mut() else {
            continue;
        };
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::ParseFailure(format!("line {}: expected `Key: value`", n + 1)))?;
        let slot = match key.trim().to_ascii_lowercase().as_str() {
            "query" => &mut block.query,
            "positive" | "answer" | "target" => &mut block.positive,
            other => return Err(Error::ParseFailure(format!("line {}: unknown field `{other}`", n + 1))),
        };
        if slot.is_some() {
            return Err(Error::ParseFailure(format!("line {}: repeated field `{}`", n + 1, key.trim())));
        }
        *slot = Some(value.trim().to_string());
    }
    if blocks.is_empty() {
        return Err(Error::ParseFailure("no pair blocks found".into()));
    }
    let pairs = blocks
        .into_iter()
        .map(|b| {
            let query = b
                .query
                .filter(|q| !q.is_empty())
                .ok_or_else(|| Error::ParseFailure(format!("{} block without a query", b.tag)))?;
            let positive = match (b.tag, b.positive) {
                (_, Some(p)) if !p.is_empty() => p,
                (TaskTag::Ret, _) => String::new(),
                (tag, _) => return Err(Error::ParseFailure(format!("{tag} block without a positive"))),
            };
            Ok(SynthPair {
                task: b.tag,
                query,
                positive,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_layout(&pairs)?;
    Ok(pairs)
}

pub fn read_image_records(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    read_jsonl(path)
}

pub fn read_synth_records(path: impl AsRef<Path>) -> Result<Vec<SynthRecord>> {
    read_jsonl(path)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::SchemaViolation {
            line: n + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedCaption {
    image_id: String,
    caption: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PipelineStats {
    pub written: usize,
    pub skipped_existing: usize,
    pub filtered: usize,
    pub failed: usize,
    pub caption_calls: usize,
    pub pair_calls: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub out: PathBuf,
    /// Caption cache; defaults to `<out>.captions.jsonl`.
    pub caption_cache: Option<PathBuf>,
    /// Maximum provider calls in flight.
    pub concurrency: usize,
}

impl PipelineOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            caption_cache: None,
            concurrency: 1,
        }
    }

    fn cache_path(&self) -> PathBuf {
        self.caption_cache.clone().unwrap_or_else(|| {
            let mut p = self.out.clone().into_os_string();
            p.push(".captions.jsonl");
            PathBuf::from(p)
        })
    }
}

enum Event {
    Caption(CachedCaption),
    Done { index: usize, record: Option<SynthRecord> },
}

/// Captions and synthesizes every record not already present in the output
/// file, appending results in input order.
///
/// Workers call the provider concurrently; a single writer (the calling
/// thread) owns both files. Failed records are logged and skipped, so a
/// later run retries them.
pub fn run_pipeline(
    records: &[ImageRecord],
    provider: &dyn ChatProvider,
    cfg: &ProviderConfig,
    opts: &PipelineOptions,
) -> Result<PipelineStats> {
    let mut stats = PipelineStats::default();
    let done: HashSet<String> = if opts.out.exists() {
        read_synth_records(&opts.out)?.into_iter().map(|r| r.image_id).collect()
    } else {
        HashSet::new()
    };
    let cache_path = opts.cache_path();
    let cached: HashMap<String, String> = if cache_path.exists() {
        read_jsonl::<CachedCaption>(&cache_path)?
            .into_iter()
            .map(|c| (c.image_id, c.caption))
            .collect()
    } else {
        HashMap::new()
    };

    let mut todo = Vec::new();
    for r in records {
        if done.contains(&r.image_id) {
            stats.skipped_existing += 1;
        } else if !r.passes_resolution_filter() {
            debug!("{} rejected by the resolution filter", r.image_id);
            stats.filtered += 1;
        } else {
            todo.push(r);
        }
    }

    let mut out = BufWriter::new(OpenOptions::new().create(true).append(true).open(&opts.out)?);
    let mut cache = BufWriter::new(OpenOptions::new().create(true).append(true).open(&cache_path)?);
    let caption_calls = AtomicUsize::new(0);
    let pair_calls = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Event>();

    let written = std::thread::scope(|scope| -> Result<(usize, usize)> {
        for _ in 0..opts.concurrency.max(1).min(todo.len().max(1)) {
            let tx = tx.clone();
            let (todo, cached, next) = (&todo, &cached, &next);
            let (caption_calls, pair_calls) = (&caption_calls, &pair_calls);
            scope.spawn(move || loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                let Some(record) = todo.get(index) else { break };
                let result = (|| {
                    let text = match cached.get(&record.image_id) {
                        Some(c) => c.clone(),
                        None => {
                            if record.dense_caption.is_none() {
                                caption_calls.fetch_add(1, Ordering::SeqCst);
                            }
                            let c = caption(record, provider, cfg)?;
                            let _ = tx.send(Event::Caption(CachedCaption {
                                image_id: record.image_id.clone(),
                                caption: c.clone(),
                            }));
                            c
                        }
                    };
                    pair_calls.fetch_add(1, Ordering::SeqCst);
                    synth_pairs(&record.image_id, &text, provider, cfg)
                })();
                let record = match result {
                    Ok(r) => Some(r),
                    Err(e) => {
                        warn!("skipping {}: {e}", record.image_id);
                        None
                    }
                };
                if tx.send(Event::Done { index, record }).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // reorder buffer so output order follows input order
        let mut pending: BTreeMap<usize, Option<SynthRecord>> = BTreeMap::new();
        let mut next_out = 0;
        let (mut written, mut failed) = (0, 0);
        for event in rx {
            match event {
                Event::Caption(c) => {
                    serde_json::to_writer(&mut cache, &c)?;
                    cache.write_all(b"\n")?;
                    cache.flush()?;
                }
                Event::Done { index, record } => {
                    pending.insert(index, record);
                    while let Some(r) = pending.remove(&next_out) {
                        match r {
                            Some(r) => {
                                serde_json::to_writer(&mut out, &r)?;
                                out.write_all(b"\n")?;
                                out.flush()?;
                                written += 1;
                            }
                            None => failed += 1,
                        }
                        next_out += 1;
                    }
                }
            }
        }
        Ok((written, failed))
    })?;
    stats.written = written.0;
    stats.failed = written.1;
    stats.caption_calls = caption_calls.into_inner();
    stats.pair_calls = pair_calls.into_inner();
    Ok(stats)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TokenStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

impl TokenStats {
    fn from_counts(counts: &[usize]) -> Self {
        if counts.is_empty() {
            return Self::default();
        }
        Self {
            min: *counts.iter().min().unwrap(),
            max: *counts.iter().max().unwrap(),
            mean: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub records: usize,
    pub pairs: usize,
    pub tag_counts: BTreeMap<TaskTag, usize>,
    pub query_tokens: TokenStats,
    pub positive_tokens: TokenStats,
    /// pairs per image -> number of images
    pub pairs_per_image: BTreeMap<usize, usize>,
}

/// Validates a synthesized corpus line by line and reports statistics.
/// The first violating line aborts with its line number.
pub fn validate_corpus(path: impl AsRef<Path>, tokenizer: &dyn Tokenizer) -> Result<CorpusStats> {
    let reader = BufReader::new(File::open(path)?);
    let mut tag_counts: BTreeMap<TaskTag, usize> = PAIR_LAYOUT.iter().map(|(t, _)| (*t, 0)).collect();
    let mut pairs_per_image = BTreeMap::new();
    let (mut query_tokens, mut positive_tokens) = (Vec::new(), Vec::new());
    let mut records = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let violation = |reason: String| Error::SchemaViolation { line: n + 1, reason };
        let record: SynthRecord = serde_json::from_str(&line).map_err(|e| violation(e.to_string()))?;
        record.validate().map_err(|e| violation(e.to_string()))?;
        records += 1;
        *pairs_per_image.entry(record.pairs.len()).or_insert(0) += 1;
        for pair in &record.pairs {
            *tag_counts.entry(pair.task).or_insert(0) += 1;
            query_tokens.push(tokenizer.encode(&pair.query).map_err(|e| violation(e.to_string()))?.len());
            positive_tokens.push(tokenizer.encode(&pair.positive).map_err(|e| violation(e.to_string()))?.len());
        }
    }
    Ok(CorpusStats {
        records,
        pairs: query_tokens.len(),
        tag_counts,
        query_tokens: TokenStats::from_counts(&query_tokens),
        positive_tokens: TokenStats::from_counts(&positive_tokens),
        pairs_per_image,
    })
}

/// `n` image records of a desk-scale mock corpus (`img-00000`, ...).
pub fn mock_image_records(n: usize) -> Vec<ImageRecord> {
    (0..n)
        .map(|i| ImageRecord {
            image_id: format!("img-{i:05}"),
            width: 640 + (i % 5) as u32 * 64,
            height: 480,
            dense_caption: None,
        })
        .collect()
}
