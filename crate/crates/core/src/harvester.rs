//! Random-id crawler over the Wikidata `wbgetentities` API.
//!
//! Requests go through a [`Transport`], so tests and offline runs use
//! [`FixtureTransport`] while `--live` runs use [`HttpTransport`]. Time is
//! read through a [`Clock`] so pacing and backoff can be checked without
//! sleeping.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::Value;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{CategoryPair, Dataset};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const API_URL: &str = "https://www.wikidata.org/w/api.php";
/// Largest id list the API accepts in one call.
pub const MAX_BATCH: usize = 50;
pub const DEFAULT_MAX_QID: u64 = 130_000_000;
pub const MAX_ATTEMPTS: u32 = 3;
pub const USER_AGENT_ENV: &str = "CATMT_USER_AGENT";

pub fn is_valid_qid(id: &str) -> bool {
    let Some(digits) = id.strip_prefix('Q') else {
        return false;
    };
    !digits.is_empty() && !digits.starts_with('0') && digits.bytes().all(|b| b.is_ascii_digit())
}

/// Up to [`MAX_BATCH`] well-formed item ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QidBatch(Vec<String>);

impl QidBatch {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        if ids.len() > MAX_BATCH {
            return Err(Error::InvalidArgument(format!(
                "{} ids exceed the batch cap of {MAX_BATCH}",
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|id| !is_valid_qid(id)) {
            return Err(Error::InvalidArgument(format!("malformed item id {bad:?}")));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `n` ids drawn uniformly from `Q1..=Q{max_qid}`, in batches of 50.
pub fn random_qids(n: usize, max_qid: u64, seed: u64) -> Result<Vec<QidBatch>> {
    if n == 0 || max_qid == 0 {
        return Err(Error::InvalidArgument("need n ≥ 1 and max_qid ≥ 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let ids: Vec<String> = (0..n).map(|_| format!("Q{}", 1 + rng.below(max_qid))).collect();
    ids.chunks(MAX_BATCH)
        .map(|c| QidBatch::new(c.to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityRecord {
    pub qid: String,
    /// Wiki code (`enwiki`, `viwiki`, ...) to page title.
    pub sitelinks: BTreeMap<String, String>,
}

/// Which sitelinks form a pair and the namespace prefix each must carry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SitePair {
    pub source_wiki: String,
    pub source_prefix: String,
    pub target_wiki: String,
    pub target_prefix: String,
}

impl Default for SitePair {
    fn default() -> Self {
        Self {
            source_wiki: "enwiki".into(),
            source_prefix: "Category:".into(),
            target_wiki: "viwiki".into(),
            target_prefix: "Thể loại:".into(),
        }
    }
}

impl SitePair {
    pub fn extract(&self, record: &EntityRecord) -> Option<CategoryPair> {
        let title = |wiki: &str, prefix: &str| -> Option<String> {
            let t: String = record.sitelinks.get(wiki)?.nfc().collect();
            let prefix: String = prefix.nfc().collect();
            t.strip_prefix(&prefix).map(str::to_owned)
        };
        let source = title(&self.source_wiki, &self.source_prefix)?;
        let target = title(&self.target_wiki, &self.target_prefix)?;
        CategoryPair::new(&source, &target, Some(record.qid.clone())).ok()
    }
}

/// Category pair from the English and Vietnamese sitelinks, if both are
/// category pages.
pub fn extract_pair(record: &EntityRecord) -> Option<CategoryPair> {
    SitePair::default().extract(record)
}

/// Raw HTTP outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub body: String,
    pub retry_after: Option<Duration>,
}

impl Response {
    pub fn ok(body: impl Into<String>) -> Self {
        Self {
            status: 200,
            body: body.into(),
            retry_after: None,
        }
    }
}

pub trait Transport: Send + Sync {
    /// GET the API endpoint with the given query parameters. `Err` means
    /// the request never produced a response (connection, timeout).
    fn get(&self, query: &[(&str, &str)]) -> std::result::Result<Response, String>;
}

/// Query parameters for one `wbgetentities` call.
pub fn entity_query(ids: &str) -> [(&str, &str); 4] {
    [
        ("action", "wbgetentities"),
        ("props", "sitelinks"),
        ("format", "json"),
        ("ids", ids),
    ]
}

pub struct HttpTransport {
    agent: ureq::Agent,
    user_agent: String,
}

impl HttpTransport {
    pub fn new(user_agent: &str) -> Result<Self> {
        if user_agent.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "a descriptive User-Agent is required (set {USER_AGENT_ENV})"
            )));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            user_agent: user_agent.to_owned(),
        })
    }
}

impl Transport for HttpTransport {
    fn get(&self, query: &[(&str, &str)]) -> std::result::Result<Response, String> {
        let mut resp = self
            .agent
            .get(API_URL)
            .header("User-Agent", &self.user_agent)
            .query_pairs(query.iter().copied())
            .call()
            .map_err(|e| e.to_string())?;
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(Response {
            status,
            body,
            retry_after,
        })
    }
}

/// Serves entities from memory (or a directory of `Q<n>.json` entity
/// objects) the way the live API answers: an unknown id fails the whole call
/// with `no-such-entity`, an entity object carrying `"missing"` is dropped.
#[derive(Debug, Clone, Default)]
pub struct FixtureTransport {
    entities: HashMap<String, Value>,
    requests: Arc<Mutex<Vec<String>>>,
}

impl FixtureTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut t = Self::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(qid) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if path.extension().and_then(|e| e.to_str()) != Some("json") || !is_valid_qid(qid) {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
            t.entities.insert(qid.to_owned(), value);
        }
        Ok(t)
    }

    /// Add an entity with the given sitelinks.
    pub fn with_entity(mut self, qid: &str, sitelinks: &[(&str, &str)]) -> Self {
        let links: serde_json::Map<String, Value> = sitelinks
            .iter()
            .map(|(site, title)| {
                (site.to_string(), serde_json::json!({ "site": site, "title": title }))
            })
            .collect();
        self.entities.insert(
            qid.to_owned(),
            serde_json::json!({ "type": "item", "id": qid, "sitelinks": links }),
        );
        self
    }

    /// Add an id that exists but has been deleted.
    pub fn with_missing(mut self, qid: &str) -> Self {
        self.entities
            .insert(qid.to_owned(), serde_json::json!({ "id": qid, "missing": "" }));
        self
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// The `ids` parameter of every request served so far.
    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().unwrap().clone()
    }
}

impl Transport for FixtureTransport {
    fn get(&self, query: &[(&str, &str)]) -> std::result::Result<Response, String> {
        let ids = query
            .iter()
            .find(|(k, _)| *k == "ids")
            .map_or("", |(_, v)| *v);
        self.requests.lock().unwrap().push(ids.to_owned());
        let mut entities = serde_json::Map::new();
        for id in ids.split('|').filter(|s| !s.is_empty()) {
            match self.entities.get(id) {
                Some(v) => {
                    entities.insert(id.to_owned(), v.clone());
                }
                None => {
                    let body = serde_json::json!({
                        "error": {
                            "code": "no-such-entity",
                            "info": format!("Could not find an entity with the ID \"{id}\"."),
                            "id": id,
                        }
                    });
                    return Ok(Response::ok(body.to_string()));
                }
            }
        }
        Ok(Response::ok(
            serde_json::json!({ "entities": entities, "success": 1 }).to_string(),
        ))
    }
}

pub trait Clock: Send + Sync {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Virtual time: `sleep` advances the clock instantly.
#[derive(Debug, Default)]
pub struct MockClock {
    nanos: AtomicU64,
}

impl MockClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for MockClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

/// Spaces successive permits at least `interval` apart across all callers.
pub struct RateLimiter {
    clock: Arc<dyn Clock>,
    interval: Duration,
    next: Mutex<Option<Duration>>,
}

impl RateLimiter {
    pub fn new(clock: Arc<dyn Clock>, interval: Duration) -> Self {
        Self {
            clock,
            interval,
            next: Mutex::new(None),
        }
    }

    /// Block until a request may go out; returns the clock reading at which
    /// it was granted.
    pub fn acquire(&self) -> Duration {
        let mut next = self.next.lock().unwrap();
        let mut now = self.clock.now();
        if let Some(t) = *next {
            if now < t {
                self.clock.sleep(t - now);
                now = self.clock.now().max(t);
            }
        }
        *next = Some(now + self.interval);
        now
    }
}

/// Transport, pacing and retry policy shared by the fetch workers.
pub struct Fetcher<'a> {
    pub transport: &'a dyn Transport,
    pub clock: Arc<dyn Clock>,
    pub limiter: RateLimiter,
    pub backoff_base: Duration,
    requests: AtomicU64,
}

impl<'a> Fetcher<'a> {
    pub fn new(
        transport: &'a dyn Transport,
        clock: Arc<dyn Clock>,
        min_interval: Duration,
        backoff_base: Duration,
    ) -> Self {
        Self {
            transport,
            limiter: RateLimiter::new(clock.clone(), min_interval),
            clock,
            backoff_base,
            requests: AtomicU64::new(0),
        }
    }

    /// HTTP requests issued so far, retries included.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    /// One call with up to [`MAX_ATTEMPTS`] tries on transient failures.
    fn call(&self, ids: &str) -> Result<Value> {
        let query = entity_query(ids);
        let mut last = String::new();
        let mut last_status = None;
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                let backoff = self.backoff_base * 2u32.pow(attempt - 1);
                self.clock.sleep(backoff);
            }
            self.limiter.acquire();
            self.requests.fetch_add(1, Ordering::SeqCst);
            let resp = match self.transport.get(&query) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("request for {ids} failed: {e}");
                    last = e;
                    last_status = None;
                    continue;
                }
            };
            if resp.status == 429 || resp.status >= 500 {
                log::warn!("request for {ids} got HTTP {}", resp.status);
                if let Some(wait) = resp.retry_after {
                    self.clock.sleep(wait);
                }
                last = format!("HTTP {}", resp.status);
                last_status = Some(resp.status);
                continue;
            }
            if resp.status != 200 {
                return Err(Error::Http {
                    ids: ids.to_owned(),
                    status: Some(resp.status),
                    message: "unexpected HTTP status".into(),
                });
            }
            let value: Value = serde_json::from_str(&resp.body).map_err(|e| Error::Http {
                ids: ids.to_owned(),
                status: Some(resp.status),
                message: format!("malformed payload: {e}"),
            })?;
            if value.pointer("/error/code").and_then(Value::as_str) == Some("maxlag") {
                last = "server lag".into();
                last_status = Some(resp.status);
                continue;
            }
            return Ok(value);
        }
        Err(Error::Http {
            ids: ids.to_owned(),
            status: last_status,
            message: format!("gave up after {MAX_ATTEMPTS} attempts: {last}"),
        })
    }

    /// Records for the ids of `batch` that exist, in batch order. Unknown ids
    /// are dropped and the remainder re-requested.
    pub fn fetch_entities(&self, batch: &QidBatch) -> Result<Vec<EntityRecord>> {
        let mut ids: Vec<&str> = batch.ids().iter().map(String::as_str).collect();
        let mut seen = HashSet::new();
        ids.retain(|id| seen.insert(*id));
        loop {
            if ids.is_empty() {
                return Ok(Vec::new());
            }
            let joined = ids.join("|");
            let value = self.call(&joined)?;
            if let Some(err) = value.get("error") {
                let code = err.get("code").and_then(Value::as_str).unwrap_or("");
                let bad = err.get("id").and_then(Value::as_str);
                match (code, bad) {
                    ("no-such-entity", Some(bad)) if ids.contains(&bad) => {
                        ids.retain(|id| *id != bad);
                        continue;
                    }
                    _ => {
                        return Err(Error::Http {
                            ids: joined,
                            status: Some(200),
                            message: format!("API error {code:?}: {err}"),
                        })
                    }
                }
            }
            let entities = value
                .get("entities")
                .and_then(Value::as_object)
                .ok_or_else(|| Error::Http {
                    ids: joined.clone(),
                    status: Some(200),
                    message: "payload has no entities object".into(),
                })?;
            let mut out = Vec::with_capacity(ids.len());
            for id in &ids {
                let Some(e) = entities.get(*id) else { continue };
                if e.get("missing").is_some() {
                    continue;
                }
                let mut sitelinks = BTreeMap::new();
                if let Some(links) = e.get("sitelinks").and_then(Value::as_object) {
                    for (site, link) in links {
                        let title = link.get("title").and_then(Value::as_str).ok_or_else(|| {
                            Error::Http {
                                ids: (*id).to_owned(),
                                status: Some(200),
                                message: format!("sitelink {site} has no title"),
                            }
                        })?;
                        if !title.is_empty() {
                            sitelinks.insert(site.clone(), title.to_owned());
                        }
                    }
                }
                out.push(EntityRecord {
                    qid: (*id).to_owned(),
                    sitelinks,
                });
            }
            return Ok(out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarvestConfig {
    pub target_count: usize,
    pub max_qid: u64,
    pub concurrency: usize,
    pub min_request_interval: Duration,
    pub backoff_base: Duration,
    pub user_agent: String,
    pub seed: u64,
    /// Ids per request, at most [`MAX_BATCH`].
    pub batch_size: usize,
    /// Maximum number of batches to request.
    pub attempt_budget: usize,
    pub sites: SitePair,
    /// Visited-id file; read on start, appended after every round.
    pub checkpoint: Option<PathBuf>,
    /// Dataset file rewritten after every round.
    pub output: Option<PathBuf>,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            target_count: 15_000,
            max_qid: DEFAULT_MAX_QID,
            concurrency: 4,
            min_request_interval: Duration::from_millis(500),
            backoff_base: Duration::from_secs(2),
            user_agent: String::new(),
            seed: 42,
            batch_size: MAX_BATCH,
            attempt_budget: 100_000,
            sites: SitePair::default(),
            checkpoint: None,
            output: None,
        }
    }
}

impl HarvestConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("harvest config: {m}")));
        if self.target_count == 0 {
            return bad("target count must be at least 1");
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1");
        }
        if self.max_qid == 0 {
            return bad("max qid must be at least 1");
        }
        if self.batch_size == 0 || self.batch_size > MAX_BATCH {
            return bad("batch size must be within 1..=50");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HarvestStatus {
    Complete,
    /// Budget or id space ran out this many pairs short of the target.
    Shortfall { missing: usize },
}

#[derive(Debug, Clone)]
pub struct HarvestOutcome {
    pub dataset: Dataset,
    pub status: HarvestStatus,
    pub batches: usize,
    pub requests: u64,
    pub visited: usize,
}

fn read_visited(path: &Path) -> Result<HashSet<String>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| is_valid_qid(l))
            .map(str::to_owned)
            .collect()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(HashSet::new()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn append_visited(path: &Path, ids: &[String]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Draw unvisited ids, fetch them `concurrency` batches at a time, and add
/// every category pair to `sink` until it holds at least `target_count` pairs or the
/// batch budget is spent. Results of a round are merged in batch order.
pub fn harvest(
    config: &HarvestConfig,
    transport: &dyn Transport,
    clock: Arc<dyn Clock>,
    mut sink: Dataset,
) -> Result<HarvestOutcome> {
    config.validate()?;
    let fetcher = Fetcher::new(transport, clock, config.min_request_interval, config.backoff_base);
    let mut visited = match &config.checkpoint {
        Some(p) => read_visited(p)?,
        None => HashSet::new(),
    };
    if !visited.is_empty() {
        log::info!("resuming with {} visited ids and {} pairs", visited.len(), sink.len());
    }
    let mut rng = SplitMix64::new(config.seed);
    let mut batches_done = 0usize;

    while sink.len() < config.target_count
        && batches_done < config.attempt_budget
        && (visited.len() as u64) < config.max_qid
    {
        let round = config.concurrency.min(config.attempt_budget - batches_done);
        let mut batches = Vec::with_capacity(round);
        'draw: for _ in 0..round {
            let mut ids = Vec::with_capacity(config.batch_size);
            while ids.len() < config.batch_size {
                if visited.len() as u64 >= config.max_qid {
                    break;
                }
                let id = format!("Q{}", 1 + rng.below(config.max_qid));
                if visited.insert(id.clone()) {
                    ids.push(id);
                }
            }
            if ids.is_empty() {
                break 'draw;
            }
            batches.push(QidBatch::new(ids)?);
        }
        if batches.is_empty() {
            break;
        }
        let results: Vec<Result<Vec<EntityRecord>>> = std::thread::scope(|s| {
            let handles: Vec<_> = batches
                .iter()
                .map(|b| s.spawn(|| fetcher.fetch_entities(b)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fetch worker panicked"))
                .collect()
        });
        batches_done += batches.len();
        for records in results {
            // every fetched id is marked visited, so keep all of its pairs even past the target
            for r in records? {
                if let Some(pair) = config.sites.extract(&r) {
                    if !sink.insert(pair) {
                        log::debug!("duplicate pair from {}", r.qid);
                    }
                }
            }
        }
        if let Some(p) = &config.checkpoint {
            let ids: Vec<String> = batches.iter().flat_map(|b| b.ids().iter().cloned()).collect();
            append_visited(p, &ids)?;
        }
        if let Some(p) = &config.output {
            sink.save(p)?;
        }
        log::info!(
            "{} pairs after {batches_done} batches ({} requests)",
            sink.len(),
            fetcher.requests()
        );
    }
    let status = if sink.len() >= config.target_count {
        HarvestStatus::Complete
    } else {
        HarvestStatus::Shortfall {
            missing: config.target_count - sink.len(),
        }
    };
    Ok(HarvestOutcome {
        dataset: sink,
        status,
        batches: batches_done,
        requests: fetcher.requests(),
        visited: visited.len(),
    })
}
