// SPDX-License-Identifier: Apache-2.0

//! Serving path: gateway with pluggable endpoint pickers over replicas that
//! each hold a block-based prefix cache, a prefill/decode latency model, and a
//! closed-loop load generator.

use std::cmp::Reverse;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{EventPayload, Kernel, Millis, RngStream, SimError};

pub const DEFAULT_BLOCK_SIZE: u32 = 16;
pub const DEFAULT_CAPACITY_TOKENS: u64 = 143_360;

#[derive(Debug, Error)]
pub enum ServingError {
    #[error("serving configuration: {0}")]
    Config(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Chain hashes of the full blocks of `tokens`; block `i` commits to all tokens before it.
pub fn block_hashes(tokens: &[u32], block_size: u32) -> Vec<u64> {
    let bs = block_size as usize;
    let mut out = Vec::with_capacity(tokens.len() / bs);
    let mut prev = 0u64;
    for block in tokens.chunks_exact(bs) {
        let mut h = DefaultHasher::new();
        prev.hash(&mut h);
        block.hash(&mut h);
        prev = h.finish();
        out.push(prev);
    }
    out
}

/// Deterministic token ids for a prompt. Distinct ids start with distinct tokens.
pub fn synthesize_tokens(prompt_id: &str, count: u32) -> Vec<u32> {
    let mut h = DefaultHasher::new();
    prompt_id.hash(&mut h);
    let base = h.finish();
    (0..count)
        .map(|j| {
            let mut h = DefaultHasher::new();
            (base, j).hash(&mut h);
            h.finish() as u32
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Block {
    parent: Option<u64>,
    depth: u32,
    last_used: Millis,
    children: BTreeSet<u64>,
}

/// Outcome of inserting a prompt into a prefix cache.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InsertOutcome {
    pub evicted: Vec<u64>,
    pub truncated: bool,
}

/// Block-granular prefix cache. Only leaf blocks are eviction candidates, so
/// the resident set stays prefix-closed; among leaves the least recently used
/// goes first, and on ties the deeper block (the suffix) goes first.
#[derive(Debug, Clone)]
pub struct PrefixCacheIndex {
    block_size: u32,
    capacity_blocks: usize,
    blocks: HashMap<u64, Block>,
    leaves: BTreeSet<(Millis, Reverse<u32>, u64)>,
    evicted_total: u64,
    truncated_inserts: u64,
}

impl PrefixCacheIndex {
    pub fn new(block_size: u32, capacity_tokens: u64) -> Self {
        assert!(block_size > 0, "block size must be positive");
        Self {
            block_size,
            capacity_blocks: (capacity_tokens / u64::from(block_size)) as usize,
            blocks: HashMap::new(),
            leaves: BTreeSet::new(),
            evicted_total: 0,
            truncated_inserts: 0,
        }
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn resident_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn resident_tokens(&self) -> u64 {
        self.blocks.len() as u64 * u64::from(self.block_size)
    }

    pub fn capacity_tokens(&self) -> u64 {
        self.capacity_blocks as u64 * u64::from(self.block_size)
    }

    pub fn evicted_total(&self) -> u64 {
        self.evicted_total
    }

    pub fn truncated_inserts(&self) -> u64 {
        self.truncated_inserts
    }

    pub fn contains(&self, hash: u64) -> bool {
        self.blocks.contains_key(&hash)
    }

    /// Number of leading blocks of `chain` that are resident.
    pub fn match_blocks(&self, chain: &[u64]) -> usize {
        chain.iter().take_while(|h| self.blocks.contains_key(h)).count()
    }

    pub fn prefix_match(&self, tokens: &[u32]) -> u64 {
        let chain = block_hashes(tokens, self.block_size);
        self.match_blocks(&chain) as u64 * u64::from(self.block_size)
    }

    pub fn insert_prompt(&mut self, tokens: &[u32], now: Millis) -> InsertOutcome {
        let chain = block_hashes(tokens, self.block_size);
        self.insert_chain(&chain, now)
    }

    fn leaf_key(&self, hash: u64) -> (Millis, Reverse<u32>, u64) {
        let b = &self.blocks[&hash];
        (b.last_used, Reverse(b.depth), hash)
    }

    /// Make every block of `chain` resident with `last_used = now`.
    pub fn insert_chain(&mut self, chain: &[u64], now: Millis) -> InsertOutcome {
        let mut out = InsertOutcome::default();
        let chain = if chain.len() > self.capacity_blocks {
            self.truncated_inserts += 1;
            out.truncated = true;
            &chain[..self.capacity_blocks]
        } else {
            chain
        };
        let mut parent: Option<u64> = None;
        for (depth, &h) in chain.iter().enumerate() {
            match self.blocks.get_mut(&h) {
                Some(b) => {
                    if b.children.is_empty() {
                        self.leaves.remove(&(b.last_used, Reverse(b.depth), h));
                    }
                    b.last_used = now;
                }
                None => {
                    self.blocks.insert(
                        h,
                        Block {
                            parent,
                            depth: depth as u32,
                            last_used: now,
                            children: BTreeSet::new(),
                        },
                    );
                    // the parent was touched just before, so it is already out of the leaf set
                    if let Some(p) = parent {
                        self.blocks.get_mut(&p).expect("parent resident").children.insert(h);
                    }
                }
            }
            parent = Some(h);
        }
        if let Some(last) = parent {
            if self.blocks[&last].children.is_empty() {
                let key = self.leaf_key(last);
                self.leaves.insert(key);
            }
        }
        while self.blocks.len() > self.capacity_blocks {
            let Some(victim) = self.leaves.pop_first() else {
                break;
            };
            self.remove_leaf(victim.2);
            out.evicted.push(victim.2);
        }
        self.evicted_total += out.evicted.len() as u64;
        out
    }

    fn remove_leaf(&mut self, hash: u64) {
        let b = self.blocks.remove(&hash).expect("leaf resident");
        if let Some(p) = b.parent {
            if let Some(pb) = self.blocks.get_mut(&p) {
                pb.children.remove(&hash);
                if pb.children.is_empty() {
                    let key = self.leaf_key(p);
                    self.leaves.insert(key);
                }
            }
        }
    }

    /// Drop a block and everything chained after it. Returns the number removed.
    pub fn remove_subtree(&mut self, hash: u64) -> usize {
        if !self.blocks.contains_key(&hash) {
            return 0;
        }
        let mut stack = vec![hash];
        let mut order = Vec::new();
        while let Some(h) = stack.pop() {
            order.push(h);
            stack.extend(self.blocks[&h].children.iter().copied());
        }
        // children before parents so each removal is of a leaf
        for &h in order.iter().rev() {
            let key = self.leaf_key(h);
            self.leaves.remove(&key);
            self.remove_leaf(h);
        }
        // remove_leaf may have re-added a removed block's parent; that parent is
        // still resident and now childless, which is correct.
        order.len()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.blocks.len() > self.capacity_blocks {
            return Err(format!(
                "{} blocks resident, capacity {}",
                self.blocks.len(),
                self.capacity_blocks
            ));
        }
        let mut leaves = BTreeSet::new();
        for (&h, b) in &self.blocks {
            if let Some(p) = b.parent {
                let Some(pb) = self.blocks.get(&p) else {
                    return Err(format!("block {h:x} resident without its predecessor"));
                };
                if !pb.children.contains(&h) || pb.depth + 1 != b.depth {
                    return Err(format!("block {h:x} has inconsistent parent links"));
                }
            } else if b.depth != 0 {
                return Err(format!("orphan block {h:x} at depth {}", b.depth));
            }
            if b.children.is_empty() {
                leaves.insert((b.last_used, Reverse(b.depth), h));
            }
        }
        if leaves != self.leaves {
            return Err("leaf set out of sync".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    ClusteripRoundRobin,
    GatewayOnly,
    GatewayEppRandom,
    GatewayEppPrecise,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::ClusteripRoundRobin => "clusterip-round-robin",
            Strategy::GatewayOnly => "gateway-only",
            Strategy::GatewayEppRandom => "gateway-epp-random",
            Strategy::GatewayEppPrecise => "gateway-epp-precise",
        }
    }

    fn uses_gateway(&self) -> bool {
        !matches!(self, Strategy::ClusteripRoundRobin)
    }

    fn uses_epp(&self) -> bool {
        matches!(self, Strategy::GatewayEppRandom | Strategy::GatewayEppPrecise)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `(concurrency, ms)` points, interpolated linearly in log2(concurrency).
pub type OverheadTable = Vec<[f64; 2]>;

fn interpolate(table: &[[f64; 2]], k: u32) -> f64 {
    let x = f64::from(k.max(1)).log2();
    let pts: Vec<(f64, f64)> = table.iter().map(|p| (p[0].max(1.0).log2(), p[1])).collect();
    let first = pts[0];
    let last = pts[pts.len() - 1];
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x <= b.0 {
            if b.0 == a.0 {
                return b.1;
            }
            return a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0);
        }
    }
    last.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyParams {
    pub prefill_ms_per_token: f64,
    pub ttft_floor_ms: f64,
    pub decode_ms_per_token: f64,
    pub epp_overhead_ms: f64,
    pub clusterip_overhead_ms: OverheadTable,
    pub gateway_overhead_ms: OverheadTable,
}

impl LatencyParams {
    pub fn validate(&self) -> Result<(), String> {
        let scalars = [
            ("prefill_ms_per_token", self.prefill_ms_per_token),
            ("ttft_floor_ms", self.ttft_floor_ms),
            ("decode_ms_per_token", self.decode_ms_per_token),
            ("epp_overhead_ms", self.epp_overhead_ms),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("latency.{name} must be a non-negative number"));
            }
        }
        for (name, t) in [
            ("clusterip_overhead_ms", &self.clusterip_overhead_ms),
            ("gateway_overhead_ms", &self.gateway_overhead_ms),
        ] {
            if t.is_empty() {
                return Err(format!("latency.{name} needs at least one point"));
            }
            if t.iter().any(|p| !(p[0] >= 1.0 && p[1] >= 0.0 && p[1].is_finite())) {
                return Err(format!("latency.{name}: concurrency >= 1 and ms >= 0 required"));
            }
            if t.windows(2).any(|w| w[1][0] <= w[0][0]) {
                return Err(format!("latency.{name}: concurrency points must increase"));
            }
        }
        Ok(())
    }

    /// Network and gateway time between the client send and replica arrival.
    pub fn overhead_ms(&self, strategy: Strategy, concurrency: u32) -> f64 {
        let mut ms = if strategy.uses_gateway() {
            interpolate(&self.gateway_overhead_ms, concurrency)
        } else {
            interpolate(&self.clusterip_overhead_ms, concurrency)
        };
        if strategy.uses_epp() {
            ms += self.epp_overhead_ms;
        }
        ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Backend {
    /// Replicas with prefix caches and serialized prefill.
    PrefixCache,
    /// A single backend answering after a fixed time-to-first-token.
    Constant { ttft_ms: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSpec {
    /// Prompt lengths in symmetric pairs around the mean, so the mean is exact.
    Synthetic {
        prompts: u32,
        mean_tokens: u32,
        spread_tokens: u32,
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub prompt_id: String,
    pub token_count: u32,
}

#[derive(Debug, Deserialize)]
struct CorpusRow {
    prompt_id: String,
    token_count: u32,
}

fn read_corpus(path: &Path) -> Result<Vec<Prompt>, ServingError> {
    let csv_err = |source| ServingError::Csv {
        path: path.to_owned(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: CorpusRow = row.map_err(csv_err)?;
        if out.iter().any(|p: &Prompt| p.prompt_id == row.prompt_id) {
            return Err(ServingError::Corpus(format!("duplicate prompt_id `{}`", row.prompt_id)));
        }
        out.push(Prompt {
            prompt_id: row.prompt_id,
            token_count: row.token_count,
        });
    }
    if out.is_empty() {
        return Err(ServingError::Corpus(format!("{}: no prompts", path.display())));
    }
    Ok(out)
}

pub fn build_corpus(spec: &CorpusSpec) -> Result<Vec<Prompt>, ServingError> {
    match spec {
        CorpusSpec::Synthetic {
            prompts,
            mean_tokens,
            spread_tokens,
            seed,
        } => {
            if *prompts == 0 {
                return Err(ServingError::Corpus("prompts must be at least 1".into()));
            }
            if spread_tokens > mean_tokens {
                return Err(ServingError::Corpus("spread_tokens exceeds mean_tokens".into()));
            }
            let mut rng = RngStream::new(*seed, "corpus");
            let mut counts = Vec::with_capacity(*prompts as usize);
            while counts.len() + 1 < *prompts as usize {
                let d = rng.rng().random_range(0..=*spread_tokens);
                counts.push(mean_tokens + d);
                counts.push(mean_tokens - d);
            }
            if counts.len() < *prompts as usize {
                counts.push(*mean_tokens);
            }
            Ok(counts
                .into_iter()
                .enumerate()
                .map(|(i, token_count)| Prompt {
                    prompt_id: format!("prompt-{i}"),
                    token_count,
                })
                .collect())
        }
        CorpusSpec::File { path } => read_corpus(path),
    }
}

fn default_replicas() -> u32 {
    8
}
fn default_capacity() -> u64 {
    DEFAULT_CAPACITY_TOKENS
}
fn default_block_size() -> u32 {
    DEFAULT_BLOCK_SIZE
}
fn default_levels() -> Vec<u32> {
    vec![1, 2, 4, 8, 16, 32, 64, 128, 256]
}
fn default_repeats() -> u32 {
    8
}
fn default_max_output() -> u32 {
    512
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServingConfig {
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_replicas")]
    pub replicas: u32,
    #[serde(default = "default_capacity")]
    pub capacity_tokens: u64,
    #[serde(default = "default_block_size")]
    pub block_size: u32,
    #[serde(default = "default_levels")]
    pub concurrency: Vec<u32>,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_output_tokens: Option<u32>,
    /// Run the levels back to back in one simulation so caches stay warm.
    #[serde(default = "default_true")]
    pub warm_sweep: bool,
    pub backend: Backend,
    pub corpus: CorpusSpec,
    pub latency: LatencyParams,
}

impl ServingConfig {
    pub fn validate(&self) -> Result<(), ServingError> {
        let cfg = |m: String| Err(ServingError::Config(m));
        if self.strategies.is_empty() {
            return cfg("at least one strategy required".into());
        }
        if self.concurrency.is_empty() {
            return cfg("at least one concurrency level required".into());
        }
        if let Some(k) = self.concurrency.iter().find(|&&k| k < 1) {
            return cfg(format!("concurrency level {k} < 1"));
        }
        if self.replicas == 0 {
            return cfg("replicas must be at least 1".into());
        }
        if self.block_size == 0 {
            return cfg("block_size must be at least 1".into());
        }
        if self.repeats == 0 {
            return cfg("repeats must be at least 1".into());
        }
        if self.max_output_tokens == 0 || self.fixed_output_tokens == Some(0) {
            return cfg("output token counts must be at least 1".into());
        }
        if let Backend::Constant { ttft_ms } = self.backend {
            if !(ttft_ms.is_finite() && ttft_ms >= 0.0) {
                return cfg("backend.ttft_ms must be non-negative".into());
            }
        }
        self.latency.validate().map_err(ServingError::Config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub strategy: Strategy,
    pub concurrency: u32,
    pub prompt_id: String,
    pub chosen_replica: u32,
    pub arrive_at: Millis,
    pub ttft_at: Millis,
    pub done_at: Millis,
    pub cached_tokens: u64,
    pub prefill_tokens: u64,
    pub output_tokens: u32,
}

impl RequestRecord {
    pub fn ttft_ms(&self) -> Millis {
        self.ttft_at - self.arrive_at
    }

    pub fn e2e_ms(&self) -> Millis {
        self.done_at - self.arrive_at
    }
}

#[derive(Debug, Clone)]
pub struct ServingRun {
    pub strategy: Strategy,
    pub seed: u64,
    pub records: Vec<RequestRecord>,
    pub cache_evictions: u64,
    pub dispatch_digest: String,
    pub dispatch_log: Vec<String>,
}

/// Read-only view of a replica for endpoint picking.
#[derive(Debug, Clone, Copy)]
pub struct EndpointView<'a> {
    pub replica_id: u32,
    pub in_flight: u32,
    pub mirror: &'a PrefixCacheIndex,
}

/// Choose a replica. `chain` is the request's block-hash chain.
pub fn pick_endpoint(
    strategy: Strategy,
    chain: &[u64],
    fleet: &[EndpointView<'_>],
    round_robin: &mut usize,
    rng: &mut RngStream,
) -> u32 {
    assert!(!fleet.is_empty(), "empty fleet");
    match strategy {
        Strategy::ClusteripRoundRobin | Strategy::GatewayOnly => {
            let i = *round_robin % fleet.len();
            *round_robin = round_robin.wrapping_add(1);
            fleet[i].replica_id
        }
        Strategy::GatewayEppRandom => fleet[rng.rng().random_range(0..fleet.len())].replica_id,
        Strategy::GatewayEppPrecise => {
            fleet
                .iter()
                .min_by_key(|v| {
                    (
                        Reverse(v.mirror.match_blocks(chain)),
                        v.in_flight,
                        v.mirror.resident_blocks(),
                        v.replica_id,
                    )
                })
                .expect("non-empty")
                .replica_id
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ServeEvent {
    LevelStart(usize),
    Arrival(usize),
    PrefillDone(usize),
    DecodeDone(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ServePayload {
    event: ServeEvent,
    detail: String,
}

impl EventPayload for ServePayload {
    fn kind(&self) -> &'static str {
        match self.event {
            ServeEvent::LevelStart(_) => "level-start",
            ServeEvent::Arrival(_) => "request-arrival",
            ServeEvent::PrefillDone(_) => "prefill-done",
            ServeEvent::DecodeDone(_) => "decode-done",
        }
    }

    fn detail(&self) -> String {
        self.detail.clone()
    }
}

struct Replica {
    cache: PrefixCacheIndex,
    mirror: PrefixCacheIndex,
    prefill_queue: VecDeque<usize>,
    prefill_busy: bool,
    in_flight: u32,
}

#[derive(Debug, Clone)]
struct Pending {
    prompt: usize,
    replica: u32,
    arrive_at: Millis,
    output_tokens: u32,
    cached: u64,
    ttft_at: Millis,
    level: usize,
}

struct ServeDriver<'a> {
    cfg: &'a ServingConfig,
    strategy: Strategy,
    corpus: &'a [Prompt],
    chains: Vec<Vec<u64>>,
    replicas: Vec<Replica>,
    load_rng: RngStream,
    output_rng: RngStream,
    pick_rng: RngStream,
    round_robin: usize,
    queue: VecDeque<(usize, u32)>,
    outstanding: usize,
    level: usize,
    requests: Vec<Pending>,
    records: Vec<RequestRecord>,
}

fn ms(x: f64) -> Millis {
    x.round().max(0.0) as Millis
}

impl ServeDriver<'_> {
    fn fresh_replicas(cfg: &ServingConfig) -> Vec<Replica> {
        let n = match cfg.backend {
            Backend::PrefixCache => cfg.replicas,
            Backend::Constant { .. } => 1,
        };
        (0..n)
            .map(|_| Replica {
                cache: PrefixCacheIndex::new(cfg.block_size, cfg.capacity_tokens),
                mirror: PrefixCacheIndex::new(cfg.block_size, cfg.capacity_tokens),
                prefill_queue: VecDeque::new(),
                prefill_busy: false,
                in_flight: 0,
            })
            .collect()
    }

    fn start_level(&mut self, kernel: &mut Kernel<ServePayload>, level: usize) -> Result<(), ServingError> {
        self.level = level;
        if !self.cfg.warm_sweep && level > 0 {
            self.replicas = Self::fresh_replicas(self.cfg);
            self.round_robin = 0;
        }
        let mut order: Vec<usize> = (0..self.corpus.len())
            .flat_map(|p| std::iter::repeat_n(p, self.cfg.repeats as usize))
            .collect();
        order.shuffle(self.load_rng.rng());
        self.queue = order
            .into_iter()
            .map(|p| {
                let out = match self.cfg.fixed_output_tokens {
                    Some(n) => n,
                    None => self.output_rng.rng().random_range(1..=self.cfg.max_output_tokens),
                };
                (p, out)
            })
            .collect();
        self.outstanding = self.queue.len();
        let k = self.cfg.concurrency[level];
        for _ in 0..k {
            self.dispatch(kernel)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, kernel: &mut Kernel<ServePayload>) -> Result<(), ServingError> {
        let Some((prompt, output_tokens)) = self.queue.pop_front() else {
            return Ok(());
        };
        let now = kernel.now();
        let chain = &self.chains[prompt];
        let views: Vec<EndpointView<'_>> = self
            .replicas
            .iter()
            .enumerate()
            .map(|(i, r)| EndpointView {
                replica_id: i as u32,
                in_flight: r.in_flight,
                mirror: &r.mirror,
            })
            .collect();
        let replica = pick_endpoint(self.strategy, chain, &views, &mut self.round_robin, &mut self.pick_rng);
        let r = &mut self.replicas[replica as usize];
        r.in_flight += 1;
        if self.strategy == Strategy::GatewayEppPrecise {
            r.mirror.insert_chain(chain, now);
        }
        let id = self.requests.len();
        self.requests.push(Pending {
            prompt,
            replica,
            arrive_at: now,
            output_tokens,
            cached: 0,
            ttft_at: 0,
            level: self.level,
        });
        let k = self.cfg.concurrency[self.level];
        let delay = ms(self.cfg.latency.overhead_ms(self.strategy, k));
        let detail = format!("{id}:{}:r{replica}", self.corpus[prompt].prompt_id);
        kernel.schedule(
            now + delay,
            ServePayload {
                event: ServeEvent::Arrival(id),
                detail,
            },
        )?;
        Ok(())
    }

    fn payload(&self, event: ServeEvent, id: usize) -> ServePayload {
        ServePayload {
            event,
            detail: id.to_string(),
        }
    }

    fn try_start_prefill(&mut self, kernel: &mut Kernel<ServePayload>, replica: u32) -> Result<(), ServingError> {
        let r = &mut self.replicas[replica as usize];
        if r.prefill_busy {
            return Ok(());
        }
        let Some(id) = r.prefill_queue.pop_front() else {
            return Ok(());
        };
        r.prefill_busy = true;
        let req = &mut self.requests[id];
        let tokens = u64::from(self.corpus[req.prompt].token_count);
        let cached =
            (r.cache.match_blocks(&self.chains[req.prompt]) as u64 * u64::from(self.cfg.block_size)).min(tokens);
        req.cached = cached;
        let d = ms((tokens - cached) as f64 * self.cfg.latency.prefill_ms_per_token);
        let p = self.payload(ServeEvent::PrefillDone(id), id);
        kernel.schedule(kernel.now() + d, p)?;
        Ok(())
    }

    fn handle(&mut self, kernel: &mut Kernel<ServePayload>, ev: ServePayload) -> Result<(), ServingError> {
        let now = kernel.now();
        match ev.event {
            ServeEvent::LevelStart(l) => self.start_level(kernel, l)?,
            ServeEvent::Arrival(id) => match self.cfg.backend {
                Backend::Constant { ttft_ms } => {
                    let req = &mut self.requests[id];
                    req.ttft_at = now + ms(ttft_ms);
                    let done = req.ttft_at + ms(f64::from(req.output_tokens) * self.cfg.latency.decode_ms_per_token);
                    let p = self.payload(ServeEvent::DecodeDone(id), id);
                    kernel.schedule(done, p)?;
                }
                Backend::PrefixCache => {
                    let replica = self.requests[id].replica;
                    self.replicas[replica as usize].prefill_queue.push_back(id);
                    self.try_start_prefill(kernel, replica)?;
                }
            },
            ServeEvent::PrefillDone(id) => {
                let replica = self.requests[id].replica;
                let chain = &self.chains[self.requests[id].prompt];
                let r = &mut self.replicas[replica as usize];
                r.prefill_busy = false;
                let outcome = r.cache.insert_chain(chain, now);
                if self.strategy == Strategy::GatewayEppPrecise {
                    for h in outcome.evicted {
                        r.mirror.remove_subtree(h);
                    }
                }
                let lat = &self.cfg.latency;
                let req = &mut self.requests[id];
                req.ttft_at = now + ms(lat.ttft_floor_ms);
                let done = req.ttft_at + ms(f64::from(req.output_tokens) * lat.decode_ms_per_token);
                let p = self.payload(ServeEvent::DecodeDone(id), id);
                kernel.schedule(done, p)?;
                self.try_start_prefill(kernel, replica)?;
            }
            ServeEvent::DecodeDone(id) => {
                let req = self.requests[id].clone();
                self.replicas[req.replica as usize].in_flight -= 1;
                let tokens = u64::from(self.corpus[req.prompt].token_count);
                self.records.push(RequestRecord {
                    request_id: id as u64,
                    strategy: self.strategy,
                    concurrency: self.cfg.concurrency[req.level],
                    prompt_id: self.corpus[req.prompt].prompt_id.clone(),
                    chosen_replica: req.replica,
                    arrive_at: req.arrive_at,
                    ttft_at: req.ttft_at,
                    done_at: now,
                    cached_tokens: req.cached,
                    prefill_tokens: tokens - req.cached,
                    output_tokens: req.output_tokens,
                });
                self.outstanding -= 1;
                if self.outstanding == 0 {
                    if self.level + 1 < self.cfg.concurrency.len() {
                        kernel.schedule(
                            now,
                            ServePayload {
                                event: ServeEvent::LevelStart(self.level + 1),
                                detail: self.cfg.concurrency[self.level + 1].to_string(),
                            },
                        )?;
                    }
                } else {
                    self.dispatch(kernel)?;
                }
            }
        }
        Ok(())
    }

    fn check(&self, now: Millis) -> Result<(), SimError> {
        for (i, r) in self.replicas.iter().enumerate() {
            if let Err(what) = r.cache.check_invariants() {
                return Err(SimError::Invariant {
                    now,
                    what: format!("replica {i} cache: {what}"),
                });
            }
        }
        Ok(())
    }
}

/// Run every concurrency level for one strategy and seed.
pub fn run_serving(
    cfg: &ServingConfig,
    strategy: Strategy,
    corpus: &[Prompt],
    seed: u64,
    emit_dispatch_log: bool,
    check_invariants: bool,
) -> Result<ServingRun, ServingError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(ServingError::Corpus("empty corpus".into()));
    }
    let chains = corpus
        .iter()
        .map(|p| block_hashes(&synthesize_tokens(&p.prompt_id, p.token_count), cfg.block_size))
        .collect();
    let mut driver = ServeDriver {
        cfg,
        strategy,
        corpus,
        chains,
        replicas: ServeDriver::fresh_replicas(cfg),
        load_rng: RngStream::new(seed, "load-gen"),
        output_rng: RngStream::new(seed, "output-len"),
        pick_rng: RngStream::new(seed, "epp-random"),
        round_robin: 0,
        queue: VecDeque::new(),
        outstanding: 0,
        level: 0,
        requests: Vec::new(),
        records: Vec::new(),
    };
    let mut kernel = Kernel::new().with_dispatch_log(emit_dispatch_log);
    kernel.schedule(
        0,
        ServePayload {
            event: ServeEvent::LevelStart(0),
            detail: cfg.concurrency[0].to_string(),
        },
    )?;
    let mut failure = None;
    let run = kernel.run(|k, ev| {
        let r = driver.handle(k, ev);
        match r {
            Ok(()) if check_invariants => driver.check(k.now()),
            Ok(()) => Ok(()),
            Err(e) => {
                let what = e.to_string();
                failure = Some(e);
                Err(SimError::Invariant { now: k.now(), what })
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    run?;
    let cache_evictions = driver.replicas.iter().map(|r| r.cache.evicted_total()).sum();
    Ok(ServingRun {
        strategy,
        seed,
        records: driver.records,
        cache_evictions,
        dispatch_digest: kernel.dispatch_digest(),
        dispatch_log: kernel.take_dispatch_log(),
    })
}
