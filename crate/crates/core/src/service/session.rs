use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocator::{self, AllocationPlan, AllocationProblem, PromptCoefficient};
use crate::belief::{BatchObservation, BeliefState, Link, DEFAULT_CLIP_EPS};
use crate::error::{Result, VipError};
use crate::prompt_space::{
    EmbeddingRecord, KernelCache, KernelMatrix, PairwiseDistances, PromptSet,
};
use crate::variance::{allocation_coefficient, EstimatorFamily, VarianceInputs};

pub const SNAPSHOT_FORMAT: &str = "vip-session";
pub const SNAPSHOT_VERSION: u32 = 1;

fn default_clip_eps() -> f64 {
    DEFAULT_CLIP_EPS
}

fn default_sigma_z2() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_link() -> Link {
    Link::Sigmoid
}

/// Per-session planning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub family: EstimatorFamily,
    /// Rollout budget `C`; plan requests may override it.
    #[serde(default)]
    pub budget: Option<u64>,
    pub min: u32,
    pub max: u32,
    #[serde(default = "default_clip_eps")]
    pub clip_eps: f64,
    #[serde(default = "default_sigma_z2")]
    pub sigma_z2: f64,
    /// Declared batch size, checked against the budget at creation.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Require exactly the planned number of rewards per prompt.
    #[serde(default = "default_true")]
    pub strict: bool,
    #[serde(default = "default_link")]
    pub link: Link,
}

impl SessionConfig {
    pub fn new(family: EstimatorFamily, budget: u64, min: u32, max: u32) -> Self {
        Self {
            family,
            budget: Some(budget),
            min,
            max,
            clip_eps: DEFAULT_CLIP_EPS,
            sigma_z2: 1.0,
            batch_size: None,
            strict: true,
            link: Link::Sigmoid,
        }
    }

    pub fn validate(&self, num_prompts: usize) -> Result<()> {
        if self.min < 3 {
            return Err(VipError::invalid(format!(
                "config.min must be at least 3, got {}",
                self.min
            )));
        }
        if self.min > self.max {
            return Err(VipError::invalid(format!(
                "config.min {} exceeds config.max {}",
                self.min, self.max
            )));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return Err(VipError::invalid(format!(
                "config.clip_eps must lie in (0, 0.5), got {}",
                self.clip_eps
            )));
        }
        if !(self.sigma_z2 > 0.0 && self.sigma_z2.is_finite()) {
            return Err(VipError::invalid(format!(
                "config.sigma_z2 must be positive, got {}",
                self.sigma_z2
            )));
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > num_prompts {
                return Err(VipError::invalid(format!(
                    "config.batch_size must lie in [1, {num_prompts}], got {b}"
                )));
            }
            if let Some(c) = self.budget {
                let (lo, hi) = (b as u64 * self.min as u64, b as u64 * self.max as u64);
                if c < lo || c > hi {
                    return Err(VipError::Infeasible(format!(
                        "config.budget {c} outside [B·L, B·U] = [{lo}, {hi}] for batch size {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    /// Embeddings, in the same record shape as embedding files.
    #[serde(default)]
    pub prompts: Option<Vec<EmbeddingRecord>>,
    /// Kernel cache on the server's filesystem.
    #[serde(default)]
    pub kernel_cache: Option<PathBuf>,
    /// Kernel bandwidth; the median pairwise distance when absent.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    /// Starting latent mean (zero when absent).
    #[serde(default)]
    pub initial_mean: Option<Vec<f64>>,
    pub config: SessionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub prompts: usize,
    pub iteration: u64,
    pub bandwidth: f64,
    pub kernel_hash: String,
    pub config: SessionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRequest {
    pub batch: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<u32>,
}

impl PlanRequest {
    pub fn new<S: Into<String>>(batch: impl IntoIterator<Item = S>) -> Self {
        Self {
            batch: batch.into_iter().map(Into::into).collect(),
            budget: None,
            min: None,
            max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResponse {
    pub session_id: String,
    pub iteration: u64,
    pub family: EstimatorFamily,
    pub budget: u64,
    pub min: u32,
    pub max: u32,
    /// Linked predictions for the batch, unclipped.
    pub p_hat: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub plan: AllocationPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRecord {
    pub id: String,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveRequest {
    pub rewards: Vec<RewardRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPrediction {
    pub id: String,
    pub p_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserveResponse {
    pub session_id: String,
    /// Iteration counter after this observation.
    pub iteration: u64,
    pub p_hat: Vec<PromptPrediction>,
    /// Mean absolute change of the linked prediction over all prompts.
    pub drift: f64,
    /// Some reward count differed from the plan (lenient sessions only).
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefsResponse {
    pub session_id: String,
    pub iteration: u64,
    pub link: Link,
    pub ids: Vec<String>,
    pub mean: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub pending: bool,
}

/// Plan awaiting its observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingPlan {
    pub iteration: u64,
    pub ids: Vec<String>,
    pub n_int: Vec<u32>,
}

/// One accepted request. The log is append-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Plan {
        iteration: u64,
        request: PlanRequest,
        plan: AllocationPlan,
    },
    Observe {
        iteration: u64,
        rewards: Vec<RewardRecord>,
        lenient: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelInfo {
    pub session_id: String,
    pub kernel_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub sessions: usize,
    pub kernels: Vec<KernelInfo>,
}

/// Persisted session. `checksum` is the hex SHA-256 of the compact JSON
/// encoding of `payload` with keys sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotBlob {
    pub format: String,
    pub version: u32,
    pub checksum: String,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionPayload {
    ids: Vec<String>,
    embeddings_digest: String,
    bandwidth: f64,
    distances: Vec<f64>,
    kernel_hash: String,
    config: SessionConfig,
    initial_mean: Vec<f64>,
    mean: Vec<f64>,
    iteration: u64,
    pending: Option<PendingPlan>,
    audit: Vec<AuditEvent>,
}

/// Serialized snapshot and, when a snapshot directory is configured, where it
/// was written.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotOutput {
    pub bytes: Vec<u8>,
    pub path: Option<PathBuf>,
}

/// Final state of an audit replay.
/// Starting point of a session, as taken by [`replay`].
#[derive(Debug, Clone)]
pub struct ReplayInputs {
    pub kernel: Arc<KernelMatrix>,
    pub ids: Vec<String>,
    pub config: SessionConfig,
    pub initial_mean: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub belief: BeliefState,
    pub iteration: u64,
    pub pending: Option<PendingPlan>,
}

/// Parses a JSON request body; errors name the offending field path.
pub fn parse_request<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            VipError::invalid(e.inner().to_string())
        } else {
            VipError::invalid(format!("{path}: {}", e.inner()))
        }
    })?;
    de.end().map_err(|e| VipError::invalid(e.to_string()))?;
    Ok(value)
}

fn index_map(ids: &[String]) -> HashMap<String, usize> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect()
}

fn resolve_ids(index: &HashMap<String, usize>, ids: &[String]) -> Result<Vec<usize>> {
    let mut seen = HashSet::with_capacity(ids.len());
    ids.iter()
        .map(|id| {
            let i = *index
                .get(id)
                .ok_or_else(|| VipError::NotFound(format!("unknown prompt id '{id}'")))?;
            if !seen.insert(i) {
                return Err(VipError::invalid(format!(
                    "prompt id '{id}' appears twice in the batch"
                )));
            }
            Ok(i)
        })
        .collect()
}

/// Builds the plan a session would return for `req` under `belief`.
fn compute_plan(
    belief: &BeliefState,
    index: &HashMap<String, usize>,
    config: &SessionConfig,
    req: &PlanRequest,
) -> Result<AllocationPlan> {
    if req.batch.is_empty() {
        return Err(VipError::invalid("batch: must name at least one prompt"));
    }
    let batch = resolve_ids(index, &req.batch)?;
    let budget = req.budget.or(config.budget).ok_or_else(|| {
        VipError::invalid("budget: required because the session has no default budget")
    })?;
    let problem = AllocationProblem {
        family: config.family,
        budget,
        min: req.min.unwrap_or(config.min),
        max: req.max.unwrap_or(config.max),
        prompts: req
            .batch
            .iter()
            .zip(coefficients(belief, &batch, config)?)
            .map(|(id, a)| PromptCoefficient { id: id.clone(), a })
            .collect(),
    };
    allocator::plan(&problem)
}

fn coefficients(belief: &BeliefState, batch: &[usize], config: &SessionConfig) -> Result<Vec<f64>> {
    belief
        .predict(batch)?
        .into_iter()
        .map(|v| {
            let inputs = match config.link {
                Link::Sigmoid => {
                    VarianceInputs::binary(v.clamp(config.clip_eps, 1.0 - config.clip_eps))
                }
                Link::Softplus => VarianceInputs::continuous(v),
            };
            allocation_coefficient(&inputs.with_sigma_z2(config.sigma_z2))
        })
        .collect()
}

/// Checks `rewards` against the pending plan and orders them as planned.
/// Returns the observation and whether any count differed from the plan.
fn match_observation(
    pending: &PendingPlan,
    index: &HashMap<String, usize>,
    rewards: &[RewardRecord],
    strict: bool,
) -> Result<(BatchObservation, bool)> {
    let mut by_id: HashMap<&str, &RewardRecord> = HashMap::with_capacity(rewards.len());
    for r in rewards {
        if by_id.insert(r.id.as_str(), r).is_some() {
            return Err(VipError::invalid(format!(
                "rewards: prompt id '{}' appears twice",
                r.id
            )));
        }
    }
    if let Some(r) = rewards.iter().find(|r| !pending.ids.contains(&r.id)) {
        return Err(VipError::Conflict(format!(
            "prompt '{}' is not part of the plan for iteration {}",
            r.id, pending.iteration
        )));
    }
    let mut lenient = false;
    let mut entries = Vec::with_capacity(pending.ids.len());
    for (id, &n) in pending.ids.iter().zip(&pending.n_int) {
        let r = by_id.get(id.as_str()).ok_or_else(|| {
            VipError::Conflict(format!(
                "no rewards for planned prompt '{id}' at iteration {}",
                pending.iteration
            ))
        })?;
        let m = r.rewards.len();
        if m != n as usize {
            if strict || m == 0 {
                return Err(VipError::invalid(format!(
                    "rewards for '{id}': expected {n}, got {m}"
                )));
            }
            lenient = true;
        }
        entries.push((index[id], r.rewards.clone()));
    }
    Ok((BatchObservation::new(entries), lenient))
}

/// Replays an audit log from `initial_mean`, re-deriving every plan and
/// applying every observation. A plan that differs from the recorded one, or an
/// out-of-order event, is an integrity error.
pub fn replay(
    kernel: Arc<KernelMatrix>,
    ids: &[String],
    config: &SessionConfig,
    initial_mean: Vec<f64>,
    audit: &[AuditEvent],
) -> Result<ReplayOutcome> {
    let index = index_map(ids);
    let mut belief = BeliefState::with_mean(kernel, config.link, config.clip_eps, initial_mean)?;
    let mut iteration = 0u64;
    let mut pending: Option<PendingPlan> = None;
    for (k, event) in audit.iter().enumerate() {
        match event {
            AuditEvent::Plan {
                iteration: it,
                request,
                plan,
            } => {
                if pending.is_some() || *it != iteration {
                    return Err(VipError::Integrity(format!(
                        "audit event {k}: plan out of order"
                    )));
                }
                let again = compute_plan(&belief, &index, config, request)?;
                if &again != plan {
                    return Err(VipError::Integrity(format!(
                        "audit event {k}: plan does not replay"
                    )));
                }
                pending = Some(PendingPlan {
                    iteration,
                    ids: request.batch.clone(),
                    n_int: plan.integer(),
                });
            }
            AuditEvent::Observe {
                iteration: it,
                rewards,
                ..
            } => {
                let p = pending.take().filter(|_| *it == iteration).ok_or_else(|| {
                    VipError::Integrity(format!("audit event {k}: observation out of order"))
                })?;
                let (obs, _) = match_observation(&p, &index, rewards, config.strict)?;
                belief = belief.update(&obs)?;
                iteration += 1;
            }
        }
    }
    Ok(ReplayOutcome {
        belief,
        iteration,
        pending,
    })
}

struct Session {
    cache: Arc<KernelCache>,
    kernel_hash: String,
    index: HashMap<String, usize>,
    config: SessionConfig,
    initial_mean: Vec<f64>,
    belief: BeliefState,
    iteration: u64,
    pending: Option<PendingPlan>,
    audit: Vec<AuditEvent>,
}

impl Session {
    fn payload(&self) -> SessionPayload {
        SessionPayload {
            ids: self.cache.ids.clone(),
            embeddings_digest: hex::encode(self.cache.embeddings_digest),
            bandwidth: self.cache.bandwidth,
            distances: self.cache.distances.lower().to_vec(),
            kernel_hash: self.kernel_hash.clone(),
            config: self.config.clone(),
            initial_mean: self.initial_mean.clone(),
            mean: self.belief.mean().to_vec(),
            iteration: self.iteration,
            pending: self.pending.clone(),
            audit: self.audit.clone(),
        }
    }

    fn from_payload(p: SessionPayload) -> Result<Self> {
        let mut digest = [0u8; 32];
        hex::decode_to_slice(&p.embeddings_digest, &mut digest).map_err(|_| {
            VipError::Integrity("embeddings_digest is not a 32-byte hex string".into())
        })?;
        let n = p.ids.len();
        let cache = KernelCache {
            bandwidth: p.bandwidth,
            ids: p.ids,
            embeddings_digest: digest,
            distances: PairwiseDistances::from_lower(n, p.distances)?,
        };
        if cache.hash() != p.kernel_hash {
            return Err(VipError::Integrity(
                "kernel does not match its recorded hash".into(),
            ));
        }
        p.config.validate(n)?;
        let kernel = Arc::new(cache.kernel()?);
        let outcome = replay(
            kernel,
            &cache.ids,
            &p.config,
            p.initial_mean.clone(),
            &p.audit,
        )?;
        if outcome.belief.mean() != p.mean.as_slice()
            || outcome.iteration != p.iteration
            || outcome.pending != p.pending
        {
            return Err(VipError::Integrity(
                "recorded state does not match its audit log".into(),
            ));
        }
        Ok(Self {
            index: index_map(&cache.ids),
            cache: Arc::new(cache),
            kernel_hash: p.kernel_hash,
            config: p.config,
            initial_mean: p.initial_mean,
            belief: outcome.belief,
            iteration: p.iteration,
            pending: p.pending,
            audit: p.audit,
        })
    }
}

/// Holds live sessions. Requests on one session are serialized by its lock;
/// different sessions run in parallel.
pub struct SessionManager {
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    snapshot_dir: Option<PathBuf>,
}

impl Default for SessionManager {
    fn default() -> Self {
        Self::new(None)
    }
}

impl SessionManager {
    pub fn new(snapshot_dir: Option<PathBuf>) -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            snapshot_dir,
        }
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| VipError::NotFound(format!("unknown session '{id}'")))
    }

    fn insert(&self, session: Session) -> SessionCreated {
        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let created = SessionCreated {
            session_id: id.clone(),
            prompts: session.cache.ids.len(),
            iteration: session.iteration,
            bandwidth: session.cache.bandwidth,
            kernel_hash: session.kernel_hash.clone(),
            config: session.config.clone(),
        };
        self.sessions
            .write()
            .insert(id, Arc::new(Mutex::new(session)));
        created
    }

    pub fn len(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn create(&self, req: CreateSessionRequest) -> Result<SessionCreated> {
        let cache = match (&req.prompts, &req.kernel_cache) {
            (None, None) => {
                return Err(VipError::invalid(
                    "one of prompts or kernel_cache is required",
                ))
            }
            (Some(records), None) => {
                KernelCache::build(&PromptSet::new(records.clone())?, req.bandwidth)?
            }
            (records, Some(path)) => {
                let cache = KernelCache::read(path)?;
                if let Some(records) = records {
                    cache.verify(&PromptSet::new(records.clone())?)?;
                }
                if let Some(h) = req.bandwidth {
                    if h != cache.bandwidth {
                        return Err(VipError::invalid(format!(
                            "bandwidth: {h} differs from the cached bandwidth {}",
                            cache.bandwidth
                        )));
                    }
                }
                cache
            }
        };
        let n = cache.ids.len();
        if n == 0 {
            return Err(VipError::invalid(
                "prompts: at least one prompt is required",
            ));
        }
        req.config.validate(n)?;
        let initial_mean = req.initial_mean.unwrap_or_else(|| vec![0.0; n]);
        if initial_mean.len() != n {
            return Err(VipError::invalid(format!(
                "initial_mean: has {} entries for {n} prompts",
                initial_mean.len()
            )));
        }
        let kernel = Arc::new(cache.kernel()?);
        let belief = BeliefState::with_mean(
            kernel,
            req.config.link,
            req.config.clip_eps,
            initial_mean.clone(),
        )?;
        Ok(self.insert(Session {
            kernel_hash: cache.hash(),
            index: index_map(&cache.ids),
            cache: Arc::new(cache),
            config: req.config,
            initial_mean,
            belief,
            iteration: 0,
            pending: None,
            audit: Vec::new(),
        }))
    }

    pub fn plan(&self, session_id: &str, req: PlanRequest) -> Result<PlanResponse> {
        let handle = self.get(session_id)?;
        let mut s = handle.lock();
        if let Some(p) = &s.pending {
            return Err(VipError::Conflict(format!(
                "iteration {} already has a plan; post its observation first",
                p.iteration
            )));
        }
        let plan = compute_plan(&s.belief, &s.index, &s.config, &req)?;
        let batch: Vec<usize> = req.batch.iter().map(|id| s.index[id]).collect();
        let response = PlanResponse {
            session_id: session_id.to_string(),
            iteration: s.iteration,
            family: s.config.family,
            budget: req
                .budget
                .or(s.config.budget)
                .expect("budget resolved by compute_plan"),
            min: req.min.unwrap_or(s.config.min),
            max: req.max.unwrap_or(s.config.max),
            p_hat: s.belief.predict(&batch)?,
            coefficients: plan_coefficients(&s, &batch)?,
            plan: plan.clone(),
        };
        let iteration = s.iteration;
        s.pending = Some(PendingPlan {
            iteration,
            ids: req.batch.clone(),
            n_int: plan.integer(),
        });
        s.audit.push(AuditEvent::Plan {
            iteration,
            request: req,
            plan,
        });
        Ok(response)
    }

    pub fn observe(&self, session_id: &str, req: ObserveRequest) -> Result<ObserveResponse> {
        let handle = self.get(session_id)?;
        let mut s = handle.lock();
        let pending = s.pending.as_ref().ok_or_else(|| {
            VipError::Conflict(format!(
                "iteration {} has no plan; request one before observing",
                s.iteration
            ))
        })?;
        let (obs, lenient) = match_observation(pending, &s.index, &req.rewards, s.config.strict)?;
        let next = s.belief.update(&obs)?;
        let before = s.belief.predict_all();
        let after = next.predict_all();
        let drift = before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / after.len() as f64;
        let p_hat = pending
            .ids
            .iter()
            .map(|id| PromptPrediction {
                id: id.clone(),
                p_hat: after[s.index[id]],
            })
            .collect();
        let iteration = s.iteration;
        s.audit.push(AuditEvent::Observe {
            iteration,
            rewards: req.rewards,
            lenient,
        });
        s.belief = next;
        s.pending = None;
        s.iteration += 1;
        Ok(ObserveResponse {
            session_id: session_id.to_string(),
            iteration: s.iteration,
            p_hat,
            drift,
            lenient,
        })
    }

    pub fn beliefs(&self, session_id: &str) -> Result<BeliefsResponse> {
        let handle = self.get(session_id)?;
        let s = handle.lock();
        Ok(BeliefsResponse {
            session_id: session_id.to_string(),
            iteration: s.iteration,
            link: s.config.link,
            ids: s.cache.ids.clone(),
            mean: s.belief.mean().to_vec(),
            p_hat: s.belief.predict_all(),
            pending: s.pending.is_some(),
        })
    }

    pub fn audit(&self, session_id: &str) -> Result<Vec<AuditEvent>> {
        Ok(self.get(session_id)?.lock().audit.clone())
    }

    /// Everything needed to replay a session through [`replay`].
    pub fn replay_inputs(&self, session_id: &str) -> Result<ReplayInputs> {
        let handle = self.get(session_id)?;
        let s = handle.lock();
        Ok(ReplayInputs {
            kernel: s.belief.kernel().clone(),
            ids: s.cache.ids.clone(),
            config: s.config.clone(),
            initial_mean: s.initial_mean.clone(),
        })
    }

    pub fn snapshot(&self, session_id: &str) -> Result<SnapshotOutput> {
        let payload = {
            let handle = self.get(session_id)?;
            let s = handle.lock();
            s.payload()
        };
        let bytes = encode_snapshot(&payload)?;
        let path = match &self.snapshot_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("{session_id}.json"));
                crate::io::write_atomic(&path, &bytes)?;
                Some(path)
            }
            None => None,
        };
        Ok(SnapshotOutput { bytes, path })
    }

    /// Starts a new session from a snapshot blob.
    pub fn restore(&self, bytes: &[u8]) -> Result<SessionCreated> {
        let blob: SnapshotBlob = parse_request(bytes)?;
        if blob.format != SNAPSHOT_FORMAT {
            return Err(VipError::invalid(format!(
                "format: expected '{SNAPSHOT_FORMAT}', got '{}'",
                blob.format
            )));
        }
        if blob.version != SNAPSHOT_VERSION {
            return Err(VipError::Version(format!(
                "snapshot version {} (supported: {SNAPSHOT_VERSION})",
                blob.version
            )));
        }
        if checksum(&blob.payload)? != blob.checksum {
            return Err(VipError::Integrity("snapshot checksum mismatch".into()));
        }
        let payload: SessionPayload = serde_json::from_value(blob.payload)
            .map_err(|e| VipError::invalid(format!("payload: {e}")))?;
        Ok(self.insert(Session::from_payload(payload)?))
    }

    pub fn health(&self) -> Health {
        let sessions = self.sessions.read();
        let mut kernels: Vec<KernelInfo> = sessions
            .iter()
            .map(|(id, s)| KernelInfo {
                session_id: id.clone(),
                kernel_hash: s.lock().kernel_hash.clone(),
            })
            .collect();
        kernels.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        Health {
            status: "ok".into(),
            version: crate::VERSION.into(),
            sessions: sessions.len(),
            kernels,
        }
    }
}

fn plan_coefficients(s: &Session, batch: &[usize]) -> Result<Vec<f64>> {
    coefficients(&s.belief, batch, &s.config)
}

fn checksum(payload: &serde_json::Value) -> Result<String> {
    let bytes = serde_json::to_vec(payload).map_err(|e| VipError::Numerical(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn encode_snapshot(payload: &SessionPayload) -> Result<Vec<u8>> {
    let value = serde_json::to_value(payload).map_err(|e| VipError::Numerical(e.to_string()))?;
    let blob = SnapshotBlob {
        format: SNAPSHOT_FORMAT.into(),
        version: SNAPSHOT_VERSION,
        checksum: checksum(&value)?,
        payload: value,
    };
    serde_json::to_vec(&blob).map_err(|e| VipError::Numerical(e.to_string()))
}
