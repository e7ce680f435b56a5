// SPDX-License-Identifier: Apache-2.0

//! Kueue-style admission: LocalQueue -> ClusterQueue -> ResourceFlavor.
//!
//! Workloads wait in their ClusterQueue's pending set ordered by
//! `(priority desc, created_at asc, submission sequence asc, job_id asc)`.
//! A scan walks every pending workload in that order and admits each one that
//! fits its quota and can be placed; non-fitting workloads are skipped rather
//! than blocking the queue (BestEffortFIFO). With preemption enabled, a
//! workload that does not fit may evict strictly lower-priority workloads of
//! its own ClusterQueue.
//!
//! The "pure jobs" baseline lives here too: pods exist from submission and the
//! next pod to start is drawn uniformly at random from the pending set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Millis, RngStream};

/// resource name -> units
pub type Resources = BTreeMap<String, u64>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueueError {
    #[error("unknown local queue `{0}`")]
    UnknownLocalQueue(String),
    #[error("local queue `{local}` references unknown cluster queue `{cluster}`")]
    UnknownClusterQueue { local: String, cluster: String },
    #[error("cluster queue `{cluster}` references unknown flavor `{flavor}`")]
    UnknownFlavor { cluster: String, flavor: String },
    #[error("workload `{job}` requests resources no flavor of `{cluster}` provides")]
    UnknownResource { job: String, cluster: String },
    #[error("workload `{job}` can never be admitted: needs {need} `{resource}`, at most {max} available")]
    Infeasible {
        job: String,
        resource: String,
        need: u64,
        max: u64,
    },
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("workload {id} cannot move from {from:?} to {to:?}")]
    InvalidTransition {
        id: WorkloadId,
        from: WorkloadState,
        to: WorkloadState,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceFlavor {
    pub name: String,
    pub capacities: Resources,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum QueueingStrategy {
    #[default]
    BestEffortFIFO,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuotaEntry {
    pub flavor: String,
    pub resource: String,
    pub nominal: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterQueue {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<String>,
    #[serde(default)]
    pub queueing_strategy: QueueingStrategy,
    pub quota: Vec<QuotaEntry>,
    #[serde(default)]
    pub borrowing_enabled: bool,
    #[serde(default)]
    pub preemption_enabled: bool,
}

impl ClusterQueue {
    fn nominal(&self, flavor: &str, resource: &str) -> u64 {
        self.quota
            .iter()
            .filter(|q| q.flavor == flavor && q.resource == resource)
            .map(|q| q.nominal)
            .sum()
    }

    /// First flavor (in declaration order) that offers every requested resource.
    fn flavor_for(&self, request: &Resources) -> Option<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for q in &self.quota {
            if !seen.contains(&q.flavor.as_str()) {
                seen.push(&q.flavor);
            }
        }
        seen.into_iter().find(|f| {
            request
                .keys()
                .all(|r| self.quota.iter().any(|q| q.flavor == *f && &q.resource == r))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalQueue {
    pub name: String,
    pub namespace: String,
    pub cluster_queue: String,
}

/// Queue section of a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueTopology {
    pub flavors: Vec<ResourceFlavor>,
    pub cluster_queues: Vec<ClusterQueue>,
    pub local_queues: Vec<LocalQueue>,
}

impl QueueTopology {
    pub fn build(&self) -> Result<QueueState, QueueError> {
        QueueState::new(
            self.flavors.clone(),
            self.cluster_queues.clone(),
            self.local_queues.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorkloadId(pub usize);

impl fmt::Display for WorkloadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "wl-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadState {
    Pending,
    Admitted,
    Running,
    Evicted,
    Finished,
}

/// What a job asks of the queueing layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub job_id: String,
    pub priority: i32,
    pub request: Resources,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadEntry {
    pub id: WorkloadId,
    pub job_id: String,
    pub priority: i32,
    pub created_at: Millis,
    pub submit_seq: u64,
    pub request: Resources,
    pub state: WorkloadState,
    pub admitted_at: Option<Millis>,
    pub finished_at: Option<Millis>,
    pub restart_count: u32,
    pub cluster_queue: usize,
    pub flavor: String,
    admission_seq: u64,
}

impl WorkloadEntry {
    fn order_key(&self) -> PendingKey {
        PendingKey {
            neg_priority: -i64::from(self.priority),
            created_at: self.created_at,
            submit_seq: self.submit_seq,
            job_id: self.job_id.clone(),
            id: self.id,
        }
    }

    pub fn is_admitted(&self) -> bool {
        matches!(self.state, WorkloadState::Admitted | WorkloadState::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct PendingKey {
    neg_priority: i64,
    created_at: Millis,
    submit_seq: u64,
    job_id: String,
    id: WorkloadId,
}

/// Callbacks into whoever owns the devices.
pub trait AdmissionHost {
    /// Reserve devices for the workload. Returns false if placement fails.
    fn try_place(&mut self, workload: &WorkloadEntry) -> bool;
    /// Release whatever `try_place` reserved; called when the workload is evicted.
    fn release(&mut self, workload: &WorkloadEntry);
}

/// Quota-only host: every placement succeeds.
pub struct QuotaOnly;

impl AdmissionHost for QuotaOnly {
    fn try_place(&mut self, _: &WorkloadEntry) -> bool {
        true
    }
    fn release(&mut self, _: &WorkloadEntry) {}
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanOutcome {
    pub admitted: Vec<WorkloadId>,
    pub evicted: Vec<WorkloadId>,
}

type QuotaKey = (String, String);

#[derive(Debug, Clone)]
pub struct QueueState {
    flavors: Vec<ResourceFlavor>,
    cluster_queues: Vec<ClusterQueue>,
    local_queues: Vec<LocalQueue>,
    workloads: Vec<WorkloadEntry>,
    pending: Vec<BTreeSet<PendingKey>>,
    usage: Vec<BTreeMap<QuotaKey, u64>>,
    next_submit_seq: u64,
    next_admission_seq: u64,
}

impl QueueState {
    pub fn new(
        flavors: Vec<ResourceFlavor>,
        cluster_queues: Vec<ClusterQueue>,
        local_queues: Vec<LocalQueue>,
    ) -> Result<Self, QueueError> {
        for f in &flavors {
            if f.capacities.is_empty() || f.capacities.values().any(|&c| c == 0) {
                return Err(QueueError::Topology(format!(
                    "flavor `{}` capacities must be strictly positive",
                    f.name
                )));
            }
        }
        for cq in &cluster_queues {
            if cq.quota.is_empty() {
                return Err(QueueError::Topology(format!(
                    "cluster queue `{}` has no quota",
                    cq.name
                )));
            }
            for q in &cq.quota {
                if !flavors.iter().any(|f| f.name == q.flavor) {
                    return Err(QueueError::UnknownFlavor {
                        cluster: cq.name.clone(),
                        flavor: q.flavor.clone(),
                    });
                }
            }
            if cq.borrowing_enabled && cq.cohort.is_none() {
                return Err(QueueError::Topology(format!(
                    "cluster queue `{}` enables borrowing without a cohort",
                    cq.name
                )));
            }
        }
        for lq in &local_queues {
            if !cluster_queues.iter().any(|c| c.name == lq.cluster_queue) {
                return Err(QueueError::UnknownClusterQueue {
                    local: lq.name.clone(),
                    cluster: lq.cluster_queue.clone(),
                });
            }
        }
        let n = cluster_queues.len();
        Ok(Self {
            flavors,
            cluster_queues,
            local_queues,
            workloads: Vec::new(),
            pending: vec![BTreeSet::new(); n],
            usage: vec![BTreeMap::new(); n],
            next_submit_seq: 0,
            next_admission_seq: 0,
        })
    }

    pub fn workload(&self, id: WorkloadId) -> &WorkloadEntry {
        &self.workloads[id.0]
    }

    pub fn workloads(&self) -> &[WorkloadEntry] {
        &self.workloads
    }

    pub fn cluster_queues(&self) -> &[ClusterQueue] {
        &self.cluster_queues
    }

    pub fn pending_count(&self) -> usize {
        self.pending.iter().map(BTreeSet::len).sum()
    }

    pub fn usage(&self, cluster_queue: &str, flavor: &str, resource: &str) -> u64 {
        self.cq_index(cluster_queue)
            .and_then(|i| self.usage[i].get(&(flavor.to_owned(), resource.to_owned())))
            .copied()
            .unwrap_or(0)
    }

    /// Units of `resource` the ClusterQueue currently holds beyond its nominal quota.
    pub fn borrowed(&self, cluster_queue: &str, flavor: &str, resource: &str) -> u64 {
        let Some(i) = self.cq_index(cluster_queue) else {
            return 0;
        };
        let nominal = self.cluster_queues[i].nominal(flavor, resource);
        self.usage(cluster_queue, flavor, resource).saturating_sub(nominal)
    }

    fn cq_index(&self, name: &str) -> Option<usize> {
        self.cluster_queues.iter().position(|c| c.name == name)
    }

    fn cohort_members(&self, cq: usize) -> Vec<usize> {
        match &self.cluster_queues[cq].cohort {
            None => vec![cq],
            Some(c) => self
                .cluster_queues
                .iter()
                .enumerate()
                .filter(|(_, q)| q.cohort.as_deref() == Some(c.as_str()))
                .map(|(i, _)| i)
                .collect(),
        }
    }

    /// Largest amount of `resource` a workload in `cq` could ever hold.
    fn max_obtainable(&self, cq: usize, flavor: &str, resource: &str) -> u64 {
        let q = &self.cluster_queues[cq];
        let quota = if q.borrowing_enabled {
            self.cohort_members(cq)
                .iter()
                .map(|&m| self.cluster_queues[m].nominal(flavor, resource))
                .sum()
        } else {
            q.nominal(flavor, resource)
        };
        let cap = self
            .flavors
            .iter()
            .find(|f| f.name == flavor)
            .and_then(|f| f.capacities.get(resource))
            .copied()
            .unwrap_or(0);
        quota.min(cap)
    }

    pub fn submit(
        &mut self,
        spec: WorkloadSpec,
        local_queue: &str,
        now: Millis,
    ) -> Result<(WorkloadId, usize), QueueError> {
        let lq = self
            .local_queues
            .iter()
            .find(|l| l.name == local_queue)
            .ok_or_else(|| QueueError::UnknownLocalQueue(local_queue.to_owned()))?;
        let cq = self.cq_index(&lq.cluster_queue).expect("validated in new()");
        let flavor = self.cluster_queues[cq]
            .flavor_for(&spec.request)
            .ok_or_else(|| QueueError::UnknownResource {
                job: spec.job_id.clone(),
                cluster: self.cluster_queues[cq].name.clone(),
            })?
            .to_owned();
        for (res, &need) in &spec.request {
            let max = self.max_obtainable(cq, &flavor, res);
            if need > max {
                return Err(QueueError::Infeasible {
                    job: spec.job_id,
                    resource: res.clone(),
                    need,
                    max,
                });
            }
        }
        let id = WorkloadId(self.workloads.len());
        let entry = WorkloadEntry {
            id,
            job_id: spec.job_id,
            priority: spec.priority,
            created_at: now,
            submit_seq: self.next_submit_seq,
            request: spec.request,
            state: WorkloadState::Pending,
            admitted_at: None,
            finished_at: None,
            restart_count: 0,
            cluster_queue: cq,
            flavor,
            admission_seq: 0,
        };
        self.next_submit_seq += 1;
        let key = entry.order_key();
        self.workloads.push(entry);
        self.pending[cq].insert(key.clone());
        let position = self.pending[cq].range(..&key).count();
        Ok((id, position))
    }

    /// Would `w` fit if the workloads in `removed` released their quota?
    fn fits(&self, w: &WorkloadEntry, removed: &[WorkloadId]) -> bool {
        let cq = w.cluster_queue;
        let queue = &self.cluster_queues[cq];
        let members = self.cohort_members(cq);
        for (res, &need) in &w.request {
            let key = (w.flavor.clone(), res.clone());
            let freed_by = |m: usize| -> u64 {
                removed
                    .iter()
                    .map(|r| &self.workloads[r.0])
                    .filter(|r| r.cluster_queue == m && r.flavor == w.flavor)
                    .map(|r| r.request.get(res).copied().unwrap_or(0))
                    .sum()
            };
            let used = |m: usize| -> u64 { self.usage[m].get(&key).copied().unwrap_or(0) - freed_by(m) };
            let own_used = used(cq);
            let own_ok = own_used + need <= queue.nominal(&w.flavor, res);
            if queue.cohort.is_some() {
                let cohort_used: u64 = members.iter().map(|&m| used(m)).sum();
                let cohort_nominal: u64 = members
                    .iter()
                    .map(|&m| self.cluster_queues[m].nominal(&w.flavor, res))
                    .sum();
                if cohort_used + need > cohort_nominal {
                    return false;
                }
            }
            if !own_ok && !queue.borrowing_enabled {
                return false;
            }
            let cap = self
                .flavors
                .iter()
                .find(|f| f.name == w.flavor)
                .and_then(|f| f.capacities.get(res))
                .copied()
                .unwrap_or(0);
            let flavor_used: u64 = (0..self.cluster_queues.len()).map(used).sum();
            if flavor_used + need > cap {
                return false;
            }
        }
        true
    }

    fn charge(&mut self, id: WorkloadId, sign: i8) {
        let w = &self.workloads[id.0];
        let cq = w.cluster_queue;
        for (res, &units) in &w.request {
            let slot = self.usage[cq].entry((w.flavor.clone(), res.clone())).or_insert(0);
            if sign > 0 {
                *slot += units;
            } else {
                *slot -= units;
            }
        }
    }

    /// Victims that would let `pending_high` fit, most-expendable first.
    ///
    /// Candidates are admitted workloads of the same ClusterQueue with strictly
    /// lower priority, ordered by priority ascending then most recently
    /// admitted first. Returns an empty list when preemption is disabled or
    /// when even evicting every candidate would not free enough quota.
    pub fn preempt_for(&self, pending_high: WorkloadId) -> Vec<WorkloadId> {
        let w = &self.workloads[pending_high.0];
        if !self.cluster_queues[w.cluster_queue].preemption_enabled {
            return Vec::new();
        }
        let mut candidates: Vec<&WorkloadEntry> = self
            .workloads
            .iter()
            .filter(|c| c.is_admitted() && c.cluster_queue == w.cluster_queue && c.priority < w.priority)
            .collect();
        candidates.sort_by(|a, b| {
            a.priority
                .cmp(&b.priority)
                .then(b.admitted_at.cmp(&a.admitted_at))
                .then(b.admission_seq.cmp(&a.admission_seq))
        });
        let mut victims = Vec::new();
        for c in candidates {
            victims.push(c.id);
            if self.fits(w, &victims) {
                return victims;
            }
        }
        Vec::new()
    }

    fn admit(&mut self, id: WorkloadId, now: Millis) {
        let key = self.workloads[id.0].order_key();
        let cq = self.workloads[id.0].cluster_queue;
        self.pending[cq].remove(&key);
        self.charge(id, 1);
        let seq = self.next_admission_seq;
        self.next_admission_seq += 1;
        let w = &mut self.workloads[id.0];
        w.state = WorkloadState::Admitted;
        w.admitted_at = Some(now);
        w.admission_seq = seq;
    }

    /// Evict an admitted workload back to Pending (restart from scratch).
    pub fn evict(&mut self, id: WorkloadId, host: &mut dyn AdmissionHost) -> Result<(), QueueError> {
        let state = self.workloads[id.0].state;
        if !matches!(state, WorkloadState::Admitted | WorkloadState::Running) {
            return Err(QueueError::InvalidTransition {
                id,
                from: state,
                to: WorkloadState::Evicted,
            });
        }
        self.workloads[id.0].state = WorkloadState::Evicted;
        self.charge(id, -1);
        host.release(&self.workloads[id.0]);
        let w = &mut self.workloads[id.0];
        w.state = WorkloadState::Pending;
        w.admitted_at = None;
        w.restart_count += 1;
        let key = w.order_key();
        let cq = w.cluster_queue;
        self.pending[cq].insert(key);
        Ok(())
    }

    /// One admission pass over every pending workload, in queue order.
    pub fn admit_scan(&mut self, now: Millis, host: &mut dyn AdmissionHost) -> ScanOutcome {
        let mut order: Vec<PendingKey> = self.pending.iter().flatten().cloned().collect();
        order.sort();
        let mut out = ScanOutcome::default();
        for key in order {
            let id = key.id;
            if self.workloads[id.0].state != WorkloadState::Pending {
                continue;
            }
            if self.fits(&self.workloads[id.0], &[]) {
                if host.try_place(&self.workloads[id.0]) {
                    self.admit(id, now);
                    out.admitted.push(id);
                }
                continue;
            }
            let victims = self.preempt_for(id);
            if victims.is_empty() {
                continue;
            }
            for v in &victims {
                self.evict(*v, host).expect("victims are admitted");
                out.evicted.push(*v);
            }
            if self.fits(&self.workloads[id.0], &[]) && host.try_place(&self.workloads[id.0]) {
                self.admit(id, now);
                out.admitted.push(id);
            }
        }
        out
    }

    pub fn mark_running(&mut self, id: WorkloadId) -> Result<(), QueueError> {
        let w = &mut self.workloads[id.0];
        if w.state != WorkloadState::Admitted {
            return Err(QueueError::InvalidTransition {
                id,
                from: w.state,
                to: WorkloadState::Running,
            });
        }
        w.state = WorkloadState::Running;
        Ok(())
    }

    /// Running -> Finished; releases the workload's quota.
    pub fn finish(&mut self, id: WorkloadId, now: Millis) -> Result<(), QueueError> {
        let state = self.workloads[id.0].state;
        if state != WorkloadState::Running {
            return Err(QueueError::InvalidTransition {
                id,
                from: state,
                to: WorkloadState::Finished,
            });
        }
        self.charge(id, -1);
        let w = &mut self.workloads[id.0];
        w.state = WorkloadState::Finished;
        w.finished_at = Some(now);
        Ok(())
    }

    /// Quota safety across ClusterQueues, cohorts and flavors.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut recomputed: Vec<BTreeMap<QuotaKey, u64>> = vec![BTreeMap::new(); self.cluster_queues.len()];
        for w in self.workloads.iter().filter(|w| w.is_admitted()) {
            for (res, &u) in &w.request {
                *recomputed[w.cluster_queue]
                    .entry((w.flavor.clone(), res.clone()))
                    .or_insert(0) += u;
            }
        }
        for (i, cq) in self.cluster_queues.iter().enumerate() {
            for (key, &used) in &self.usage[i] {
                if recomputed[i].get(key).copied().unwrap_or(0) != used {
                    return Err(format!("usage counter drift in `{}` for {:?}", cq.name, key));
                }
                let nominal = cq.nominal(&key.0, &key.1);
                if used > nominal && !cq.borrowing_enabled {
                    return Err(format!("`{}` exceeds nominal quota without borrowing", cq.name));
                }
            }
            if cq.cohort.is_some() {
                let members = self.cohort_members(i);
                for q in &cq.quota {
                    let key = (q.flavor.clone(), q.resource.clone());
                    let used: u64 = members
                        .iter()
                        .map(|&m| self.usage[m].get(&key).copied().unwrap_or(0))
                        .sum();
                    let nominal: u64 = members
                        .iter()
                        .map(|&m| self.cluster_queues[m].nominal(&key.0, &key.1))
                        .sum();
                    if used > nominal {
                        return Err(format!("cohort of `{}` over its summed quota", cq.name));
                    }
                }
            }
        }
        for f in &self.flavors {
            for (res, &cap) in &f.capacities {
                let key = (f.name.clone(), res.clone());
                let used: u64 = self.usage.iter().map(|u| u.get(&key).copied().unwrap_or(0)).sum();
                if used > cap {
                    return Err(format!("flavor `{}` over capacity for `{res}`", f.name));
                }
            }
        }
        Ok(())
    }
}

/// Pending pods in the no-Kueue baseline: they exist from submission and are
/// started by the default scheduler in an order we model as uniform random.
#[derive(Debug, Clone, Default)]
pub struct BaselinePodSet {
    pods: Vec<PendingPod>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingPod {
    pub job_index: usize,
    pub created_at: Millis,
    pub submit_seq: u64,
}

impl BaselinePodSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pod: PendingPod) {
        let at = self.pods.partition_point(|p| p.submit_seq < pod.submit_seq);
        self.pods.insert(at, pod);
    }

    pub fn len(&self) -> usize {
        self.pods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pods.is_empty()
    }

    pub fn pods(&self) -> &[PendingPod] {
        &self.pods
    }

    /// Uniformly draw one pod among those accepted by `feasible` and remove it.
    pub fn pick_feasible<F>(&mut self, rng: &mut RngStream, mut feasible: F) -> Option<PendingPod>
    where
        F: FnMut(&PendingPod) -> bool,
    {
        let candidates: Vec<usize> = (0..self.pods.len()).filter(|&i| feasible(&self.pods[i])).collect();
        if candidates.is_empty() {
            return None;
        }
        let i = if candidates.len() == 1 {
            candidates[0]
        } else {
            candidates[rng.rng().random_range(0..candidates.len())]
        };
        Some(self.pods.remove(i))
    }
}

/// Start up to `free_slots` pods chosen uniformly at random (seeded).
pub fn baseline_select(pod_set: &mut BaselinePodSet, free_slots: usize, rng: &mut RngStream) -> Vec<PendingPod> {
    let mut out = Vec::new();
    for _ in 0..free_slots {
        match pod_set.pick_feasible(rng, |_| true) {
            Some(p) => out.push(p),
            None => break,
        }
    }
    out
}
