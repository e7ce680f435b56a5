// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use std::collections::BTreeMap;

use kgsim::accel::{default_profiles, Fleet, MigProfile, PlacementPolicy, SliceId};
use kgsim::inference::{block_hashes, PrefixCacheIndex};
use kgsim::queueing::{
    ClusterQueue, LocalQueue, QueueState, QueueTopology, QueueingStrategy, QuotaEntry, QuotaOnly, ResourceFlavor,
    WorkloadSpec, WorkloadState,
};
use kgsim::sim::RngStream;
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn fleet(devices: u32) -> Fleet {
    Fleet::new(devices, 7, 8, default_profiles(), PlacementPolicy::FirstFit)
}

/// Every sequence over the default profiles with length 1..=max_len.
pub fn profile_sequences(max_len: usize) -> Vec<Vec<MigProfile>> {
    let profiles = default_profiles();
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<MigProfile>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for p in &profiles {
                let mut s = seq.clone();
                s.push(p.clone());
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Every multiset of default profiles with 1..=max_len members, listed in registry order.
pub fn profile_multisets(max_len: usize) -> Vec<Vec<MigProfile>> {
    let profiles = default_profiles();
    let index = |p: &MigProfile| profiles.iter().position(|q| q.name == p.name).unwrap();
    profile_sequences(max_len)
        .into_iter()
        .filter(|s| s.windows(2).all(|w| index(&w[0]) <= index(&w[1])))
        .collect()
}

/// Slices placed when first-fit takes `seq` in order, skipping what does not fit.
pub fn first_fit_count(devices: u32, seq: &[MigProfile]) -> usize {
    let mut f = fleet(devices);
    seq.iter().filter(|p| f.allocate(&p.name, "probe", 0).is_ok()).count()
}

/// Largest number of `items` that fit on `devices` empty devices, by exhaustive assignment.
pub fn exhaustive_max(devices: u32, items: &[MigProfile]) -> usize {
    fn go(items: &[MigProfile], free: &mut Vec<(u32, u32)>, placed: usize, best: &mut usize) {
        let Some((p, rest)) = items.split_first() else {
            *best = (*best).max(placed);
            return;
        };
        if placed + items.len() <= *best {
            return;
        }
        for d in 0..free.len() {
            let (c, m) = free[d];
            if c >= p.compute_units && m >= p.memory_units {
                free[d] = (c - p.compute_units, m - p.memory_units);
                go(rest, free, placed + 1, best);
                free[d] = (c, m);
            }
        }
        go(rest, free, placed, best);
    }
    let mut best = 0;
    go(items, &mut vec![(7, 8); devices as usize], 0, &mut best);
    best
}

#[derive(Debug, Default)]
pub struct PackingTally {
    pub instances: usize,
    pub below: usize,
    pub above: usize,
    pub first_failure: Option<String>,
}

/// First-fit against the exhaustive optimum on `instances` for 1 and 2 devices.
pub fn packing_tally(instances: &[Vec<MigProfile>]) -> PackingTally {
    let mut t = PackingTally::default();
    for devices in 1..=2 {
        for s in instances {
            t.instances += 1;
            let opt = exhaustive_max(devices, s);
            let ff = first_fit_count(devices, s);
            let bad = ff + 1 < opt || ff > opt;
            if ff + 1 < opt {
                t.below += 1;
            }
            if ff > opt {
                t.above += 1;
            }
            if bad && t.first_failure.is_none() {
                let names: Vec<&str> = s.iter().map(|p| p.name.as_str()).collect();
                t.first_failure = Some(format!("{devices} devices {names:?}: first-fit {ff}, optimum {opt}"));
            }
        }
    }
    t
}

fn gpu(n: u64) -> BTreeMap<String, u64> {
    BTreeMap::from([("gpu".to_string(), n)])
}

pub fn cluster_queue(
    name: &str,
    nominal: u64,
    cohort: Option<&str>,
    borrowing: bool,
    preemption: bool,
) -> ClusterQueue {
    ClusterQueue {
        name: name.into(),
        cohort: cohort.map(str::to_owned),
        queueing_strategy: QueueingStrategy::BestEffortFIFO,
        quota: vec![QuotaEntry {
            flavor: "a100".into(),
            resource: "gpu".into(),
            nominal,
        }],
        borrowing_enabled: borrowing,
        preemption_enabled: preemption,
    }
}

pub fn topology(capacity: u64, cqs: Vec<ClusterQueue>) -> QueueTopology {
    let lq_target = |i: usize| cqs[i.min(cqs.len() - 1)].name.clone();
    let local_queues = vec![
        LocalQueue {
            name: "lq-medium".into(),
            namespace: "whisper".into(),
            cluster_queue: lq_target(0),
        },
        LocalQueue {
            name: "lq-large".into(),
            namespace: "whisper".into(),
            cluster_queue: lq_target(1),
        },
    ];
    QueueTopology {
        flavors: vec![ResourceFlavor {
            name: "a100".into(),
            capacities: gpu(capacity),
        }],
        cluster_queues: cqs,
        local_queues,
    }
}

pub fn workload(job_id: &str, priority: i32, gpus: u64) -> WorkloadSpec {
    WorkloadSpec {
        job_id: job_id.into(),
        priority,
        request: gpu(gpus),
    }
}

fn random_topology(rng: &mut impl Rng) -> QueueTopology {
    match rng.random_range(0..3) {
        0 => {
            let n = rng.random_range(1..=6);
            topology(n, vec![cluster_queue("cq", n, None, false, rng.random_bool(0.7))])
        }
        1 => {
            let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
            topology(
                a + b,
                vec![
                    cluster_queue("cq-medium", a, Some("c"), rng.random_bool(0.7), rng.random_bool(0.5)),
                    cluster_queue("cq-large", b, Some("c"), rng.random_bool(0.7), rng.random_bool(0.5)),
                ],
            )
        }
        _ => {
            let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
            topology(
                a + b,
                vec![
                    cluster_queue("cq-medium", a, None, false, rng.random_bool(0.5)),
                    cluster_queue("cq-large", b, None, false, rng.random_bool(0.5)),
                ],
            )
        }
    }
}

/// Quota safety recomputed from workload states, independent of the queue's own bookkeeping.
pub fn quota_safety(q: &QueueState) -> Result<(), String> {
    let cqs = q.cluster_queues();
    let mut used = vec![0u64; cqs.len()];
    for w in q.workloads().iter().filter(|w| w.is_admitted()) {
        used[w.cluster_queue] += w.request.get("gpu").copied().unwrap_or(0);
    }
    let nominal = |c: &ClusterQueue| c.quota.iter().map(|e| e.nominal).sum::<u64>();
    for (i, c) in cqs.iter().enumerate() {
        if q.usage(&c.name, "a100", "gpu") != used[i] {
            return Err(format!(
                "{}: usage {} but admitted requests sum to {}",
                c.name,
                q.usage(&c.name, "a100", "gpu"),
                used[i]
            ));
        }
        let borrowed = q.borrowed(&c.name, "a100", "gpu");
        if used[i] > nominal(c) + borrowed {
            return Err(format!(
                "{}: {} admitted over nominal {} + borrowed {borrowed}",
                c.name,
                used[i],
                nominal(c)
            ));
        }
        if !c.borrowing_enabled && used[i] > nominal(c) {
            return Err(format!("{}: borrowed without borrowing enabled", c.name));
        }
        if let Some(cohort) = &c.cohort {
            let members: Vec<usize> = (0..cqs.len())
                .filter(|&j| cqs[j].cohort.as_ref() == Some(cohort))
                .collect();
            let total: u64 = members.iter().map(|&j| used[j]).sum();
            let cap: u64 = members.iter().map(|&j| nominal(&cqs[j])).sum();
            if total > cap {
                return Err(format!("cohort {cohort}: {total} admitted over {cap}"));
            }
        }
    }
    Ok(())
}

/// Random submit / finish / scan sequences with preemption in the mix. Returns
/// the number of operations checked.
pub fn quota_fuzz(sequences: usize, seed: u64) -> Result<usize, String> {
    let mut stream = RngStream::new(seed, "quota-fuzz");
    let rng = stream.rng();
    let mut checked = 0;
    for seq in 0..sequences {
        let mut q = random_topology(rng).build().map_err(|e| e.to_string())?;
        let ops = rng.random_range(1..60);
        let mut t = 0;
        for n in 0..ops {
            t += rng.random_range(0..3);
            match rng.random_range(0..3) {
                0 => {
                    let lq = if rng.random_bool(0.5) { "lq-large" } else { "lq-medium" };
                    let _ = q.submit(
                        workload(&format!("j{n}"), rng.random_range(0..3), rng.random_range(1..=3)),
                        lq,
                        t,
                    );
                }
                1 => {
                    let running: Vec<_> = q
                        .workloads()
                        .iter()
                        .filter(|w| w.state == WorkloadState::Running)
                        .map(|w| w.id)
                        .collect();
                    if let Some(&id) = running.choose(rng) {
                        q.finish(id, t).map_err(|e| e.to_string())?;
                    }
                }
                _ => {
                    let before: Vec<u32> = q.workloads().iter().map(|w| w.restart_count).collect();
                    let out = q.admit_scan(t, &mut QuotaOnly);
                    for v in &out.evicted {
                        let w = q.workload(*v);
                        if w.state != WorkloadState::Pending || w.restart_count != before[v.0] + 1 {
                            return Err(format!("sequence {seq}: victim {} not requeued", w.job_id));
                        }
                        let beneficiary = out
                            .admitted
                            .iter()
                            .map(|a| q.workload(*a))
                            .any(|a| a.cluster_queue == w.cluster_queue && a.priority > w.priority);
                        if !beneficiary {
                            return Err(format!(
                                "sequence {seq}: {} evicted without a higher-priority admission",
                                w.job_id
                            ));
                        }
                    }
                    for id in &out.admitted {
                        q.mark_running(*id).map_err(|e| e.to_string())?;
                    }
                }
            }
            quota_safety(&q).map_err(|e| format!("sequence {seq} op {n}: {e}"))?;
            q.check_invariants()
                .map_err(|e| format!("sequence {seq} op {n}: {e}"))?;
            checked += 1;
        }
        // drain: every workload must finish
        for round in 0.. {
            if q.workloads().iter().all(|w| w.state == WorkloadState::Finished) {
                break;
            }
            if round > 200 {
                return Err(format!("sequence {seq}: workloads never finish"));
            }
            t += 1;
            let out = q.admit_scan(t, &mut QuotaOnly);
            for id in &out.admitted {
                q.mark_running(*id).map_err(|e| e.to_string())?;
            }
            let running: Vec<_> = q
                .workloads()
                .iter()
                .filter(|w| w.state == WorkloadState::Running)
                .map(|w| w.id)
                .collect();
            for id in running {
                q.finish(id, t).map_err(|e| e.to_string())?;
            }
            quota_safety(&q).map_err(|e| format!("sequence {seq} drain: {e}"))?;
        }
    }
    Ok(checked)
}

/// Random allocate/free sequences on small fleets, checked against an
/// independent ledger of live slices. Returns the number of operations checked.
pub fn geometry_fuzz(sequences: usize, seed: u64) -> Result<usize, String> {
    let mut stream = RngStream::new(seed, "geometry-fuzz");
    let rng = stream.rng();
    let profiles = default_profiles();
    let mut checked = 0;
    for seq in 0..sequences {
        let devices = rng.random_range(1..=4u32);
        let policy = if rng.random_bool(0.5) {
            PlacementPolicy::FirstFit
        } else {
            PlacementPolicy::BestFit
        };
        let mut f = Fleet::new(devices, 7, 8, profiles.clone(), policy);
        let mut live: Vec<(SliceId, u32, u32, u32)> = Vec::new();
        let mut freed: Vec<SliceId> = Vec::new();
        let ops = rng.random_range(1..80);
        for n in 0..ops {
            let t = n as u64;
            if live.is_empty() || rng.random_bool(0.6) {
                let p = profiles.choose(rng).unwrap();
                let mut free = vec![(7u32, 8u32); devices as usize];
                for &(_, d, c, m) in &live {
                    free[d as usize].0 -= c;
                    free[d as usize].1 -= m;
                }
                let fits = free.iter().any(|&(c, m)| c >= p.compute_units && m >= p.memory_units);
                match f.allocate(&p.name, "fuzz", t) {
                    Ok(id) => {
                        if !fits {
                            return Err(format!("sequence {seq}: {} placed with no room", p.name));
                        }
                        let d = f.slice(id).unwrap().device_id;
                        live.push((id, d, p.compute_units, p.memory_units));
                    }
                    Err(_) if fits => return Err(format!("sequence {seq}: {} refused with room", p.name)),
                    Err(_) => {}
                }
            } else if !freed.is_empty() && rng.random_bool(0.1) {
                let id = *freed.choose(rng).unwrap();
                if f.free(id, t).is_ok() {
                    return Err(format!("sequence {seq}: double free accepted"));
                }
            } else {
                let i = rng.random_range(0..live.len());
                let (id, ..) = live.swap_remove(i);
                f.free(id, t).map_err(|e| format!("sequence {seq}: {e}"))?;
                freed.push(id);
            }
            let mut used = vec![(0u32, 0u32); devices as usize];
            for &(_, d, c, m) in &live {
                used[d as usize].0 += c;
                used[d as usize].1 += m;
            }
            for (i, dev) in f.devices().iter().enumerate() {
                if used[i].0 > 7 || used[i].1 > 8 || (dev.used_compute(), dev.used_memory()) != used[i] {
                    return Err(format!("sequence {seq} op {n}: device {i} geometry {used:?}"));
                }
            }
            f.check_invariants()
                .map_err(|e| format!("sequence {seq} op {n}: {e}"))?;
            checked += 1;
        }
        for (id, ..) in live.drain(..) {
            f.free(id, ops as u64).map_err(|e| e.to_string())?;
        }
        if !f.is_empty() {
            return Err(format!("sequence {seq}: fleet not empty after freeing every slice"));
        }
    }
    Ok(checked)
}

fn lcp(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn random_corpus(rng: &mut impl Rng) -> Vec<Vec<u32>> {
    let n = rng.random_range(1..=50);
    let mut prompts: Vec<Vec<u32>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = match prompts.choose(rng) {
            Some(base) if rng.random_bool(0.6) => {
                let keep = rng.random_range(0..=base.len());
                base[..keep].to_vec()
            }
            _ => Vec::new(),
        };
        let extra = rng.random_range(0..40);
        p.extend((0..extra).map(|_| rng.random_range(0..3u32)));
        prompts.push(p);
    }
    prompts
}

/// Prefix-match oracle and cache invariants over random corpora. Returns the
/// number of queries checked.
pub fn cache_oracle(corpora: usize, seed: u64) -> Result<usize, String> {
    let mut stream = RngStream::new(seed, "cache-oracle");
    let rng = stream.rng();
    let mut queries = 0;
    for c in 0..corpora {
        let block = rng.random_range(1..=8u32);
        let bs = block as usize;
        let corpus = random_corpus(rng);

        // unbounded: prefix_match is the block-floored longest common prefix
        let mut cache = PrefixCacheIndex::new(block, u64::MAX / 2);
        let mut stored: Vec<&Vec<u32>> = Vec::new();
        for (i, p) in corpus.iter().enumerate() {
            let probes = corpus.iter().chain(std::iter::once(p));
            for q in probes {
                let best = stored.iter().map(|s| lcp(q, s)).max().unwrap_or(0);
                let expect = (best / bs * bs) as u64;
                let got = cache.prefix_match(q);
                if got != expect {
                    return Err(format!(
                        "corpus {c} after {i} inserts: prefix_match {got}, oracle {expect}"
                    ));
                }
                queries += 1;
            }
            cache.insert_prompt(p, i as u64);
            stored.push(p);
        }

        // bounded: capacity and prefix closure after every insert
        let cap_blocks = rng.random_range(1..=24u64);
        let mut cache = PrefixCacheIndex::new(block, cap_blocks * u64::from(block));
        for (i, p) in corpus.iter().enumerate() {
            let out = cache.insert_prompt(p, i as u64);
            if cache.resident_tokens() > cache.capacity_tokens() {
                return Err(format!(
                    "corpus {c}: {} tokens over capacity {}",
                    cache.resident_tokens(),
                    cache.capacity_tokens()
                ));
            }
            for s in &corpus {
                let chain = block_hashes(s, block);
                let resident: Vec<bool> = chain.iter().map(|h| cache.contains(*h)).collect();
                if resident.windows(2).any(|w| w[1] && !w[0]) {
                    return Err(format!("corpus {c}: resident set not prefix-closed after insert {i}"));
                }
                let expect = resident.iter().take_while(|r| **r).count() as u64 * u64::from(block);
                if cache.prefix_match(s) < expect {
                    return Err(format!("corpus {c}: prefix_match below resident prefix"));
                }
            }
            if out.evicted.iter().any(|h| cache.contains(*h)) {
                return Err(format!("corpus {c}: evicted block still resident"));
            }
            cache.check_invariants().map_err(|e| format!("corpus {c}: {e}"))?;
        }
    }
    Ok(queries)
}
