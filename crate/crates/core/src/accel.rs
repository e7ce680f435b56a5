// SPDX-License-Identifier: Apache-2.0

//! GPU fleet model with MIG-style unit geometry and just-in-time slicing.
//!
//! Each device exposes a grid of compute and memory units (7 / 8 for an
//! A100-class part). A profile occupies a fixed number of each. Placement is a
//! pure unit-count check; no positional start-index rules are modeled.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::Millis;

pub const DEFAULT_COMPUTE_UNITS: u32 = 7;
pub const DEFAULT_MEMORY_UNITS: u32 = 8;
pub const FULL_PROFILE: &str = "full";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccelError {
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("no device can host profile `{0}`")]
    NoCapacity(String),
    #[error("slice {0} is not allocated (double free?)")]
    UnknownSlice(SliceId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MigProfile {
    pub name: String,
    pub compute_units: u32,
    pub memory_units: u32,
}

impl MigProfile {
    pub fn new(name: &str, compute_units: u32, memory_units: u32) -> Self {
        Self {
            name: name.to_owned(),
            compute_units,
            memory_units,
        }
    }

    pub fn is_full(&self) -> bool {
        self.name == FULL_PROFILE
    }
}

/// Default profile table: 1g.5gb, 3g.20gb and the whole device.
pub fn default_profiles() -> Vec<MigProfile> {
    vec![
        MigProfile::new("1g.5gb", 1, 1),
        MigProfile::new("3g.20gb", 3, 4),
        MigProfile::new(FULL_PROFILE, DEFAULT_COMPUTE_UNITS, DEFAULT_MEMORY_UNITS),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementPolicy {
    #[default]
    FirstFit,
    BestFit,
}

impl PlacementPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlacementPolicy::FirstFit => "first-fit",
            PlacementPolicy::BestFit => "best-fit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SliceId(pub u64);

impl fmt::Display for SliceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "slice-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceAllocation {
    pub slice_id: SliceId,
    pub device_id: u32,
    pub profile: MigProfile,
    pub job_id: String,
    pub allocated_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpuDevice {
    pub device_id: u32,
    pub compute_capacity: u32,
    pub memory_capacity: u32,
    used_compute: u32,
    used_memory: u32,
    slices: Vec<SliceId>,
}

impl GpuDevice {
    pub fn new(device_id: u32, compute_capacity: u32, memory_capacity: u32) -> Self {
        Self {
            device_id,
            compute_capacity,
            memory_capacity,
            used_compute: 0,
            used_memory: 0,
            slices: Vec::new(),
        }
    }

    pub fn used_compute(&self) -> u32 {
        self.used_compute
    }

    pub fn used_memory(&self) -> u32 {
        self.used_memory
    }

    pub fn free_compute(&self) -> u32 {
        self.compute_capacity - self.used_compute
    }

    pub fn free_memory(&self) -> u32 {
        self.memory_capacity - self.used_memory
    }

    pub fn slices(&self) -> &[SliceId] {
        &self.slices
    }

    pub fn is_idle(&self) -> bool {
        self.slices.is_empty()
    }

    /// Compute units that no profile in `profiles` can use because the
    /// device's free memory is too small ("slice padding").
    pub fn stranded_compute(&self, profiles: &[MigProfile]) -> u32 {
        let free_c = self.free_compute();
        if free_c == 0 {
            return 0;
        }
        let usable = profiles
            .iter()
            .any(|p| p.compute_units <= free_c && p.memory_units <= self.free_memory());
        if usable {
            0
        } else {
            free_c
        }
    }
}

/// Unit-count feasibility: enough free compute AND enough free memory.
pub fn can_place(device: &GpuDevice, profile: &MigProfile) -> bool {
    device.free_compute() >= profile.compute_units && device.free_memory() >= profile.memory_units
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancySample {
    pub t: Millis,
    pub allocated_compute_fraction: f64,
    pub allocated_memory_fraction: f64,
    pub running_jobs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReleasedUnits {
    pub device_id: u32,
    pub compute_units: u32,
    pub memory_units: u32,
}

#[derive(Debug, Clone)]
pub struct Fleet {
    devices: Vec<GpuDevice>,
    profiles: Vec<MigProfile>,
    policy: PlacementPolicy,
    slices: BTreeMap<SliceId, SliceAllocation>,
    next_slice: u64,
    samples: Vec<OccupancySample>,
    peak_slices: u32,
    peak_stranded_compute: u32,
    total_compute: u32,
    total_memory: u32,
}

impl Fleet {
    pub fn new(
        devices: u32,
        compute_units: u32,
        memory_units: u32,
        profiles: Vec<MigProfile>,
        policy: PlacementPolicy,
    ) -> Self {
        let devices: Vec<GpuDevice> = (0..devices)
            .map(|i| GpuDevice::new(i, compute_units, memory_units))
            .collect();
        let total_compute = devices.iter().map(|d| d.compute_capacity).sum();
        let total_memory = devices.iter().map(|d| d.memory_capacity).sum();
        let mut fleet = Self {
            devices,
            profiles,
            policy,
            slices: BTreeMap::new(),
            next_slice: 0,
            samples: Vec::new(),
            peak_slices: 0,
            peak_stranded_compute: 0,
            total_compute,
            total_memory,
        };
        fleet.record(0);
        fleet
    }

    /// An A100-like fleet with the default profile table and first-fit.
    pub fn a100(devices: u32) -> Self {
        Self::new(
            devices,
            DEFAULT_COMPUTE_UNITS,
            DEFAULT_MEMORY_UNITS,
            default_profiles(),
            PlacementPolicy::FirstFit,
        )
    }

    pub fn devices(&self) -> &[GpuDevice] {
        &self.devices
    }

    pub fn profiles(&self) -> &[MigProfile] {
        &self.profiles
    }

    pub fn profile(&self, name: &str) -> Result<&MigProfile, AccelError> {
        self.profiles
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| AccelError::UnknownProfile(name.to_owned()))
    }

    pub fn slice(&self, id: SliceId) -> Option<&SliceAllocation> {
        self.slices.get(&id)
    }

    pub fn live_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn peak_slices(&self) -> u32 {
        self.peak_slices
    }

    pub fn peak_stranded_compute(&self) -> u32 {
        self.peak_stranded_compute
    }

    pub fn samples(&self) -> &[OccupancySample] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    fn choose_device(&self, profile: &MigProfile) -> Option<usize> {
        let feasible = self.devices.iter().enumerate().filter(|(_, d)| can_place(d, profile));
        match self.policy {
            PlacementPolicy::FirstFit => feasible.map(|(i, _)| i).next(),
            PlacementPolicy::BestFit => feasible
                .min_by_key(|(i, d)| {
                    (
                        d.free_memory() - profile.memory_units,
                        d.free_compute() - profile.compute_units,
                        *i,
                    )
                })
                .map(|(i, _)| i),
        }
    }

    /// True if some device could host the profile right now.
    pub fn can_place_anywhere(&self, profile_name: &str) -> bool {
        self.profile(profile_name)
            .map(|p| self.choose_device(p).is_some())
            .unwrap_or(false)
    }

    pub fn allocate(&mut self, profile_name: &str, job_id: &str, now: Millis) -> Result<SliceId, AccelError> {
        let profile = self.profile(profile_name)?.clone();
        let idx = self
            .choose_device(&profile)
            .ok_or_else(|| AccelError::NoCapacity(profile.name.clone()))?;
        let slice_id = SliceId(self.next_slice);
        self.next_slice += 1;
        let dev = &mut self.devices[idx];
        dev.used_compute += profile.compute_units;
        dev.used_memory += profile.memory_units;
        dev.slices.push(slice_id);
        let device_id = dev.device_id;
        self.slices.insert(
            slice_id,
            SliceAllocation {
                slice_id,
                device_id,
                profile,
                job_id: job_id.to_owned(),
                allocated_at: now,
            },
        );
        self.peak_slices = self.peak_slices.max(self.slices.len() as u32);
        self.record(now);
        Ok(slice_id)
    }

    pub fn free(&mut self, slice_id: SliceId, now: Millis) -> Result<ReleasedUnits, AccelError> {
        let alloc = self
            .slices
            .remove(&slice_id)
            .ok_or(AccelError::UnknownSlice(slice_id))?;
        let dev = self
            .devices
            .iter_mut()
            .find(|d| d.device_id == alloc.device_id)
            .expect("allocation names a fleet device");
        dev.used_compute -= alloc.profile.compute_units;
        dev.used_memory -= alloc.profile.memory_units;
        dev.slices.retain(|s| *s != slice_id);
        let released = ReleasedUnits {
            device_id: alloc.device_id,
            compute_units: alloc.profile.compute_units,
            memory_units: alloc.profile.memory_units,
        };
        self.record(now);
        Ok(released)
    }

    fn record(&mut self, now: Millis) {
        let used_c: u32 = self.devices.iter().map(|d| d.used_compute).sum();
        let used_m: u32 = self.devices.iter().map(|d| d.used_memory).sum();
        let stranded: u32 = self.devices.iter().map(|d| d.stranded_compute(&self.profiles)).sum();
        self.peak_stranded_compute = self.peak_stranded_compute.max(stranded);
        let sample = OccupancySample {
            t: now,
            allocated_compute_fraction: frac(used_c, self.total_compute),
            allocated_memory_fraction: frac(used_m, self.total_memory),
            running_jobs: self.slices.len() as u32,
        };
        // keep only the last sample per instant
        match self.samples.last_mut() {
            Some(last) if last.t == now => *last = sample,
            _ => self.samples.push(sample),
        }
    }

    /// Geometry check used by fuzz tests and the batch driver.
    pub fn check_invariants(&self) -> Result<(), String> {
        for d in &self.devices {
            if d.used_compute > d.compute_capacity || d.used_memory > d.memory_capacity {
                return Err(format!(
                    "device {} over capacity: compute {}/{} memory {}/{}",
                    d.device_id, d.used_compute, d.compute_capacity, d.used_memory, d.memory_capacity
                ));
            }
            let (c, m) = d.slices.iter().fold((0, 0), |(c, m), s| {
                let p = &self.slices[s].profile;
                (c + p.compute_units, m + p.memory_units)
            });
            if c != d.used_compute || m != d.used_memory {
                return Err(format!("device {} counters out of sync", d.device_id));
            }
        }
        Ok(())
    }
}

fn frac(num: u32, den: u32) -> f64 {
    if den == 0 {
        0.0
    } else {
        f64::from(num) / f64::from(den)
    }
}

/// Time-weighted mean occupancy over `[first sample, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancySummary {
    pub mean_compute_fraction: f64,
    pub mean_memory_fraction: f64,
}

pub fn occupancy_timeline(samples: &[OccupancySample], end: Millis) -> Option<OccupancySummary> {
    let first = samples.first()?;
    let span = end.saturating_sub(first.t);
    if span == 0 {
        return Some(OccupancySummary {
            mean_compute_fraction: first.allocated_compute_fraction,
            mean_memory_fraction: first.allocated_memory_fraction,
        });
    }
    let mut c = 0.0;
    let mut m = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let until = samples.get(i + 1).map_or(end, |n| n.t).min(end);
        if until <= s.t {
            continue;
        }
        let dt = (until - s.t) as f64;
        c += s.allocated_compute_fraction * dt;
        m += s.allocated_memory_fraction * dt;
    }
    Some(OccupancySummary {
        mean_compute_fraction: c / span as f64,
        mean_memory_fraction: m / span as f64,
    })
}

/// Fleet section of a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub devices: u32,
    #[serde(default = "default_compute_units")]
    pub compute_units: u32,
    #[serde(default = "default_memory_units")]
    pub memory_units: u32,
    /// Just-in-time MIG slicing. When off, only the full-device profile may be used.
    #[serde(default)]
    pub slicing: bool,
    #[serde(default)]
    pub policy: PlacementPolicy,
    #[serde(default = "default_profiles")]
    pub profiles: Vec<MigProfile>,
}

fn default_compute_units() -> u32 {
    DEFAULT_COMPUTE_UNITS
}

fn default_memory_units() -> u32 {
    DEFAULT_MEMORY_UNITS
}

impl FleetConfig {
    pub fn a100(devices: u32, slicing: bool) -> Self {
        Self {
            devices,
            compute_units: DEFAULT_COMPUTE_UNITS,
            memory_units: DEFAULT_MEMORY_UNITS,
            slicing,
            policy: PlacementPolicy::FirstFit,
            profiles: default_profiles(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.devices == 0 {
            return Err("fleet.devices must be at least 1".into());
        }
        if self.compute_units == 0 || self.memory_units == 0 {
            return Err("fleet unit capacities must be positive".into());
        }
        for (i, p) in self.profiles.iter().enumerate() {
            if p.compute_units == 0 || p.memory_units == 0 {
                return Err(format!(
                    "profile `{}` must occupy at least one unit of each kind",
                    p.name
                ));
            }
            if p.compute_units > self.compute_units || p.memory_units > self.memory_units {
                return Err(format!("profile `{}` does not fit on a single device", p.name));
            }
            if self.profiles[..i].iter().any(|q| q.name == p.name) {
                return Err(format!("duplicate profile `{}`", p.name));
            }
        }
        Ok(())
    }

    /// Check that a profile may be requested on this fleet.
    pub fn check_profile(&self, name: &str) -> Result<&MigProfile, String> {
        let p = self
            .profiles
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| format!("unknown profile `{name}`"))?;
        if !self.slicing && !p.is_full() {
            return Err(format!("profile `{name}` requires fleet.slicing = true"));
        }
        Ok(p)
    }

    pub fn build(&self) -> Fleet {
        Fleet::new(
            self.devices,
            self.compute_units,
            self.memory_units,
            self.profiles.clone(),
            self.policy,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(name: &str) -> MigProfile {
        default_profiles().into_iter().find(|x| x.name == name).unwrap()
    }

    #[test]
    fn empty_device_hosts_3g() {
        let d = GpuDevice::new(0, 7, 8);
        assert!(can_place(&d, &p("3g.20gb")));
    }

    #[test]
    fn two_3g_strand_one_compute_unit() {
        let mut f = Fleet::a100(1);
        f.allocate("3g.20gb", "a", 0).unwrap();
        f.allocate("3g.20gb", "b", 0).unwrap();
        let d = &f.devices()[0];
        assert_eq!((d.used_compute(), d.used_memory()), (6, 8));
        assert!(!can_place(d, &p("1g.5gb")));
        assert_eq!(d.stranded_compute(f.profiles()), 1);
    }

    #[test]
    fn eighth_1g_does_not_fit() {
        let mut f = Fleet::a100(1);
        for i in 0..7 {
            f.allocate("1g.5gb", &format!("m{i}"), 0).unwrap();
        }
        assert_eq!(
            f.allocate("1g.5gb", "m7", 0),
            Err(AccelError::NoCapacity("1g.5gb".into()))
        );
    }

    #[test]
    fn full_profile_needs_idle_device() {
        let mut f = Fleet::a100(2);
        f.allocate("1g.5gb", "a", 0).unwrap();
        f.allocate("3g.20gb", "b", 0).unwrap();
        f.allocate("3g.20gb", "c", 0).unwrap(); // lands on device 1
        assert!(f.devices().iter().all(|d| !d.is_idle()));
        assert!(matches!(f.allocate("full", "x", 0), Err(AccelError::NoCapacity(_))));
    }

    #[test]
    fn first_fit_reuses_freed_device() {
        let mut f = Fleet::a100(3);
        let s = f.allocate("full", "a", 0).unwrap();
        let dev = f.slice(s).unwrap().device_id;
        f.free(s, 1).unwrap();
        let s2 = f.allocate("full", "a", 2).unwrap();
        assert_eq!(f.slice(s2).unwrap().device_id, dev);
    }

    #[test]
    fn free_only_slice_idles_fleet() {
        let mut f = Fleet::a100(2);
        let s = f.allocate("3g.20gb", "a", 0).unwrap();
        f.free(s, 5).unwrap();
        assert!(f.is_empty());
        assert!(f
            .devices()
            .iter()
            .all(|d| d.used_compute() == 0 && d.used_memory() == 0));
    }

    #[test]
    fn freeing_a_3g_reopens_1g() {
        let mut f = Fleet::a100(1);
        let a = f.allocate("3g.20gb", "a", 0).unwrap();
        f.allocate("3g.20gb", "b", 0).unwrap();
        assert!(!f.can_place_anywhere("1g.5gb"));
        let r = f.free(a, 1).unwrap();
        assert_eq!((r.compute_units, r.memory_units), (3, 4));
        assert!(f.can_place_anywhere("1g.5gb"));
    }

    #[test]
    fn double_free_is_an_error() {
        let mut f = Fleet::a100(1);
        let s = f.allocate("1g.5gb", "a", 0).unwrap();
        f.free(s, 1).unwrap();
        assert_eq!(f.free(s, 2), Err(AccelError::UnknownSlice(s)));
    }

    #[test]
    fn best_fit_prefers_tightest_device() {
        let mut f = Fleet::new(2, 7, 8, default_profiles(), PlacementPolicy::BestFit);
        // device 0 gets a 3g; best-fit places the next 1g alongside it
        f.allocate("3g.20gb", "a", 0).unwrap();
        let s = f.allocate("1g.5gb", "b", 0).unwrap();
        assert_eq!(f.slice(s).unwrap().device_id, 0);
        let mut g = Fleet::new(2, 7, 8, default_profiles(), PlacementPolicy::BestFit);
        g.allocate("full", "x", 0).unwrap();
        let s = g.allocate("1g.5gb", "y", 0).unwrap();
        assert_eq!(g.slice(s).unwrap().device_id, 1);
    }

    #[test]
    fn occupancy_full_gpu_whole_run() {
        let mut f = Fleet::a100(1);
        let s = f.allocate("full", "a", 0).unwrap();
        f.free(s, 100).unwrap();
        let o = occupancy_timeline(f.samples(), 100).unwrap();
        assert!((o.mean_compute_fraction - 1.0).abs() < 1e-12);
        assert!((o.mean_memory_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn occupancy_two_3g_whole_run() {
        let mut f = Fleet::a100(1);
        f.allocate("3g.20gb", "a", 0).unwrap();
        f.allocate("3g.20gb", "b", 0).unwrap();
        let o = occupancy_timeline(f.samples(), 50).unwrap();
        assert!((o.mean_compute_fraction - 6.0 / 7.0).abs() < 1e-12);
        assert!((o.mean_memory_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn occupancy_is_time_weighted() {
        let mut f = Fleet::a100(1);
        let s = f.allocate("full", "a", 0).unwrap();
        f.free(s, 25).unwrap();
        let o = occupancy_timeline(f.samples(), 100).unwrap();
        assert!((o.mean_compute_fraction - 0.25).abs() < 1e-12);
    }

    #[test]
    fn unknown_profile_rejected() {
        let mut f = Fleet::a100(1);
        assert_eq!(
            f.allocate("2g.10gb", "a", 0),
            Err(AccelError::UnknownProfile("2g.10gb".into()))
        );
    }

    proptest! {
        #[test]
        fn geometry_safe_under_random_ops(ops in proptest::collection::vec((0usize..3, any::<bool>(), 0usize..64), 1..200)) {
            let mut f = Fleet::a100(2);
            let names = ["1g.5gb", "3g.20gb", "full"];
            let mut live: Vec<SliceId> = Vec::new();
            for (t, (pi, alloc, pick)) in ops.into_iter().enumerate() {
                if alloc || live.is_empty() {
                    if let Ok(s) = f.allocate(names[pi], "j", t as u64) {
                        live.push(s);
                    }
                } else {
                    let s = live.swap_remove(pick % live.len());
                    f.free(s, t as u64).unwrap();
                }
                prop_assert!(f.check_invariants().is_ok());
            }
            for s in live {
                f.free(s, 1000).unwrap();
            }
            prop_assert!(f.is_empty());
        }
    }
}
