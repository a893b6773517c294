//! Recent map-point culling and redundant-keyframe culling.
//!
//! Keyframe redundancy has two implementations that must agree exactly: a scan
//! over each point's observation list, and a prefix sum over the per-level
//! observation counters the map keeps up to date.

use serde::{Deserialize, Serialize};

use crate::device_store::DeviceStore;
use crate::error::Result;
use crate::map::{KeyFrameId, Map, MapPoint, MapPointId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedundancyCheck {
    Baseline,
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CullingConfig {
    pub found_ratio_min: f64,
    pub probation_kfs: u64,
    /// Observations a recent point needs to leave probation.
    pub min_observations: usize,
    /// Other observers at the same or a finer level that make a point redundant.
    pub min_other_observers: u32,
    /// A keyframe is redundant when at least this percentage of its points is.
    pub redundant_percent: u32,
    /// Other observers may be up to this many levels coarser.
    pub scale_tolerance_levels: u8,
    pub check: RedundancyCheck,
}

impl Default for CullingConfig {
    fn default() -> Self {
        Self {
            found_ratio_min: 0.25,
            probation_kfs: 3,
            min_observations: 3,
            min_other_observers: 3,
            redundant_percent: 90,
            scale_tolerance_levels: 0,
            check: RedundancyCheck::Fast,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecentPoint {
    pub id: MapPointId,
    pub created_at: KeyFrameId,
}

/// Drops dead points from `recent`, removes failing ones from the map and
/// graduates survivors past probation. Returns the removed ids.
pub fn cull_recent_map_points(
    map: &mut Map,
    recent: &mut Vec<RecentPoint>,
    current: KeyFrameId,
    cfg: &CullingConfig,
) -> Vec<MapPointId> {
    let mut removed = Vec::new();
    let mut keep = Vec::with_capacity(recent.len());
    for r in recent.drain(..) {
        let Some(p) = map.live_point(r.id) else { continue };
        let age = current.0.saturating_sub(r.created_at.0);
        if p.found_ratio() < cfg.found_ratio_min {
            removed.push(r.id);
        } else if age >= cfg.probation_kfs {
            if p.num_observations() < cfg.min_observations {
                removed.push(r.id);
            }
        } else {
            keep.push(r);
        }
    }
    for id in &removed {
        map.kill_map_point(*id).expect("live point");
    }
    *recent = keep;
    removed
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Redundancy {
    pub redundant: bool,
    pub redundant_points: u32,
    pub considered_points: u32,
}

fn verdict(redundant_points: u32, considered_points: u32, cfg: &CullingConfig) -> Redundancy {
    Redundancy {
        redundant: considered_points > 0
            && u64::from(redundant_points) * 100 >= u64::from(cfg.redundant_percent) * u64::from(considered_points),
        redundant_points,
        considered_points,
    }
}

fn redundancy_with(
    map: &Map,
    kf: KeyFrameId,
    cfg: &CullingConfig,
    other_observers: impl Fn(&MapPoint, u8) -> u32,
) -> Result<Redundancy> {
    let frame = map.live_keyframe(kf)?;
    let (mut redundant, mut considered) = (0, 0);
    for (kp, mp) in frame.bound_points() {
        let Some(p) = map.live_point(mp) else { continue };
        considered += 1;
        let max_level = frame.level(kp).saturating_add(cfg.scale_tolerance_levels);
        if other_observers(p, max_level) >= cfg.min_other_observers {
            redundant += 1;
        }
    }
    Ok(verdict(redundant, considered, cfg))
}

/// Scans every observation of every point the keyframe sees.
pub fn is_redundant_baseline(map: &Map, kf: KeyFrameId, cfg: &CullingConfig) -> Result<Redundancy> {
    redundancy_with(map, kf, cfg, |p, max_level| {
        let mut n = 0;
        for &(other, kp) in p.observations() {
            if other == kf {
                continue;
            }
            let level = map.keyframe(other).map_or(u8::MAX, |f| f.level(kp as usize));
            if level <= max_level {
                n += 1;
            }
        }
        n
    })
}

/// Reads the per-level counters instead of the observation list.
pub fn is_redundant_fast(map: &Map, kf: KeyFrameId, cfg: &CullingConfig) -> Result<Redundancy> {
    redundancy_with(map, kf, cfg, |p, max_level| {
        let counts = p.scale_counts();
        let upto = (max_level as usize + 1).min(counts.len());
        counts[..upto].iter().sum::<u32>() - 1
    })
}

pub fn is_redundant(map: &Map, kf: KeyFrameId, cfg: &CullingConfig) -> Result<Redundancy> {
    match cfg.check {
        RedundancyCheck::Baseline => is_redundant_baseline(map, kf, cfg),
        RedundancyCheck::Fast => is_redundant_fast(map, kf, cfg),
    }
}

/// Evaluates candidates in id order, removing each redundant one before the
/// next is checked. Keyframe 0 and dead keyframes are skipped.
pub fn cull_keyframes(
    map: &mut Map,
    store: &mut DeviceStore,
    candidates: &[KeyFrameId],
    cfg: &CullingConfig,
) -> Result<Vec<KeyFrameId>> {
    let mut ids = candidates.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut removed = Vec::new();
    for kf in ids {
        if kf == KeyFrameId(0) || map.live_keyframe(kf).is_err() {
            continue;
        }
        if is_redundant(map, kf, cfg)?.redundant {
            map.remove_keyframe(kf)?;
            if store.is_resident(kf) {
                store.evict_keyframe(kf)?;
            }
            removed.push(kf);
        }
    }
    Ok(removed)
}
