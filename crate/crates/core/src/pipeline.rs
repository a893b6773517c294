//! The local-mapping loop: keyframe queue, stage sequencing, backlog-driven
//! skipping of local BA and keyframe culling, and per-stage timing.
//!
//! Keyframes are associated with the existing map before insertion (a
//! stand-in for the tracking front end, which hands over keyframes whose
//! keypoints are already partly bound to map points). The pose handed over
//! with a keyframe is treated as odometry: its motion relative to the
//! previous keyframe's prior is applied to that keyframe's current estimate.
//!
//! In stress mode keyframes arrive on a virtual clock. Each stage advances
//! the clock by its measured wall time times a multiplier plus a fixed cost,
//! and arrivals up to the current clock are admitted before each skip
//! decision. Setting all multipliers to zero makes a stress run deterministic.

use std::collections::{BTreeSet, VecDeque};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ba::{build_local_window, lm_optimize, BAConfig, BAReport};
use crate::culling::{cull_keyframes, cull_recent_map_points, CullingConfig, RecentPoint, RedundancyCheck};
use crate::device_store::{DeviceStore, DeviceStoreConfig, StageTag, TransferLedger};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::fusion::{run_fusion, search_by_projection, FusionConfig, ProjectionHit, ProjectionSearch};
use crate::geometry::SE3Pose;
use crate::map::{KeyFrame, KeyFrameId, Map, MapConfig, MapPointId};
use crate::synth::{Sequence, TrajectoryEntry};
use crate::triangulation::{create_map_points, TriangulationConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Single worker, observation-scan culling.
    Baseline,
    /// Worker pool, counter-based culling.
    Optimized,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "optimized" => Ok(Mode::Optimized),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

/// One value per timed stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageValues {
    pub upload: f64,
    pub recent_mp_cull: f64,
    pub triangulation: f64,
    pub fusion: f64,
    pub lba: f64,
    pub kf_cull: f64,
}

impl StageValues {
    pub fn uniform(v: f64) -> Self {
        Self {
            upload: v,
            recent_mp_cull: v,
            triangulation: v,
            fusion: v,
            lba: v,
            kf_cull: v,
        }
    }

    pub fn sum(&self) -> f64 {
        self.upload + self.recent_mp_cull + self.triangulation + self.fusion + self.lba + self.kf_cull
    }

    pub const NAMES: [&'static str; 6] = ["upload", "recent_mp_cull", "triangulation", "fusion", "lba", "kf_cull"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.upload,
            self.recent_mp_cull,
            self.triangulation,
            self.fusion,
            self.lba,
            self.kf_cull,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    pub enabled: bool,
    /// Covisible neighbors of the reference keyframe whose points are searched.
    pub neighbor_count: usize,
    pub search: ProjectionSearch,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            neighbor_count: 10,
            search: ProjectionSearch {
                radius_px: 10.0,
                min_view_cos: 0.5,
                scale_slack: 1.2,
                match_max_distance: 50,
                level_window: 1,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Forced to 1 in baseline mode.
    pub worker_count: usize,
    pub queue_capacity: usize,
    pub map: MapConfig,
    pub store: DeviceStoreConfig,
    pub association: AssociationConfig,
    pub triangulation: TriangulationConfig,
    pub fusion: FusionConfig,
    pub ba: BAConfig,
    /// The redundancy check is chosen by the mode.
    pub culling: CullingConfig,
    /// Bytes per point and per pose sent with each local BA window.
    pub lba_point_record_bytes: u64,
    pub lba_pose_record_bytes: u64,
    pub stress: bool,
    /// Frames between keyframe arrivals in stress mode.
    pub min_kf_interval_frames: u32,
    pub stage_delay_multipliers: StageValues,
    /// Virtual milliseconds added per stage in stress mode.
    pub stage_fixed_costs_ms: StageValues,
    /// Never run local BA (accuracy reference runs).
    pub disable_lba: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Optimized,
            worker_count: 4,
            queue_capacity: 3,
            map: MapConfig::default(),
            store: DeviceStoreConfig::default(),
            association: AssociationConfig::default(),
            triangulation: TriangulationConfig::default(),
            fusion: FusionConfig::default(),
            ba: BAConfig::default(),
            culling: CullingConfig::default(),
            lba_point_record_bytes: 16,
            lba_pose_record_bytes: 32,
            stress: false,
            min_kf_interval_frames: 1,
            stage_delay_multipliers: StageValues::uniform(1.0),
            stage_fixed_costs_ms: StageValues::default(),
            disable_lba: false,
        }
    }
}

impl PipelineConfig {
    pub fn baseline() -> Self {
        Self {
            mode: Mode::Baseline,
            worker_count: 1,
            ..Self::default()
        }
    }

    pub fn effective_workers(&self) -> usize {
        match self.mode {
            Mode::Baseline => 1,
            Mode::Optimized => self.worker_count.max(1),
        }
    }

    pub fn effective_culling(&self) -> CullingConfig {
        CullingConfig {
            check: match self.mode {
                Mode::Baseline => RedundancyCheck::Baseline,
                Mode::Optimized => RedundancyCheck::Fast,
            },
            ..self.culling
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub kf_id: KeyFrameId,
    /// Wall milliseconds per stage.
    pub stages_ms: StageValues,
    pub total_ms: f64,
    /// Tracking stand-in; not part of `total_ms`.
    pub association_ms: f64,
    pub keyframes: usize,
    pub points: usize,
    pub queue_depth: usize,
    pub lba_skipped: bool,
    pub culling_skipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipStats {
    pub lba_skips: usize,
    pub culling_skips: usize,
    pub drops: usize,
    /// Queue depth at the local-BA decision of each processed keyframe.
    pub queue_depth_trace: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub associated: usize,
    pub created: usize,
    pub merged: usize,
    pub observations_added: usize,
    pub recent_culled: usize,
    pub keyframes_culled: usize,
    pub lba_runs: usize,
    pub lba_iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnqueueOutcome {
    Accepted,
    Dropped,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    exec: Executor,
    culling: CullingConfig,
    map: Map,
    store: DeviceStore,
    queue: VecDeque<KeyFrame>,
    /// Stress-mode arrivals not yet admitted: (virtual ms, keyframe).
    arrivals: VecDeque<(f64, KeyFrame)>,
    clock_ms: f64,
    recent: Vec<RecentPoint>,
    last_kf: Option<KeyFrameId>,
    last_prior: Option<SE3Pose>,
    timings: Vec<StageTimings>,
    skips: SkipStats,
    counts: StageCounts,
    errors: Vec<(KeyFrameId, String)>,
    ba_reports: Vec<(KeyFrameId, BAReport)>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        Self {
            exec: Executor::with_workers(cfg.effective_workers()),
            culling: cfg.effective_culling(),
            map: Map::new(cfg.map),
            store: DeviceStore::new(cfg.store),
            queue: VecDeque::new(),
            arrivals: VecDeque::new(),
            clock_ms: 0.0,
            recent: Vec::new(),
            last_kf: None,
            last_prior: None,
            timings: Vec::new(),
            skips: SkipStats::default(),
            counts: StageCounts::default(),
            errors: Vec::new(),
            ba_reports: Vec::new(),
            cfg,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn map(&self) -> &Map {
        &self.map
    }

    pub fn store(&self) -> &DeviceStore {
        &self.store
    }

    pub fn skips(&self) -> &SkipStats {
        &self.skips
    }

    pub fn timings(&self) -> &[StageTimings] {
        &self.timings
    }

    pub fn queue_depth(&self) -> usize {
        self.queue.len()
    }

    pub fn enqueue_keyframe(&mut self, kf: KeyFrame) -> EnqueueOutcome {
        if self.queue.len() < self.cfg.queue_capacity {
            self.queue.push_back(kf);
            EnqueueOutcome::Accepted
        } else {
            self.skips.drops += 1;
            EnqueueOutcome::Dropped
        }
    }

    /// Schedules a keyframe to arrive at virtual time `at_ms`.
    pub fn schedule_arrival(&mut self, at_ms: f64, kf: KeyFrame) {
        self.arrivals.push_back((at_ms, kf));
    }

    fn admit_arrivals(&mut self) {
        while self.arrivals.front().is_some_and(|(t, _)| *t <= self.clock_ms) {
            let (_, kf) = self.arrivals.pop_front().expect("front exists");
            self.enqueue_keyframe(kf);
        }
    }

    /// Advances the virtual clock by a stage's cost.
    fn charge(&mut self, wall_ms: f64, stage: usize) {
        let mult = self.cfg.stage_delay_multipliers.values()[stage];
        let fixed = self.cfg.stage_fixed_costs_ms.values()[stage];
        self.clock_ms += wall_ms * mult + fixed;
    }

    fn reanchor(&mut self, mut kf: KeyFrame) -> KeyFrame {
        let prior = kf.pose;
        if let (Some(prev), Some(prev_prior)) = (self.last_kf.and_then(|id| self.map.keyframe(id)), self.last_prior) {
            kf.pose = prior.compose(&prev_prior.inverse()).compose(&prev.pose);
        }
        self.last_prior = Some(prior);
        kf
    }

    /// Binds keypoints of `kf` to points of the most recent keyframe's
    /// neighborhood that project onto them.
    fn associate(&self, kf: KeyFrame) -> Result<(KeyFrame, Vec<MapPointId>, Vec<MapPointId>)> {
        let cfg = &self.cfg.association;
        let reference = self
            .last_kf
            .filter(|id| self.map.live_keyframe(*id).is_ok())
            .or_else(|| self.map.live_keyframes().last().map(|k| k.id));
        let Some(reference) = reference.filter(|_| cfg.enabled) else {
            return Ok((kf, Vec::new(), Vec::new()));
        };
        let mut sources = vec![reference];
        sources.extend(self.map.covisible_neighbors(reference, cfg.neighbor_count)?);
        let mut seen = BTreeSet::new();
        let mut candidates = Vec::new();
        for src in sources {
            for (_, mp) in self.map.live_keyframe(src)?.bound_points() {
                if self.map.live_point(mp).is_some() && seen.insert(mp) {
                    candidates.push(mp);
                }
            }
        }
        let hits = self.exec.map(candidates.len(), |i| {
            search_by_projection(&self.map, &kf, candidates[i], &cfg.search)
        });

        // One point per keypoint: lowest distance, then earliest candidate.
        let mut best: Vec<Option<(u32, usize)>> = vec![None; kf.len()];
        let mut visible = Vec::new();
        for (i, hit) in hits.iter().enumerate() {
            match *hit {
                ProjectionHit::OutOfView => {}
                ProjectionHit::InViewUnmatched => visible.push(candidates[i]),
                ProjectionHit::Matched(j, d) => {
                    visible.push(candidates[i]);
                    if best[j].is_none_or(|(bd, _)| d < bd) {
                        best[j] = Some((d, i));
                    }
                }
            }
        }
        let mut found = Vec::new();
        let bindings: Vec<Option<MapPointId>> = best
            .iter()
            .map(|b| {
                b.map(|(_, i)| {
                    found.push(candidates[i]);
                    candidates[i]
                })
            })
            .collect();
        Ok((kf.with_bindings(bindings)?, visible, found))
    }

    /// Runs all stages for the oldest queued keyframe.
    pub fn process_one(&mut self) -> Option<StageTimings> {
        let kf = self.queue.pop_front()?;
        let id = kf.id;
        let mut t = StageTimings {
            kf_id: id,
            ..Default::default()
        };
        match self.process(kf, &mut t) {
            Ok(()) => {}
            Err(e) => self.errors.push((id, e.to_string())),
        }
        t.keyframes = self.map.num_live_keyframes();
        t.points = self.map.num_live_points();
        self.timings.push(t.clone());
        Some(t)
    }

    fn process(&mut self, kf: KeyFrame, t: &mut StageTimings) -> Result<()> {
        let id = kf.id;
        let total = Instant::now();

        let clock = Instant::now();
        let kf = self.reanchor(kf);
        let (kf, visible, found) = self.associate(kf)?;
        t.association_ms = ms(clock);

        let clock = Instant::now();
        self.store.upload_keyframe(&kf)?;
        self.map.insert_keyframe(kf)?;
        for mp in visible {
            self.map.increase_visible(mp, 1);
        }
        self.counts.associated += found.len();
        for mp in found {
            self.map.increase_found(mp, 1);
        }
        self.last_kf = Some(id);
        t.stages_ms.upload = ms(clock);
        self.charge(t.stages_ms.upload, 0);

        let clock = Instant::now();
        let removed = cull_recent_map_points(&mut self.map, &mut self.recent, id, &self.culling);
        self.counts.recent_culled += removed.len();
        t.stages_ms.recent_mp_cull = ms(clock);
        self.charge(t.stages_ms.recent_mp_cull, 1);

        let clock = Instant::now();
        let tri = &self.cfg.triangulation;
        let created = create_map_points(&mut self.map, &mut self.store, id, tri.neighbor_count, tri, &self.exec)?;
        self.counts.created += created.created.len();
        self.recent
            .extend(created.created.iter().map(|&mp| RecentPoint { id: mp, created_at: id }));
        t.stages_ms.triangulation = ms(clock);
        self.charge(t.stages_ms.triangulation, 2);

        let clock = Instant::now();
        let fused = run_fusion(&mut self.map, &mut self.store, id, &self.cfg.fusion, &self.exec)?;
        self.counts.merged += fused.counts.merged;
        self.counts.observations_added += fused.counts.observations_added;
        t.stages_ms.fusion = ms(clock);
        self.charge(t.stages_ms.fusion, 3);

        self.admit_arrivals();
        t.queue_depth = self.queue.len();
        self.skips.queue_depth_trace.push(t.queue_depth);
        if !self.queue.is_empty() {
            self.skips.lba_skips += 1;
            t.lba_skipped = true;
        } else if !self.cfg.disable_lba {
            let clock = Instant::now();
            self.local_ba(id)?;
            t.stages_ms.lba = ms(clock);
            self.charge(t.stages_ms.lba, 4);
        }

        self.admit_arrivals();
        if !self.queue.is_empty() {
            self.skips.culling_skips += 1;
            t.culling_skipped = true;
        } else {
            let clock = Instant::now();
            let candidates = self
                .map
                .covisible_neighbors(id, self.cfg.ba.window_size.saturating_sub(1))?;
            let removed = cull_keyframes(&mut self.map, &mut self.store, &candidates, &self.culling)?;
            self.counts.keyframes_culled += removed.len();
            t.stages_ms.kf_cull = ms(clock);
            self.charge(t.stages_ms.kf_cull, 5);
        }
        t.total_ms = ms(total) - t.association_ms;
        Ok(())
    }

    fn local_ba(&mut self, id: KeyFrameId) -> Result<()> {
        let window = match build_local_window(&self.map, id, &self.cfg.ba) {
            Ok(w) => w,
            Err(Error::WindowTooSmall(_)) => return Ok(()),
            Err(e) => return Err(e),
        };
        let mut accessed = window.local_kf_ids.clone();
        accessed.extend(&window.fixed_kf_ids);
        self.store.record_neighbor_access(StageTag::LocalBa, &accessed)?;
        self.store.record_small_transfer(
            StageTag::LocalBa,
            window.point_ids.len() as u64 * self.cfg.lba_point_record_bytes
                + accessed.len() as u64 * self.cfg.lba_pose_record_bytes,
        );
        let report = lm_optimize(&mut self.map, &window, &self.cfg.ba, &self.exec)?;
        self.counts.lba_runs += 1;
        self.counts.lba_iterations += report.iterations;
        self.ba_reports.push((id, report));
        Ok(())
    }

    /// Processes everything queued or scheduled, advancing the virtual
    /// clock over idle gaps.
    pub fn drain(&mut self) {
        loop {
            self.admit_arrivals();
            if self.queue.is_empty() {
                match self.arrivals.front() {
                    Some((at, _)) => self.clock_ms = self.clock_ms.max(*at),
                    None => break,
                }
                continue;
            }
            self.process_one();
        }
    }

    pub fn trajectory(&self) -> Vec<TrajectoryEntry> {
        self.map
            .keyframes()
            .map(|k| TrajectoryEntry {
                timestamp: k.timestamp,
                pose: k.pose,
            })
            .collect()
    }

    pub fn finish(self) -> RunOutput {
        RunOutput {
            trajectory: self.trajectory(),
            timings: self.timings,
            skips: self.skips,
            ledger: self.store.ledger().clone(),
            counts: self.counts,
            errors: self.errors,
            ba_reports: self.ba_reports,
            map: self.map,
        }
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

pub struct RunOutput {
    pub trajectory: Vec<TrajectoryEntry>,
    pub timings: Vec<StageTimings>,
    pub skips: SkipStats,
    pub ledger: TransferLedger,
    pub counts: StageCounts,
    pub errors: Vec<(KeyFrameId, String)>,
    pub ba_reports: Vec<(KeyFrameId, BAReport)>,
    pub map: Map,
}

/// Feeds a sequence through a fresh pipeline. Without stress each keyframe
/// is processed before the next is handed over; with stress keyframes arrive
/// every `min_kf_interval_frames` frames of virtual time regardless of load.
pub fn run_sequence(seq: &Sequence, cfg: &PipelineConfig) -> Result<RunOutput> {
    let mut p = Pipeline::new(cfg.clone());
    let frame_ms = 1e3 / seq.config.frame_rate;
    for (i, f) in seq.frames.iter().enumerate() {
        let kf = f.to_keyframe()?;
        if cfg.stress {
            p.schedule_arrival(i as f64 * f64::from(cfg.min_kf_interval_frames) * frame_ms, kf);
        } else {
            p.enqueue_keyframe(kf);
            p.process_one();
        }
    }
    p.drain();
    Ok(p.finish())
}
