//! The mutable map shared by every local-mapping stage.
//!
//! All mutation goes through [`Map`] so that per-scale observation counters
//! and covisibility weights stay in lock-step with the observation sets.
//! Entities are tombstoned on removal and their ids are never reused.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hamming, BinaryDescriptor, CameraIntrinsics, KeyPoint, Pixel, SE3Pose, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyFrameId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MapPointId(pub u64);

impl fmt::Display for KeyFrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kf{}", self.0)
    }
}

impl fmt::Display for MapPointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mp{}", self.0)
    }
}

const GRID_CELL_PX: f64 = 16.0;

/// Uniform bucket grid over keypoint positions for radius queries.
#[derive(Clone, Debug, Default)]
struct KeypointGrid {
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

impl KeypointGrid {
    fn build(k: &CameraIntrinsics, keypoints: &[KeyPoint]) -> Self {
        let cols = (k.width as f64 / GRID_CELL_PX).ceil().max(1.0) as usize;
        let rows = (k.height as f64 / GRID_CELL_PX).ceil().max(1.0) as usize;
        let mut cells = vec![Vec::new(); cols * rows];
        for (i, kp) in keypoints.iter().enumerate() {
            let cx = ((kp.u / GRID_CELL_PX) as usize).min(cols - 1);
            let cy = ((kp.v / GRID_CELL_PX) as usize).min(rows - 1);
            cells[cy * cols + cx].push(i as u32);
        }
        Self { cols, rows, cells }
    }

    fn cell_range(&self, lo: f64, hi: f64, n: usize) -> (usize, usize) {
        let a = (lo / GRID_CELL_PX).floor().max(0.0) as usize;
        let b = ((hi / GRID_CELL_PX).floor().max(0.0) as usize).min(n - 1);
        (a.min(n - 1), b)
    }
}

#[derive(Clone, Debug)]
pub struct KeyFrame {
    pub id: KeyFrameId,
    pub timestamp: f64,
    pub pose: SE3Pose,
    pub intrinsics: CameraIntrinsics,
    pub keypoints: Vec<KeyPoint>,
    pub descriptors: Vec<BinaryDescriptor>,
    mp_bindings: Vec<Option<MapPointId>>,
    alive: bool,
    grid: KeypointGrid,
}

impl KeyFrame {
    pub fn new(
        id: KeyFrameId,
        timestamp: f64,
        pose: SE3Pose,
        intrinsics: CameraIntrinsics,
        keypoints: Vec<KeyPoint>,
        descriptors: Vec<BinaryDescriptor>,
    ) -> Result<Self> {
        intrinsics.validate()?;
        if keypoints.len() != descriptors.len() {
            return Err(Error::InvalidArgument(format!(
                "{id}: {} keypoints but {} descriptors",
                keypoints.len(),
                descriptors.len()
            )));
        }
        for (i, kp) in keypoints.iter().enumerate() {
            let inside = intrinsics.in_image(&kp.pixel()) && kp.level < intrinsics.num_levels;
            if !inside || kp.descriptor_index >= descriptors.len() {
                return Err(Error::InvalidArgument(format!(
                    "{id}: keypoint {i} out of range: {kp:?}"
                )));
            }
        }
        let grid = KeypointGrid::build(&intrinsics, &keypoints);
        Ok(Self {
            id,
            timestamp,
            pose,
            intrinsics,
            mp_bindings: vec![None; keypoints.len()],
            keypoints,
            descriptors,
            alive: true,
            grid,
        })
    }

    /// Pre-binds keypoints to existing map points (as handed over by tracking).
    /// The bindings are turned into observations by [`Map::insert_keyframe`].
    pub fn with_bindings(mut self, bindings: Vec<Option<MapPointId>>) -> Result<Self> {
        if bindings.len() != self.keypoints.len() {
            return Err(Error::InvalidArgument("binding count must match keypoint count".into()));
        }
        self.mp_bindings = bindings;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    pub fn bindings(&self) -> &[Option<MapPointId>] {
        &self.mp_bindings
    }

    pub fn binding(&self, kp: usize) -> Option<MapPointId> {
        self.mp_bindings[kp]
    }

    pub fn descriptor(&self, kp: usize) -> &BinaryDescriptor {
        &self.descriptors[self.keypoints[kp].descriptor_index]
    }

    pub fn level(&self, kp: usize) -> u8 {
        self.keypoints[kp].level
    }

    pub fn camera_center(&self) -> Vec3 {
        self.pose.camera_center()
    }

    /// Bound map point ids, in keypoint order.
    pub fn bound_points(&self) -> impl Iterator<Item = (usize, MapPointId)> + '_ {
        self.mp_bindings
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|mp| (i, mp)))
    }

    /// Keypoint indices within `radius` px of `center`, ascending.
    pub fn keypoints_in_radius(&self, center: &Pixel, radius: f64) -> Vec<usize> {
        let g = &self.grid;
        let (x0, x1) = g.cell_range(center.x - radius, center.x + radius, g.cols);
        let (y0, y1) = g.cell_range(center.y - radius, center.y + radius, g.rows);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                for &i in &g.cells[cy * g.cols + cx] {
                    if (self.keypoints[i as usize].pixel() - center).norm_squared() <= r2 {
                        out.push(i as usize);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Debug)]
pub struct MapPoint {
    pub id: MapPointId,
    pub position: Vec3,
    rep_descriptor: BinaryDescriptor,
    /// Sorted by keyframe id.
    observations: Vec<(KeyFrameId, u32)>,
    scale_counts: Vec<u32>,
    pub found_count: u32,
    pub visible_count: u32,
    pub first_kf_id: KeyFrameId,
    alive: bool,
}

impl MapPoint {
    pub fn is_alive(&self) -> bool {
        self.alive
    }

    pub fn rep_descriptor(&self) -> &BinaryDescriptor {
        &self.rep_descriptor
    }

    pub fn observations(&self) -> &[(KeyFrameId, u32)] {
        &self.observations
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn observation_in(&self, kf: KeyFrameId) -> Option<usize> {
        self.observations
            .binary_search_by_key(&kf, |o| o.0)
            .ok()
            .map(|i| self.observations[i].1 as usize)
    }

    pub fn is_observed_by(&self, kf: KeyFrameId) -> bool {
        self.observations.binary_search_by_key(&kf, |o| o.0).is_ok()
    }

    pub fn scale_counts(&self) -> &[u32] {
        &self.scale_counts
    }

    pub fn found_ratio(&self) -> f64 {
        if self.visible_count == 0 {
            return 0.0;
        }
        self.found_count as f64 / self.visible_count as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub num_levels: u8,
    /// A map point dies when its observation count drops below this.
    pub min_obs_keep: usize,
    /// Neighbor queries ignore edges lighter than this.
    pub min_covis_weight: u32,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            num_levels: 8,
            min_obs_keep: 2,
            min_covis_weight: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    ScaleCounts {
        point: MapPointId,
        stored: Vec<u32>,
        expected: Vec<u32>,
    },
    ObservationCount {
        point: MapPointId,
    },
    CovisibilityWeight {
        a: KeyFrameId,
        b: KeyFrameId,
        stored: u32,
        expected: u32,
    },
    Binding {
        kf: KeyFrameId,
        keypoint: usize,
        point: MapPointId,
    },
    DeadReference {
        kf: KeyFrameId,
        point: MapPointId,
    },
    RepresentativeDescriptor {
        point: MapPointId,
    },
}

#[derive(Clone, Debug)]
pub struct Map {
    cfg: MapConfig,
    keyframes: BTreeMap<KeyFrameId, KeyFrame>,
    points: Vec<MapPoint>,
    covis: BTreeMap<KeyFrameId, BTreeMap<KeyFrameId, u32>>,
}

impl Map {
    pub fn new(cfg: MapConfig) -> Self {
        Self {
            cfg,
            keyframes: BTreeMap::new(),
            points: Vec::new(),
            covis: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &MapConfig {
        &self.cfg
    }

    pub fn keyframe(&self, id: KeyFrameId) -> Option<&KeyFrame> {
        self.keyframes.get(&id)
    }

    pub fn live_keyframe(&self, id: KeyFrameId) -> Result<&KeyFrame> {
        match self.keyframes.get(&id) {
            Some(kf) if kf.alive => Ok(kf),
            Some(_) => Err(Error::InvalidArgument(format!("{id} has been removed"))),
            None => Err(Error::InvalidArgument(format!("unknown keyframe {id}"))),
        }
    }

    /// All keyframes ever inserted, including tombstoned ones, by id.
    pub fn keyframes(&self) -> impl Iterator<Item = &KeyFrame> {
        self.keyframes.values()
    }

    pub fn live_keyframes(&self) -> impl Iterator<Item = &KeyFrame> {
        self.keyframes.values().filter(|kf| kf.alive)
    }

    pub fn num_live_keyframes(&self) -> usize {
        self.live_keyframes().count()
    }

    pub fn point(&self, id: MapPointId) -> Option<&MapPoint> {
        self.points.get(id.0 as usize)
    }

    pub fn live_point(&self, id: MapPointId) -> Option<&MapPoint> {
        self.point(id).filter(|p| p.alive)
    }

    pub fn points(&self) -> impl Iterator<Item = &MapPoint> {
        self.points.iter()
    }

    pub fn live_points(&self) -> impl Iterator<Item = &MapPoint> {
        self.points.iter().filter(|p| p.alive)
    }

    pub fn num_live_points(&self) -> usize {
        self.live_points().count()
    }

    pub fn num_observations(&self) -> usize {
        self.live_points().map(|p| p.observations.len()).sum()
    }

    pub fn covisibility_weight(&self, a: KeyFrameId, b: KeyFrameId) -> u32 {
        self.covis.get(&a).and_then(|m| m.get(&b)).copied().unwrap_or(0)
    }

    pub fn num_edges(&self) -> usize {
        self.covis.values().map(|m| m.len()).sum::<usize>() / 2
    }

    /// All neighbors of `kf` by descending weight (ties: lower id first).
    pub fn covisibility_weights(&self, kf: KeyFrameId) -> Vec<(KeyFrameId, u32)> {
        let mut v: Vec<(KeyFrameId, u32)> = self
            .covis
            .get(&kf)
            .map(|m| m.iter().map(|(k, w)| (*k, *w)).collect())
            .unwrap_or_default();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn covisible_neighbors(&self, kf: KeyFrameId, n: usize) -> Result<Vec<KeyFrameId>> {
        self.live_keyframe(kf)?;
        Ok(self
            .covisibility_weights(kf)
            .into_iter()
            .filter(|(_, w)| *w >= self.cfg.min_covis_weight)
            .take(n)
            .map(|(k, _)| k)
            .collect())
    }

    pub fn insert_keyframe(&mut self, mut kf: KeyFrame) -> Result<KeyFrameId> {
        let id = kf.id;
        if self.keyframes.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("duplicate keyframe id {id}")));
        }
        if let Some(kp) = kf.keypoints.iter().find(|kp| kp.level >= self.cfg.num_levels) {
            return Err(Error::InvalidArgument(format!(
                "{id}: level {} beyond map pyramid",
                kp.level
            )));
        }
        let pending: Vec<(usize, MapPointId)> = kf.bound_points().collect();
        for &(_, mp) in &pending {
            if self.live_point(mp).is_none() {
                return Err(Error::InvalidState(format!("{id} binds dead or unknown {mp}")));
            }
        }
        kf.mp_bindings.iter_mut().for_each(|b| *b = None);
        kf.alive = true;
        self.keyframes.insert(id, kf);
        self.covis.entry(id).or_default();
        for (kp, mp) in pending {
            if let Err(e) = self.add_observation(mp, id, kp) {
                // Duplicate handover of one point to two keypoints: keep the first.
                if !matches!(e, Error::Conflict(_)) {
                    return Err(e);
                }
            }
        }
        Ok(id)
    }

    /// Creates a point observed at each `(keyframe, keypoint)` slot.
    pub fn create_map_point(
        &mut self,
        position: Vec3,
        first_kf: KeyFrameId,
        observations: &[(KeyFrameId, usize)],
    ) -> Result<MapPointId> {
        if observations.is_empty() {
            return Err(Error::InvalidArgument(
                "a map point needs at least one observation".into(),
            ));
        }
        for (i, &(kf, kp)) in observations.iter().enumerate() {
            let frame = self.live_keyframe(kf)?;
            if kp >= frame.len() {
                return Err(Error::InvalidArgument(format!("{kf}: keypoint {kp} out of range")));
            }
            if let Some(other) = frame.mp_bindings[kp] {
                return Err(Error::Conflict(format!("{kf}:{kp} already bound to {other}")));
            }
            if observations[..i].iter().any(|o| o.0 == kf) {
                return Err(Error::Conflict(format!("{kf} listed twice")));
            }
        }
        let id = MapPointId(self.points.len() as u64);
        let (kf0, kp0) = observations[0];
        let rep = *self.keyframes[&kf0].descriptor(kp0);
        self.points.push(MapPoint {
            id,
            position,
            rep_descriptor: rep,
            observations: Vec::new(),
            scale_counts: vec![0; self.cfg.num_levels as usize],
            found_count: 1,
            visible_count: 1,
            first_kf_id: first_kf,
            alive: true,
        });
        for &(kf, kp) in observations {
            self.attach(id, kf, kp);
        }
        self.refresh_descriptor(id);
        Ok(id)
    }

    pub fn add_observation(&mut self, mp: MapPointId, kf: KeyFrameId, kp: usize) -> Result<()> {
        let point = self
            .live_point(mp)
            .ok_or_else(|| Error::InvalidState(format!("{mp} is dead or unknown")))?;
        if point.is_observed_by(kf) {
            return Err(Error::Conflict(format!("{mp} already observed by {kf}")));
        }
        let frame = match self.keyframes.get(&kf) {
            Some(f) if f.alive => f,
            _ => return Err(Error::InvalidState(format!("{kf} is dead or unknown"))),
        };
        if kp >= frame.len() {
            return Err(Error::InvalidArgument(format!("{kf}: keypoint {kp} out of range")));
        }
        if let Some(other) = frame.mp_bindings[kp] {
            return Err(Error::Conflict(format!("{kf}:{kp} already bound to {other}")));
        }
        self.attach(mp, kf, kp);
        self.refresh_descriptor(mp);
        Ok(())
    }

    /// Returns `true` if the point was killed because too few observations remained.
    pub fn erase_observation(&mut self, mp: MapPointId, kf: KeyFrameId) -> Result<bool> {
        let observed = self.live_point(mp).is_some_and(|p| p.is_observed_by(kf));
        if !observed {
            return Err(Error::InvalidArgument(format!("{mp} has no live observation in {kf}")));
        }
        self.detach(mp, kf);
        if self.points[mp.0 as usize].observations.len() < self.cfg.min_obs_keep {
            self.kill(mp);
            return Ok(true);
        }
        self.refresh_descriptor(mp);
        Ok(false)
    }

    /// Removes every observation and tombstones the point.
    pub fn kill_map_point(&mut self, mp: MapPointId) -> Result<()> {
        if self.live_point(mp).is_none() {
            return Err(Error::InvalidArgument(format!("{mp} is dead or unknown")));
        }
        self.kill(mp);
        Ok(())
    }

    /// Merges `loser` into `winner`. The winner must have at least as many observations.
    pub fn replace_map_point(&mut self, loser: MapPointId, winner: MapPointId) -> Result<()> {
        if loser == winner {
            return Err(Error::InvalidArgument(format!("cannot merge {loser} into itself")));
        }
        let (l, w) = match (self.live_point(loser), self.live_point(winner)) {
            (Some(l), Some(w)) => (l, w),
            _ => return Err(Error::InvalidArgument(format!("merge {loser}->{winner} on dead point"))),
        };
        if l.observations.len() > w.observations.len() {
            return Err(Error::InvalidArgument(format!(
                "wrong merge direction: {loser} has {} observations, {winner} has {}",
                l.observations.len(),
                w.observations.len()
            )));
        }
        let moved = l.observations.clone();
        let (found, visible) = (l.found_count, l.visible_count);
        self.kill(loser);
        for (kf, kp) in moved {
            if !self.points[winner.0 as usize].is_observed_by(kf) {
                self.attach(winner, kf, kp as usize);
            }
        }
        let w = &mut self.points[winner.0 as usize];
        w.found_count += found;
        w.visible_count += visible;
        self.refresh_descriptor(winner);
        Ok(())
    }

    /// Erases every observation held by `kf` and tombstones it.
    pub fn remove_keyframe(&mut self, kf: KeyFrameId) -> Result<()> {
        let frame = self.live_keyframe(kf)?;
        let bound: Vec<MapPointId> = frame.bound_points().map(|(_, mp)| mp).collect();
        for mp in bound {
            self.erase_observation(mp, kf)?;
        }
        self.keyframes.get_mut(&kf).expect("checked above").alive = false;
        self.covis.remove(&kf);
        Ok(())
    }

    pub fn set_keyframe_pose(&mut self, kf: KeyFrameId, pose: SE3Pose) -> Result<()> {
        let frame = self
            .keyframes
            .get_mut(&kf)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown keyframe {kf}")))?;
        frame.pose = pose;
        Ok(())
    }

    pub fn set_point_position(&mut self, mp: MapPointId, position: Vec3) -> Result<()> {
        let p = self
            .points
            .get_mut(mp.0 as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown point {mp}")))?;
        p.position = position;
        Ok(())
    }

    pub fn increase_visible(&mut self, mp: MapPointId, n: u32) {
        if let Some(p) = self.points.get_mut(mp.0 as usize) {
            p.visible_count += n;
        }
    }

    pub fn increase_found(&mut self, mp: MapPointId, n: u32) {
        if let Some(p) = self.points.get_mut(mp.0 as usize) {
            p.found_count += n;
        }
    }

    fn attach(&mut self, mp: MapPointId, kf: KeyFrameId, kp: usize) {
        let level = self.keyframes[&kf].keypoints[kp].level as usize;
        let point = &mut self.points[mp.0 as usize];
        for &(other, _) in &point.observations {
            *self.covis.entry(kf).or_default().entry(other).or_insert(0) += 1;
            *self.covis.entry(other).or_default().entry(kf).or_insert(0) += 1;
        }
        let pos = point.observations.partition_point(|o| o.0 < kf);
        point.observations.insert(pos, (kf, kp as u32));
        point.scale_counts[level] += 1;
        self.keyframes.get_mut(&kf).expect("live keyframe").mp_bindings[kp] = Some(mp);
    }

    fn detach(&mut self, mp: MapPointId, kf: KeyFrameId) {
        let point = &mut self.points[mp.0 as usize];
        let pos = point
            .observations
            .binary_search_by_key(&kf, |o| o.0)
            .expect("observation exists");
        let (_, kp) = point.observations.remove(pos);
        for &(other, _) in &point.observations {
            decrement_edge(&mut self.covis, kf, other);
            decrement_edge(&mut self.covis, other, kf);
        }
        let frame = self.keyframes.get_mut(&kf).expect("observing keyframe");
        let level = frame.keypoints[kp as usize].level as usize;
        frame.mp_bindings[kp as usize] = None;
        point.scale_counts[level] -= 1;
    }

    fn kill(&mut self, mp: MapPointId) {
        while let Some(&(kf, _)) = self.points[mp.0 as usize].observations.last() {
            self.detach(mp, kf);
        }
        self.points[mp.0 as usize].alive = false;
    }

    fn refresh_descriptor(&mut self, mp: MapPointId) {
        let point = &self.points[mp.0 as usize];
        let descriptors: Vec<BinaryDescriptor> = point
            .observations
            .iter()
            .map(|&(kf, kp)| *self.keyframes[&kf].descriptor(kp as usize))
            .collect();
        if let Some(d) = representative_descriptor(&descriptors) {
            self.points[mp.0 as usize].rep_descriptor = d;
        }
    }

    /// Recomputes every derived quantity by brute force and reports mismatches.
    pub fn audit(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut observers: BTreeMap<MapPointId, Vec<KeyFrameId>> = BTreeMap::new();

        for kf in self.keyframes.values() {
            for (kp, mp) in kf.bound_points() {
                let point = match self.point(mp) {
                    Some(p) if p.alive && kf.alive => p,
                    _ => {
                        out.push(Violation::DeadReference { kf: kf.id, point: mp });
                        continue;
                    }
                };
                if point.observation_in(kf.id) != Some(kp) {
                    out.push(Violation::Binding {
                        kf: kf.id,
                        keypoint: kp,
                        point: mp,
                    });
                }
                observers.entry(mp).or_default().push(kf.id);
            }
        }

        for p in &self.points {
            if !p.alive {
                if !p.observations.is_empty() {
                    out.push(Violation::ObservationCount { point: p.id });
                }
                continue;
            }
            let mut expected = vec![0u32; self.cfg.num_levels as usize];
            for &(kf, kp) in &p.observations {
                match self.keyframes.get(&kf) {
                    Some(frame) if frame.alive && frame.mp_bindings.get(kp as usize) == Some(&Some(p.id)) => {
                        expected[frame.keypoints[kp as usize].level as usize] += 1;
                    }
                    _ => out.push(Violation::Binding {
                        kf,
                        keypoint: kp as usize,
                        point: p.id,
                    }),
                }
            }
            if p.scale_counts != expected {
                out.push(Violation::ScaleCounts {
                    point: p.id,
                    stored: p.scale_counts.clone(),
                    expected,
                });
            }
            let sum: u32 = p.scale_counts.iter().sum();
            let bound = observers.get(&p.id).map_or(0, Vec::len);
            if sum as usize != p.observations.len() || bound != p.observations.len() {
                out.push(Violation::ObservationCount { point: p.id });
            }
            let descriptors: Vec<BinaryDescriptor> = p
                .observations
                .iter()
                .filter_map(|&(kf, kp)| self.keyframes.get(&kf).map(|f| *f.descriptor(kp as usize)))
                .collect();
            if representative_descriptor(&descriptors).is_some_and(|d| d != p.rep_descriptor) {
                out.push(Violation::RepresentativeDescriptor { point: p.id });
            }
        }

        // Covisibility from the keyframes' bindings, independent of observation lists.
        let mut expected_edges: BTreeMap<(KeyFrameId, KeyFrameId), u32> = BTreeMap::new();
        for kfs in observers.values() {
            for (i, a) in kfs.iter().enumerate() {
                for b in &kfs[i + 1..] {
                    let key = if a < b { (*a, *b) } else { (*b, *a) };
                    *expected_edges.entry(key).or_insert(0) += 1;
                }
            }
        }
        let mut stored_edges: BTreeMap<(KeyFrameId, KeyFrameId), u32> = BTreeMap::new();
        for (a, m) in &self.covis {
            for (b, w) in m {
                if a < b {
                    stored_edges.insert((*a, *b), *w);
                }
                if self.covisibility_weight(*b, *a) != *w {
                    out.push(Violation::CovisibilityWeight {
                        a: *a,
                        b: *b,
                        stored: *w,
                        expected: self.covisibility_weight(*b, *a),
                    });
                }
            }
        }
        let keys: std::collections::BTreeSet<_> = expected_edges.keys().chain(stored_edges.keys()).copied().collect();
        for (a, b) in keys {
            let stored = stored_edges.get(&(a, b)).copied().unwrap_or(0);
            let expected = expected_edges.get(&(a, b)).copied().unwrap_or(0);
            if stored != expected {
                out.push(Violation::CovisibilityWeight { a, b, stored, expected });
            }
        }
        out
    }
}

fn decrement_edge(covis: &mut BTreeMap<KeyFrameId, BTreeMap<KeyFrameId, u32>>, a: KeyFrameId, b: KeyFrameId) {
    if let Some(m) = covis.get_mut(&a) {
        if let Some(w) = m.get_mut(&b) {
            *w -= 1;
            if *w == 0 {
                m.remove(&b);
            }
        }
    }
}

/// The descriptor with the smallest median distance to the others; ties go to
/// the earliest entry (observations are stored in keyframe-id order).
pub fn representative_descriptor(descriptors: &[BinaryDescriptor]) -> Option<BinaryDescriptor> {
    let n = descriptors.len();
    if n <= 2 {
        return descriptors.first().copied();
    }
    let mut best: Option<(u32, usize)> = None;
    let mut dists = Vec::with_capacity(n - 1);
    for i in 0..n {
        dists.clear();
        dists.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| hamming(&descriptors[i], &descriptors[j])),
        );
        dists.sort_unstable();
        let median = dists[(dists.len() - 1) / 2];
        if best.is_none_or(|(m, _)| median < m) {
            best = Some((median, i));
        }
    }
    best.map(|(_, i)| descriptors[i])
}
