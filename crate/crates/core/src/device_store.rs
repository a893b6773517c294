//! Persistent device-side keyframe storage, modeled by residency flags and a
//! byte-accurate upload ledger.
//!
//! Every keyframe is uploaded once when it enters local mapping. Stages that
//! read neighbor keyframes record their accesses here; the ledger tracks what
//! a strategy that re-uploads every neighbor on each access would have moved,
//! alongside what the persistent strategy actually moves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BinaryDescriptor;
use crate::map::{KeyFrame, KeyFrameId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Upload,
    Triangulation,
    Fusion,
    LocalBa,
    Culling,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceStoreConfig {
    /// Bytes per keypoint record (position, level, padding).
    pub keypoint_record_bytes: u64,
    /// Keyframe slots reserved at start-up.
    pub capacity: usize,
}

impl Default for DeviceStoreConfig {
    fn default() -> Self {
        Self {
            keypoint_record_bytes: 16,
            capacity: 4096,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredKeyFrame {
    pub kf_id: KeyFrameId,
    pub payload_bytes: u64,
    pub resident: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferLedger {
    pub persistent_bytes_up: u64,
    /// Counterfactual: bytes a re-upload-on-every-access strategy would have moved.
    pub naive_bytes_up: u64,
    pub per_stage_small_transfers: Vec<(StageTag, u64)>,
    pub evictions: u64,
    pub uploads: u64,
}

impl TransferLedger {
    /// `naive / persistent`, or `None` before anything was uploaded.
    pub fn savings_ratio(&self) -> Option<f64> {
        (self.persistent_bytes_up > 0).then(|| self.naive_bytes_up as f64 / self.persistent_bytes_up as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LedgerDelta {
    pub persistent: u64,
    pub naive: u64,
}

pub fn payload_bytes(num_keypoints: usize, num_descriptors: usize, keypoint_record_bytes: u64) -> u64 {
    num_keypoints as u64 * keypoint_record_bytes + num_descriptors as u64 * BinaryDescriptor::BYTES as u64
}

#[derive(Clone, Debug)]
pub struct DeviceStore {
    cfg: DeviceStoreConfig,
    entries: BTreeMap<KeyFrameId, StoredKeyFrame>,
    resident_count: usize,
    ledger: TransferLedger,
}

impl DeviceStore {
    pub fn new(cfg: DeviceStoreConfig) -> Self {
        Self {
            cfg,
            entries: BTreeMap::new(),
            resident_count: 0,
            ledger: TransferLedger::default(),
        }
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.ledger
    }

    pub fn entry(&self, kf: KeyFrameId) -> Option<&StoredKeyFrame> {
        self.entries.get(&kf)
    }

    pub fn is_resident(&self, kf: KeyFrameId) -> bool {
        self.entries.get(&kf).is_some_and(|e| e.resident)
    }

    pub fn resident_count(&self) -> usize {
        self.resident_count
    }

    pub fn upload_keyframe(&mut self, kf: &KeyFrame) -> Result<StoredKeyFrame> {
        if self.entries.contains_key(&kf.id) {
            return Err(Error::InvalidState(format!("{} already uploaded", kf.id)));
        }
        if self.resident_count >= self.cfg.capacity {
            return Err(Error::CapacityExceeded {
                capacity: self.cfg.capacity,
            });
        }
        let stored = StoredKeyFrame {
            kf_id: kf.id,
            payload_bytes: payload_bytes(kf.keypoints.len(), kf.descriptors.len(), self.cfg.keypoint_record_bytes),
            resident: true,
        };
        self.entries.insert(kf.id, stored);
        self.resident_count += 1;
        self.ledger.persistent_bytes_up += stored.payload_bytes;
        self.ledger.uploads += 1;
        Ok(stored)
    }

    /// Neighbors read by a stage: free for the persistent strategy, a full
    /// re-upload for the naive one.
    pub fn record_neighbor_access(&mut self, _stage: StageTag, neighbors: &[KeyFrameId]) -> Result<LedgerDelta> {
        let mut naive = 0;
        for id in neighbors {
            match self.entries.get(id) {
                Some(e) if e.resident => naive += e.payload_bytes,
                _ => return Err(Error::InvalidState(format!("{id} accessed while not resident"))),
            }
        }
        self.ledger.naive_bytes_up += naive;
        Ok(LedgerDelta { persistent: 0, naive })
    }

    /// Per-iteration payloads that are not keyframes (both strategies pay them).
    pub fn record_small_transfer(&mut self, stage: StageTag, bytes: u64) -> LedgerDelta {
        self.ledger.per_stage_small_transfers.push((stage, bytes));
        self.ledger.persistent_bytes_up += bytes;
        self.ledger.naive_bytes_up += bytes;
        LedgerDelta {
            persistent: bytes,
            naive: bytes,
        }
    }

    pub fn evict_keyframe(&mut self, kf: KeyFrameId) -> Result<StoredKeyFrame> {
        match self.entries.get_mut(&kf) {
            Some(e) if e.resident => {
                e.resident = false;
                self.resident_count -= 1;
                self.ledger.evictions += 1;
                Ok(*e)
            }
            _ => Err(Error::InvalidArgument(format!("{kf} is not resident"))),
        }
    }
}
