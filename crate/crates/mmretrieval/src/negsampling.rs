//! Memory-bank and cross-device negative sampling with staged activation.
//!
//! The memory bank is a FIFO queue of whole mini-batches of detached product
//! embeddings; once it holds `M` batches, a push evicts the oldest. The
//! device group simulates data-parallel training: each logical device holds
//! its current batch, and the other devices' products serve as cross-device
//! negatives. Both sources switch on late in training: cross-device
//! negatives after 50% of total steps and bank negatives after 60% by
//! default.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::losses::NegativeSets;

/// One detached mini-batch snapshot: embeddings and sampling probabilities.
#[derive(Debug, Clone)]
pub struct BankBatch {
    pub embs: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl BankBatch {
    pub fn len(&self) -> usize {
        self.embs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embs.is_empty()
    }
}

/// Bounded FIFO queue of mini-batches. Capacity is counted in batches, not
/// individual embeddings. Capacity zero means the bank never stores
/// anything.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity_batches: usize,
    queue: VecDeque<BankBatch>,
}

impl MemoryBank {
    pub fn new(capacity_batches: usize) -> MemoryBank {
        MemoryBank {
            capacity_batches,
            queue: VecDeque::new(),
        }
    }

    pub fn capacity_batches(&self) -> usize {
        self.capacity_batches
    }

    pub fn len_batches(&self) -> usize {
        self.queue.len()
    }

    /// Total embeddings currently stored.
    pub fn current_size(&self) -> usize {
        self.queue.iter().map(BankBatch::len).sum()
    }

    /// Append a batch; evict the oldest if over capacity.
    pub fn push(&mut self, batch: BankBatch) {
        debug_assert_eq!(batch.embs.len(), batch.probs.len());
        if batch.is_empty() {
            return;
        }
        self.queue.push_back(batch);
        while self.queue.len() > self.capacity_batches {
            self.queue.pop_front();
        }
    }

    /// Batches oldest-first.
    pub fn batches(&self) -> impl Iterator<Item = &BankBatch> {
        self.queue.iter()
    }
}

/// One logical device's current batch. Ids are carried so the querying
/// pair's own product can be excluded from the cross-device gather.
#[derive(Debug, Clone)]
pub struct DeviceBatch {
    pub ids: Vec<u64>,
    pub embs: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

/// All logical devices participating in one bulk-synchronous step.
#[derive(Debug, Clone)]
pub struct DeviceGroup {
    devices: Vec<DeviceBatch>,
}

impl DeviceGroup {
    pub fn new(devices: Vec<DeviceBatch>) -> Result<DeviceGroup> {
        if devices.is_empty() {
            return Err(Error::Config("device group needs at least one device".into()));
        }
        for (i, d) in devices.iter().enumerate() {
            if d.ids.len() != d.embs.len() || d.ids.len() != d.probs.len() {
                return Err(Error::Shape(format!("device {i} has mismatched batch arrays")));
            }
        }
        Ok(DeviceGroup { devices })
    }

    pub fn n_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn device(&self, i: usize) -> &DeviceBatch {
        &self.devices[i]
    }
}

/// Activation thresholds for the two negative sources, as fractions of the
/// total step count.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub total_steps: usize,
    pub cdns_start_frac: f64,
    pub mbns_start_frac: f64,
}

fn threshold(frac: f64, total: usize) -> usize {
    // epsilon guard so 0.6 * total lands on the intended integer boundary
    ((frac * total as f64) - 1e-9).ceil().max(0.0) as usize
}

impl Schedule {
    pub fn new(total_steps: usize, cdns_start_frac: f64, mbns_start_frac: f64) -> Result<Schedule> {
        for f in [cdns_start_frac, mbns_start_frac] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "schedule fraction must lie in [0, 1], got {f}"
                )));
            }
        }
        Ok(Schedule {
            total_steps,
            cdns_start_frac,
            mbns_start_frac,
        })
    }

    /// Paper defaults: cross-device from 50%, memory bank from 60%.
    pub fn standard(total_steps: usize) -> Schedule {
        Schedule {
            total_steps,
            cdns_start_frac: 0.5,
            mbns_start_frac: 0.6,
        }
    }

    pub fn cdns_active(&self, step: usize) -> bool {
        step >= threshold(self.cdns_start_frac, self.total_steps)
    }

    pub fn mbns_active(&self, step: usize) -> bool {
        step >= threshold(self.mbns_start_frac, self.total_steps)
    }
}

/// Assemble the negative sets for one positive pair on `querying_device`.
///
/// Cross-device negatives are every other device's current products minus
/// any entry matching the positive id; bank negatives are the whole queue.
/// Either set is empty before its activation step. Weights are fixed at
/// `w1 = 0.25`, `w2 = 1`.
pub fn sample_negatives(
    bank: &MemoryBank,
    group: &DeviceGroup,
    querying_device: usize,
    step: usize,
    schedule: &Schedule,
    positive_id: u64,
) -> Result<NegativeSets> {
    if step >= schedule.total_steps {
        return Err(Error::Domain(format!(
            "step {step} outside schedule of {} steps",
            schedule.total_steps
        )));
    }
    if querying_device >= group.n_devices() {
        return Err(Error::Config(format!(
            "querying device {querying_device} out of range for {} devices",
            group.n_devices()
        )));
    }
    let mut negs = NegativeSets::empty();
    if schedule.cdns_active(step) {
        for (d, device) in (0..group.n_devices()).zip(group.devices.iter()) {
            if d == querying_device {
                continue;
            }
            for ((id, emb), prob) in device.ids.iter().zip(&device.embs).zip(&device.probs) {
                if *id == positive_id {
                    continue;
                }
                negs.cdns.push(emb.clone(), *prob);
            }
        }
    }
    if schedule.mbns_active(step) {
        for batch in bank.batches() {
            for (emb, prob) in batch.embs.iter().zip(&batch.probs) {
                negs.mbns.push(emb.clone(), *prob);
            }
        }
    }
    Ok(negs)
}
