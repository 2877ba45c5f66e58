//! Computing element: a gatekeeper speaking a GRAM-like submission protocol
//! over a shared gass_cache area, in front of a FIFO batch system of
//! dual-CPU worker nodes.
//!
//! Every accepted job creates `files_per_job` tiny files in the shared
//! cache. The binding resource is the i-node count, not bytes: unclean job
//! exits orphan the whole holding, and even clean exits leak a fraction, so
//! the cache wedges once free i-nodes drop below one job's worth. Nothing
//! ever reclaims orphans except an operator-triggered cleanup that takes the
//! element off the grid and kills whatever was running.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::broker::JobId;
use crate::sim::VirtualMs;

/// Bytes each cache file occupies in the model; the real files rarely
/// exceeded this, which is why byte-based monitoring never saw a problem.
pub const GASS_FILE_BYTES: u64 = 100;

#[derive(Debug, Clone)]
pub struct GassCacheArea {
    pub inode_budget: u64,
    pub orphaned_inodes: u64,
    live: BTreeMap<JobId, u64>,
}

impl GassCacheArea {
    pub fn new(inode_budget: u64) -> Self {
        GassCacheArea {
            inode_budget,
            orphaned_inodes: 0,
            live: BTreeMap::new(),
        }
    }

    pub fn inodes_used(&self) -> u64 {
        self.orphaned_inodes + self.live.values().sum::<u64>()
    }

    pub fn free_inodes(&self) -> u64 {
        self.inode_budget - self.inodes_used()
    }

    /// Disk usage of the area. Stays tiny even when fully wedged: the
    /// binding resource is i-nodes, never bytes.
    pub fn bytes_used(&self) -> u64 {
        self.inodes_used() * GASS_FILE_BYTES
    }

    pub fn holding(&self, job: JobId) -> u64 {
        self.live.get(&job).copied().unwrap_or(0)
    }

    fn charge(&mut self, job: JobId, inodes: u64) {
        debug_assert!(self.free_inodes() >= inodes);
        *self.live.entry(job).or_insert(0) += inodes;
    }

    /// Clean completion: all but `leak` of the job's files are erased; the
    /// leaked remainder is orphaned.
    pub fn release_clean(&mut self, job: JobId, leak: u64) {
        if let Some(held) = self.live.remove(&job) {
            self.orphaned_inodes += leak.min(held);
        }
    }

    /// Unclean end (crash, kill, abort): the whole holding is orphaned.
    pub fn orphan_all(&mut self, job: JobId) {
        if let Some(held) = self.live.remove(&job) {
            self.orphaned_inodes += held;
        }
    }

    fn wipe_orphans(&mut self) {
        self.orphaned_inodes = 0;
    }
}

#[derive(Debug, Clone)]
pub struct BatchSystem {
    pub total_cpus: u32,
    queue: VecDeque<JobId>,
    running: BTreeMap<JobId, ()>,
}

impl BatchSystem {
    pub fn new(worker_nodes: u32, cpus_per_node: u32) -> Self {
        BatchSystem {
            total_cpus: worker_nodes * cpus_per_node,
            queue: VecDeque::new(),
            running: BTreeMap::new(),
        }
    }

    pub fn queue_length(&self) -> u32 {
        self.queue.len() as u32
    }

    pub fn running_count(&self) -> u32 {
        self.running.len() as u32
    }

    pub fn free_cpus(&self) -> u32 {
        self.total_cpus - self.running_count()
    }

    pub fn running_jobs(&self) -> Vec<JobId> {
        self.running.keys().copied().collect()
    }

    pub fn is_running(&self, job: JobId) -> bool {
        self.running.contains_key(&job)
    }

    fn enqueue(&mut self, job: JobId) {
        self.queue.push_back(job);
    }

    pub fn remove_queued(&mut self, job: JobId) {
        self.queue.retain(|&j| j != job);
    }

    pub fn finish(&mut self, job: JobId) {
        self.running.remove(&job);
    }

    pub fn kill_running(&mut self, job: JobId) {
        self.running.remove(&job);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeCondition {
    Up,
    Restarting { until: VirtualMs },
    Cleaning { until: VirtualMs },
}

#[derive(Debug, Clone, Copy)]
pub struct CleanupConfig {
    /// Orphan count that triggers an automatic cleanup, if any.
    pub auto_threshold: Option<u64>,
    pub base_ms: u64,
    pub per_inode_ms: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GramError {
    /// Free i-nodes in the shared cache dropped below one job's file count;
    /// deliberately opaque to the submitter.
    #[error("job submission failed")]
    GramWedged,
    #[error("gatekeeper unreachable")]
    GatekeeperDown,
}

#[derive(Debug)]
pub struct ComputeElement {
    pub ce_id: String,
    pub site: String,
    pub cache: GassCacheArea,
    pub batch: BatchSystem,
    pub files_per_job: u64,
    pub clean_leak_fraction: f64,
    pub condition: CeCondition,
    pub cleanup: CleanupConfig,
    pub supported_vos: Vec<String>,
    pub first_wedge_at: Option<VirtualMs>,
}

impl ComputeElement {
    /// Whether the GRAM protocol is wedged: not enough free i-nodes for the
    /// files one more job would create.
    pub fn gram_wedged(&self) -> bool {
        self.cache.free_inodes() < self.files_per_job
    }

    /// Accept a job: its gass_cache files are created (i-nodes charged) and
    /// it joins the batch queue.
    pub fn gram_submit(&mut self, job: JobId, now: VirtualMs) -> Result<(), GramError> {
        if self.condition != CeCondition::Up {
            return Err(GramError::GatekeeperDown);
        }
        if self.gram_wedged() {
            self.first_wedge_at.get_or_insert(now);
            return Err(GramError::GramWedged);
        }
        self.cache.charge(job, self.files_per_job);
        self.batch.enqueue(job);
        Ok(())
    }

    /// Pull jobs from the queue head while CPUs are free. The caller marks
    /// them running and schedules their completions.
    pub fn dispatchable(&mut self) -> Vec<JobId> {
        let mut out = Vec::new();
        if self.condition != CeCondition::Up {
            return out;
        }
        while self.batch.free_cpus() > 0 && !self.batch.queue.is_empty() {
            let job = self.batch.queue.pop_front().expect("non-empty");
            self.batch.running.insert(job, ());
            out.push(job);
        }
        out
    }

    /// i-nodes left orphaned by a clean exit.
    pub fn clean_leak(&self) -> u64 {
        libm::round(self.clean_leak_fraction * self.files_per_job as f64) as u64
    }

    /// Start a cleanup: compute its duration from the orphan backlog at
    /// trigger time, then take the element off the grid. Jobs running right
    /// now are lost (returned for the caller to abort); their files join the
    /// orphan pile and are wiped together with it when the cleanup ends.
    /// Queued jobs survive and resume dispatch afterwards.
    pub fn begin_cleanup(&mut self, now: VirtualMs) -> Option<(VirtualMs, Vec<JobId>)> {
        if self.condition != CeCondition::Up {
            return None;
        }
        let duration =
            self.cleanup.base_ms + self.cleanup.per_inode_ms * self.cache.orphaned_inodes;
        let until = now + duration;
        self.condition = CeCondition::Cleaning { until };
        let lost = self.batch.running_jobs();
        Some((until, lost))
    }

    pub fn finish_cleanup(&mut self) {
        self.cache.wipe_orphans();
        self.condition = CeCondition::Up;
    }

    pub fn auto_cleanup_due(&self) -> bool {
        self.condition == CeCondition::Up
            && self
                .cleanup
                .auto_threshold
                .is_some_and(|t| self.cache.orphaned_inodes >= t)
    }
}
