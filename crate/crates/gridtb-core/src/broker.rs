//! Resource broker: matches job ads against the information service,
//! drives the job state machine with a Logging & Bookkeeping history,
//! enforces the 512-concurrent-job ceiling, and carries the silent
//! database-corruption fault of dual-processor broker nodes.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::infosys::ResourceRecord;
use crate::jdl::{eval, JobAd, Value};
use crate::sim::VirtualMs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "job-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Submitted,
    Waiting,
    Ready,
    Scheduled,
    Running,
    Done,
    Aborted,
    Cleared,
}

impl JobState {
    pub fn as_str(&self) -> &'static str {
        match self {
            JobState::Submitted => "SUBMITTED",
            JobState::Waiting => "WAITING",
            JobState::Ready => "READY",
            JobState::Scheduled => "SCHEDULED",
            JobState::Running => "RUNNING",
            JobState::Done => "DONE",
            JobState::Aborted => "ABORTED",
            JobState::Cleared => "CLEARED",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Done | JobState::Aborted | JobState::Cleared)
    }

    fn may_transition_to(&self, to: JobState) -> bool {
        use JobState::*;
        match (self, to) {
            // any non-terminal state may abort
            (s, Aborted) if !s.is_terminal() => true,
            (Submitted, Waiting) => true,
            (Waiting, Waiting) => true, // retry self-loop
            (Waiting, Ready) => true,
            (Ready, Scheduled) => true,
            (Scheduled, Running) => true,
            (Running, Done) => true,
            (Done, Cleared) | (Aborted, Cleared) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbEntry {
    pub at: VirtualMs,
    pub from: JobState,
    pub to: JobState,
    pub reason: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("illegal job state transition {from:?} -> {to:?}")]
pub struct IllegalTransition {
    pub from: JobState,
    pub to: JobState,
}

#[derive(Debug, Clone)]
pub struct JobRecord {
    pub job_id: JobId,
    pub ad: JobAd,
    pub state: JobState,
    pub matched_ce: Option<String>,
    pub lb_history: Vec<LbEntry>,
    pub rb: String,
    pub subject: String,
    pub workload: String,
    pub walltime_ms: u64,
}

impl JobRecord {
    pub fn new(
        job_id: JobId,
        ad: JobAd,
        rb: &str,
        subject: &str,
        workload: &str,
        walltime_ms: u64,
    ) -> Self {
        JobRecord {
            job_id,
            ad,
            state: JobState::Submitted,
            matched_ce: None,
            lb_history: Vec::new(),
            rb: rb.to_string(),
            subject: subject.to_string(),
            workload: workload.to_string(),
            walltime_ms,
        }
    }

    /// Append a Logging & Bookkeeping transition; rejects edges outside the
    /// declared state graph and non-monotone timestamps.
    pub fn transition(
        &mut self,
        at: VirtualMs,
        to: JobState,
        reason: &str,
    ) -> Result<(), IllegalTransition> {
        let from = self.state;
        if !from.may_transition_to(to) {
            return Err(IllegalTransition { from, to });
        }
        debug_assert!(self.lb_history.last().is_none_or(|e| e.at <= at));
        self.lb_history.push(LbEntry {
            at,
            from,
            to,
            reason: reason.to_string(),
        });
        self.state = to;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbState {
    Ok,
    Corrupted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RbCondition {
    Up,
    Restarting { until: VirtualMs },
    Recovering { until: VirtualMs },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    Refuse,
    Queue,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubmitRefusal {
    #[error("broker at capacity ({0} active jobs)")]
    AtCapacity(u32),
    #[error("broker down")]
    RbDown,
}

/// The per-broker bookkeeping: which jobs it controls and the health of its
/// job-requests database. The CondorG ceiling is the `max_active` bound.
#[derive(Debug)]
pub struct ResourceBroker {
    pub rb_id: String,
    pub dual_cpu: bool,
    pub max_active: u32,
    pub db_state: DbState,
    pub condition: RbCondition,
    pub overflow: OverflowPolicy,
    pub recovery_ms: u64,
    pub detect_window_ms: u64,
    active_jobs: BTreeSet<JobId>,
    pending: VecDeque<JobId>,
    pub peak_active: u32,
    pub corrupted_since: Option<VirtualMs>,
}

impl ResourceBroker {
    pub fn new(rb_id: &str, dual_cpu: bool, recovery_ms: u64, detect_window_ms: u64) -> Self {
        ResourceBroker {
            rb_id: rb_id.to_string(),
            dual_cpu,
            max_active: 512,
            db_state: DbState::Ok,
            condition: RbCondition::Up,
            overflow: OverflowPolicy::Refuse,
            recovery_ms,
            detect_window_ms,
            active_jobs: BTreeSet::new(),
            pending: VecDeque::new(),
            peak_active: 0,
            corrupted_since: None,
        }
    }

    pub fn active_count(&self) -> u32 {
        self.active_jobs.len() as u32
    }

    pub fn active_jobs(&self) -> impl Iterator<Item = JobId> + '_ {
        self.active_jobs.iter().copied()
    }

    pub fn is_up(&self, now: VirtualMs) -> bool {
        match self.condition {
            RbCondition::Up => true,
            RbCondition::Restarting { until } | RbCondition::Recovering { until } => now >= until,
        }
    }

    /// Admission control only; the engine creates the job record once a slot
    /// is granted. With the queue overflow policy the job id is parked and
    /// admitted later via [`ResourceBroker::admit_pending`].
    pub fn try_admit(&mut self, job: JobId, now: VirtualMs) -> Result<bool, SubmitRefusal> {
        if !self.is_up(now) {
            return Err(SubmitRefusal::RbDown);
        }
        if self.active_count() >= self.max_active {
            return match self.overflow {
                OverflowPolicy::Refuse => Err(SubmitRefusal::AtCapacity(self.active_count())),
                OverflowPolicy::Queue => {
                    self.pending.push_back(job);
                    Ok(false)
                }
            };
        }
        self.activate(job);
        Ok(true)
    }

    fn activate(&mut self, job: JobId) {
        self.active_jobs.insert(job);
        self.peak_active = self.peak_active.max(self.active_count());
        debug_assert!(self.active_count() <= self.max_active);
    }

    /// A job left the active set (done or aborted). Returns a parked job
    /// now admitted under the queue overflow policy, if any.
    pub fn release(&mut self, job: JobId) -> Option<JobId> {
        if !self.active_jobs.remove(&job) {
            return None;
        }
        if self.active_count() < self.max_active {
            if let Some(next) = self.pending.pop_front() {
                self.activate(next);
                return Some(next);
            }
        }
        None
    }

    /// Begin recovery from database corruption: brokers daemons stop, the
    /// database is cleaned, and every active job is lost. Returns the jobs
    /// to abort.
    pub fn begin_recovery(&mut self, now: VirtualMs) -> (VirtualMs, Vec<JobId>) {
        let until = now + self.recovery_ms;
        self.condition = RbCondition::Recovering { until };
        let lost: Vec<JobId> = self.active_jobs.iter().copied().collect();
        self.active_jobs.clear();
        self.pending.clear();
        (until, lost)
    }

    pub fn finish_recovery(&mut self) {
        self.db_state = DbState::Ok;
        self.condition = RbCondition::Up;
        self.corrupted_since = None;
    }
}

/// A match candidate with its evaluated rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedCe {
    pub ce_id: String,
    pub site: String,
    pub rank: i64,
    pub data_local: bool,
}

fn resolve_for(ad: &JobAd, record: &ResourceRecord) -> impl Fn(&str) -> Value {
    let ce = record.ce().cloned();
    let site = record.site.clone();
    let resource_id = record.resource_id.clone();
    let vo = ad.virtual_organisation.clone();
    move |name: &str| {
        let Some(ce) = &ce else {
            return Value::Undefined;
        };
        match name {
            "other.TotalCPUs" => Value::Int(ce.total_cpus as i64),
            "other.FreeCPUs" => Value::Int(ce.free_cpus as i64),
            "other.QueueLength" => Value::Int(ce.queue_length as i64),
            "other.EstimatedTraversalTime" => Value::Int(ce.estimated_traversal_time_s as i64),
            "other.Site" => Value::Str(site.clone()),
            "other.CEId" => Value::Str(resource_id.clone()),
            "VirtualOrganisation" => Value::Str(vo.clone()),
            _ => Value::Undefined,
        }
    }
}

/// Matchmaking over a snapshot of top-node records: keep CEs that support
/// the ad's VO and satisfy its requirements, order by descending rank with
/// ascending ce_id as the tie-break. When the ad names input data, CEs at
/// sites holding a replica of every LFN outrank all others.
///
/// Pure in (ad, records, data_sites): no state is read or written.
pub fn match_candidates(
    ad: &JobAd,
    records: &[ResourceRecord],
    data_sites: Option<&BTreeSet<String>>,
) -> Vec<RankedCe> {
    let mut out = Vec::new();
    for record in records {
        let Some(ce) = record.ce() else { continue };
        if !ce
            .supported_vos
            .iter()
            .any(|v| v == &ad.virtual_organisation)
        {
            continue;
        }
        let resolver = resolve_for(ad, record);
        if !eval(&ad.requirements, &resolver).is_true() {
            continue; // false or undefined both exclude the candidate
        }
        let rank = match eval(&ad.rank, &resolver) {
            Value::Int(v) => v,
            _ => i64::MIN, // unrankable candidates sort last
        };
        let data_local = match data_sites {
            Some(sites) => sites.contains(&record.site),
            None => false,
        };
        out.push(RankedCe {
            ce_id: record.resource_id.clone(),
            site: record.site.clone(),
            rank,
            data_local,
        });
    }
    out.sort_by(|a, b| {
        b.data_local
            .cmp(&a.data_local)
            .then(b.rank.cmp(&a.rank))
            .then(a.ce_id.cmp(&b.ce_id))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infosys::{CeAttrs, ResourceAttrs};
    use crate::jdl::parse_jdl;

    fn ce_record(id: &str, site: &str, free: u32, ett: u64) -> ResourceRecord {
        ResourceRecord {
            resource_id: id.into(),
            site: site.into(),
            attrs: ResourceAttrs::Ce(CeAttrs {
                total_cpus: 8,
                free_cpus: free,
                queue_length: 0,
                estimated_traversal_time_s: ett,
                supported_vos: vec!["atlas".into()],
            }),
            published_at: 0,
        }
    }

    fn ad(requirements: &str, rank: &str) -> JobAd {
        parse_jdl(&format!(
            "Executable=\"sim\"; VirtualOrganisation=\"atlas\"; \
             Requirements={requirements}; Rank={rank};"
        ))
        .unwrap()
    }

    #[test]
    fn rank_orders_by_negated_traversal_time() {
        let records = vec![
            ce_record("ce-b", "ral", 4, 20),
            ce_record("ce-a", "cern", 4, 10),
        ];
        let got = match_candidates(
            &ad("other.FreeCPUs>0", "-other.EstimatedTraversalTime"),
            &records,
            None,
        );
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].ce_id, "ce-a");
        assert_eq!(got[0].rank, -10);
        assert_eq!(got[1].ce_id, "ce-b");
        assert_eq!(got[1].rank, -20);
    }

    #[test]
    fn requirements_excluding_all_yields_no_match() {
        let records = vec![ce_record("ce-a", "cern", 0, 10)];
        let got = match_candidates(&ad("other.FreeCPUs>0", "0"), &records, None);
        assert!(got.is_empty());
    }

    #[test]
    fn equal_ranks_tie_break_on_ascending_ce_id() {
        let records = vec![
            ce_record("ce-b", "ral", 4, 10),
            ce_record("ce-a", "cern", 4, 10),
        ];
        let got = match_candidates(&ad("other.FreeCPUs>0", "1"), &records, None);
        assert_eq!(got[0].ce_id, "ce-a");
        assert_eq!(got[1].ce_id, "ce-b");
    }

    #[test]
    fn undefined_requirement_excludes_candidate() {
        let records = vec![ce_record("ce-a", "cern", 4, 10)];
        let got = match_candidates(&ad("other.NoSuchAttr>1", "0"), &records, None);
        assert!(got.is_empty());
    }

    #[test]
    fn unsupported_vo_is_filtered_before_requirements() {
        let mut record = ce_record("ce-a", "cern", 4, 10);
        if let ResourceAttrs::Ce(ce) = &mut record.attrs {
            ce.supported_vos = vec!["cms".into()];
        }
        let got = match_candidates(&ad("other.FreeCPUs>0", "0"), &[record], None);
        assert!(got.is_empty());
    }

    #[test]
    fn data_local_sites_rank_first() {
        let records = vec![
            ce_record("ce-a", "cern", 4, 10),
            ce_record("ce-b", "ral", 4, 1),
        ];
        let data_sites: BTreeSet<String> = ["cern".to_string()].into_iter().collect();
        // ce-b has the better rank but ce-a is at the data
        let got = match_candidates(
            &ad("other.FreeCPUs>0", "-other.EstimatedTraversalTime"),
            &records,
            Some(&data_sites),
        );
        assert_eq!(got[0].ce_id, "ce-a");
        assert!(got[0].data_local);
    }

    #[test]
    fn matchmaking_is_pure_and_deterministic() {
        let records = vec![
            ce_record("ce-b", "ral", 4, 20),
            ce_record("ce-a", "cern", 4, 10),
        ];
        let a = match_candidates(
            &ad("other.FreeCPUs>0", "-other.EstimatedTraversalTime"),
            &records,
            None,
        );
        let b = match_candidates(
            &ad("other.FreeCPUs>0", "-other.EstimatedTraversalTime"),
            &records,
            None,
        );
        assert_eq!(a, b);
    }

    #[test]
    fn ceiling_refuses_the_513th_job() {
        let mut rb = ResourceBroker::new("rb1", false, 1_800_000, 3_600_000);
        for i in 0..512 {
            assert!(rb.try_admit(JobId(i), 0).unwrap());
        }
        assert_eq!(
            rb.try_admit(JobId(512), 0),
            Err(SubmitRefusal::AtCapacity(512))
        );
        assert_eq!(rb.active_count(), 512);
        assert_eq!(rb.peak_active, 512);
    }

    #[test]
    fn queue_overflow_policy_parks_and_admits_later() {
        let mut rb = ResourceBroker::new("rb1", false, 1_800_000, 3_600_000);
        rb.overflow = OverflowPolicy::Queue;
        for i in 0..512 {
            rb.try_admit(JobId(i), 0).unwrap();
        }
        assert_eq!(rb.try_admit(JobId(512), 0), Ok(false));
        assert_eq!(rb.active_count(), 512);
        let admitted = rb.release(JobId(0));
        assert_eq!(admitted, Some(JobId(512)));
        assert_eq!(rb.active_count(), 512);
    }

    #[test]
    fn recovery_aborts_all_active_jobs() {
        let mut rb = ResourceBroker::new("rb1", true, 1_800_000, 3_600_000);
        for i in 0..40 {
            rb.try_admit(JobId(i), 0).unwrap();
        }
        rb.db_state = DbState::Corrupted;
        let (until, lost) = rb.begin_recovery(10_000);
        assert_eq!(until, 10_000 + 1_800_000);
        assert_eq!(lost.len(), 40);
        assert_eq!(rb.active_count(), 0);
        assert!(!rb.is_up(10_000));
        rb.finish_recovery();
        assert_eq!(rb.db_state, DbState::Ok);
        assert!(rb.is_up(until));
    }

    #[test]
    fn lb_history_walks_the_declared_graph_only() {
        let ad = ad("other.FreeCPUs>0", "0");
        let mut job = JobRecord::new(JobId(1), ad, "rb1", "/CN=a", "w", 60_000);
        job.transition(0, JobState::Waiting, "queued").unwrap();
        job.transition(0, JobState::Waiting, "no-match").unwrap();
        job.transition(5, JobState::Ready, "matched").unwrap();
        job.transition(5, JobState::Scheduled, "ce accepted")
            .unwrap();
        assert_eq!(
            job.transition(6, JobState::Done, "skipped running"),
            Err(IllegalTransition {
                from: JobState::Scheduled,
                to: JobState::Done
            })
        );
        job.transition(6, JobState::Running, "dispatched").unwrap();
        job.transition(66, JobState::Done, "clean").unwrap();
        assert_eq!(
            job.transition(67, JobState::Aborted, "too late"),
            Err(IllegalTransition {
                from: JobState::Done,
                to: JobState::Aborted
            })
        );
        job.transition(70, JobState::Cleared, "output retrieved")
            .unwrap();
        assert_eq!(job.lb_history.len(), 7);
    }

    #[test]
    fn any_live_state_may_abort() {
        let ad = ad("other.FreeCPUs>0", "0");
        for setup in 0..4 {
            let mut job = JobRecord::new(JobId(1), ad.clone(), "rb1", "/CN=a", "w", 1);
            job.transition(0, JobState::Waiting, "q").unwrap();
            if setup >= 1 {
                job.transition(1, JobState::Ready, "m").unwrap();
            }
            if setup >= 2 {
                job.transition(2, JobState::Scheduled, "s").unwrap();
            }
            if setup >= 3 {
                job.transition(3, JobState::Running, "r").unwrap();
            }
            job.transition(9, JobState::Aborted, "fault").unwrap();
            assert_eq!(job.state, JobState::Aborted);
        }
    }
}
