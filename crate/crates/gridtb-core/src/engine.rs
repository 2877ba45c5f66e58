//! The simulation driver: builds the world from a validated scenario,
//! schedules the initial event set (workload arrivals, replications, armed
//! faults, release gates, fabric installs), and handles every dispatched
//! event until the horizon. One run is single-threaded and owns all of its
//! state; runs never share anything mutable.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::broker::{
    match_candidates, DbState, JobId, JobRecord, JobState, OverflowPolicy, RbCondition,
    ResourceBroker, SubmitRefusal,
};
use crate::compute::{
    BatchSystem, CeCondition, CleanupConfig, ComputeElement, GassCacheArea, GramError,
};
use crate::faults::{arm, FaultKind, FaultSpec};
use crate::identity::{authenticate, AuthnError, AuthzError, Certificate, MapFile, VoRegistry};
use crate::infosys::{CeAttrs, DegradationModel, Gis, ResourceAttrs, ResourceRecord, SeAttrs};
use crate::jdl::JobAd;
use crate::release::{Gate, ReleaseStore, TagState};
use crate::report::{
    FabricMetrics, FaultEventRecord, Metrics, RecoveryRecord, ReleaseGateOutcome, ReleaseMetrics,
    ReleaseTagOutcome, Report, ReportHeader,
};
use crate::rng::{StreamSet, RNG_ALGORITHM};
use crate::scenario::{DegradationKind, Scenario, WorkloadConfig};
use crate::sim::{Event, ScheduleError, Sim, VirtualMs, MS_PER_HOUR, MS_PER_SEC};
use crate::storage::{
    resolve_pfn, transfer_duration_ms, MssBackend, Partition, ReplicaCatalog, StorageElement,
    StoreError,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario setup failed: {0}")]
    Setup(String),
    #[error("internal scheduling bug: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("internal consistency violation: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    pub collect_trace: bool,
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: Report,
    pub trace: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
enum Payload {
    JobArrival { workload: usize, arrival_seq: u64 },
    MatchAttempt { job: JobId },
    BatchDispatch { ce: String },
    JobComplete { job: JobId, ce: String },
    ReplicationStart { rep: usize, file: usize },
    TransferComplete { transfer: u64 },
    FaultFire { fault: usize },
    ServiceRestartDone { target: String },
    CleanupTrigger { ce: String },
    CleanupDone { ce: String },
    CorruptionDetected { rb: String },
    RecoveryDone { rb: String },
    TagProposed { plan: usize },
    GateEvaluated { plan: usize, gate: Gate },
    BypassInstall { plan: usize },
    FabricInstall { install: usize },
}

impl Payload {
    fn kind(&self) -> &'static str {
        match self {
            Payload::JobArrival { .. } => "job-arrival",
            Payload::MatchAttempt { .. } => "match-retry",
            Payload::BatchDispatch { .. } => "batch-dispatch",
            Payload::JobComplete { .. } => "job-complete",
            Payload::ReplicationStart { .. } => "replication-start",
            Payload::TransferComplete { .. } => "transfer-complete",
            Payload::FaultFire { .. } => "fault-fire",
            Payload::ServiceRestartDone { .. } => "service-restart-done",
            Payload::CleanupTrigger { .. } => "cleanup-trigger",
            Payload::CleanupDone { .. } => "cleanup-done",
            Payload::CorruptionDetected { .. } => "corruption-detected",
            Payload::RecoveryDone { .. } => "recovery-done",
            Payload::TagProposed { .. } => "tag-proposed",
            Payload::GateEvaluated { .. } => "gate-evaluated",
            Payload::BypassInstall { .. } => "bypass-install",
            Payload::FabricInstall { .. } => "fabric-install",
        }
    }

    fn detail(&self) -> String {
        match self {
            Payload::JobArrival {
                workload,
                arrival_seq,
            } => {
                format!("workload={workload} n={arrival_seq}")
            }
            Payload::MatchAttempt { job } => format!("{job}"),
            Payload::BatchDispatch { ce } => ce.clone(),
            Payload::JobComplete { job, ce } => format!("{job} on {ce}"),
            Payload::ReplicationStart { rep, file } => format!("rep={rep} file={file}"),
            Payload::TransferComplete { transfer } => format!("transfer={transfer}"),
            Payload::FaultFire { fault } => format!("fault={fault}"),
            Payload::ServiceRestartDone { target } => target.clone(),
            Payload::CleanupTrigger { ce } | Payload::CleanupDone { ce } => ce.clone(),
            Payload::CorruptionDetected { rb } | Payload::RecoveryDone { rb } => rb.clone(),
            Payload::TagProposed { plan } => format!("tag-plan={plan}"),
            Payload::GateEvaluated { plan, gate } => {
                format!("tag-plan={plan} gate={}", gate.as_str())
            }
            Payload::BypassInstall { plan } => format!("bypass={plan}"),
            Payload::FabricInstall { install } => format!("install={install}"),
        }
    }
}

#[derive(Debug)]
struct Transfer {
    lfn: String,
    vo: String,
    dst_host: String,
    size_bytes: u64,
}

#[derive(Debug)]
struct ParkedJob {
    ad: JobAd,
    subject: String,
    workload: usize,
    walltime_ms: u64,
}

struct WorkloadRuntime {
    subjects: Vec<String>,
    cert_issuer: String,
    cert_expired: bool,
}

#[derive(Default)]
struct DownTracker {
    since: Option<VirtualMs>,
    total_ms: u64,
}

impl DownTracker {
    fn down(&mut self, now: VirtualMs) {
        if self.since.is_none() {
            self.since = Some(now);
        }
    }

    fn up(&mut self, now: VirtualMs) {
        if let Some(since) = self.since.take() {
            self.total_ms += now.saturating_sub(since);
        }
    }
}

struct World {
    scenario: Scenario,
    streams: StreamSet,
    gis: Gis,
    map_file: MapFile,
    registries: BTreeMap<String, VoRegistry>,
    trusted_cas: BTreeSet<String>,
    ses: BTreeMap<String, StorageElement>,
    catalogs: BTreeMap<String, ReplicaCatalog>,
    ces: BTreeMap<String, ComputeElement>,
    rbs: BTreeMap<String, ResourceBroker>,
    rb_order: Vec<String>,
    jobs: BTreeMap<JobId, JobRecord>,
    next_job_id: u64,
    completion_handles: BTreeMap<JobId, crate::sim::EventHandle>,
    parked: BTreeMap<JobId, ParkedJob>,
    transfers: BTreeMap<u64, Transfer>,
    next_transfer: u64,
    release: ReleaseStore,
    release_tags: BTreeMap<usize, (u64, VirtualMs)>, // plan index -> (tag id, proposed at)
    fabric_profiles: BTreeMap<String, crate::fabric::CompiledProfile>,
    fabric_nodes: BTreeMap<String, crate::fabric::NodeState>,
    workload_rt: Vec<WorkloadRuntime>,
    faults: Vec<FaultSpec>,
    site_of_se: BTreeMap<String, String>,
    rr_counter: u64,
    match_retry_ms: u64,
    duration_ms: VirtualMs,
    metrics: Metrics,
    downtime: BTreeMap<String, DownTracker>,
    open_corruptions: BTreeMap<String, usize>,
    ce_walltime_sum_ms: BTreeMap<String, (u128, u64)>,
    bypass_installs: u64,
    bypass_refusals: u64,
    fabric_metrics: FabricMetrics,
}

type SimQ = Sim<Payload>;

impl World {
    // -- setup ---------------------------------------------------------------

    fn build(scenario: &Scenario, seed: u64) -> Result<World, RunError> {
        let duration_ms = scenario.duration_h * MS_PER_HOUR;
        let degradation = match scenario.gis.degradation.model {
            DegradationKind::None => DegradationModel::None,
            DegradationKind::LinearLatency => DegradationModel::LinearLatency {
                base_ms: scenario.gis.degradation.base_ms,
            },
            DegradationKind::StaleProb => DegradationModel::StaleProb {
                k: scenario.gis.degradation.k,
            },
        };
        let mut gis = Gis::new(
            scenario.gis.refresh_s * MS_PER_SEC,
            degradation,
            scenario.gis.timeout_ms,
        );

        let mut registries: BTreeMap<String, VoRegistry> = BTreeMap::new();
        let mut catalogs = BTreeMap::new();
        for vo in &scenario.vos {
            registries.insert(
                vo.name.clone(),
                VoRegistry {
                    vo: vo.name.clone(),
                    members: vo.members.iter().cloned().collect(),
                },
            );
            catalogs.insert(
                vo.name.clone(),
                ReplicaCatalog::new(&vo.name, vo.rc_name_byte_budget),
            );
        }

        let mut map_file = MapFile::new();
        for pool in &scenario.pools {
            map_file.add_pool(&pool.vo, pool.capacity, pool.idle_expiry_h * MS_PER_HOUR);
        }

        let all_vos: Vec<String> = scenario.vos.iter().map(|v| v.name.clone()).collect();
        let mut ces = BTreeMap::new();
        let mut ses = BTreeMap::new();
        let mut site_of_se = BTreeMap::new();
        for site in &scenario.sites {
            gis.register_site(&site.name);
            for ce_cfg in &site.ces {
                let ce = ComputeElement {
                    ce_id: ce_cfg.ce_id.clone(),
                    site: site.name.clone(),
                    cache: GassCacheArea::new(ce_cfg.gass_cache_inodes),
                    batch: BatchSystem::new(ce_cfg.worker_nodes, ce_cfg.cpus_per_node),
                    files_per_job: ce_cfg.files_per_job,
                    clean_leak_fraction: ce_cfg.clean_leak_fraction,
                    condition: CeCondition::Up,
                    cleanup: CleanupConfig {
                        auto_threshold: ce_cfg.cleanup.auto_threshold,
                        base_ms: ce_cfg.cleanup.base_s * MS_PER_SEC,
                        per_inode_ms: ce_cfg.cleanup.per_inode_ms,
                    },
                    supported_vos: ce_cfg
                        .supported_vos
                        .clone()
                        .unwrap_or_else(|| all_vos.clone()),
                    first_wedge_at: None,
                };
                ces.insert(ce_cfg.ce_id.clone(), ce);
            }
            for se_cfg in &site.ses {
                let partitions: Vec<Partition> = se_cfg
                    .partitions
                    .iter()
                    .map(|p| Partition {
                        id: p.id.clone(),
                        capacity_bytes: p.capacity_bytes(),
                        used_bytes: 0,
                        inode_budget: p.inodes,
                        inodes_used: 0,
                    })
                    .collect();
                let mut se = StorageElement::new(
                    &se_cfg.host,
                    &site.name,
                    partitions,
                    se_cfg.mounts.clone(),
                    se_cfg.vo_areas.clone(),
                );
                se.manual_paths = se_cfg.manual_paths;
                for dir in &se_cfg.dirs {
                    se.mark_dir(dir);
                }
                se.mss = se_cfg.mss.as_ref().map(|m| MssBackend {
                    migrate_latency_ms: m.migrate_latency_s * MS_PER_SEC,
                    residency_ms: m.residency_s * MS_PER_SEC,
                });
                site_of_se.insert(se_cfg.host.clone(), site.name.clone());
                ses.insert(se_cfg.host.clone(), se);
            }
        }

        let mut rbs = BTreeMap::new();
        let mut rb_order = Vec::new();
        for rb_cfg in &scenario.rbs {
            let mut rb = ResourceBroker::new(
                &rb_cfg.rb_id,
                rb_cfg.dual_cpu,
                rb_cfg.recovery_s * MS_PER_SEC,
                rb_cfg.detect_window_s * MS_PER_SEC,
            );
            rb.overflow = if rb_cfg.overflow == "queue" {
                OverflowPolicy::Queue
            } else {
                OverflowPolicy::Refuse
            };
            rb_order.push(rb_cfg.rb_id.clone());
            rbs.insert(rb_cfg.rb_id.clone(), rb);
        }

        // synthetic users: auto-enrolled unless the scenario pinned a subject
        let default_ca = scenario.cas.first().cloned().unwrap_or_default();
        let mut workload_rt = Vec::new();
        for w in &scenario.workloads {
            let subjects: Vec<String> = match &w.subject {
                Some(s) => vec![s.clone()],
                None => (0..w.users.max(1))
                    .map(|u| format!("/O=gridtb/OU={}/CN=user{u:03}", w.name))
                    .collect(),
            };
            if w.subject.is_none() {
                if let Some(reg) = registries.get_mut(&w.vo) {
                    for s in &subjects {
                        reg.members.insert(s.clone());
                    }
                }
            }
            workload_rt.push(WorkloadRuntime {
                subjects,
                cert_issuer: w
                    .cert
                    .as_ref()
                    .map(|c| c.issuer_ca.clone())
                    .unwrap_or_else(|| default_ca.clone()),
                cert_expired: w.cert.as_ref().map(|c| c.expired).unwrap_or(false),
            });
        }

        let mut fabric_profiles = BTreeMap::new();
        if let Some(fabric) = &scenario.fabric {
            let mut set = crate::fabric::SourceSet::default();
            for (name, text) in &fabric.templates {
                set.templates.insert(
                    name.clone(),
                    crate::fabric::parse_source(name, text)
                        .map_err(|e| RunError::Setup(e.to_string()))?,
                );
            }
            for (name, text) in &fabric.nodes {
                set.nodes.insert(
                    name.clone(),
                    crate::fabric::parse_source(name, text)
                        .map_err(|e| RunError::Setup(e.to_string()))?,
                );
            }
            fabric_profiles = crate::fabric::compile(&set)
                .map_err(|errs| RunError::Setup(format!("fabric compile: {:?}", errs)))?;
        }

        Ok(World {
            faults: scenario.effective_faults(),
            scenario: scenario.clone(),
            streams: StreamSet::new(seed),
            gis,
            map_file,
            registries,
            trusted_cas: scenario.cas.iter().cloned().collect(),
            ses,
            catalogs,
            ces,
            rbs,
            rb_order,
            jobs: BTreeMap::new(),
            next_job_id: 0,
            completion_handles: BTreeMap::new(),
            parked: BTreeMap::new(),
            transfers: BTreeMap::new(),
            next_transfer: 0,
            release: ReleaseStore::new(),
            release_tags: BTreeMap::new(),
            fabric_profiles,
            fabric_nodes: BTreeMap::new(),
            workload_rt,
            site_of_se,
            rr_counter: 0,
            match_retry_ms: scenario.match_retry_s * MS_PER_SEC,
            duration_ms,
            metrics: Metrics::default(),
            downtime: BTreeMap::new(),
            open_corruptions: BTreeMap::new(),
            ce_walltime_sum_ms: BTreeMap::new(),
            bypass_installs: 0,
            bypass_refusals: 0,
            fabric_metrics: FabricMetrics::default(),
        })
    }

    fn seed_initial_events(&mut self, sim: &mut SimQ) -> Result<(), RunError> {
        // converged information service at t=0
        let ce_ids: Vec<String> = self.ces.keys().cloned().collect();
        for ce_id in &ce_ids {
            let record = self.ce_record(ce_id, 0);
            self.gis
                .publish_bootstrap(record)
                .map_err(|e| RunError::Setup(e.to_string()))?;
        }
        let se_hosts: Vec<String> = self.ses.keys().cloned().collect();

        // preload replication sources so each transfer has a replica to pull
        for rep in self.scenario.replication_jobs.clone() {
            for file in &rep.files {
                if !file.preloaded {
                    continue;
                }
                let src = self
                    .ses
                    .get_mut(&rep.src_se)
                    .ok_or_else(|| RunError::Setup(format!("unknown SE {}", rep.src_se)))?;
                let (pfn, _) = resolve_pfn(&file.lfn, &rep.vo, src)
                    .map_err(|e| RunError::Setup(e.to_string()))?;
                if src.object(&pfn.path).is_none() {
                    src.store(&pfn.path, file.size_bytes(), 0)
                        .map_err(|e| RunError::Setup(format!("preloading {}: {e}", pfn)))?;
                    let area = src.vo_areas.get(&rep.vo).cloned().unwrap_or_default();
                    self.catalogs
                        .get_mut(&rep.vo)
                        .ok_or_else(|| RunError::Setup(format!("no catalog for VO {}", rep.vo)))?
                        .register(&file.lfn, &pfn, &area)
                        .map_err(|e| RunError::Setup(e.to_string()))?;
                }
            }
        }
        for host in &se_hosts {
            let record = self.se_record(host, 0);
            self.gis
                .publish_bootstrap(record)
                .map_err(|e| RunError::Setup(e.to_string()))?;
        }

        // workload arrivals: bursts first, then the Poisson process
        for (w_idx, w) in self.scenario.workloads.clone().iter().enumerate() {
            let mut arrival_seq = 0;
            if let Some(burst) = &w.burst {
                for i in 0..burst.count {
                    let at = (burst.at_s + i * burst.interval_s) * MS_PER_SEC;
                    if at > self.duration_ms {
                        break;
                    }
                    sim.schedule(
                        at,
                        Payload::JobArrival {
                            workload: w_idx,
                            arrival_seq,
                        },
                    )?;
                    arrival_seq += 1;
                }
            }
            if w.rate_per_hour > 0.0 {
                let mean_ms = MS_PER_HOUR as f64 / w.rate_per_hour;
                let stream = self
                    .streams
                    .stream(&format!("workload:{}:arrivals", w.name));
                let mut t: u64 = 0;
                loop {
                    t = t.saturating_add(stream.exp_ms(mean_ms));
                    if t > self.duration_ms {
                        break;
                    }
                    sim.schedule(
                        t,
                        Payload::JobArrival {
                            workload: w_idx,
                            arrival_seq,
                        },
                    )?;
                    arrival_seq += 1;
                }
            }
        }

        // replication transfers
        for (rep_idx, rep) in self.scenario.replication_jobs.iter().enumerate() {
            for file_idx in 0..rep.files.len() {
                let at = (rep.start_s + file_idx as u64 * rep.interval_s) * MS_PER_SEC;
                if at > self.duration_ms {
                    continue;
                }
                sim.schedule(
                    at,
                    Payload::ReplicationStart {
                        rep: rep_idx,
                        file: file_idx,
                    },
                )?;
            }
        }

        // armed faults
        for (f_idx, spec) in self.faults.clone().iter().enumerate() {
            let stream = self.streams.stream(&spec.stream_id());
            for at in arm(spec, stream, self.duration_ms) {
                sim.schedule(at, Payload::FaultFire { fault: f_idx })?;
            }
        }

        // operator-scheduled cleanups
        for site in &self.scenario.sites.clone() {
            for ce in &site.ces {
                for at_s in &ce.cleanup.trigger_at_s {
                    let at = at_s * MS_PER_SEC;
                    if at <= self.duration_ms {
                        sim.schedule(
                            at,
                            Payload::CleanupTrigger {
                                ce: ce.ce_id.clone(),
                            },
                        )?;
                    }
                }
            }
        }

        // release plan
        if let Some(plan) = &self.scenario.release.clone() {
            for (idx, tag) in plan.tags.iter().enumerate() {
                let at = tag.propose_at_s * MS_PER_SEC;
                if at <= self.duration_ms {
                    sim.schedule(at, Payload::TagProposed { plan: idx })?;
                }
            }
            for (idx, bypass) in plan.bypasses.iter().enumerate() {
                let at = bypass.at_s * MS_PER_SEC;
                if at <= self.duration_ms {
                    sim.schedule(at, Payload::BypassInstall { plan: idx })?;
                }
            }
        }

        // fabric installs
        if let Some(fabric) = &self.scenario.fabric.clone() {
            for (idx, install) in fabric.installs.iter().enumerate() {
                let at = install.at_s * MS_PER_SEC;
                if at <= self.duration_ms {
                    sim.schedule(at, Payload::FabricInstall { install: idx })?;
                }
            }
        }

        Ok(())
    }

    // -- resource records ----------------------------------------------------

    /// Published traversal-time estimate: queued work divided by CPU count,
    /// using the running mean of completed walltimes (60 s before any job
    /// has finished).
    fn ce_ett_s(&self, ce: &ComputeElement) -> u64 {
        let (sum, count) = self
            .ce_walltime_sum_ms
            .get(&ce.ce_id)
            .copied()
            .unwrap_or((0, 0));
        let avg_ms = if count == 0 {
            60_000
        } else {
            (sum / count as u128) as u64
        };
        (ce.batch.queue_length() as u64 * avg_ms) / (ce.batch.total_cpus.max(1) as u64 * 1_000)
    }

    fn ce_record(&self, ce_id: &str, now: VirtualMs) -> ResourceRecord {
        let ce = &self.ces[ce_id];
        ResourceRecord {
            resource_id: ce.ce_id.clone(),
            site: ce.site.clone(),
            attrs: ResourceAttrs::Ce(CeAttrs {
                total_cpus: ce.batch.total_cpus,
                free_cpus: ce.batch.free_cpus(),
                queue_length: ce.batch.queue_length(),
                estimated_traversal_time_s: self.ce_ett_s(ce),
                supported_vos: ce.supported_vos.clone(),
            }),
            published_at: now,
        }
    }

    fn se_record(&self, host: &str, now: VirtualMs) -> ResourceRecord {
        let se = &self.ses[host];
        ResourceRecord {
            resource_id: se.host.clone(),
            site: se.site.clone(),
            attrs: ResourceAttrs::Se(SeAttrs {
                aggregate_free_bytes: se.aggregate_free_bytes(),
                vo_areas: se.vo_areas.clone(),
            }),
            published_at: now,
        }
    }

    fn publish_ce(&mut self, ce_id: &str, now: VirtualMs) {
        if self.ces[ce_id].condition == CeCondition::Up
            || matches!(self.ces[ce_id].condition, CeCondition::Restarting { .. })
        {
            let record = self.ce_record(ce_id, now);
            let _ = self.gis.publish(record);
        }
    }

    fn publish_se(&mut self, host: &str, now: VirtualMs) {
        let record = self.se_record(host, now);
        let _ = self.gis.publish(record);
    }

    // -- helpers ---------------------------------------------------------------

    fn downtime(&mut self, target: &str) -> &mut DownTracker {
        self.downtime.entry(target.to_string()).or_default()
    }

    fn reject_job(&mut self, reason: &str) {
        *self
            .metrics
            .rejected_jobs
            .entry(reason.to_string())
            .or_insert(0) += 1;
    }

    fn abort_reason(&mut self, reason: &str) {
        *self
            .metrics
            .jobs_aborted
            .entry(reason.to_string())
            .or_insert(0) += 1;
        self.metrics.jobs_aborted_total += 1;
    }

    /// Abort a live job wherever it currently is: dequeue or kill it on its
    /// CE (orphaning its gass_cache files), cancel its completion, release
    /// its broker slot, and end its lease activity. Returns whether the job
    /// was actually live.
    fn abort_job(&mut self, sim: &mut SimQ, job_id: JobId, reason: &str) -> Result<bool, RunError> {
        let now = sim.now();
        let Some(job) = self.jobs.get_mut(&job_id) else {
            return Ok(false);
        };
        if job.state.is_terminal() {
            return Ok(false);
        }
        let subject = job.subject.clone();
        let vo = job.ad.virtual_organisation.clone();
        let matched_ce = job.matched_ce.clone();
        let state = job.state;
        let rb_id = job.rb.clone();
        job.transition(now, JobState::Aborted, reason)
            .map_err(|e| RunError::Internal(e.to_string()))?;

        if let Some(handle) = self.completion_handles.remove(&job_id) {
            sim.cancel(handle);
        }
        if let Some(ce_id) = matched_ce {
            if let Some(ce) = self.ces.get_mut(&ce_id) {
                match state {
                    JobState::Scheduled => ce.batch.remove_queued(job_id),
                    JobState::Running => ce.batch.kill_running(job_id),
                    _ => {}
                }
                // an aborted job never cleans up after itself
                ce.cache.orphan_all(job_id);
                self.publish_ce(&ce_id, now);
            }
        }
        self.abort_reason(reason);
        self.map_file.job_ended(&subject, &vo, now);
        if let Some(rb) = self.rbs.get_mut(&rb_id) {
            if let Some(admitted) = rb.release(job_id) {
                self.admit_parked(sim, admitted, &rb_id)?;
            }
        }
        Ok(true)
    }

    /// A parked submission (queue overflow policy) got its slot.
    fn admit_parked(&mut self, sim: &mut SimQ, job_id: JobId, rb_id: &str) -> Result<(), RunError> {
        let now = sim.now();
        let Some(parked) = self.parked.remove(&job_id) else {
            return Err(RunError::Internal(format!(
                "parked job {job_id} has no data"
            )));
        };
        let wl = &self.scenario.workloads[parked.workload];
        let mut record = JobRecord::new(
            job_id,
            parked.ad,
            rb_id,
            &parked.subject,
            &wl.name,
            parked.walltime_ms,
        );
        record
            .transition(now, JobState::Waiting, "queued for match")
            .map_err(|e| RunError::Internal(e.to_string()))?;
        let vo = wl.vo.clone();
        let subject = parked.subject.clone();
        self.jobs.insert(job_id, record);
        self.metrics.jobs_submitted += 1;
        self.map_file.job_started(&subject, &vo);
        sim.schedule(now, Payload::MatchAttempt { job: job_id })?;
        Ok(())
    }

    fn link_between(&self, site_a: &str, site_b: &str) -> Option<(u64, u64)> {
        let cfg_a = self.scenario.sites.iter().find(|s| s.name == site_a)?;
        if site_a == site_b {
            return Some((cfg_a.lan_mbps * 1_000_000, cfg_a.lan_latency_ms));
        }
        if let Some(link) = cfg_a.links.iter().find(|l| l.to == site_b) {
            return Some((link.bandwidth_mbps * 1_000_000, link.latency_ms));
        }
        let cfg_b = self.scenario.sites.iter().find(|s| s.name == site_b)?;
        cfg_b
            .links
            .iter()
            .find(|l| l.to == site_a)
            .map(|l| (l.bandwidth_mbps * 1_000_000, l.latency_ms))
    }

    fn replication_failure(&mut self, reason: &str) {
        *self
            .metrics
            .replication_failures
            .entry(reason.to_string())
            .or_insert(0) += 1;
        self.metrics.replication_failures_total += 1;
    }

    // -- event handlers --------------------------------------------------------

    fn handle(&mut self, sim: &mut SimQ, event: Event<Payload>) -> Result<(), RunError> {
        match event.payload {
            Payload::JobArrival {
                workload,
                arrival_seq,
            } => self.on_job_arrival(sim, workload, arrival_seq),
            Payload::MatchAttempt { job } => self.on_match_attempt(sim, job),
            Payload::BatchDispatch { ce } => self.on_batch_dispatch(sim, &ce),
            Payload::JobComplete { job, ce } => self.on_job_complete(sim, job, &ce),
            Payload::ReplicationStart { rep, file } => self.on_replication_start(sim, rep, file),
            Payload::TransferComplete { transfer } => self.on_transfer_complete(sim, transfer),
            Payload::FaultFire { fault } => self.on_fault_fire(sim, fault),
            Payload::ServiceRestartDone { target } => self.on_service_restart_done(sim, &target),
            Payload::CleanupTrigger { ce } => self.trigger_cleanup(sim, &ce),
            Payload::CleanupDone { ce } => self.on_cleanup_done(sim, &ce),
            Payload::CorruptionDetected { rb } => self.on_corruption_detected(sim, &rb),
            Payload::RecoveryDone { rb } => self.on_recovery_done(sim, &rb),
            Payload::TagProposed { plan } => self.on_tag_proposed(sim, plan),
            Payload::GateEvaluated { plan, gate } => self.on_gate_evaluated(sim, plan, gate),
            Payload::BypassInstall { plan } => self.on_bypass_install(sim, plan),
            Payload::FabricInstall { install } => self.on_fabric_install(sim, install),
        }
    }

    fn on_job_arrival(
        &mut self,
        sim: &mut SimQ,
        w_idx: usize,
        arrival_seq: u64,
    ) -> Result<(), RunError> {
        let now = sim.now();
        let wl: WorkloadConfig = self.scenario.workloads[w_idx].clone();
        let rt = &self.workload_rt[w_idx];
        let subject = rt.subjects[(arrival_seq % rt.subjects.len() as u64) as usize].clone();
        let cert = Certificate {
            subject: subject.clone(),
            issuer_ca: rt.cert_issuer.clone(),
            expired: rt.cert_expired,
        };

        match authenticate(&cert, &self.trusted_cas) {
            Ok(_) => {}
            Err(AuthnError::UnknownCa(_)) => {
                self.reject_job("authn-unknown-ca");
                return Ok(());
            }
            Err(AuthnError::Expired) => {
                self.reject_job("authn-expired");
                return Ok(());
            }
        }
        match self
            .map_file
            .authorize(&subject, &wl.vo, &self.registries, now)
        {
            Ok(_account) => {}
            Err(AuthzError::NotAMember(_)) => {
                self.reject_job("authz-not-a-member");
                return Ok(());
            }
            Err(AuthzError::PoolExhausted(_)) | Err(AuthzError::NoPool(_)) => {
                self.reject_job("authz-pool-exhausted");
                return Ok(());
            }
        }

        let rb_id = match &wl.rb {
            Some(pinned) => pinned.clone(),
            None => {
                let idx = (self.rr_counter % self.rb_order.len() as u64) as usize;
                self.rr_counter += 1;
                self.rb_order[idx].clone()
            }
        };

        let mut ad = match crate::jdl::parse_jdl(&wl.jdl_template) {
            Ok(ad) => ad,
            Err(e) => return Err(RunError::Internal(format!("validated JDL failed: {e}"))),
        };
        if let Some(input) = &wl.input_data {
            ad.input_data = input.clone();
        }
        let walltime_ms = ad.walltime_s.unwrap_or(wl.walltime_s) * MS_PER_SEC;

        let job_id = JobId(self.next_job_id);
        self.next_job_id += 1;

        let rb = self.rbs.get_mut(&rb_id).expect("validated broker");
        let db_corrupted = rb.db_state == DbState::Corrupted;
        match rb.try_admit(job_id, now) {
            Err(SubmitRefusal::AtCapacity(_)) => {
                self.metrics.refused_at_capacity += 1;
                return Ok(());
            }
            Err(SubmitRefusal::RbDown) => {
                self.metrics.refused_rb_down += 1;
                return Ok(());
            }
            Ok(false) => {
                // parked under the queue overflow policy
                self.parked.insert(
                    job_id,
                    ParkedJob {
                        ad,
                        subject,
                        workload: w_idx,
                        walltime_ms,
                    },
                );
                return Ok(());
            }
            Ok(true) => {}
        }

        let mut record = JobRecord::new(job_id, ad, &rb_id, &subject, &wl.name, walltime_ms);
        record
            .transition(now, JobState::Waiting, "queued for match")
            .map_err(|e| RunError::Internal(e.to_string()))?;
        self.jobs.insert(job_id, record);
        self.metrics.jobs_submitted += 1;
        self.map_file.job_started(&subject, &wl.vo);

        // a corrupted broker accepts the job but never matches it: the job
        // freezes in WAITING until recovery aborts it
        if !db_corrupted {
            sim.schedule(now, Payload::MatchAttempt { job: job_id })?;
        }
        Ok(())
    }

    fn data_sites_for(&self, ad: &JobAd) -> Option<BTreeSet<String>> {
        if ad.input_data.is_empty() {
            return None;
        }
        let catalog = self.catalogs.get(&ad.virtual_organisation)?;
        let mut intersection: Option<BTreeSet<String>> = None;
        for lfn in &ad.input_data {
            let mut sites = BTreeSet::new();
            if let Some(pfns) = catalog.pfns(lfn) {
                for pfn_str in pfns {
                    if let Some(pfn) = crate::storage::Pfn::parse(pfn_str) {
                        if let Some(site) = self.site_of_se.get(&pfn.host) {
                            sites.insert(site.clone());
                        }
                    }
                }
            }
            intersection = Some(match intersection {
                None => sites,
                Some(acc) => acc.intersection(&sites).cloned().collect(),
            });
        }
        intersection
    }

    fn on_match_attempt(&mut self, sim: &mut SimQ, job_id: JobId) -> Result<(), RunError> {
        let now = sim.now();
        let Some(job) = self.jobs.get(&job_id) else {
            return Ok(());
        };
        if job.state != JobState::Waiting {
            return Ok(());
        }
        let rb_id = job.rb.clone();
        let ad = job.ad.clone();
        let rb = &self.rbs[&rb_id];
        if rb.db_state == DbState::Corrupted {
            // silently frozen; recovery will handle it
            return Ok(());
        }
        if !rb.is_up(now) {
            sim.schedule(
                now + self.match_retry_ms,
                Payload::MatchAttempt { job: job_id },
            )?;
            return Ok(());
        }

        let vo = ad.virtual_organisation.clone();
        let result = self
            .gis
            .query_top(now, self.streams.stream("gis:stale"), |r| {
                r.ce()
                    .is_some_and(|ce| ce.supported_vos.iter().any(|v| v == &vo))
            });
        self.metrics.gis.queries += 1;
        self.metrics.gis.total_latency_ms += result.latency_ms;
        self.metrics.gis.max_latency_ms = self.metrics.gis.max_latency_ms.max(result.latency_ms);
        self.metrics.gis.stale_serves += result.stale_serves;
        if result.timed_out {
            self.metrics.gis.timeouts += 1;
            self.retry_waiting(sim, job_id, "gis-timeout")?;
            return Ok(());
        }

        let records: Vec<ResourceRecord> = result.records.into_iter().map(|(r, _)| r).collect();
        let data_sites = self.data_sites_for(&ad);
        let candidates = match_candidates(&ad, &records, data_sites.as_ref());
        if candidates.is_empty() {
            self.retry_waiting(sim, job_id, "no-match")?;
            return Ok(());
        }

        for candidate in &candidates {
            let Some(ce) = self.ces.get_mut(&candidate.ce_id) else {
                continue;
            };
            match ce.gram_submit(job_id, now) {
                Ok(()) => {
                    let job = self.jobs.get_mut(&job_id).expect("job exists");
                    job.transition(
                        now,
                        JobState::Ready,
                        &format!("matched {}", candidate.ce_id),
                    )
                    .map_err(|e| RunError::Internal(e.to_string()))?;
                    job.transition(now, JobState::Scheduled, "gatekeeper accepted")
                        .map_err(|e| RunError::Internal(e.to_string()))?;
                    job.matched_ce = Some(candidate.ce_id.clone());
                    let ce_id = candidate.ce_id.clone();
                    self.publish_ce(&ce_id, now);
                    sim.schedule(now, Payload::BatchDispatch { ce: ce_id })?;
                    return Ok(());
                }
                Err(GramError::GramWedged) => {
                    self.metrics.gram_wedged_failures += 1;
                }
                Err(GramError::GatekeeperDown) => {
                    self.metrics.gatekeeper_down_failures += 1;
                }
            }
        }
        self.retry_waiting(sim, job_id, "all-ce-failed")?;
        Ok(())
    }

    fn retry_waiting(
        &mut self,
        sim: &mut SimQ,
        job_id: JobId,
        reason: &str,
    ) -> Result<(), RunError> {
        let now = sim.now();
        let job = self.jobs.get_mut(&job_id).expect("job exists");
        job.transition(now, JobState::Waiting, reason)
            .map_err(|e| RunError::Internal(e.to_string()))?;
        sim.schedule(
            now + self.match_retry_ms,
            Payload::MatchAttempt { job: job_id },
        )?;
        Ok(())
    }

    fn on_batch_dispatch(&mut self, sim: &mut SimQ, ce_id: &str) -> Result<(), RunError> {
        let now = sim.now();
        let Some(ce) = self.ces.get_mut(ce_id) else {
            return Ok(());
        };
        let dispatched = ce.dispatchable();
        if dispatched.is_empty() {
            return Ok(());
        }
        for job_id in dispatched {
            let job = self.jobs.get_mut(&job_id).expect("queued job exists");
            job.transition(now, JobState::Running, "dispatched")
                .map_err(|e| RunError::Internal(e.to_string()))?;
            let walltime = job.walltime_ms;
            let handle = sim.schedule(
                now + walltime,
                Payload::JobComplete {
                    job: job_id,
                    ce: ce_id.to_string(),
                },
            )?;
            self.completion_handles.insert(job_id, handle);
        }
        self.publish_ce(ce_id, now);
        Ok(())
    }

    fn on_job_complete(
        &mut self,
        sim: &mut SimQ,
        job_id: JobId,
        ce_id: &str,
    ) -> Result<(), RunError> {
        let now = sim.now();
        self.completion_handles.remove(&job_id);
        let Some(job) = self.jobs.get(&job_id) else {
            return Ok(());
        };
        let workload = job.workload.clone();
        let subject = job.subject.clone();
        let vo = job.ad.virtual_organisation.clone();
        let rb_id = job.rb.clone();
        let walltime = job.walltime_ms;

        let unclean_fraction = self
            .scenario
            .workloads
            .iter()
            .find(|w| w.name == workload)
            .map(|w| w.unclean_fraction)
            .unwrap_or(0.0);
        let unclean = self
            .streams
            .stream(&format!("workload:{workload}:unclean"))
            .bernoulli(unclean_fraction);

        let job = self.jobs.get_mut(&job_id).expect("job exists");
        job.transition(
            now,
            JobState::Done,
            if unclean {
                "unclean-exit"
            } else {
                "clean-exit"
            },
        )
        .map_err(|e| RunError::Internal(e.to_string()))?;
        self.metrics.jobs_done += 1;

        if let Some(ce) = self.ces.get_mut(ce_id) {
            ce.batch.finish(job_id);
            if unclean {
                ce.cache.orphan_all(job_id);
            } else {
                let leak = ce.clean_leak();
                ce.cache.release_clean(job_id, leak);
            }
            let entry = self
                .ce_walltime_sum_ms
                .entry(ce_id.to_string())
                .or_insert((0, 0));
            entry.0 += walltime as u128;
            entry.1 += 1;
            if ce.auto_cleanup_due() {
                sim.schedule(
                    now,
                    Payload::CleanupTrigger {
                        ce: ce_id.to_string(),
                    },
                )?;
            }
        }
        self.map_file.job_ended(&subject, &vo, now);
        if let Some(rb) = self.rbs.get_mut(&rb_id) {
            if let Some(admitted) = rb.release(job_id) {
                self.admit_parked(sim, admitted, &rb_id)?;
            }
        }
        self.publish_ce(ce_id, now);
        sim.schedule(
            now,
            Payload::BatchDispatch {
                ce: ce_id.to_string(),
            },
        )?;
        Ok(())
    }

    fn on_replication_start(
        &mut self,
        sim: &mut SimQ,
        rep_idx: usize,
        file_idx: usize,
    ) -> Result<(), RunError> {
        let now = sim.now();
        let rep = self.scenario.replication_jobs[rep_idx].clone();
        let file = &rep.files[file_idx];

        let Some(catalog) = self.catalogs.get(&rep.vo) else {
            self.replication_failure("source-missing");
            return Ok(());
        };
        let Some(src_pfn) = catalog.replica_on(&file.lfn, &rep.src_se) else {
            self.replication_failure("source-missing");
            return Ok(());
        };
        let src = &self.ses[&rep.src_se];
        if src.is_down(now) {
            self.replication_failure("source-down");
            return Ok(());
        }
        let src_site = self.site_of_se[&rep.src_se].clone();
        let dst_site = self.site_of_se[&rep.dst_se].clone();
        let Some((bandwidth_bps, latency_ms)) = self.link_between(&src_site, &dst_site) else {
            self.replication_failure("no-link");
            return Ok(());
        };
        let mss_penalty = src.read_penalty_ms(&src_pfn.path, now);
        let duration =
            transfer_duration_ms(file.size_bytes(), bandwidth_bps, latency_ms) + mss_penalty;

        let id = self.next_transfer;
        self.next_transfer += 1;
        self.transfers.insert(
            id,
            Transfer {
                lfn: file.lfn.clone(),
                vo: rep.vo.clone(),
                dst_host: rep.dst_se.clone(),
                size_bytes: file.size_bytes(),
            },
        );
        sim.schedule(now + duration, Payload::TransferComplete { transfer: id })?;
        Ok(())
    }

    fn on_transfer_complete(&mut self, sim: &mut SimQ, transfer_id: u64) -> Result<(), RunError> {
        let now = sim.now();
        let Some(transfer) = self.transfers.remove(&transfer_id) else {
            return Err(RunError::Internal(format!(
                "unknown transfer {transfer_id}"
            )));
        };
        let Some(dst) = self.ses.get_mut(&transfer.dst_host) else {
            self.replication_failure("destination-missing");
            return Ok(());
        };
        let (pfn, _) = match resolve_pfn(&transfer.lfn, &transfer.vo, dst) {
            Ok(resolved) => resolved,
            Err(_) => {
                self.replication_failure("no-vo-area");
                return Ok(());
            }
        };
        match dst.store(&pfn.path, transfer.size_bytes, now) {
            Ok(()) => {
                let area = dst.vo_areas[&transfer.vo].clone();
                let catalog = self
                    .catalogs
                    .get_mut(&transfer.vo)
                    .expect("validated catalog");
                match catalog.register(&transfer.lfn, &pfn, &area) {
                    Ok(()) => {
                        self.metrics.replication_successes += 1;
                    }
                    Err(crate::storage::RcError::CollectionFull { .. }) => {
                        self.metrics.rc_collection_full += 1;
                        self.replication_failure("rc-collection-full");
                    }
                    Err(crate::storage::RcError::PfnMismatch) => {
                        self.replication_failure("pfn-mismatch");
                    }
                }
                let host = transfer.dst_host.clone();
                self.publish_se(&host, now);
            }
            Err(StoreError::NoSpace { misleading }) => {
                if misleading {
                    self.metrics.misleading_free_space += 1;
                }
                self.replication_failure("enospc");
            }
            Err(StoreError::InodeExhausted) => self.replication_failure("inode-exhausted"),
            Err(StoreError::MissingPath) => self.replication_failure("missing-path"),
            Err(StoreError::SeDown) => self.replication_failure("destination-down"),
            Err(StoreError::NoPartition) => self.replication_failure("no-partition"),
        }
        let _ = sim;
        Ok(())
    }

    fn on_fault_fire(&mut self, sim: &mut SimQ, fault_idx: usize) -> Result<(), RunError> {
        let now = sim.now();
        let spec = self.faults[fault_idx].clone();
        let duration = spec.effect_duration_s * MS_PER_SEC;
        let mut record = FaultEventRecord {
            fired_at_ms: now,
            target: spec.target.clone(),
            kind: spec.kind.as_str().to_string(),
            resolution_ms: None,
            noop: false,
        };
        match (&spec.kind, spec.target.split_once(':')) {
            (FaultKind::RestartNeeded, Some(("rb", id))) => {
                let rb = self.rbs.get_mut(id).expect("validated target");
                if rb.condition == RbCondition::Up {
                    rb.condition = RbCondition::Restarting {
                        until: now + duration,
                    };
                    record.resolution_ms = Some(now + duration);
                    self.downtime(&spec.target).down(now);
                    sim.schedule(
                        now + duration,
                        Payload::ServiceRestartDone {
                            target: spec.target.clone(),
                        },
                    )?;
                } else {
                    record.noop = true;
                }
            }
            (FaultKind::RestartNeeded, Some(("ce", id))) => {
                let ce = self.ces.get_mut(id).expect("validated target");
                if ce.condition == CeCondition::Up {
                    ce.condition = CeCondition::Restarting {
                        until: now + duration,
                    };
                    record.resolution_ms = Some(now + duration);
                    self.downtime(&spec.target).down(now);
                    sim.schedule(
                        now + duration,
                        Payload::ServiceRestartDone {
                            target: spec.target.clone(),
                        },
                    )?;
                } else {
                    record.noop = true;
                }
            }
            (FaultKind::RestartNeeded, Some(("se", host))) => {
                let se = self.ses.get_mut(host).expect("validated target");
                if se.is_down(now) {
                    record.noop = true;
                } else {
                    se.down_until = Some(now + duration);
                    record.resolution_ms = Some(now + duration);
                    self.downtime(&spec.target).down(now);
                    sim.schedule(
                        now + duration,
                        Payload::ServiceRestartDone {
                            target: spec.target.clone(),
                        },
                    )?;
                }
            }
            (FaultKind::RestartNeeded, Some(("gis", "top"))) => {
                if self.gis.top_down_until.is_some_and(|u| now < u) {
                    record.noop = true;
                } else {
                    self.gis.top_down_until = Some(now + duration);
                    record.resolution_ms = Some(now + duration);
                    self.downtime(&spec.target).down(now);
                    sim.schedule(
                        now + duration,
                        Payload::ServiceRestartDone {
                            target: spec.target.clone(),
                        },
                    )?;
                }
            }
            (FaultKind::DbCorruption, Some(("rb", id))) => {
                let rb = self.rbs.get_mut(id).expect("validated target");
                if rb.db_state == DbState::Corrupted || !rb.is_up(now) {
                    record.noop = true;
                } else {
                    // silent: daemons appear healthy, new jobs freeze
                    rb.db_state = DbState::Corrupted;
                    rb.corrupted_since = Some(now);
                    self.open_corruptions
                        .insert(id.to_string(), self.metrics.fault_events.len());
                    sim.schedule(
                        now + rb.detect_window_ms,
                        Payload::CorruptionDetected { rb: id.to_string() },
                    )?;
                }
            }
            (FaultKind::GramWedgeExternal, Some(("ce", id))) => {
                let ce = self.ces.get_mut(id).expect("validated target");
                let free = ce.cache.free_inodes();
                let charge = spec.orphan_inodes.unwrap_or(free).min(free);
                if charge == 0 {
                    record.noop = true;
                } else {
                    ce.cache.orphaned_inodes += charge;
                    if ce.gram_wedged() && ce.first_wedge_at.is_none() {
                        ce.first_wedge_at = Some(now);
                    }
                    if ce.auto_cleanup_due() {
                        sim.schedule(now, Payload::CleanupTrigger { ce: id.to_string() })?;
                    }
                }
            }
            other => {
                return Err(RunError::Internal(format!(
                    "unreachable fault target {other:?}"
                )));
            }
        }
        self.metrics.fault_events.push(record);
        Ok(())
    }

    fn on_service_restart_done(&mut self, sim: &mut SimQ, target: &str) -> Result<(), RunError> {
        let now = sim.now();
        match target.split_once(':') {
            Some(("rb", id)) => {
                let rb = self.rbs.get_mut(id).expect("known broker");
                if matches!(rb.condition, RbCondition::Restarting { .. }) {
                    rb.condition = RbCondition::Up;
                }
            }
            Some(("ce", id)) => {
                let ce_up = {
                    let ce = self.ces.get_mut(id).expect("known CE");
                    if matches!(ce.condition, CeCondition::Restarting { .. }) {
                        ce.condition = CeCondition::Up;
                        true
                    } else {
                        false
                    }
                };
                if ce_up {
                    sim.schedule(now, Payload::BatchDispatch { ce: id.to_string() })?;
                }
            }
            Some(("se", host)) => {
                let se = self.ses.get_mut(host).expect("known SE");
                if se.down_until.is_some_and(|u| now >= u) {
                    se.down_until = None;
                }
            }
            Some(("gis", "top")) if self.gis.top_down_until.is_some_and(|u| now >= u) => {
                self.gis.top_down_until = None;
            }
            _ => {}
        }
        self.downtime(target).up(now);
        Ok(())
    }

    fn trigger_cleanup(&mut self, sim: &mut SimQ, ce_id: &str) -> Result<(), RunError> {
        let now = sim.now();
        let Some(ce) = self.ces.get_mut(ce_id) else {
            return Ok(());
        };
        let Some((until, lost)) = ce.begin_cleanup(now) else {
            return Ok(()); // already cleaning or restarting
        };
        let site = ce.site.clone();
        self.gis.unpublish(&site, ce_id);
        self.downtime(&format!("ce:{ce_id}")).down(now);
        for job_id in lost {
            if self.abort_job(sim, job_id, "lost-to-cleanup")? {
                self.metrics.jobs_lost_to_cleanup += 1;
            }
        }
        sim.schedule(
            until,
            Payload::CleanupDone {
                ce: ce_id.to_string(),
            },
        )?;
        Ok(())
    }

    fn on_cleanup_done(&mut self, sim: &mut SimQ, ce_id: &str) -> Result<(), RunError> {
        let now = sim.now();
        if let Some(ce) = self.ces.get_mut(ce_id) {
            ce.finish_cleanup();
        }
        self.downtime(&format!("ce:{ce_id}")).up(now);
        self.publish_ce(ce_id, now);
        sim.schedule(
            now,
            Payload::BatchDispatch {
                ce: ce_id.to_string(),
            },
        )?;
        Ok(())
    }

    fn on_corruption_detected(&mut self, sim: &mut SimQ, rb_id: &str) -> Result<(), RunError> {
        let now = sim.now();
        let rb = self.rbs.get_mut(rb_id).expect("known broker");
        if rb.db_state != DbState::Corrupted {
            return Ok(());
        }
        let corrupted_at = rb.corrupted_since.unwrap_or(now);
        let (until, lost) = rb.begin_recovery(now);
        let jobs_aborted = lost.len() as u64;
        self.downtime(&format!("rb:{rb_id}")).down(now);
        for job_id in lost {
            if self.abort_job(sim, job_id, "rb-recovery")? {
                self.metrics.jobs_lost_to_rb_recovery += 1;
            }
        }
        if let Some(idx) = self.open_corruptions.remove(rb_id) {
            if let Some(event) = self.metrics.fault_events.get_mut(idx) {
                event.resolution_ms = Some(until);
            }
        }
        self.metrics.rb_recoveries.push(RecoveryRecord {
            rb: rb_id.to_string(),
            corrupted_at_ms: corrupted_at,
            detected_at_ms: now,
            recovered_at_ms: until,
            jobs_aborted,
        });
        sim.schedule(
            until,
            Payload::RecoveryDone {
                rb: rb_id.to_string(),
            },
        )?;
        Ok(())
    }

    fn on_recovery_done(&mut self, sim: &mut SimQ, rb_id: &str) -> Result<(), RunError> {
        let now = sim.now();
        if let Some(rb) = self.rbs.get_mut(rb_id) {
            rb.finish_recovery();
        }
        self.downtime(&format!("rb:{rb_id}")).up(now);
        Ok(())
    }

    fn on_tag_proposed(&mut self, sim: &mut SimQ, plan_idx: usize) -> Result<(), RunError> {
        let now = sim.now();
        let plan = self.scenario.release.as_ref().expect("release plan").tags[plan_idx].clone();
        let packages: Vec<(String, String)> = plan
            .packages
            .iter()
            .map(|p| (p.name.clone(), p.version.clone()))
            .collect();
        let tag_id = self
            .release
            .propose_tag(&plan.label, packages)
            .map_err(|e| RunError::Internal(e.to_string()))?;
        self.release_tags.insert(plan_idx, (tag_id, now));
        sim.schedule(
            now + plan.gate_delays_s.dev * MS_PER_SEC,
            Payload::GateEvaluated {
                plan: plan_idx,
                gate: Gate::Dev,
            },
        )?;
        Ok(())
    }

    fn gate_failures(&mut self, plan_idx: usize, gate: Gate) -> Vec<String> {
        let plan = self.scenario.release.as_ref().expect("release plan").tags[plan_idx].clone();
        if let Some(verdicts) = &plan.gate_verdicts {
            let verdict = match gate {
                Gate::Dev => &verdicts.dev,
                Gate::Core => &verdicts.core,
                Gate::Application => &verdicts.application,
            };
            return verdict.failed.clone();
        }
        if let Some(p) = plan.failure_prob {
            let stream = self.streams.stream(&format!("release:{}", plan.label));
            return plan
                .packages
                .iter()
                .filter(|_| stream.bernoulli(p))
                .map(|pkg| pkg.name.clone())
                .collect();
        }
        Vec::new()
    }

    fn on_gate_evaluated(
        &mut self,
        sim: &mut SimQ,
        plan_idx: usize,
        gate: Gate,
    ) -> Result<(), RunError> {
        let now = sim.now();
        let (tag_id, _) = self.release_tags[&plan_idx];
        let failed = self.gate_failures(plan_idx, gate);
        let state = self
            .release
            .run_gate(tag_id, gate, &failed, now)
            .map_err(|e| RunError::Internal(e.to_string()))?;
        if state != TagState::Rejected {
            if let Some(next) = gate.next() {
                let plan = &self.scenario.release.as_ref().expect("release plan").tags[plan_idx];
                let delay_s = match next {
                    Gate::Dev => plan.gate_delays_s.dev,
                    Gate::Core => plan.gate_delays_s.core,
                    Gate::Application => plan.gate_delays_s.application,
                };
                sim.schedule(
                    now + delay_s * MS_PER_SEC,
                    Payload::GateEvaluated {
                        plan: plan_idx,
                        gate: next,
                    },
                )?;
            }
        }
        Ok(())
    }

    fn on_bypass_install(&mut self, sim: &mut SimQ, plan_idx: usize) -> Result<(), RunError> {
        let now = sim.now();
        let bypass = self
            .scenario
            .release
            .as_ref()
            .expect("release plan")
            .bypasses[plan_idx]
            .clone();
        match self
            .release
            .bypass_install(&bypass.kind, &bypass.target, now)
        {
            Ok(_) => self.bypass_installs += 1,
            Err(_) => self.bypass_refusals += 1,
        }
        let _ = sim;
        Ok(())
    }

    fn on_fabric_install(&mut self, sim: &mut SimQ, install_idx: usize) -> Result<(), RunError> {
        let install = self
            .scenario
            .fabric
            .as_ref()
            .expect("fabric config")
            .installs[install_idx]
            .clone();
        self.fabric_metrics.installs_attempted += 1;
        let Some(profile) = self.fabric_profiles.get(&install.node) else {
            return Err(RunError::Internal(format!(
                "no profile for {}",
                install.node
            )));
        };
        let state = self.fabric_nodes.entry(install.node.clone()).or_default();
        let report = state.apply(profile, true, &BTreeSet::new());
        let failed = report
            .objects
            .values()
            .filter(|o| matches!(o, crate::fabric::ObjectResult::Failed { .. }))
            .count() as u64;
        self.fabric_metrics.objects_failed += failed;
        if failed == 0 {
            self.fabric_metrics.installs_ok += 1;
        }
        let _ = sim;
        Ok(())
    }

    // -- end of run --------------------------------------------------------------

    fn finalize(&mut self, sim: &SimQ) -> Result<(), RunError> {
        let end = self.duration_ms;
        self.metrics.jobs_active_at_end = self
            .jobs
            .values()
            .filter(|j| !j.state.is_terminal())
            .count() as u64;
        for tracker in self.downtime.values_mut() {
            tracker.up(end);
        }
        self.metrics.service_downtime_ms = self
            .downtime
            .iter()
            .filter(|(_, t)| t.total_ms > 0)
            .map(|(k, t)| (k.clone(), t.total_ms))
            .collect();
        for (rb_id, rb) in &self.rbs {
            self.metrics
                .rb_peak_active
                .insert(rb_id.clone(), rb.peak_active as u64);
        }
        for (ce_id, ce) in &self.ces {
            if let Some(at) = ce.first_wedge_at {
                self.metrics
                    .time_to_first_inode_exhaustion_ms
                    .entry(ce_id.clone())
                    .or_insert(at);
            }
        }
        self.metrics.gis.rejected_publishes = self.gis.rejected_publishes;
        self.metrics.events_dispatched = sim.dispatched();

        if self.scenario.fabric.is_some() {
            self.metrics.fabric = Some(self.fabric_metrics.clone());
        }
        if self.scenario.release.is_some() {
            let mut tags = Vec::new();
            for &(tag_id, proposed_at) in self.release_tags.values() {
                let tag = self.release.tag(tag_id).expect("tag exists");
                let time_to_application = (tag.state == TagState::Application)
                    .then(|| {
                        tag.gate_log
                            .iter()
                            .find(|e| e.gate == Gate::Application && e.passed)
                            .map(|e| e.at - proposed_at)
                    })
                    .flatten();
                tags.push(ReleaseTagOutcome {
                    tag_id,
                    label: tag.label.clone(),
                    final_state: tag.state.as_str().to_string(),
                    gate_log: tag
                        .gate_log
                        .iter()
                        .map(|e| ReleaseGateOutcome {
                            at_ms: e.at,
                            gate: e.gate.as_str().to_string(),
                            passed: e.passed,
                            failed_packages: e.failed_packages.clone(),
                        })
                        .collect(),
                    time_to_application_ms: time_to_application,
                });
            }
            self.metrics.release = Some(ReleaseMetrics {
                tags,
                bypass_installs: self.bypass_installs,
                bypass_refusals: self.bypass_refusals,
            });
        }

        self.check_catalog_consistency()?;
        self.check_lb_histories()?;
        Ok(())
    }

    /// Every job's bookkeeping history must be a timestamp-ordered walk
    /// from SUBMITTED, and terminal jobs must end in their terminal state
    /// with a reason recorded.
    fn check_lb_histories(&self) -> Result<(), RunError> {
        for job in self.jobs.values() {
            let id = job.job_id;
            if job.lb_history.first().map(|e| e.from) != Some(JobState::Submitted) {
                return Err(RunError::Internal(format!(
                    "{id}: history does not start at SUBMITTED"
                )));
            }
            if job.lb_history.windows(2).any(|w| w[0].at > w[1].at) {
                return Err(RunError::Internal(format!(
                    "{id}: history timestamps regress"
                )));
            }
            let last = job.lb_history.last().expect("non-empty checked above");
            if last.to != job.state {
                return Err(RunError::Internal(format!(
                    "{id}: history ends at {:?} but job is {:?}",
                    last.to, job.state
                )));
            }
            if job.state.is_terminal() && last.reason.is_empty() {
                return Err(RunError::Internal(format!("{id}: terminal without reason")));
            }
        }
        Ok(())
    }

    /// Every PFN registered in any catalog must point at a stored object on
    /// the named SE (no storage corruption is ever injected, so a mismatch
    /// is an engine bug).
    fn check_catalog_consistency(&self) -> Result<(), RunError> {
        for (vo, catalog) in &self.catalogs {
            for (lfn, pfns) in catalog.entries() {
                for pfn_str in pfns {
                    let Some(pfn) = crate::storage::Pfn::parse(pfn_str) else {
                        return Err(RunError::Internal(format!("unparseable PFN {pfn_str}")));
                    };
                    let Some(se) = self.ses.get(&pfn.host) else {
                        return Err(RunError::Internal(format!(
                            "catalog {vo}: PFN {pfn_str} names unknown SE"
                        )));
                    };
                    if se.object(&pfn.path).is_none() {
                        return Err(RunError::Internal(format!(
                            "catalog {vo}: {lfn} -> {pfn_str} has no stored object"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn scenario_hash(scenario: &Scenario) -> String {
    let mut hasher = Sha256::new();
    hasher.update(scenario.canonical_json().as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Run one scenario to its horizon and produce the report (and optionally
/// the full dispatch trace, which observes events without affecting them).
pub fn run(scenario: &Scenario, options: &RunOptions) -> Result<RunOutput, RunError> {
    let seed = options.seed_override.unwrap_or(scenario.seed);
    let mut effective = scenario.clone();
    effective.seed = seed;

    let mut world = World::build(&effective, seed)?;
    let mut sim: SimQ = Sim::new();
    world.seed_initial_events(&mut sim)?;

    let mut trace: Option<Vec<String>> = options.collect_trace.then(Vec::new);
    let mut failure: Option<RunError> = None;
    sim.run_until(world.duration_ms, |sim, event| {
        if failure.is_some() {
            return;
        }
        if let Some(lines) = trace.as_mut() {
            lines.push(
                serde_json::json!({
                    "t": event.fire_at,
                    "seq": event.seq,
                    "kind": event.payload.kind(),
                    "detail": event.payload.detail(),
                })
                .to_string(),
            );
        }
        if let Err(e) = world.handle(sim, event) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    world.finalize(&sim)?;
    let report = Report {
        header: ReportHeader {
            scenario_hash: scenario_hash(&effective),
            seed,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        metrics: world.metrics.clone(),
    };
    if !report.arithmetic_consistent() {
        return Err(RunError::Internal(
            "report counts are internally inconsistent".into(),
        ));
    }
    Ok(RunOutput { report, trace })
}
