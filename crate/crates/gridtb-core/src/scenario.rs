//! Scenario file schema and validation. Validation resolves every
//! cross-reference and reports all problems at once, each with a
//! JSON-pointer-style path into the document.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::faults::{FaultKind, FaultProcess, FaultSpec};
use crate::jdl;
use crate::storage;

fn default_cpus_per_node() -> u32 {
    2
}
fn default_files_per_job() -> u64 {
    128
}
fn default_clean_leak_fraction() -> f64 {
    0.1
}
fn default_gass_cache_inodes() -> u64 {
    1_000_000
}
fn default_cleanup_base_s() -> u64 {
    600
}
fn default_cleanup_per_inode_ms() -> u64 {
    100
}
fn default_recovery_s() -> u64 {
    1_800
}
fn default_detect_window_s() -> u64 {
    3_600
}
fn default_refresh_s() -> u64 {
    30
}
fn default_match_retry_s() -> u64 {
    300
}
fn default_idle_expiry_h() -> u64 {
    24
}
fn default_rc_budget() -> u64 {
    64_000
}
fn default_users() -> u32 {
    1
}
fn default_mss_residency_s() -> u64 {
    3_600
}
fn default_lan_mbps() -> u64 {
    1_000
}
fn default_lan_latency_ms() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub duration_h: u64,
    #[serde(default = "default_match_retry_s")]
    pub match_retry_s: u64,
    #[serde(default)]
    pub gis: GisConfig,
    #[serde(default)]
    pub cas: Vec<String>,
    #[serde(default)]
    pub vos: Vec<VoConfig>,
    #[serde(default)]
    pub pools: Vec<PoolConfig>,
    #[serde(default)]
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub rbs: Vec<RbConfig>,
    #[serde(default)]
    pub workloads: Vec<WorkloadConfig>,
    #[serde(default)]
    pub replication_jobs: Vec<ReplicationJobConfig>,
    /// Absent key: the default daily-restart fault set applies. Present
    /// (possibly empty) list: exactly these faults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faults: Option<Vec<FaultSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fabric: Option<FabricConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release: Option<ReleasePlan>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GisConfig {
    #[serde(default = "default_refresh_s")]
    pub refresh_s: u64,
    #[serde(default)]
    pub degradation: DegradationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}

impl Default for GisConfig {
    fn default() -> Self {
        GisConfig {
            refresh_s: default_refresh_s(),
            degradation: DegradationConfig::default(),
            timeout_ms: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationConfig {
    #[serde(default)]
    pub model: DegradationKind,
    #[serde(default)]
    pub base_ms: u64,
    #[serde(default)]
    pub k: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            model: DegradationKind::None,
            base_ms: 0,
            k: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DegradationKind {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "linear-latency")]
    LinearLatency,
    #[serde(rename = "stale-prob")]
    StaleProb,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoConfig {
    pub name: String,
    #[serde(default)]
    pub members: Vec<String>,
    #[serde(default = "default_rc_budget")]
    pub rc_name_byte_budget: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolConfig {
    pub vo: String,
    pub capacity: u32,
    #[serde(default = "default_idle_expiry_h")]
    pub idle_expiry_h: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteConfig {
    pub name: String,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
    #[serde(default = "default_lan_mbps")]
    pub lan_mbps: u64,
    #[serde(default = "default_lan_latency_ms")]
    pub lan_latency_ms: u64,
    #[serde(default)]
    pub ces: Vec<CeConfig>,
    #[serde(default)]
    pub ses: Vec<SeConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkConfig {
    pub to: String,
    pub bandwidth_mbps: u64,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CeConfig {
    pub ce_id: String,
    pub worker_nodes: u32,
    #[serde(default = "default_cpus_per_node")]
    pub cpus_per_node: u32,
    #[serde(default = "default_gass_cache_inodes")]
    pub gass_cache_inodes: u64,
    #[serde(default = "default_files_per_job")]
    pub files_per_job: u64,
    #[serde(default = "default_clean_leak_fraction")]
    pub clean_leak_fraction: f64,
    #[serde(default)]
    pub cleanup: CleanupConfigFile,
    /// Defaults to every VO in the scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supported_vos: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanupConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_threshold: Option<u64>,
    #[serde(default = "default_cleanup_base_s")]
    pub base_s: u64,
    #[serde(default = "default_cleanup_per_inode_ms")]
    pub per_inode_ms: u64,
    /// Operator-triggered cleanups at fixed times.
    #[serde(default)]
    pub trigger_at_s: Vec<u64>,
}

impl Default for CleanupConfigFile {
    fn default() -> Self {
        CleanupConfigFile {
            auto_threshold: None,
            base_s: default_cleanup_base_s(),
            per_inode_ms: default_cleanup_per_inode_ms(),
            trigger_at_s: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeConfig {
    pub host: String,
    pub partitions: Vec<PartitionConfig>,
    pub mounts: BTreeMap<String, String>,
    pub vo_areas: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mss: Option<MssConfigFile>,
    #[serde(default)]
    pub manual_paths: bool,
    /// Pre-created directories, relevant with manual_paths.
    #[serde(default)]
    pub dirs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub id: String,
    pub capacity_gb: f64,
    #[serde(default = "default_gass_cache_inodes")]
    pub inodes: u64,
}

impl PartitionConfig {
    pub fn capacity_bytes(&self) -> u64 {
        (self.capacity_gb * 1_000_000_000.0) as u64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MssConfigFile {
    pub migrate_latency_s: u64,
    #[serde(default = "default_mss_residency_s")]
    pub residency_s: u64,
}

fn default_overflow() -> String {
    "refuse".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RbConfig {
    pub rb_id: String,
    #[serde(default)]
    pub dual_cpu: bool,
    #[serde(default = "default_recovery_s")]
    pub recovery_s: u64,
    #[serde(default = "default_detect_window_s")]
    pub detect_window_s: u64,
    #[serde(default = "default_overflow")]
    pub overflow: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub name: String,
    pub vo: String,
    pub jdl_template: String,
    #[serde(default)]
    pub rate_per_hour: f64,
    pub walltime_s: u64,
    #[serde(default)]
    pub unclean_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_data: Option<Vec<String>>,
    #[serde(default = "default_users")]
    pub users: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burst: Option<BurstConfig>,
    /// Pin all submissions to one broker; default is round-robin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rb: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cert: Option<CertConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BurstConfig {
    pub count: u64,
    #[serde(default)]
    pub at_s: u64,
    #[serde(default)]
    pub interval_s: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertConfig {
    pub issuer_ca: String,
    #[serde(default)]
    pub expired: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationJobConfig {
    pub vo: String,
    pub src_se: String,
    pub dst_se: String,
    pub files: Vec<ReplicationFile>,
    #[serde(default)]
    pub start_s: u64,
    #[serde(default)]
    pub interval_s: u64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationFile {
    pub lfn: String,
    pub size_mb: u64,
    /// Whether the file exists on the source SE at scenario start; set to
    /// false to model replication of an unregistered logical name.
    #[serde(default = "default_true")]
    pub preloaded: bool,
}

impl ReplicationFile {
    pub fn size_bytes(&self) -> u64 {
        self.size_mb * 1_000_000
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FabricConfig {
    #[serde(default)]
    pub templates: BTreeMap<String, String>,
    #[serde(default)]
    pub nodes: BTreeMap<String, String>,
    #[serde(default)]
    pub installs: Vec<FabricInstall>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FabricInstall {
    pub node: String,
    #[serde(default)]
    pub at_s: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReleasePlan {
    #[serde(default)]
    pub tags: Vec<ReleaseTagPlan>,
    #[serde(default)]
    pub bypasses: Vec<BypassPlan>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReleaseTagPlan {
    pub label: String,
    pub packages: Vec<PackagePlan>,
    #[serde(default)]
    pub propose_at_s: u64,
    #[serde(default)]
    pub gate_delays_s: GateDelays,
    /// Explicit per-gate verdicts; mutually exclusive with failure_prob.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_verdicts: Option<GateVerdicts>,
    /// Per-package failure probability drawn on the tag's own stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_prob: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackagePlan {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateDelays {
    #[serde(default)]
    pub dev: u64,
    #[serde(default)]
    pub core: u64,
    #[serde(default)]
    pub application: u64,
}

impl Default for GateDelays {
    fn default() -> Self {
        GateDelays {
            dev: 3_600,
            core: 7_200,
            application: 3_600,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GateVerdicts {
    #[serde(default)]
    pub dev: Verdict,
    #[serde(default)]
    pub core: Verdict,
    #[serde(default)]
    pub application: Verdict,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Verdict {
    #[serde(default)]
    pub failed: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BypassPlan {
    pub kind: String,
    pub target: String,
    #[serde(default)]
    pub at_s: u64,
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl Scenario {
    /// Parse scenario bytes and resolve all cross-references, reporting
    /// every error found rather than the first.
    pub fn validate(bytes: &[u8]) -> Result<Scenario, Vec<SchemaError>> {
        let scenario: Scenario = serde_json::from_slice(bytes).map_err(|e| {
            vec![SchemaError {
                path: format!("/(line {}, column {})", e.line(), e.column()),
                message: e.to_string(),
            }]
        })?;
        scenario.check().map(|()| scenario)
    }

    pub fn check(&self) -> Result<(), Vec<SchemaError>> {
        let mut errors = Vec::new();
        let mut err = |path: String, message: String| {
            errors.push(SchemaError { path, message });
        };

        if self.duration_h == 0 {
            err("/duration_h".into(), "duration must be positive".into());
        }
        if self.gis.refresh_s == 0 {
            err(
                "/gis/refresh_s".into(),
                "refresh interval must be positive".into(),
            );
        }

        let vo_names: BTreeSet<&str> = self.vos.iter().map(|v| v.name.as_str()).collect();
        let site_names: BTreeSet<&str> = self.sites.iter().map(|s| s.name.as_str()).collect();
        let rb_ids: BTreeSet<&str> = self.rbs.iter().map(|r| r.rb_id.as_str()).collect();
        let ce_ids: BTreeSet<&str> = self
            .sites
            .iter()
            .flat_map(|s| s.ces.iter().map(|c| c.ce_id.as_str()))
            .collect();
        let se_hosts: BTreeSet<&str> = self
            .sites
            .iter()
            .flat_map(|s| s.ses.iter().map(|e| e.host.as_str()))
            .collect();

        let mut seen_vos = BTreeSet::new();
        for (i, vo) in self.vos.iter().enumerate() {
            if !seen_vos.insert(vo.name.as_str()) {
                err(
                    format!("/vos/{i}/name"),
                    format!("duplicate VO {}", vo.name),
                );
            }
        }

        let mut seen_sites = BTreeSet::new();
        let mut seen_ces = BTreeSet::new();
        let mut seen_ses = BTreeSet::new();
        for (i, site) in self.sites.iter().enumerate() {
            if !seen_sites.insert(site.name.as_str()) {
                err(
                    format!("/sites/{i}/name"),
                    format!("duplicate site {}", site.name),
                );
            }
            for (j, link) in site.links.iter().enumerate() {
                if !site_names.contains(link.to.as_str()) {
                    err(
                        format!("/sites/{i}/links/{j}/to"),
                        format!("unknown site {}", link.to),
                    );
                }
                if link.bandwidth_mbps == 0 {
                    err(
                        format!("/sites/{i}/links/{j}/bandwidth_mbps"),
                        "bandwidth must be positive".into(),
                    );
                }
            }
            for (j, ce) in site.ces.iter().enumerate() {
                if !seen_ces.insert(ce.ce_id.as_str()) {
                    err(
                        format!("/sites/{i}/ces/{j}/ce_id"),
                        format!("duplicate computing element {}", ce.ce_id),
                    );
                }
                if ce.worker_nodes == 0 || ce.cpus_per_node == 0 {
                    err(
                        format!("/sites/{i}/ces/{j}"),
                        "worker_nodes and cpus_per_node must be positive".into(),
                    );
                }
                if !(0.0..=1.0).contains(&ce.clean_leak_fraction) {
                    err(
                        format!("/sites/{i}/ces/{j}/clean_leak_fraction"),
                        "fraction must be within [0, 1]".into(),
                    );
                }
                if let Some(vos) = &ce.supported_vos {
                    for vo in vos {
                        if !vo_names.contains(vo.as_str()) {
                            err(
                                format!("/sites/{i}/ces/{j}/supported_vos"),
                                format!("unknown VO {vo}"),
                            );
                        }
                    }
                }
            }
            for (j, se) in site.ses.iter().enumerate() {
                if !seen_ses.insert(se.host.as_str()) {
                    err(
                        format!("/sites/{i}/ses/{j}/host"),
                        format!("duplicate storage element {}", se.host),
                    );
                }
                let part_ids: BTreeSet<&str> =
                    se.partitions.iter().map(|p| p.id.as_str()).collect();
                if part_ids.len() != se.partitions.len() {
                    err(
                        format!("/sites/{i}/ses/{j}/partitions"),
                        "duplicate partition id".into(),
                    );
                }
                for (k, p) in se.partitions.iter().enumerate() {
                    if !p.capacity_gb.is_finite() || p.capacity_gb < 0.0 {
                        err(
                            format!("/sites/{i}/ses/{j}/partitions/{k}/capacity_gb"),
                            "capacity must be a non-negative number".into(),
                        );
                    }
                }
                for (mount, part) in &se.mounts {
                    if !part_ids.contains(part.as_str()) {
                        err(
                            format!("/sites/{i}/ses/{j}/mounts/{mount}"),
                            format!("unknown partition {part}"),
                        );
                    }
                    if !mount.starts_with('/') {
                        err(
                            format!("/sites/{i}/ses/{j}/mounts/{mount}"),
                            "mount path must be absolute".into(),
                        );
                    }
                }
                for (vo, area) in &se.vo_areas {
                    if !vo_names.contains(vo.as_str()) {
                        err(
                            format!("/sites/{i}/ses/{j}/vo_areas/{vo}"),
                            format!("unknown VO {vo}"),
                        );
                    }
                    let covered = se
                        .mounts
                        .keys()
                        .any(|m| m == "/" || area == m || area.starts_with(&format!("{m}/")));
                    if !covered {
                        err(
                            format!("/sites/{i}/ses/{j}/vo_areas/{vo}"),
                            format!("area {area} resolves to no mounted partition"),
                        );
                    }
                }
            }
        }

        for shared in ce_ids.intersection(&se_hosts) {
            err(
                "/sites".into(),
                format!("{shared} names both a CE and an SE; resource ids share one namespace"),
            );
        }

        let mut seen_rbs = BTreeSet::new();
        for (i, rb) in self.rbs.iter().enumerate() {
            if !seen_rbs.insert(rb.rb_id.as_str()) {
                err(
                    format!("/rbs/{i}/rb_id"),
                    format!("duplicate broker {}", rb.rb_id),
                );
            }
            if rb.overflow != "refuse" && rb.overflow != "queue" {
                err(
                    format!("/rbs/{i}/overflow"),
                    format!(
                        "overflow must be \"refuse\" or \"queue\", got {:?}",
                        rb.overflow
                    ),
                );
            }
        }

        for (i, pool) in self.pools.iter().enumerate() {
            if !vo_names.contains(pool.vo.as_str()) {
                err(format!("/pools/{i}/vo"), format!("unknown VO {}", pool.vo));
            }
        }
        let pool_vos: BTreeSet<&str> = self.pools.iter().map(|p| p.vo.as_str()).collect();

        let mut seen_workloads = BTreeSet::new();
        for (i, w) in self.workloads.iter().enumerate() {
            if !seen_workloads.insert(w.name.as_str()) {
                err(
                    format!("/workloads/{i}/name"),
                    format!("duplicate workload {}", w.name),
                );
            }
            if w.users == 0 {
                err(format!("/workloads/{i}/users"), "users must be >= 1".into());
            }
            if !(0.0..=1.0).contains(&w.unclean_fraction) {
                err(
                    format!("/workloads/{i}/unclean_fraction"),
                    "fraction must be within [0, 1]".into(),
                );
            }
            if w.cert.is_none() && self.cas.is_empty() {
                err(
                    format!("/workloads/{i}"),
                    "default certificates need at least one CA in /cas".into(),
                );
            }
            if !vo_names.contains(w.vo.as_str()) {
                err(format!("/workloads/{i}/vo"), format!("unknown VO {}", w.vo));
            } else if !pool_vos.contains(w.vo.as_str()) {
                err(
                    format!("/workloads/{i}/vo"),
                    format!("VO {} has no account pool", w.vo),
                );
            }
            match jdl::parse_jdl(&w.jdl_template) {
                Ok(ad) => {
                    if ad.virtual_organisation != w.vo {
                        err(
                            format!("/workloads/{i}/jdl_template"),
                            format!(
                                "JDL VirtualOrganisation {:?} does not match workload VO {:?}",
                                ad.virtual_organisation, w.vo
                            ),
                        );
                    }
                }
                Err(e) => err(format!("/workloads/{i}/jdl_template"), e.to_string()),
            }
            if let Some(rb) = &w.rb {
                if !rb_ids.contains(rb.as_str()) {
                    err(format!("/workloads/{i}/rb"), format!("unknown broker {rb}"));
                }
            }
            if let Some(subject) = &w.subject {
                if w.users != 1 {
                    err(
                        format!("/workloads/{i}/subject"),
                        "an explicit subject requires users = 1".into(),
                    );
                }
                if subject.is_empty() {
                    err(
                        format!("/workloads/{i}/subject"),
                        "subject must be non-empty".into(),
                    );
                }
            }
            if w.rate_per_hour < 0.0 {
                err(
                    format!("/workloads/{i}/rate_per_hour"),
                    "rate must be >= 0".into(),
                );
            }
            if (w.rate_per_hour > 0.0 || w.burst.is_some()) && self.rbs.is_empty() {
                err(format!("/workloads/{i}"), "scenario has no brokers".into());
            }
            if let Some(lfns) = &w.input_data {
                for lfn in lfns {
                    if storage::resolve_lfn_shape(lfn).is_err() {
                        err(
                            format!("/workloads/{i}/input_data"),
                            format!("malformed LFN {lfn:?}"),
                        );
                    }
                }
            }
        }

        for (i, r) in self.replication_jobs.iter().enumerate() {
            if !vo_names.contains(r.vo.as_str()) {
                err(
                    format!("/replication_jobs/{i}/vo"),
                    format!("unknown VO {}", r.vo),
                );
            }
            let mut endpoint_sites = Vec::new();
            for (role, host) in [("src_se", &r.src_se), ("dst_se", &r.dst_se)] {
                let located = self
                    .sites
                    .iter()
                    .find(|s| s.ses.iter().any(|se| se.host == *host));
                match located {
                    None => err(
                        format!("/replication_jobs/{i}/{role}"),
                        format!("unknown storage element {host}"),
                    ),
                    Some(site) => {
                        endpoint_sites.push(site.name.as_str());
                        let se = site.ses.iter().find(|se| se.host == *host).expect("found");
                        if !se.vo_areas.contains_key(&r.vo) {
                            err(
                                format!("/replication_jobs/{i}/{role}"),
                                format!("VO {} has no area on {host}", r.vo),
                            );
                        }
                    }
                }
            }
            if let [src_site, dst_site] = endpoint_sites[..] {
                let linked = src_site == dst_site
                    || self.sites.iter().any(|s| {
                        (s.name == src_site && s.links.iter().any(|l| l.to == dst_site))
                            || (s.name == dst_site && s.links.iter().any(|l| l.to == src_site))
                    });
                if !linked {
                    err(
                        format!("/replication_jobs/{i}"),
                        format!("no link between {src_site} and {dst_site}"),
                    );
                }
            }
            for (j, f) in r.files.iter().enumerate() {
                if storage::resolve_lfn_shape(&f.lfn).is_err() {
                    err(
                        format!("/replication_jobs/{i}/files/{j}/lfn"),
                        format!("malformed LFN {:?}", f.lfn),
                    );
                }
            }
        }

        if let Some(faults) = &self.faults {
            for (i, fault) in faults.iter().enumerate() {
                let path = format!("/faults/{i}/target");
                match fault.target.split_once(':') {
                    Some(("rb", id)) => {
                        if !rb_ids.contains(id) {
                            err(path.clone(), format!("unknown broker {id}"));
                        } else if fault.kind == FaultKind::DbCorruption {
                            let dual = self.rbs.iter().any(|r| r.rb_id == id && r.dual_cpu);
                            if !dual {
                                err(
                                    path.clone(),
                                    format!("db-corruption requires dual_cpu broker, {id} is not"),
                                );
                            }
                        }
                    }
                    Some(("ce", id)) => {
                        if !ce_ids.contains(id) {
                            err(path.clone(), format!("unknown computing element {id}"));
                        }
                    }
                    Some(("se", id)) => {
                        if !se_hosts.contains(id) {
                            err(path.clone(), format!("unknown storage element {id}"));
                        }
                    }
                    Some(("gis", "top")) => {}
                    _ => err(
                        path.clone(),
                        format!(
                            "target {:?} must be rb:<id>, ce:<id>, se:<host> or gis:top",
                            fault.target
                        ),
                    ),
                }
                match &fault.kind {
                    FaultKind::DbCorruption if !fault.target.starts_with("rb:") => {
                        err(
                            format!("/faults/{i}/kind"),
                            "db-corruption targets brokers".into(),
                        );
                    }
                    FaultKind::GramWedgeExternal if !fault.target.starts_with("ce:") => {
                        err(
                            format!("/faults/{i}/kind"),
                            "gram-wedge-external targets computing elements".into(),
                        );
                    }
                    _ => {}
                }
                if let FaultProcess::Poisson { rate_per_day } = fault.process {
                    if rate_per_day < 0.0 {
                        err(format!("/faults/{i}/process"), "rate must be >= 0".into());
                    }
                }
            }
        }

        if let Some(fabric) = &self.fabric {
            let mut set = crate::fabric::SourceSet::default();
            for (name, text) in &fabric.templates {
                match crate::fabric::parse_source(name, text) {
                    Ok(f) => {
                        set.templates.insert(name.clone(), f);
                    }
                    Err(e) => err(format!("/fabric/templates/{name}"), e.to_string()),
                }
            }
            for (name, text) in &fabric.nodes {
                match crate::fabric::parse_source(name, text) {
                    Ok(f) => {
                        set.nodes.insert(name.clone(), f);
                    }
                    Err(e) => err(format!("/fabric/nodes/{name}"), e.to_string()),
                }
            }
            if let Err(compile_errors) = crate::fabric::compile(&set) {
                for e in compile_errors {
                    err("/fabric".into(), e.to_string());
                }
            }
            for (i, install) in fabric.installs.iter().enumerate() {
                if !fabric.nodes.contains_key(&install.node) {
                    err(
                        format!("/fabric/installs/{i}/node"),
                        format!("unknown node profile {}", install.node),
                    );
                }
            }
        }

        if let Some(release) = &self.release {
            for (i, tag) in release.tags.iter().enumerate() {
                if tag.packages.is_empty() {
                    err(
                        format!("/release/tags/{i}/packages"),
                        "empty package set".into(),
                    );
                }
                let mut seen = BTreeSet::new();
                for p in &tag.packages {
                    if !seen.insert(p.name.as_str()) {
                        err(
                            format!("/release/tags/{i}/packages"),
                            format!("duplicate package {}", p.name),
                        );
                    }
                }
                if tag.failure_prob.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
                    err(
                        format!("/release/tags/{i}/failure_prob"),
                        "probability must be within [0, 1]".into(),
                    );
                }
                if tag.gate_verdicts.is_some() && tag.failure_prob.is_some() {
                    err(
                        format!("/release/tags/{i}"),
                        "gate_verdicts and failure_prob are mutually exclusive".into(),
                    );
                }
                if let Some(v) = &tag.gate_verdicts {
                    for (gate, verdict) in [
                        ("dev", &v.dev),
                        ("core", &v.core),
                        ("application", &v.application),
                    ] {
                        for name in &verdict.failed {
                            if !seen.contains(name.as_str()) {
                                err(
                                    format!("/release/tags/{i}/gate_verdicts/{gate}"),
                                    format!("unknown package {name}"),
                                );
                            }
                        }
                    }
                }
            }
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Effective fault set: the explicit list when present, otherwise the
    /// default daily-restart regime (every main service restarts once per
    /// day; dual-CPU brokers additionally corrupt once per day).
    pub fn effective_faults(&self) -> Vec<FaultSpec> {
        if let Some(explicit) = &self.faults {
            return explicit.clone();
        }
        let mut faults = Vec::new();
        let daily = |target: String, kind: FaultKind| FaultSpec {
            target,
            kind,
            process: FaultProcess::Poisson { rate_per_day: 1.0 },
            effect_duration_s: 600,
            orphan_inodes: None,
        };
        for rb in &self.rbs {
            faults.push(daily(format!("rb:{}", rb.rb_id), FaultKind::RestartNeeded));
            if rb.dual_cpu {
                faults.push(daily(format!("rb:{}", rb.rb_id), FaultKind::DbCorruption));
            }
        }
        for site in &self.sites {
            for ce in &site.ces {
                faults.push(daily(format!("ce:{}", ce.ce_id), FaultKind::RestartNeeded));
            }
        }
        if !self.sites.is_empty() {
            faults.push(daily("gis:top".to_string(), FaultKind::RestartNeeded));
        }
        faults
    }

    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("scenario serializes");
        serde_json::to_string(&value).expect("value serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_scenario_json() -> String {
        r#"{
            "seed": 1,
            "duration_h": 1,
            "cas": ["cern-ca"],
            "vos": [{"name": "atlas", "members": []}],
            "pools": [{"vo": "atlas", "capacity": 10}],
            "sites": [{
                "name": "cern",
                "ces": [{"ce_id": "ce1", "worker_nodes": 2}],
                "ses": [{
                    "host": "se1.cern.ch",
                    "partitions": [{"id": "p0", "capacity_gb": 100}],
                    "mounts": {"/flatfiles": "p0"},
                    "vo_areas": {"atlas": "/flatfiles/atlas"}
                }]
            }],
            "rbs": [{"rb_id": "rb1"}],
            "workloads": [],
            "faults": []
        }"#
        .to_string()
    }

    #[test]
    fn minimal_scenario_is_valid() {
        let scenario = Scenario::validate(minimal_scenario_json().as_bytes()).unwrap();
        assert_eq!(scenario.seed, 1);
        assert_eq!(scenario.gis.refresh_s, 30);
        assert_eq!(scenario.rbs[0].recovery_s, 1_800);
    }

    #[test]
    fn unknown_workload_vo_is_reported_with_path() {
        let mut json: serde_json::Value = serde_json::from_str(&minimal_scenario_json()).unwrap();
        json["workloads"] = serde_json::json!([{
            "name": "w", "vo": "nope",
            "jdl_template": "Executable=\"a\"; VirtualOrganisation=\"nope\";",
            "walltime_s": 60
        }]);
        let errs = Scenario::validate(json.to_string().as_bytes()).unwrap_err();
        assert!(errs.iter().any(|e| e.path == "/workloads/0/vo"));
    }

    #[test]
    fn all_errors_are_reported_not_just_the_first() {
        let mut json: serde_json::Value = serde_json::from_str(&minimal_scenario_json()).unwrap();
        json["workloads"] = serde_json::json!([{
            "name": "w", "vo": "nope",
            "jdl_template": "Executable=\"a\"; VirtualOrganisation=\"nope\";",
            "walltime_s": 60
        }]);
        json["pools"] = serde_json::json!([{"vo": "ghost", "capacity": 1}]);
        let errs = Scenario::validate(json.to_string().as_bytes()).unwrap_err();
        assert!(errs.len() >= 2, "expected both errors, got {errs:?}");
        assert!(errs.iter().any(|e| e.path == "/pools/0/vo"));
        assert!(errs.iter().any(|e| e.path.starts_with("/workloads/0")));
    }

    #[test]
    fn corruption_fault_requires_dual_cpu_broker() {
        let mut json: serde_json::Value = serde_json::from_str(&minimal_scenario_json()).unwrap();
        json["faults"] = serde_json::json!([{
            "target": "rb:rb1", "kind": "db-corruption",
            "process": {"poisson": {"rate_per_day": 1.0}},
            "effect_duration_s": 0
        }]);
        let errs = Scenario::validate(json.to_string().as_bytes()).unwrap_err();
        assert!(errs.iter().any(|e| e.message.contains("dual_cpu")));
    }

    #[test]
    fn vo_area_must_resolve_through_the_mount_table() {
        let mut json: serde_json::Value = serde_json::from_str(&minimal_scenario_json()).unwrap();
        json["sites"][0]["ses"][0]["vo_areas"] = serde_json::json!({"atlas": "/elsewhere/atlas"});
        let errs = Scenario::validate(json.to_string().as_bytes()).unwrap_err();
        assert!(errs
            .iter()
            .any(|e| e.message.contains("no mounted partition")));
    }

    #[test]
    fn absent_faults_key_enables_the_default_daily_set() {
        let mut json: serde_json::Value = serde_json::from_str(&minimal_scenario_json()).unwrap();
        json.as_object_mut().unwrap().remove("faults");
        let scenario = Scenario::validate(json.to_string().as_bytes()).unwrap();
        let faults = scenario.effective_faults();
        // rb restart + ce restart + gis top restart
        assert_eq!(faults.len(), 3);
        // explicit empty list disables everything
        let scenario = Scenario::validate(minimal_scenario_json().as_bytes()).unwrap();
        assert!(scenario.effective_faults().is_empty());
    }

    #[test]
    fn jdl_vo_mismatch_is_caught() {
        let mut json: serde_json::Value = serde_json::from_str(&minimal_scenario_json()).unwrap();
        json["workloads"] = serde_json::json!([{
            "name": "w", "vo": "atlas",
            "jdl_template": "Executable=\"a\"; VirtualOrganisation=\"cms\";",
            "walltime_s": 60
        }]);
        let errs = Scenario::validate(json.to_string().as_bytes()).unwrap_err();
        assert!(errs
            .iter()
            .any(|e| e.message.contains("does not match workload VO")));
    }
}
