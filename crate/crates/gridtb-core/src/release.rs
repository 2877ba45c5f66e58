//! Staged release procedure: a tentative tag must pass the development
//! testbed gate, then the five-core-sites gate, before reaching the
//! application testbed. Any gate failure rejects the tag for good; fixes go
//! out as a new tag. Application software, OS security patches and CA
//! updates bypass the procedure entirely and never touch tag state.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::sim::VirtualMs;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagState {
    Tentative,
    DevTested,
    CoreTested,
    Application,
    Rejected,
}

impl TagState {
    pub fn as_str(&self) -> &'static str {
        match self {
            TagState::Tentative => "TENTATIVE",
            TagState::DevTested => "DEV_TESTED",
            TagState::CoreTested => "CORE_TESTED",
            TagState::Application => "APPLICATION",
            TagState::Rejected => "REJECTED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Gate {
    Dev,
    Core,
    Application,
}

impl Gate {
    pub fn as_str(&self) -> &'static str {
        match self {
            Gate::Dev => "dev",
            Gate::Core => "core",
            Gate::Application => "application",
        }
    }

    fn required_state(&self) -> TagState {
        match self {
            Gate::Dev => TagState::Tentative,
            Gate::Core => TagState::DevTested,
            Gate::Application => TagState::CoreTested,
        }
    }

    fn advanced_state(&self) -> TagState {
        match self {
            Gate::Dev => TagState::DevTested,
            Gate::Core => TagState::CoreTested,
            Gate::Application => TagState::Application,
        }
    }

    pub fn next(&self) -> Option<Gate> {
        match self {
            Gate::Dev => Some(Gate::Core),
            Gate::Core => Some(Gate::Application),
            Gate::Application => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateLogEntry {
    pub at: VirtualMs,
    pub gate: Gate,
    pub passed: bool,
    pub failed_packages: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ReleaseTag {
    pub tag_id: u64,
    pub label: String,
    pub packages: Vec<(String, String)>,
    pub state: TagState,
    pub gate_log: Vec<GateLogEntry>,
}

impl ReleaseTag {
    pub fn passed_gate(&self, gate: Gate) -> bool {
        self.gate_log.iter().any(|e| e.gate == gate && e.passed)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReleaseError {
    #[error("empty package set")]
    EmptyPackageSet,
    #[error("duplicate package name {0}")]
    DuplicatePackage(String),
    #[error("unknown tag {0}")]
    UnknownTag(u64),
    #[error("gate {gate} requires state {required}, tag is {actual}")]
    WrongState {
        gate: &'static str,
        required: &'static str,
        actual: &'static str,
    },
    #[error("verdict names unknown package {0}")]
    UnknownPackage(String),
    #[error("kind {0:?} may not bypass the release procedure")]
    UnsanctionedKind(String),
}

/// The three categories allowed past the procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BypassKind {
    ApplicationSoftware,
    SecurityPatch,
    CaUpdate,
}

impl BypassKind {
    pub fn parse(s: &str) -> Result<BypassKind, ReleaseError> {
        match s {
            "application-software" => Ok(BypassKind::ApplicationSoftware),
            "security-patch" => Ok(BypassKind::SecurityPatch),
            "ca-update" => Ok(BypassKind::CaUpdate),
            other => Err(ReleaseError::UnsanctionedKind(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BypassKind::ApplicationSoftware => "application-software",
            BypassKind::SecurityPatch => "security-patch",
            BypassKind::CaUpdate => "ca-update",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BypassRecord {
    pub at: VirtualMs,
    pub kind: BypassKind,
    pub testbed: String,
}

/// All tags and bypass installs known to one run.
#[derive(Debug, Default)]
pub struct ReleaseStore {
    next_id: u64,
    pub tags: Vec<ReleaseTag>,
    pub bypass_log: Vec<BypassRecord>,
}

impl ReleaseStore {
    pub fn new() -> Self {
        ReleaseStore::default()
    }

    pub fn tag(&self, tag_id: u64) -> Option<&ReleaseTag> {
        self.tags.iter().find(|t| t.tag_id == tag_id)
    }

    /// Insert a new tentative tag. Tag ids are strictly increasing.
    pub fn propose_tag(
        &mut self,
        label: &str,
        packages: Vec<(String, String)>,
    ) -> Result<u64, ReleaseError> {
        if packages.is_empty() {
            return Err(ReleaseError::EmptyPackageSet);
        }
        let mut seen = BTreeSet::new();
        for (name, _) in &packages {
            if !seen.insert(name.clone()) {
                return Err(ReleaseError::DuplicatePackage(name.clone()));
            }
        }
        self.next_id += 1;
        let tag_id = self.next_id;
        self.tags.push(ReleaseTag {
            tag_id,
            label: label.to_string(),
            packages,
            state: TagState::Tentative,
            gate_log: Vec::new(),
        });
        Ok(tag_id)
    }

    /// Run one gate with per-package verdicts (names listed in `failed`
    /// failed their tests). All-pass advances the tag one state; any failure
    /// rejects it and records the offending packages for the bug reports.
    /// Gates cannot be skipped or re-run out of order.
    pub fn run_gate(
        &mut self,
        tag_id: u64,
        gate: Gate,
        failed: &[String],
        now: VirtualMs,
    ) -> Result<TagState, ReleaseError> {
        let tag = self
            .tags
            .iter_mut()
            .find(|t| t.tag_id == tag_id)
            .ok_or(ReleaseError::UnknownTag(tag_id))?;
        if tag.state != gate.required_state() {
            return Err(ReleaseError::WrongState {
                gate: gate.as_str(),
                required: gate.required_state().as_str(),
                actual: tag.state.as_str(),
            });
        }
        for name in failed {
            if !tag.packages.iter().any(|(p, _)| p == name) {
                return Err(ReleaseError::UnknownPackage(name.clone()));
            }
        }
        let passed = failed.is_empty();
        tag.gate_log.push(GateLogEntry {
            at: now,
            gate,
            passed,
            failed_packages: failed.to_vec(),
        });
        tag.state = if passed {
            gate.advanced_state()
        } else {
            TagState::Rejected
        };
        Ok(tag.state)
    }

    /// Install a bypass item on a testbed. Only the sanctioned kinds are
    /// accepted, and no tag state is touched.
    pub fn bypass_install(
        &mut self,
        kind: &str,
        testbed: &str,
        now: VirtualMs,
    ) -> Result<BypassKind, ReleaseError> {
        let kind = BypassKind::parse(kind)?;
        self.bypass_log.push(BypassRecord {
            at: now,
            kind,
            testbed: testbed.to_string(),
        });
        Ok(kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn packages(names: &[&str]) -> Vec<(String, String)> {
        names
            .iter()
            .map(|n| (n.to_string(), "1.0".to_string()))
            .collect()
    }

    #[test]
    fn propose_creates_tentative_tags_with_increasing_ids() {
        let mut store = ReleaseStore::new();
        let a = store
            .propose_tag("1.2.3", packages(&["rb", "gis"]))
            .unwrap();
        let b = store.propose_tag("1.3.0", packages(&["rb"])).unwrap();
        assert!(b > a);
        assert_eq!(store.tag(a).unwrap().state, TagState::Tentative);
    }

    #[test]
    fn empty_and_duplicate_package_sets_are_rejected() {
        let mut store = ReleaseStore::new();
        assert_eq!(
            store.propose_tag("x", Vec::new()),
            Err(ReleaseError::EmptyPackageSet)
        );
        assert_eq!(
            store.propose_tag("x", packages(&["rb", "rb"])),
            Err(ReleaseError::DuplicatePackage("rb".into()))
        );
    }

    #[test]
    fn full_pass_walks_all_four_steps() {
        let mut store = ReleaseStore::new();
        let id = store
            .propose_tag("1.3.0", packages(&["rb", "gis"]))
            .unwrap();
        assert_eq!(
            store.run_gate(id, Gate::Dev, &[], 1).unwrap(),
            TagState::DevTested
        );
        assert_eq!(
            store.run_gate(id, Gate::Core, &[], 2).unwrap(),
            TagState::CoreTested
        );
        assert_eq!(
            store.run_gate(id, Gate::Application, &[], 3).unwrap(),
            TagState::Application
        );
        let tag = store.tag(id).unwrap();
        assert!(tag.passed_gate(Gate::Dev) && tag.passed_gate(Gate::Core));
    }

    #[test]
    fn core_gate_failure_rejects_and_names_the_package() {
        let mut store = ReleaseStore::new();
        let id = store
            .propose_tag("1.2.4", packages(&["rb", "gis"]))
            .unwrap();
        store.run_gate(id, Gate::Dev, &[], 1).unwrap();
        let state = store
            .run_gate(id, Gate::Core, &["gis".to_string()], 2)
            .unwrap();
        assert_eq!(state, TagState::Rejected);
        let tag = store.tag(id).unwrap();
        assert_eq!(tag.gate_log.last().unwrap().failed_packages, vec!["gis"]);
    }

    #[test]
    fn gates_cannot_be_skipped() {
        let mut store = ReleaseStore::new();
        let id = store.propose_tag("x", packages(&["rb"])).unwrap();
        let err = store.run_gate(id, Gate::Application, &[], 1).unwrap_err();
        assert_eq!(
            err,
            ReleaseError::WrongState {
                gate: "application",
                required: "CORE_TESTED",
                actual: "TENTATIVE",
            }
        );
    }

    #[test]
    fn rejected_is_terminal() {
        let mut store = ReleaseStore::new();
        let id = store.propose_tag("x", packages(&["rb"])).unwrap();
        store
            .run_gate(id, Gate::Dev, &["rb".to_string()], 1)
            .unwrap();
        assert_eq!(store.tag(id).unwrap().state, TagState::Rejected);
        for gate in [Gate::Dev, Gate::Core, Gate::Application] {
            assert!(store.run_gate(id, gate, &[], 2).is_err());
        }
        assert_eq!(store.tag(id).unwrap().state, TagState::Rejected);
    }

    #[test]
    fn bypass_kinds_are_the_sanctioned_three() {
        let mut store = ReleaseStore::new();
        store
            .bypass_install("security-patch", "application", 1)
            .unwrap();
        store.bypass_install("ca-update", "application", 2).unwrap();
        store
            .bypass_install("application-software", "application", 3)
            .unwrap();
        assert_eq!(
            store.bypass_install("middleware-rpm", "application", 4),
            Err(ReleaseError::UnsanctionedKind("middleware-rpm".into()))
        );
        assert_eq!(store.bypass_log.len(), 3);
    }

    #[test]
    fn bypass_never_changes_tag_state() {
        let mut store = ReleaseStore::new();
        let id = store.propose_tag("x", packages(&["rb"])).unwrap();
        store.run_gate(id, Gate::Dev, &[], 1).unwrap();
        store
            .bypass_install("security-patch", "application", 2)
            .unwrap();
        assert_eq!(store.tag(id).unwrap().state, TagState::DevTested);
    }

    #[test]
    fn verdicts_must_name_known_packages() {
        let mut store = ReleaseStore::new();
        let id = store.propose_tag("x", packages(&["rb"])).unwrap();
        assert_eq!(
            store.run_gate(id, Gate::Dev, &["nope".to_string()], 1),
            Err(ReleaseError::UnknownPackage("nope".into()))
        );
    }
}
