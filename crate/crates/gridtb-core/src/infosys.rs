//! Two-level hierarchical information service: site nodes hold the freshest
//! record per resource, the top node serves each record only after the
//! refresh delay has elapsed. Query-side degradation (latency growth or
//! stale serves beyond five sites) is pluggable because the original
//! service's failure mechanism at scale was never identified.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::rng::RngStream;
use crate::sim::VirtualMs;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CeAttrs {
    pub total_cpus: u32,
    pub free_cpus: u32,
    pub queue_length: u32,
    pub estimated_traversal_time_s: u64,
    pub supported_vos: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeAttrs {
    pub aggregate_free_bytes: u64,
    pub vo_areas: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResourceAttrs {
    Ce(CeAttrs),
    Se(SeAttrs),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceRecord {
    pub resource_id: String,
    pub site: String,
    pub attrs: ResourceAttrs,
    pub published_at: VirtualMs,
}

impl ResourceRecord {
    pub fn is_ce(&self) -> bool {
        matches!(self.attrs, ResourceAttrs::Ce(_))
    }

    pub fn ce(&self) -> Option<&CeAttrs> {
        match &self.attrs {
            ResourceAttrs::Ce(ce) => Some(ce),
            ResourceAttrs::Se(_) => None,
        }
    }

    pub fn se(&self) -> Option<&SeAttrs> {
        match &self.attrs {
            ResourceAttrs::Se(se) => Some(se),
            ResourceAttrs::Ce(_) => None,
        }
    }

    fn validate(&self) -> Result<(), RecordError> {
        if let ResourceAttrs::Ce(ce) = &self.attrs {
            if ce.free_cpus > ce.total_cpus {
                return Err(RecordError::FreeExceedsTotal {
                    resource_id: self.resource_id.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("record {resource_id}: free_cpus exceeds total_cpus")]
    FreeExceedsTotal { resource_id: String },
    #[error("unknown site {0}")]
    UnknownSite(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DegradationModel {
    None,
    /// Top-node query latency grows linearly with registered site count.
    LinearLatency {
        base_ms: u64,
    },
    /// Beyond five sites each record is served stale (previous version)
    /// with probability min(1, k * (sites - 5)).
    StaleProb {
        k: f64,
    },
}

/// A top-node query answer: matching records annotated with their age.
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub records: Vec<(ResourceRecord, VirtualMs)>,
    pub latency_ms: u64,
    pub timed_out: bool,
    pub stale_serves: u64,
}

#[derive(Debug, Clone)]
struct Version {
    record: ResourceRecord,
    visible_at_top: VirtualMs,
}

#[derive(Default)]
struct Resource {
    // oldest..newest; newest is the site-visible one
    versions: Vec<Version>,
}

impl Resource {
    /// Drop versions that can never be served again: everything older than
    /// the newest version already visible at `now`, keeping one predecessor
    /// for the stale-serve model.
    fn prune(&mut self, now: VirtualMs) {
        if let Some(idx) = self.versions.iter().rposition(|v| v.visible_at_top <= now) {
            if idx > 1 {
                self.versions.drain(..idx - 1);
            }
        }
    }
}

pub struct Gis {
    refresh_ms: u64,
    degradation: DegradationModel,
    timeout_ms: Option<u64>,
    sites: BTreeMap<String, BTreeMap<String, Resource>>,
    pub top_down_until: Option<VirtualMs>,
    pub rejected_publishes: u64,
}

impl Gis {
    pub fn new(refresh_ms: u64, degradation: DegradationModel, timeout_ms: Option<u64>) -> Self {
        Gis {
            refresh_ms,
            degradation,
            timeout_ms,
            sites: BTreeMap::new(),
            top_down_until: None,
            rejected_publishes: 0,
        }
    }

    pub fn register_site(&mut self, site: &str) {
        self.sites.entry(site.to_string()).or_default();
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    pub fn refresh_ms(&self) -> u64 {
        self.refresh_ms
    }

    fn insert(
        &mut self,
        record: ResourceRecord,
        visible_at_top: VirtualMs,
    ) -> Result<(), RecordError> {
        if let Err(e) = record.validate() {
            self.rejected_publishes += 1;
            return Err(e);
        }
        let site = self
            .sites
            .get_mut(&record.site)
            .ok_or_else(|| RecordError::UnknownSite(record.site.clone()))?;
        site.entry(record.resource_id.clone())
            .or_default()
            .versions
            .push(Version {
                record,
                visible_at_top,
            });
        Ok(())
    }

    /// Replace the site's record for this resource id; the new version
    /// becomes visible at the top node after the refresh delay.
    pub fn publish(&mut self, record: ResourceRecord) -> Result<(), RecordError> {
        let visible = record.published_at + self.refresh_ms;
        self.insert(record, visible)
    }

    /// Publish with immediate top-node visibility; used when seeding the
    /// converged state of a scenario before it starts.
    pub fn publish_bootstrap(&mut self, record: ResourceRecord) -> Result<(), RecordError> {
        self.insert(record, 0)
    }

    /// Remove a resource from its site node and the top node entirely
    /// (the resource has gone invisible to the grid).
    pub fn unpublish(&mut self, site: &str, resource_id: &str) {
        if let Some(records) = self.sites.get_mut(site) {
            records.remove(resource_id);
        }
    }

    /// The record the site node itself serves (freshest version), or None.
    pub fn site_view(&self, site: &str, resource_id: &str) -> Option<&ResourceRecord> {
        Some(
            &self
                .sites
                .get(site)?
                .get(resource_id)?
                .versions
                .last()?
                .record,
        )
    }

    /// Query one site node: always the freshest versions, no refresh delay,
    /// no degradation (staleness is a property of the hierarchy, not of the
    /// local provider).
    pub fn query_site<F>(
        &self,
        site: &str,
        now: VirtualMs,
        filter: F,
    ) -> Vec<(ResourceRecord, VirtualMs)>
    where
        F: Fn(&ResourceRecord) -> bool,
    {
        let Some(resources) = self.sites.get(site) else {
            return Vec::new();
        };
        resources
            .values()
            .filter_map(|r| r.versions.last())
            .filter(|v| filter(&v.record))
            .map(|v| (v.record.clone(), now.saturating_sub(v.record.published_at)))
            .collect()
    }

    fn query_latency(&self) -> u64 {
        match self.degradation {
            DegradationModel::None => 0,
            DegradationModel::LinearLatency { base_ms } => base_ms * self.sites.len() as u64,
            DegradationModel::StaleProb { .. } => 0,
        }
    }

    fn stale_probability(&self) -> f64 {
        match self.degradation {
            DegradationModel::StaleProb { k } if self.sites.len() > 5 => {
                (k * (self.sites.len() as f64 - 5.0)).min(1.0)
            }
            _ => 0.0,
        }
    }

    /// Query the top node. Served records are the newest top-visible version
    /// per resource; stale-prob degradation may substitute the previous one.
    /// Exceeding the configured timeout (or a down top node) yields an
    /// empty, flagged result.
    pub fn query_top<F>(&mut self, now: VirtualMs, rng: &mut RngStream, filter: F) -> QueryResult
    where
        F: Fn(&ResourceRecord) -> bool,
    {
        let latency_ms = self.query_latency();
        let down = self.top_down_until.is_some_and(|until| now < until);
        let timed_out = down || self.timeout_ms.is_some_and(|limit| latency_ms > limit);
        if timed_out {
            return QueryResult {
                records: Vec::new(),
                latency_ms,
                timed_out: true,
                stale_serves: 0,
            };
        }
        let stale_p = self.stale_probability();
        let mut records = Vec::new();
        let mut stale_serves = 0;
        for site in self.sites.values_mut() {
            for resource in site.values_mut() {
                resource.prune(now);
                let visible: Vec<&Version> = resource
                    .versions
                    .iter()
                    .filter(|v| v.visible_at_top <= now)
                    .collect();
                let Some(&newest) = visible.last() else {
                    continue;
                };
                let mut serve = newest;
                if stale_p > 0.0 && rng.bernoulli(stale_p) && visible.len() >= 2 {
                    serve = visible[visible.len() - 2];
                    stale_serves += 1;
                }
                if filter(&serve.record) {
                    records.push((
                        serve.record.clone(),
                        now.saturating_sub(serve.record.published_at),
                    ));
                }
            }
        }
        records.sort_by(|a, b| a.0.resource_id.cmp(&b.0.resource_id));
        QueryResult {
            records,
            latency_ms,
            timed_out: false,
            stale_serves,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce_record(id: &str, site: &str, free: u32, published_at: VirtualMs) -> ResourceRecord {
        ResourceRecord {
            resource_id: id.into(),
            site: site.into(),
            attrs: ResourceAttrs::Ce(CeAttrs {
                total_cpus: 8,
                free_cpus: free,
                queue_length: 0,
                estimated_traversal_time_s: 0,
                supported_vos: vec!["atlas".into()],
            }),
            published_at,
        }
    }

    fn gis_with_sites(n: usize, degradation: DegradationModel, timeout: Option<u64>) -> Gis {
        let mut gis = Gis::new(30_000, degradation, timeout);
        for i in 0..n {
            gis.register_site(&format!("site{i}"));
        }
        gis
    }

    #[test]
    fn publish_is_visible_at_site_immediately() {
        let mut gis = gis_with_sites(1, DegradationModel::None, None);
        gis.publish(ce_record("ce1", "site0", 4, 1_000)).unwrap();
        assert!(gis.site_view("site0", "ce1").is_some());
        let hits = gis.query_site("site0", 1_000, |r| r.is_ce());
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].1, 0, "fresh record has zero age");
        assert!(gis.query_site("site0", 1_000, |r| !r.is_ce()).is_empty());
    }

    #[test]
    fn top_node_sees_record_only_after_refresh_delay() {
        let mut gis = gis_with_sites(1, DegradationModel::None, None);
        let mut rng = RngStream::new(0, "gis");
        gis.publish(ce_record("ce1", "site0", 4, 1_000)).unwrap();
        let before = gis.query_top(30_999, &mut rng, |_| true);
        assert!(before.records.is_empty(), "not yet refreshed");
        let after = gis.query_top(31_000, &mut rng, |_| true);
        assert_eq!(after.records.len(), 1);
        assert_eq!(after.records[0].1, 30_000, "age annotation");
    }

    #[test]
    fn top_serves_previous_value_until_refresh_of_replacement() {
        let mut gis = gis_with_sites(1, DegradationModel::None, None);
        let mut rng = RngStream::new(0, "gis");
        gis.publish_bootstrap(ce_record("ce1", "site0", 8, 0))
            .unwrap();
        gis.publish(ce_record("ce1", "site0", 2, 10_000)).unwrap();
        let stale = gis.query_top(20_000, &mut rng, |_| true);
        assert_eq!(stale.records[0].0.ce().unwrap().free_cpus, 8, "old value");
        let fresh = gis.query_top(40_000, &mut rng, |_| true);
        assert_eq!(fresh.records[0].0.ce().unwrap().free_cpus, 2);
    }

    #[test]
    fn republish_leaves_exactly_one_record() {
        let mut gis = gis_with_sites(1, DegradationModel::None, None);
        let mut rng = RngStream::new(0, "gis");
        gis.publish(ce_record("ce1", "site0", 4, 0)).unwrap();
        gis.publish(ce_record("ce1", "site0", 5, 0)).unwrap();
        let res = gis.query_top(30_000, &mut rng, |_| true);
        assert_eq!(res.records.len(), 1);
        assert_eq!(res.records[0].0.ce().unwrap().free_cpus, 5);
    }

    #[test]
    fn filter_selects_by_vo_support() {
        let mut gis = gis_with_sites(2, DegradationModel::None, None);
        let mut rng = RngStream::new(0, "gis");
        let mut other = ce_record("ce2", "site1", 4, 0);
        if let ResourceAttrs::Ce(ce) = &mut other.attrs {
            ce.supported_vos = vec!["cms".into()];
        }
        gis.publish_bootstrap(ce_record("ce1", "site0", 4, 0))
            .unwrap();
        gis.publish_bootstrap(other).unwrap();
        let res = gis.query_top(0, &mut rng, |r| {
            r.ce()
                .is_some_and(|ce| ce.supported_vos.iter().any(|v| v == "atlas"))
        });
        assert_eq!(res.records.len(), 1);
        assert_eq!(res.records[0].0.resource_id, "ce1");
    }

    #[test]
    fn linear_degradation_scales_latency_with_site_count() {
        let mut gis = gis_with_sites(5, DegradationModel::LinearLatency { base_ms: 100 }, None);
        let mut rng = RngStream::new(0, "gis");
        let res = gis.query_top(0, &mut rng, |_| true);
        assert_eq!(res.latency_ms, 500);
        assert!(!res.timed_out);
    }

    #[test]
    fn latency_above_threshold_times_out() {
        let mut gis = gis_with_sites(
            5,
            DegradationModel::LinearLatency { base_ms: 100 },
            Some(499),
        );
        let mut rng = RngStream::new(0, "gis");
        gis.publish_bootstrap(ce_record("ce1", "site0", 4, 0))
            .unwrap();
        let res = gis.query_top(0, &mut rng, |_| true);
        assert!(res.timed_out);
        assert!(res.records.is_empty());
    }

    #[test]
    fn latency_is_non_decreasing_in_site_count() {
        let mut last = 0;
        for n in 1..=20 {
            let mut gis = gis_with_sites(n, DegradationModel::LinearLatency { base_ms: 7 }, None);
            let mut rng = RngStream::new(0, "gis");
            let res = gis.query_top(0, &mut rng, |_| true);
            assert!(res.latency_ms >= last);
            last = res.latency_ms;
        }
    }

    #[test]
    fn invalid_record_is_rejected_and_counted() {
        let mut gis = gis_with_sites(1, DegradationModel::None, None);
        let bad = ResourceRecord {
            resource_id: "ce1".into(),
            site: "site0".into(),
            attrs: ResourceAttrs::Ce(CeAttrs {
                total_cpus: 8,
                free_cpus: 9,
                queue_length: 0,
                estimated_traversal_time_s: 0,
                supported_vos: vec![],
            }),
            published_at: 0,
        };
        assert!(gis.publish(bad).is_err());
        assert_eq!(gis.rejected_publishes, 1);
    }

    #[test]
    fn stale_prob_needs_more_than_five_sites() {
        let gis = gis_with_sites(5, DegradationModel::StaleProb { k: 0.5 }, None);
        assert_eq!(gis.stale_probability(), 0.0);
        let gis = gis_with_sites(7, DegradationModel::StaleProb { k: 0.5 }, None);
        assert!((gis.stale_probability() - 1.0).abs() < 1e-12);
        let gis = gis_with_sites(6, DegradationModel::StaleProb { k: 0.25 }, None);
        assert!((gis.stale_probability() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn stale_model_serves_previous_version() {
        let mut gis = Gis::new(30_000, DegradationModel::StaleProb { k: 1.0 }, None);
        for i in 0..6 {
            gis.register_site(&format!("site{i}"));
        }
        let mut rng = RngStream::new(3, "gis");
        gis.publish_bootstrap(ce_record("ce1", "site0", 8, 0))
            .unwrap();
        gis.publish(ce_record("ce1", "site0", 2, 10_000)).unwrap();
        // p = min(1, 1.0 * (6-5)) = 1: always stale once the new version is visible
        let res = gis.query_top(50_000, &mut rng, |_| true);
        assert_eq!(res.stale_serves, 1);
        assert_eq!(res.records[0].0.ce().unwrap().free_cpus, 8);
    }

    #[test]
    fn unpublish_hides_resource_from_top() {
        let mut gis = gis_with_sites(1, DegradationModel::None, None);
        let mut rng = RngStream::new(0, "gis");
        gis.publish_bootstrap(ce_record("ce1", "site0", 4, 0))
            .unwrap();
        gis.unpublish("site0", "ce1");
        let res = gis.query_top(60_000, &mut rng, |_| true);
        assert!(res.records.is_empty());
    }

    #[test]
    fn down_top_node_times_out() {
        let mut gis = gis_with_sites(1, DegradationModel::None, None);
        let mut rng = RngStream::new(0, "gis");
        gis.publish_bootstrap(ce_record("ce1", "site0", 4, 0))
            .unwrap();
        gis.top_down_until = Some(600_000);
        assert!(gis.query_top(10_000, &mut rng, |_| true).timed_out);
        assert!(!gis.query_top(600_000, &mut rng, |_| true).timed_out);
    }
}
