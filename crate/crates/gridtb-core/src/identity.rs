//! GSI-style authentication and VO authorization, modeled without any real
//! cryptography: a certificate is a subject string plus issuer label, and
//! authorization is a coarse (subject, VO) lookup that maps onto dynamically
//! leased pool accounts.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::sim::VirtualMs;

#[derive(Debug, Clone)]
pub struct Certificate {
    pub subject: String,
    pub issuer_ca: String,
    pub expired: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuthnError {
    #[error("issuer CA not trusted: {0}")]
    UnknownCa(String),
    #[error("certificate expired")]
    Expired,
}

/// Accept iff the issuer is trusted and the certificate is not expired.
pub fn authenticate<'c>(
    cert: &'c Certificate,
    trusted_cas: &BTreeSet<String>,
) -> Result<&'c str, AuthnError> {
    if !trusted_cas.contains(&cert.issuer_ca) {
        return Err(AuthnError::UnknownCa(cert.issuer_ca.clone()));
    }
    if cert.expired {
        return Err(AuthnError::Expired);
    }
    Ok(&cert.subject)
}

/// Membership list for one VO.
#[derive(Debug, Clone)]
pub struct VoRegistry {
    pub vo: String,
    pub members: BTreeSet<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuthzError {
    #[error("subject is not a member of VO {0}")]
    NotAMember(String),
    #[error("pool for VO {0} is exhausted")]
    PoolExhausted(String),
    #[error("no account pool configured for VO {0}")]
    NoPool(String),
}

#[derive(Debug, Clone)]
struct Lease {
    index: u32,
    live_jobs: u32,
    idle_since: Option<VirtualMs>,
}

#[derive(Debug, Clone)]
struct Pool {
    capacity: u32,
    idle_window_ms: u64,
    // subject -> lease; account name is derived from (vo, index)
    leases: BTreeMap<String, Lease>,
}

fn account_name(vo: &str, index: u32) -> String {
    format!("{vo}{index:03}")
}

/// The grid map file: per-VO pools of local accounts leased to authenticated
/// subjects. A lease is sticky while the subject has live jobs and for a
/// configurable idle window afterwards.
#[derive(Debug, Clone, Default)]
pub struct MapFile {
    pools: BTreeMap<String, Pool>,
}

impl MapFile {
    pub fn new() -> Self {
        MapFile::default()
    }

    pub fn add_pool(&mut self, vo: &str, capacity: u32, idle_window_ms: u64) {
        self.pools.insert(
            vo.to_string(),
            Pool {
                capacity,
                idle_window_ms,
                leases: BTreeMap::new(),
            },
        );
    }

    /// Count of accounts currently leased for a VO.
    pub fn assigned(&self, vo: &str) -> usize {
        self.pools.get(vo).map_or(0, |p| p.leases.len())
    }

    fn expire_idle(&mut self, vo: &str, now: VirtualMs) {
        if let Some(pool) = self.pools.get_mut(vo) {
            let window = pool.idle_window_ms;
            pool.leases.retain(|_, lease| match lease.idle_since {
                Some(idle) if lease.live_jobs == 0 => idle.saturating_add(window) > now,
                _ => true,
            });
        }
    }

    /// Authorize an already-authenticated subject for a VO. Re-authorizing a
    /// live subject returns the same account.
    pub fn authorize(
        &mut self,
        subject: &str,
        vo: &str,
        registries: &BTreeMap<String, VoRegistry>,
        now: VirtualMs,
    ) -> Result<String, AuthzError> {
        let member = registries
            .get(vo)
            .is_some_and(|reg| reg.members.contains(subject));
        if !member {
            return Err(AuthzError::NotAMember(vo.to_string()));
        }
        self.expire_idle(vo, now);
        let pool = self
            .pools
            .get_mut(vo)
            .ok_or_else(|| AuthzError::NoPool(vo.to_string()))?;
        if let Some(lease) = pool.leases.get(subject) {
            return Ok(account_name(vo, lease.index));
        }
        let used: BTreeSet<u32> = pool.leases.values().map(|l| l.index).collect();
        let index = (1..=pool.capacity).find(|i| !used.contains(i));
        match index {
            Some(index) => {
                pool.leases.insert(
                    subject.to_string(),
                    Lease {
                        index,
                        live_jobs: 0,
                        idle_since: Some(now),
                    },
                );
                Ok(account_name(vo, index))
            }
            None => Err(AuthzError::PoolExhausted(vo.to_string())),
        }
    }

    pub fn job_started(&mut self, subject: &str, vo: &str) {
        if let Some(lease) = self
            .pools
            .get_mut(vo)
            .and_then(|p| p.leases.get_mut(subject))
        {
            lease.live_jobs += 1;
            lease.idle_since = None;
        }
    }

    pub fn job_ended(&mut self, subject: &str, vo: &str, now: VirtualMs) {
        if let Some(lease) = self
            .pools
            .get_mut(vo)
            .and_then(|p| p.leases.get_mut(subject))
        {
            lease.live_jobs = lease.live_jobs.saturating_sub(1);
            if lease.live_jobs == 0 {
                lease.idle_since = Some(now);
            }
        }
    }
}
