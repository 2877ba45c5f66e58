//! Storage elements with real partition layouts behind a flat grid-visible
//! namespace. A physical file name is always the logical name appended to
//! the VO's grid-enabled area, so which partition a file lands on is decided
//! by the local mount table and is invisible to the replication layer.
//! That is how a transfer can hit ENOSPC on a server that advertises
//! plenty of aggregate free space.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::sim::VirtualMs;

#[derive(Debug, Clone)]
pub struct Partition {
    pub id: String,
    pub capacity_bytes: u64,
    pub used_bytes: u64,
    pub inode_budget: u64,
    pub inodes_used: u64,
}

impl Partition {
    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes - self.used_bytes
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MssBackend {
    pub migrate_latency_ms: u64,
    pub residency_ms: u64,
}

/// One replica as stored on disk.
#[derive(Debug, Clone)]
pub struct StoredObject {
    pub size_bytes: u64,
    pub stored_at: VirtualMs,
    pub partition: String,
}

/// A physical file name: `//host` + path, where path is the VO area with
/// the LFN appended.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Pfn {
    pub host: String,
    pub path: String,
}

impl fmt::Display for Pfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "//{}{}", self.host, self.path)
    }
}

impl Pfn {
    /// Parse the `//host/path` form produced by `Display`.
    pub fn parse(s: &str) -> Option<Pfn> {
        let rest = s.strip_prefix("//")?;
        let slash = rest.find('/')?;
        Some(Pfn {
            host: rest[..slash].to_string(),
            path: rest[slash..].to_string(),
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("VO {vo} has no grid-enabled area on {host}")]
    NoVoArea { vo: String, host: String },
    #[error("malformed LFN {0:?}")]
    MalformedLfn(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    /// The target partition is out of space. `misleading` is set when the
    /// SE's aggregate free space would have been enough, i.e. a client
    /// trusting the advertised total was misled.
    #[error("no space left on partition (misleading advertisement: {misleading})")]
    NoSpace { misleading: bool },
    #[error("i-nodes exhausted on partition")]
    InodeExhausted,
    #[error("target directory does not exist and this SE requires manual path creation")]
    MissingPath,
    #[error("storage element is down")]
    SeDown,
    #[error("path resolves to no partition")]
    NoPartition,
}

fn path_has_prefix(path: &str, prefix: &str) -> bool {
    if prefix == "/" {
        return path.starts_with('/');
    }
    path == prefix || path.starts_with(&format!("{prefix}/"))
}

fn lfn_is_well_formed(lfn: &str) -> bool {
    !lfn.is_empty()
        && !lfn.starts_with('/')
        && !lfn.ends_with('/')
        && lfn.split('/').all(|seg| !seg.is_empty() && seg != "..")
}

#[derive(Debug, Clone)]
pub struct StorageElement {
    pub host: String,
    pub site: String,
    pub partitions: BTreeMap<String, Partition>,
    // mount path -> partition id; lookup is longest-prefix
    pub mounts: BTreeMap<String, String>,
    pub vo_areas: BTreeMap<String, String>,
    pub mss: Option<MssBackend>,
    /// When set, storing into a directory that was never created fails
    /// instead of creating parents implicitly.
    pub manual_paths: bool,
    dirs: BTreeSet<String>,
    objects: BTreeMap<String, StoredObject>,
    pub down_until: Option<VirtualMs>,
}

impl StorageElement {
    pub fn new(
        host: &str,
        site: &str,
        partitions: Vec<Partition>,
        mounts: BTreeMap<String, String>,
        vo_areas: BTreeMap<String, String>,
    ) -> StorageElement {
        let mut dirs = BTreeSet::new();
        for area in vo_areas.values() {
            dirs.insert(area.clone());
        }
        StorageElement {
            host: host.to_string(),
            site: site.to_string(),
            partitions: partitions.into_iter().map(|p| (p.id.clone(), p)).collect(),
            mounts,
            vo_areas,
            mss: None,
            manual_paths: false,
            dirs,
            objects: BTreeMap::new(),
            down_until: None,
        }
    }

    pub fn is_down(&self, now: VirtualMs) -> bool {
        self.down_until.is_some_and(|until| now < until)
    }

    pub fn aggregate_free_bytes(&self) -> u64 {
        self.partitions.values().map(|p| p.free_bytes()).sum()
    }

    pub fn mark_dir(&mut self, dir: &str) {
        self.dirs.insert(dir.to_string());
    }

    pub fn object(&self, path: &str) -> Option<&StoredObject> {
        self.objects.get(path)
    }

    pub fn objects(&self) -> impl Iterator<Item = (&String, &StoredObject)> {
        self.objects.iter()
    }

    /// Longest-prefix match of `path` against the mount table.
    pub fn partition_for_path(&self, path: &str) -> Option<&str> {
        self.mounts
            .iter()
            .filter(|(mount, _)| path_has_prefix(path, mount))
            .max_by_key(|(mount, _)| mount.len())
            .map(|(_, part)| part.as_str())
    }

    fn parent_dir(path: &str) -> &str {
        match path.rfind('/') {
            Some(0) | None => "/",
            Some(idx) => &path[..idx],
        }
    }

    fn dir_exists(&self, dir: &str) -> bool {
        // a directory exists if it was created (or is a VO area), or is an
        // ancestor of one that was
        self.dirs
            .iter()
            .any(|d| path_has_prefix(d, dir) || d == dir)
            || self.dirs.contains(dir)
    }

    /// Write `size_bytes` at `path`, charging the partition the mount table
    /// selects. Space on *other* partitions never helps.
    pub fn store(&mut self, path: &str, size_bytes: u64, now: VirtualMs) -> Result<(), StoreError> {
        if self.is_down(now) {
            return Err(StoreError::SeDown);
        }
        let part_id = self
            .partition_for_path(path)
            .ok_or(StoreError::NoPartition)?
            .to_string();
        if self.manual_paths && !self.dir_exists(Self::parent_dir(path)) {
            return Err(StoreError::MissingPath);
        }
        let aggregate_free = self.aggregate_free_bytes();
        let part = self
            .partitions
            .get_mut(&part_id)
            .expect("mount target exists");
        if part.free_bytes() < size_bytes {
            return Err(StoreError::NoSpace {
                misleading: aggregate_free >= size_bytes,
            });
        }
        if part.inodes_used >= part.inode_budget {
            return Err(StoreError::InodeExhausted);
        }
        part.used_bytes += size_bytes;
        part.inodes_used += 1;
        if !self.manual_paths {
            // directory creation is implicit and free of charge
            let parent = Self::parent_dir(path).to_string();
            self.dirs.insert(parent);
        }
        self.objects.insert(
            path.to_string(),
            StoredObject {
                size_bytes,
                stored_at: now,
                partition: part_id,
            },
        );
        Ok(())
    }

    /// Extra read latency if the object has been migrated to the MSS.
    pub fn read_penalty_ms(&self, path: &str, now: VirtualMs) -> u64 {
        match (&self.mss, self.objects.get(path)) {
            (Some(mss), Some(obj)) if now.saturating_sub(obj.stored_at) >= mss.residency_ms => {
                mss.migrate_latency_ms
            }
            _ => 0,
        }
    }
}

/// Check LFN well-formedness alone: non-empty, relative, no `..` or empty
/// segments.
pub fn resolve_lfn_shape(lfn: &str) -> Result<(), ResolveError> {
    if lfn_is_well_formed(lfn) {
        Ok(())
    } else {
        Err(ResolveError::MalformedLfn(lfn.to_string()))
    }
}

/// Compose the PFN for an LFN on a storage element and resolve which
/// partition it would land on. Pure with respect to the SE's mount table.
pub fn resolve_pfn(
    lfn: &str,
    vo: &str,
    se: &StorageElement,
) -> Result<(Pfn, String), ResolveError> {
    if !lfn_is_well_formed(lfn) {
        return Err(ResolveError::MalformedLfn(lfn.to_string()));
    }
    let area = se.vo_areas.get(vo).ok_or_else(|| ResolveError::NoVoArea {
        vo: vo.to_string(),
        host: se.host.clone(),
    })?;
    let path = format!("{area}/{lfn}");
    let partition = se
        .partition_for_path(&path)
        .ok_or_else(|| ResolveError::NoVoArea {
            vo: vo.to_string(),
            host: se.host.clone(),
        })?
        .to_string();
    Ok((
        Pfn {
            host: se.host.clone(),
            path,
        },
        partition,
    ))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RcError {
    #[error("collection full: registering {lfn:?} would exceed the name byte budget")]
    CollectionFull { lfn: String },
    #[error("PFN does not decompose as //host + vo area + LFN")]
    PfnMismatch,
}

/// Per-VO catalog of logical names and their replicas. The implementation
/// limit on collection size scales with name length, so the budget is a
/// total byte count over distinct LFNs.
#[derive(Debug, Clone)]
pub struct ReplicaCatalog {
    pub vo: String,
    pub name_byte_budget: u64,
    name_bytes_used: u64,
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl ReplicaCatalog {
    pub fn new(vo: &str, name_byte_budget: u64) -> Self {
        ReplicaCatalog {
            vo: vo.to_string(),
            name_byte_budget,
            name_bytes_used: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn name_bytes_used(&self) -> u64 {
        self.name_bytes_used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.entries.iter()
    }

    pub fn pfns(&self, lfn: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(lfn)
    }

    pub fn replica_on(&self, lfn: &str, host: &str) -> Option<Pfn> {
        self.entries.get(lfn)?.iter().find_map(|s| {
            let pfn = Pfn::parse(s)?;
            (pfn.host == host).then_some(pfn)
        })
    }

    /// Register one replica. The byte budget is charged once per distinct
    /// LFN; the PFN must obey the composition rule for this catalog's VO.
    pub fn register(&mut self, lfn: &str, pfn: &Pfn, vo_area_on_host: &str) -> Result<(), RcError> {
        if pfn.path != format!("{vo_area_on_host}/{lfn}") {
            return Err(RcError::PfnMismatch);
        }
        if !self.entries.contains_key(lfn) {
            let charge = lfn.len() as u64;
            if self.name_bytes_used + charge > self.name_byte_budget {
                return Err(RcError::CollectionFull {
                    lfn: lfn.to_string(),
                });
            }
            self.name_bytes_used += charge;
        }
        self.entries
            .entry(lfn.to_string())
            .or_default()
            .insert(pfn.to_string());
        Ok(())
    }

    pub fn remove_replica(&mut self, lfn: &str, pfn: &Pfn) {
        if let Some(set) = self.entries.get_mut(lfn) {
            set.remove(&pfn.to_string());
        }
    }
}

/// Transfer duration over a bandwidth/latency link, rounded up to whole
/// milliseconds.
pub fn transfer_duration_ms(size_bytes: u64, bandwidth_bps: u64, latency_ms: u64) -> u64 {
    assert!(bandwidth_bps > 0, "link bandwidth must be positive");
    let bits = size_bytes as u128 * 8;
    let ms = (bits * 1_000).div_ceil(bandwidth_bps as u128);
    latency_ms + ms as u64
}
