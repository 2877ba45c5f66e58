//! Declarative node configuration: human-readable profile sources are
//! compiled into per-node XML documents and applied by an idempotent agent
//! through per-component "object" handlers. The agent owns every managed
//! key and reverts out-of-band drift. Keys under the `nis-exempt`
//! component stay hands-off, so user-managed state (passwords moved to
//! NIS) survives. The base apply path sends no feedback anywhere; the
//! separate ack tool is the only way to learn what happened.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignOp {
    #[serde(rename = "=")]
    Set,
    #[serde(rename = "+=")]
    Append,
}

/// One parsed source file: a node profile or an includable template.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFile {
    pub name: String,
    pub includes: Vec<String>,
    /// (component, key, op, value) in file order.
    pub resources: Vec<(String, String, AssignOp, String)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FabricError {
    #[error("{file}:{line}: {msg}")]
    Syntax {
        file: String,
        line: u32,
        msg: String,
    },
    #[error("unknown template {template} included from {from}")]
    UnknownTemplate { template: String, from: String },
    #[error("include cycle through {0}")]
    IncludeCycle(String),
    #[error(
        "node {node}: disk.partitions has {got} entries; only the four primary partitions exist"
    )]
    TooManyPartitions { node: String, got: usize },
    #[error("profile XML is malformed: {0}")]
    BadXml(String),
    #[error("node was never applied")]
    NeverApplied,
}

/// Parse one profile source. Line oriented:
/// `#include <name>` pulls in a template, `component.key = value` and
/// `component.key += value` assign resources, `#` starts a comment, blank
/// lines are ignored.
pub fn parse_source(name: &str, text: &str) -> Result<SourceFile, FabricError> {
    let mut includes = Vec::new();
    let mut resources = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx as u32 + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#include") {
            let rest = rest.trim();
            let template = rest
                .strip_prefix('<')
                .and_then(|s| s.strip_suffix('>'))
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| FabricError::Syntax {
                    file: name.to_string(),
                    line: line_no,
                    msg: "expected #include <template>".into(),
                })?;
            includes.push(template.to_string());
            continue;
        }
        if line.starts_with('#') {
            continue; // comment
        }
        // the first '=' separates name from value; a '+' directly before it
        // makes the assignment an append
        let Some(eq) = line.find('=') else {
            return Err(FabricError::Syntax {
                file: name.to_string(),
                line: line_no,
                msg: "expected component.key = value".into(),
            });
        };
        let (lhs, op, value) = if eq > 0 && line.as_bytes()[eq - 1] == b'+' {
            (&line[..eq - 1], AssignOp::Append, &line[eq + 1..])
        } else {
            (&line[..eq], AssignOp::Set, &line[eq + 1..])
        };
        let lhs = lhs.trim();
        let Some((component, key)) = lhs.split_once('.') else {
            return Err(FabricError::Syntax {
                file: name.to_string(),
                line: line_no,
                msg: format!("resource name {lhs:?} lacks a component prefix"),
            });
        };
        if component.is_empty() || key.is_empty() {
            return Err(FabricError::Syntax {
                file: name.to_string(),
                line: line_no,
                msg: format!("bad resource name {lhs:?}"),
            });
        }
        resources.push((
            component.to_string(),
            key.to_string(),
            op,
            value.trim().to_string(),
        ));
    }
    Ok(SourceFile {
        name: name.to_string(),
        includes,
        resources,
    })
}

/// The full source set for a compile: node profiles plus templates.
#[derive(Debug, Default, Clone)]
pub struct SourceSet {
    pub templates: BTreeMap<String, SourceFile>,
    pub nodes: BTreeMap<String, SourceFile>,
}

pub type ResourceTree = BTreeMap<String, BTreeMap<String, Vec<String>>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompiledProfile {
    pub node: String,
    pub version: String,
    pub resources: ResourceTree,
}

fn apply_resources(tree: &mut ResourceTree, file: &SourceFile) {
    for (component, key, op, value) in &file.resources {
        let slot = tree
            .entry(component.clone())
            .or_default()
            .entry(key.clone())
            .or_default();
        match op {
            AssignOp::Set => {
                slot.clear();
                slot.push(value.clone());
            }
            AssignOp::Append => slot.push(value.clone()),
        }
    }
}

fn resolve_includes<'a>(
    file: &'a SourceFile,
    set: &'a SourceSet,
    tree: &mut ResourceTree,
    stack: &mut Vec<String>,
) -> Result<(), FabricError> {
    for include in &file.includes {
        if stack.contains(include) {
            return Err(FabricError::IncludeCycle(include.clone()));
        }
        let template = set
            .templates
            .get(include)
            .ok_or_else(|| FabricError::UnknownTemplate {
                template: include.clone(),
                from: file.name.clone(),
            })?;
        stack.push(include.clone());
        resolve_includes(template, set, tree, stack)?;
        apply_resources(tree, template);
        stack.pop();
    }
    Ok(())
}

fn profile_hash(node: &str, resources: &ResourceTree) -> String {
    let mut hasher = Sha256::new();
    hasher.update(node.as_bytes());
    for (component, keys) in resources {
        for (key, values) in keys {
            hasher.update(b"\x00");
            hasher.update(component.as_bytes());
            hasher.update(b"\x01");
            hasher.update(key.as_bytes());
            for value in values {
                hasher.update(b"\x02");
                hasher.update(value.as_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Compile every node profile in the set: includes resolved depth-first,
/// later assignments override earlier ones (templates first, the node file
/// last), and the disk component is checked against the four-primary-
/// partition limit. Deterministic in the source bytes.
pub fn compile(set: &SourceSet) -> Result<BTreeMap<String, CompiledProfile>, Vec<FabricError>> {
    let mut out = BTreeMap::new();
    let mut errors = Vec::new();
    for (node, file) in &set.nodes {
        let mut tree = ResourceTree::new();
        let mut stack = Vec::new();
        if let Err(e) = resolve_includes(file, set, &mut tree, &mut stack) {
            errors.push(e);
            continue;
        }
        apply_resources(&mut tree, file);
        if let Some(partitions) = tree.get("disk").and_then(|d| d.get("partitions")) {
            if partitions.len() > 4 {
                errors.push(FabricError::TooManyPartitions {
                    node: node.clone(),
                    got: partitions.len(),
                });
                continue;
            }
        }
        let version = profile_hash(node, &tree);
        out.insert(
            node.clone(),
            CompiledProfile {
                node: node.clone(),
                version,
                resources: tree,
            },
        );
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

// ---------------------------------------------------------------------------
// XML wire format
// ---------------------------------------------------------------------------

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

fn xml_unescape(s: &str) -> String {
    s.replace("&quot;", "\"")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&amp;", "&")
}

impl CompiledProfile {
    /// Serialize to the fixed XML wire format. The layout is byte-stable:
    /// components and keys in sorted order, values in list order.
    pub fn to_xml(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "<profile node=\"{}\" version=\"{}\">\n",
            xml_escape(&self.node),
            xml_escape(&self.version)
        ));
        for (component, keys) in &self.resources {
            out.push_str(&format!(
                "  <component name=\"{}\">\n",
                xml_escape(component)
            ));
            for (key, values) in keys {
                for value in values {
                    out.push_str(&format!(
                        "    <resource key=\"{}\">{}</resource>\n",
                        xml_escape(key),
                        xml_escape(value)
                    ));
                }
            }
            out.push_str("  </component>\n");
        }
        out.push_str("</profile>\n");
        out
    }

    /// Parse the exact format emitted by [`CompiledProfile::to_xml`].
    pub fn from_xml(text: &str) -> Result<CompiledProfile, FabricError> {
        fn attr(tag: &str, name: &str) -> Option<String> {
            let marker = format!("{name}=\"");
            let start = tag.find(&marker)? + marker.len();
            let end = tag[start..].find('"')? + start;
            Some(xml_unescape(&tag[start..end]))
        }
        let bad = |msg: &str| FabricError::BadXml(msg.to_string());

        let mut node = None;
        let mut version = None;
        let mut resources = ResourceTree::new();
        let mut component: Option<String> = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with("<profile") {
                node = attr(line, "node");
                version = attr(line, "version");
            } else if line.starts_with("<component") {
                component = Some(attr(line, "name").ok_or_else(|| bad("component without name"))?);
            } else if line.starts_with("</component") {
                component = None;
            } else if line.starts_with("<resource") {
                let key = attr(line, "key").ok_or_else(|| bad("resource without key"))?;
                let open_end = line
                    .find('>')
                    .ok_or_else(|| bad("unterminated resource tag"))?;
                let close = line
                    .rfind("</resource>")
                    .ok_or_else(|| bad("missing </resource>"))?;
                if close < open_end + 1 {
                    return Err(bad("malformed resource element"));
                }
                let value = xml_unescape(&line[open_end + 1..close]);
                let comp = component
                    .clone()
                    .ok_or_else(|| bad("resource outside component"))?;
                resources
                    .entry(comp)
                    .or_default()
                    .entry(key)
                    .or_default()
                    .push(value);
            } else if line.starts_with("</profile") {
                break;
            } else {
                return Err(bad(&format!("unexpected line {line:?}")));
            }
        }
        Ok(CompiledProfile {
            node: node.ok_or_else(|| bad("missing profile node attribute"))?,
            version: version.ok_or_else(|| bad("missing profile version attribute"))?,
            resources,
        })
    }
}

// ---------------------------------------------------------------------------
// Node agent
// ---------------------------------------------------------------------------

/// Component whose keys the agent never touches.
pub const NIS_EXEMPT_COMPONENT: &str = "nis-exempt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum ObjectResult {
    Ok { changed_keys: u32 },
    Failed { error: String },
    Exempt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub node: String,
    pub version: String,
    pub skipped: bool,
    pub total_changes: u32,
    pub objects: BTreeMap<String, ObjectResult>,
}

/// Persistent node state: the live configuration values (which drift can
/// mutate out-of-band) and what the agent last did.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NodeState {
    pub applied_version: Option<String>,
    pub live_values: BTreeMap<String, Vec<String>>,
    pub last_report: Option<ApplyReport>,
}

impl NodeState {
    /// Run the object handlers for a compiled profile. Reapplying the
    /// already-applied version without `force` is a skipped no-op; with
    /// `force` the handlers run and revert any drift on managed keys.
    /// Components named in `fail_objects` simulate a failing object: their
    /// keys stay untouched while every other object still runs. No feedback
    /// leaves the node here; callers wanting status must use
    /// [`NodeState::ack_status`].
    pub fn apply(
        &mut self,
        profile: &CompiledProfile,
        force: bool,
        fail_objects: &BTreeSet<String>,
    ) -> ApplyReport {
        if !force && self.applied_version.as_deref() == Some(&profile.version) {
            let report = ApplyReport {
                node: profile.node.clone(),
                version: profile.version.clone(),
                skipped: true,
                total_changes: 0,
                objects: BTreeMap::new(),
            };
            self.last_report = Some(report.clone());
            return report;
        }
        let mut objects = BTreeMap::new();
        let mut total_changes = 0;
        let mut any_failed = false;
        for (component, keys) in &profile.resources {
            if component == NIS_EXEMPT_COMPONENT {
                objects.insert(component.clone(), ObjectResult::Exempt);
                continue;
            }
            if fail_objects.contains(component) {
                objects.insert(
                    component.clone(),
                    ObjectResult::Failed {
                        error: "object handler failed".into(),
                    },
                );
                any_failed = true;
                continue;
            }
            let mut changed = 0;
            for (key, values) in keys {
                let full_key = format!("{component}.{key}");
                if self.live_values.get(&full_key) != Some(values) {
                    self.live_values.insert(full_key, values.clone());
                    changed += 1;
                }
            }
            total_changes += changed;
            objects.insert(
                component.clone(),
                ObjectResult::Ok {
                    changed_keys: changed,
                },
            );
        }
        if !any_failed {
            self.applied_version = Some(profile.version.clone());
        }
        let report = ApplyReport {
            node: profile.node.clone(),
            version: profile.version.clone(),
            skipped: false,
            total_changes,
            objects,
        };
        self.last_report = Some(report.clone());
        report
    }

    /// The explicit status read-back (absent from the original system).
    pub fn ack_status(&self) -> Result<&ApplyReport, FabricError> {
        self.last_report.as_ref().ok_or(FabricError::NeverApplied)
    }
}
