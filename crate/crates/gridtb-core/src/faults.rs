//! Fault injection: scenario fault specs become scheduled fault events
//! drawn on named random streams, one stream per (target, kind), so the
//! fault times of one service never depend on which other faults exist.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::sim::{VirtualMs, MS_PER_DAY, MS_PER_SEC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    #[serde(rename = "restart-needed")]
    RestartNeeded,
    #[serde(rename = "db-corruption")]
    DbCorruption,
    #[serde(rename = "gram-wedge-external")]
    GramWedgeExternal,
}

impl FaultKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FaultKind::RestartNeeded => "restart-needed",
            FaultKind::DbCorruption => "db-corruption",
            FaultKind::GramWedgeExternal => "gram-wedge-external",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultProcess {
    Poisson { rate_per_day: f64 },
    FixedTimes { times_s: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Service id: `rb:<rb_id>`, `ce:<ce_id>`, `se:<host>`, or `gis:top`.
    pub target: String,
    pub kind: FaultKind,
    pub process: FaultProcess,
    #[serde(default)]
    pub effect_duration_s: u64,
    /// For gram-wedge-external: how many orphan i-nodes to charge. Defaults
    /// to everything free (a full wedge).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orphan_inodes: Option<u64>,
}

impl FaultSpec {
    pub fn stream_id(&self) -> String {
        format!("fault:{}:{}", self.target, self.kind.as_str())
    }
}

/// Expand a fault spec into concrete fire times within the horizon. Poisson
/// processes draw exponential inter-arrivals with mean `86400/rate` seconds
/// on the fault's own named stream.
pub fn arm(spec: &FaultSpec, stream: &mut RngStream, horizon_ms: VirtualMs) -> Vec<VirtualMs> {
    match &spec.process {
        FaultProcess::Poisson { rate_per_day } => {
            if *rate_per_day <= 0.0 {
                return Vec::new();
            }
            let mean_ms = MS_PER_DAY as f64 / rate_per_day;
            let mut times = Vec::new();
            let mut t: VirtualMs = 0;
            loop {
                let gap = stream.exp_ms(mean_ms);
                t = t.saturating_add(gap);
                if t > horizon_ms {
                    break;
                }
                times.push(t);
            }
            times
        }
        FaultProcess::FixedTimes { times_s } => {
            let mut times: Vec<VirtualMs> = times_s
                .iter()
                .map(|s| s * MS_PER_SEC)
                .filter(|t| *t <= horizon_ms)
                .collect();
            times.sort_unstable();
            times
        }
    }
}
