//! The fixed query/gallery protocol and the random one-gallery-image-per-id
//! protocol, and the metrics report both produce.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{RamError, Result};
use crate::kv::KvMap;

use super::metrics::{cmc, mean_average_precision, rank, Distance};
use super::table::FeatureTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Query and gallery as tagged in the table.
    FixedSplit,
    /// Per trial, one random gallery image per id; the rest are queries.
    RandomGallery,
}

impl FromStr for ProtocolKind {
    type Err = RamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_split" => Ok(ProtocolKind::FixedSplit),
            "random_gallery" => Ok(ProtocolKind::RandomGallery),
            other => Err(RamError::Config(format!(
                "unknown protocol `{other}` (fixed_split|random_gallery)"
            ))),
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolKind::FixedSplit => "fixed_split",
            ProtocolKind::RandomGallery => "random_gallery",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    /// Used by `random_gallery` only.
    pub trials: usize,
    pub seed: u64,
    pub exclude_same_camera: bool,
    pub distance: Distance,
    /// Number of CMC ranks reported.
    pub cmc_depth: usize,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec::fixed_split()
    }
}

impl ProtocolSpec {
    pub fn fixed_split() -> Self {
        ProtocolSpec {
            kind: ProtocolKind::FixedSplit,
            trials: 1,
            seed: 0,
            exclude_same_camera: true,
            distance: Distance::Euclidean,
            cmc_depth: 10,
        }
    }

    pub fn random_gallery(trials: usize, seed: u64) -> Self {
        ProtocolSpec {
            kind: ProtocolKind::RandomGallery,
            trials,
            seed,
            exclude_same_camera: false,
            ..ProtocolSpec::fixed_split()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ProtocolKind::RandomGallery && self.trials == 0 {
            return Err(RamError::Config("eval.trials must be at least 1".into()));
        }
        if self.cmc_depth == 0 {
            return Err(RamError::Config("eval.cmc_depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Seed of trial `t` (0-based): `seed + t`, wrapping.
    pub fn trial_seed(&self, t: usize) -> u64 {
        self.seed.wrapping_add(t as u64)
    }

    /// Reads the `eval.*` keys. Camera exclusion defaults on for
    /// `fixed_split` and off for `random_gallery`; trials default to 10.
    pub fn apply_kv(kv: &mut KvMap) -> Result<Self> {
        let kind: ProtocolKind = kv.take_or("eval.protocol", ProtocolKind::FixedSplit)?;
        let base = match kind {
            ProtocolKind::FixedSplit => ProtocolSpec::fixed_split(),
            ProtocolKind::RandomGallery => ProtocolSpec::random_gallery(10, 0),
        };
        let spec = ProtocolSpec {
            kind,
            trials: kv.take_or("eval.trials", base.trials)?,
            seed: kv.take_or("eval.seed", base.seed)?,
            exclude_same_camera: kv.take_or("eval.exclude_same_camera", base.exclude_same_camera)?,
            distance: kv.take_or("eval.distance", base.distance)?,
            cmc_depth: kv.take_or("eval.cmc_depth", base.cmc_depth)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("eval.protocol".into(), self.kind.to_string()),
            ("eval.trials".into(), self.trials.to_string()),
            ("eval.seed".into(), self.seed.to_string()),
            ("eval.exclude_same_camera".into(), self.exclude_same_camera.to_string()),
            ("eval.distance".into(), self.distance.to_string()),
            ("eval.cmc_depth".into(), self.cmc_depth.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial: usize,
    pub seed: u64,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub num_gallery: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Feature selection the table was built from, when known.
    pub selection: Option<String>,
    pub map: f64,
    /// `cmc[k-1]` is Top-k.
    pub cmc: Vec<f64>,
    pub top1: f64,
    pub top5: Option<f64>,
    pub protocol: ProtocolSpec,
    pub seed: u64,
    /// Queries that entered the averages (of the last trial for
    /// `random_gallery`).
    pub num_queries: usize,
    pub per_trial: Vec<TrialMetrics>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| RamError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RamError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn run_trial(features: &FeatureTable, queries: &[usize], gallery: &[usize], spec: &ProtocolSpec, trial: usize, seed: u64) -> Result<TrialMetrics> {
    if queries.is_empty() {
        return Err(RamError::Eval("no query rows".into()));
    }
    if gallery.is_empty() {
        return Err(RamError::Eval("no gallery rows".into()));
    }
    let r = rank(
        &features.subset(queries),
        &features.subset(gallery),
        spec.distance,
        spec.exclude_same_camera,
    )?;
    Ok(TrialMetrics {
        trial,
        seed,
        map: mean_average_precision(&r)?,
        cmc: cmc(&r, spec.cmc_depth)?,
        num_queries: r.num_valid(),
        num_gallery: gallery.len(),
    })
}

/// Splits the table into queries and gallery per the protocol, ranks and
/// averages. `random_gallery` uses every row of the table.
pub fn evaluate_protocol(features: &FeatureTable, spec: &ProtocolSpec) -> Result<MetricsReport> {
    spec.validate()?;
    let trials = match spec.kind {
        ProtocolKind::FixedSplit => {
            let q = features.indices(&[Split::Query]);
            let g = features.indices(&[Split::Gallery]);
            vec![run_trial(features, &q, &g, spec, 0, spec.seed)?]
        }
        ProtocolKind::RandomGallery => {
            let mut by_id: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            for (i, r) in features.rows().iter().enumerate() {
                by_id.entry(r.vehicle_id).or_default().push(i);
            }
            if let Some((id, _)) = by_id.iter().find(|(_, rows)| rows.len() < 2) {
                return Err(RamError::Eval(format!(
                    "vehicle id {id} has a single image; random_gallery needs at least two per id"
                )));
            }
            let mut out = Vec::with_capacity(spec.trials);
            for t in 0..spec.trials {
                let seed = spec.trial_seed(t);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let gallery: Vec<usize> = by_id.values().map(|rows| rows[rng.random_range(0..rows.len())]).collect();
                let queries: Vec<usize> = (0..features.len()).filter(|i| !gallery.contains(i)).collect();
                out.push(run_trial(features, &queries, &gallery, spec, t, seed)?);
            }
            out
        }
    };

    let n = trials.len() as f64;
    let map = trials.iter().map(|t| t.map).sum::<f64>() / n;
    let cmc: Vec<f64> = (0..spec.cmc_depth)
        .map(|k| trials.iter().map(|t| t.cmc[k]).sum::<f64>() / n)
        .collect();
    Ok(MetricsReport {
        selection: None,
        map,
        top1: cmc[0],
        top5: cmc.get(4).copied(),
        cmc,
        protocol: spec.clone(),
        seed: spec.seed,
        num_queries: trials.last().map_or(0, |t| t.num_queries),
        per_trial: if spec.kind == ProtocolKind::RandomGallery { trials } else { Vec::new() },
    })
}
