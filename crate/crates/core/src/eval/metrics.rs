//! Distance ranking, average precision and CMC.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{RamError, Result};

use super::table::FeatureTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Euclidean,
    Cosine,
}

impl Distance {
    /// Ranking key: squared Euclidean distance (same order as Euclidean),
    /// or `1 - cos`. Zero vectors have cosine similarity 0 to everything.
    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

impl FromStr for Distance {
    type Err = RamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" => Ok(Distance::Cosine),
            other => Err(RamError::Config(format!("unknown distance `{other}` (euclidean|cosine)"))),
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Euclidean => "euclidean",
            Distance::Cosine => "cosine",
        })
    }
}

/// One query's ranked gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    /// Row of the query in the query table.
    pub query: usize,
    /// Gallery rows, nearest first, after exclusion.
    pub gallery: Vec<usize>,
    /// `matches[i]`: `gallery[i]` has the query's vehicle id.
    pub matches: Vec<bool>,
}

impl QueryRanking {
    pub fn has_match(&self) -> bool {
        self.matches.contains(&true)
    }

    /// 1-based rank of the first match.
    pub fn first_match(&self) -> Option<usize> {
        self.matches.iter().position(|&m| m).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankingResult {
    pub queries: Vec<QueryRanking>,
}

impl RankingResult {
    /// Queries with at least one match, the ones metrics average over.
    pub fn valid(&self) -> impl Iterator<Item = &QueryRanking> {
        self.queries.iter().filter(|q| q.has_match())
    }

    pub fn num_valid(&self) -> usize {
        self.valid().count()
    }
}

/// Ranks every gallery row for every query by ascending distance, ties
/// to the lower gallery row. With `exclude_same_camera`, gallery rows
/// sharing both vehicle id and (known) camera with the query are dropped.
pub fn rank(queries: &FeatureTable, gallery: &FeatureTable, distance: Distance, exclude_same_camera: bool) -> Result<RankingResult> {
    if queries.dim() != gallery.dim() {
        return Err(RamError::Eval(format!(
            "query dim {} differs from gallery dim {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    let mut out = Vec::with_capacity(queries.len());
    for qi in 0..queries.len() {
        let q = &queries.rows()[qi];
        let qf = queries.feature(qi);
        let mut scored: Vec<(f64, usize)> = (0..gallery.len())
            .filter(|&gi| {
                let g = &gallery.rows()[gi];
                !(exclude_same_camera
                    && g.vehicle_id == q.vehicle_id
                    && q.camera_id.is_some()
                    && g.camera_id == q.camera_id)
            })
            .map(|gi| (distance.between(qf, gallery.feature(gi)), gi))
            .collect();
        if scored.is_empty() {
            return Err(RamError::Eval(format!("empty gallery for query {}", q.image_path)));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let matches = scored.iter().map(|&(_, gi)| gallery.rows()[gi].vehicle_id == q.vehicle_id).collect();
        out.push(QueryRanking {
            query: qi,
            gallery: scored.into_iter().map(|(_, gi)| gi).collect(),
            matches,
        });
    }
    Ok(RankingResult { queries: out })
}

/// Mean of precision@i over the ranks `i` holding a match.
pub fn average_precision(flags: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(RamError::Eval("average precision of a list with no positives".into()));
    }
    Ok(sum / hits as f64)
}

fn require_valid(results: &RankingResult) -> Result<usize> {
    match results.num_valid() {
        0 => Err(RamError::Eval("no query has a match in its gallery".into())),
        n => Ok(n),
    }
}

pub fn mean_average_precision(results: &RankingResult) -> Result<f64> {
    let n = require_valid(results)?;
    let mut sum = 0.0;
    for q in results.valid() {
        sum += average_precision(&q.matches)?;
    }
    Ok(sum / n as f64)
}

/// `cmc[k-1]`: fraction of valid queries whose first match is at rank <= k.
pub fn cmc(results: &RankingResult, k_max: usize) -> Result<Vec<f64>> {
    if k_max == 0 {
        return Err(RamError::Eval("cmc depth must be at least 1".into()));
    }
    let n = require_valid(results)?;
    let mut counts = vec![0usize; k_max];
    for q in results.valid() {
        let r = q.first_match().expect("valid query");
        if r <= k_max {
            counts[r - 1] += 1;
        }
    }
    let mut acc = 0;
    Ok(counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n as f64
        })
        .collect())
}
