//! Per-image branch features and their concatenation into a descriptor.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{RamError, Result};

use super::config::Branch;

/// Features of one image. A field is present iff its branch is active.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchFeatures {
    pub conv: Option<Vec<f64>>,
    pub bn: Option<Vec<f64>>,
    /// One feature per region, top band first.
    pub regions: Option<Vec<Vec<f64>>>,
    pub attribute: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionPick {
    None,
    All,
    Some(BTreeSet<usize>),
}

/// A subset of branch features, e.g. `[f_c;f_b;f_r;f_a]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSelection {
    pub conv: bool,
    pub bn: bool,
    pub regions: RegionPick,
    pub attribute: bool,
}

impl FeatureSelection {
    pub fn conv_only() -> Self {
        FeatureSelection {
            conv: true,
            bn: false,
            regions: RegionPick::None,
            attribute: false,
        }
    }

    pub fn all() -> Self {
        FeatureSelection {
            conv: true,
            bn: true,
            regions: RegionPick::All,
            attribute: true,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.conv && !self.bn && !self.attribute && self.regions == RegionPick::None
    }

    /// Branches this selection needs.
    pub fn required_branches(&self) -> Vec<Branch> {
        let mut out = Vec::new();
        if self.conv {
            out.push(Branch::Conv);
        }
        if self.bn {
            out.push(Branch::Bn);
        }
        if self.regions != RegionPick::None {
            out.push(Branch::Region);
        }
        if self.attribute {
            out.push(Branch::Attribute);
        }
        out
    }

    fn region_indices(&self, k: usize) -> Result<Vec<usize>> {
        match &self.regions {
            RegionPick::None => Ok(Vec::new()),
            RegionPick::All => Ok((0..k).collect()),
            RegionPick::Some(set) => {
                if let Some(&bad) = set.iter().find(|&&i| i >= k) {
                    return Err(RamError::Eval(format!(
                        "region {bad} requested but the model has {k} regions"
                    )));
                }
                Ok(set.iter().copied().collect())
            }
        }
    }

    /// Length of the concatenated descriptor.
    pub fn dim(&self, conv: usize, bn: usize, region: usize, regions: usize, attribute: usize) -> Result<usize> {
        let r = self.region_indices(regions)?.len();
        Ok(usize::from(self.conv) * conv
            + usize::from(self.bn) * bn
            + r * region
            + usize::from(self.attribute) * attribute)
    }
}

fn region_token(i: usize) -> String {
    match i {
        0 => "f_rt".into(),
        1 => "f_rm".into(),
        2 => "f_rb".into(),
        _ => format!("f_r{i}"),
    }
}

impl fmt::Display for FeatureSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        if self.conv {
            parts.push("f_c".into());
        }
        if self.bn {
            parts.push("f_b".into());
        }
        match &self.regions {
            RegionPick::None => {}
            RegionPick::All => parts.push("f_r".into()),
            RegionPick::Some(set) => parts.extend(set.iter().map(|&i| region_token(i))),
        }
        if self.attribute {
            parts.push("f_a".into());
        }
        if parts.len() == 1 {
            f.write_str(&parts[0])
        } else {
            write!(f, "[{}]", parts.join(";"))
        }
    }
}

impl FromStr for FeatureSelection {
    type Err = RamError;

    /// Accepts `f_c`, `[f_c;f_b;f_r]`, `f_c+f_b`; region tokens are `f_r`
    /// (all), `f_rt`/`f_rm`/`f_rb` or `f_r<i>`.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
        let mut sel = FeatureSelection {
            conv: false,
            bn: false,
            regions: RegionPick::None,
            attribute: false,
        };
        let mut picked = BTreeSet::new();
        for tok in inner.split([';', '+']).map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "f_c" => sel.conv = true,
                "f_b" => sel.bn = true,
                "f_a" => sel.attribute = true,
                "f_r" => sel.regions = RegionPick::All,
                "f_rt" => {
                    picked.insert(0);
                }
                "f_rm" => {
                    picked.insert(1);
                }
                "f_rb" => {
                    picked.insert(2);
                }
                other => match other.strip_prefix("f_r").and_then(|i| i.parse().ok()) {
                    Some(i) => {
                        picked.insert(i);
                    }
                    None => {
                        return Err(RamError::Config(format!("unknown feature `{other}` in `{s}`")))
                    }
                },
            }
        }
        if sel.regions != RegionPick::All && !picked.is_empty() {
            sel.regions = RegionPick::Some(picked);
        }
        if sel.is_empty() {
            return Err(RamError::Config(format!("empty feature selection `{s}`")));
        }
        Ok(sel)
    }
}

/// Splits a comma-separated list of selections, e.g. `f_c,[f_c;f_b]`.
pub fn parse_selections(s: &str) -> Result<Vec<FeatureSelection>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect()
}

fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

/// Concatenates the selected features in the fixed order f_c, f_b,
/// regions top to bottom, f_a. With `normalize`, each part is scaled to
/// unit L2 norm first (all-zero parts stay zero).
pub fn concat_features(bf: &BranchFeatures, selection: &FeatureSelection, normalize: bool) -> Result<Vec<f64>> {
    let missing = |b: Branch| RamError::Eval(format!("feature of inactive branch `{b}` requested ({selection})"));
    let mut parts: Vec<&[f64]> = Vec::new();
    if selection.conv {
        parts.push(bf.conv.as_deref().ok_or_else(|| missing(Branch::Conv))?);
    }
    if selection.bn {
        parts.push(bf.bn.as_deref().ok_or_else(|| missing(Branch::Bn))?);
    }
    if selection.regions != RegionPick::None {
        let regions = bf.regions.as_ref().ok_or_else(|| missing(Branch::Region))?;
        for i in selection.region_indices(regions.len())? {
            parts.push(&regions[i]);
        }
    }
    if selection.attribute {
        parts.push(bf.attribute.as_deref().ok_or_else(|| missing(Branch::Attribute))?);
    }
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        if normalize {
            out.extend(l2_normalized(p));
        } else {
            out.extend_from_slice(p);
        }
    }
    Ok(out)
}
