//! The joint objective `L = l_conv + lambda1 l_bn + lambda2 l_re + lambda3 l_att`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{RamError, Result};

/// Weights of the BN, regional and attribute terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RamError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the per-region losses combine into `l_re`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionReduction {
    #[default]
    Mean,
    Sum,
}

impl RegionReduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            RegionReduction::Mean => 1.0 / n as f64,
            RegionReduction::Sum => 1.0,
        }
    }
}

impl FromStr for RegionReduction {
    type Err = RamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(RegionReduction::Mean),
            "sum" => Ok(RegionReduction::Sum),
            other => Err(RamError::Config(format!("unknown region reduction `{other}` (mean|sum)"))),
        }
    }
}

impl fmt::Display for RegionReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionReduction::Mean => "mean",
            RegionReduction::Sum => "sum",
        })
    }
}

/// Per-branch classification losses. Empty `regions`/`attributes` and
/// `None` mean the branch is inactive and contributes 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BranchLosses {
    pub conv: Option<f64>,
    pub bn: Option<f64>,
    /// Top to bottom.
    pub regions: Vec<f64>,
    /// One per attribute classifier.
    pub attributes: Vec<f64>,
}

impl BranchLosses {
    /// `l_re`, reduced over the regions.
    pub fn region(&self, reduction: RegionReduction) -> Option<f64> {
        (!self.regions.is_empty()).then(|| self.regions.iter().sum::<f64>() * reduction.factor(self.regions.len()))
    }

    /// `l_att`: mean over attribute classifiers.
    pub fn attribute(&self) -> Option<f64> {
        (!self.attributes.is_empty()).then(|| self.attributes.iter().sum::<f64>() / self.attributes.len() as f64)
    }
}

pub fn total_loss(losses: &BranchLosses, w: &LossWeights, reduction: RegionReduction) -> Result<f64> {
    let conv = losses
        .conv
        .ok_or_else(|| RamError::Model("the conv branch loss is required".into()))?;
    Ok(conv
        + w.lambda1 * losses.bn.unwrap_or(0.0)
        + w.lambda2 * losses.region(reduction).unwrap_or(0.0)
        + w.lambda3 * losses.attribute().unwrap_or(0.0))
}

/// Scalar loss nodes of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct BranchLossVars {
    pub conv: Option<Var>,
    pub bn: Option<Var>,
    pub regions: Vec<Var>,
    pub attributes: Vec<Var>,
}

impl BranchLossVars {
    pub fn values(&self, g: &Graph) -> BranchLosses {
        let v = |x: Var| g.value(x).data()[0];
        BranchLosses {
            conv: self.conv.map(v),
            bn: self.bn.map(v),
            regions: self.regions.iter().map(|&x| v(x)).collect(),
            attributes: self.attributes.iter().map(|&x| v(x)).collect(),
        }
    }
}

/// Graph form of [`total_loss`].
pub fn total_loss_graph(g: &mut Graph, losses: &BranchLossVars, w: &LossWeights, reduction: RegionReduction) -> Result<Var> {
    let conv = losses
        .conv
        .ok_or_else(|| RamError::Model("the conv branch loss is required".into()))?;
    let mut terms = vec![(conv, 1.0)];
    if let Some(bn) = losses.bn {
        terms.push((bn, w.lambda1));
    }
    if !losses.regions.is_empty() {
        let f = reduction.factor(losses.regions.len());
        let parts: Vec<(Var, f64)> = losses.regions.iter().map(|&r| (r, f)).collect();
        terms.push((g.combine(&parts)?, w.lambda2));
    }
    if !losses.attributes.is_empty() {
        let f = 1.0 / losses.attributes.len() as f64;
        let parts: Vec<(Var, f64)> = losses.attributes.iter().map(|&a| (a, f)).collect();
        terms.push((g.combine(&parts)?, w.lambda3));
    }
    g.combine(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn full(v: f64) -> BranchLosses {
        BranchLosses {
            conv: Some(v),
            bn: Some(v),
            regions: vec![v; 3],
            attributes: vec![v; 2],
        }
    }

    #[test]
    fn unit_losses_with_unit_weights() {
        let l = total_loss(&full(1.0), &LossWeights::default(), RegionReduction::Mean).unwrap();
        assert_eq!(l, 4.0);
        let l = total_loss(
            &BranchLosses { attributes: vec![], ..full(1.0) },
            &LossWeights::default(),
            RegionReduction::Mean,
        )
        .unwrap();
        assert_eq!(l, 3.0);
        let l = total_loss(&full(1.0), &LossWeights::default(), RegionReduction::Sum).unwrap();
        assert_eq!(l, 6.0);
    }

    #[test]
    fn zero_weights_reduce_to_conv() {
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
        let mut l = full(2.5);
        l.conv = Some(0.7);
        assert_eq!(total_loss(&l, &w, RegionReduction::Mean).unwrap(), 0.7);
    }

    #[test]
    fn conv_required() {
        let l = BranchLosses { conv: None, ..full(1.0) };
        assert!(total_loss(&l, &LossWeights::default(), RegionReduction::Mean).is_err());
        assert!(LossWeights { lambda1: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn graph_matches_scalar() {
        let mut g = Graph::new();
        let mk = |g: &mut Graph, v: f64| g.param(Tensor::scalar(v));
        let vars = BranchLossVars {
            conv: Some(mk(&mut g, 0.3)),
            bn: Some(mk(&mut g, 1.1)),
            regions: vec![mk(&mut g, 0.2), mk(&mut g, 0.9), mk(&mut g, 1.7)],
            attributes: vec![mk(&mut g, 0.4), mk(&mut g, 0.8)],
        };
        let w = LossWeights { lambda1: 0.5, lambda2: 2.0, lambda3: 0.25 };
        let t = total_loss_graph(&mut g, &vars, &w, RegionReduction::Mean).unwrap();
        let expected = total_loss(&vars.values(&g), &w, RegionReduction::Mean).unwrap();
        assert!((g.value(t).data()[0] - expected).abs() < 1e-15);
        g.backward(t).unwrap();
        assert!((g.grad(vars.regions[1]).unwrap()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.grad(vars.attributes[0]).unwrap()[0] - 0.125).abs() < 1e-15);
    }
}
