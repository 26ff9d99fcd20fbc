//! Stage plans and their `train.*` configuration keys.

use serde::{Deserialize, Serialize};

use crate::error::{RamError, Result};
use crate::kv::KvMap;
use crate::model::Branch;
use crate::nn::SgdConfig;

use super::loss::{LossWeights, RegionReduction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Checkpoint name.
    pub name: String,
    /// Branches added before this stage trains.
    pub add: Vec<Branch>,
    pub epochs: usize,
}

/// The four canonical steps, in order, with the `--stage` aliases that
/// stop after them.
pub const CANONICAL_STAGES: [(&str, &[Branch], &[&str]); 4] = [
    ("baseline", &[], &["baseline", "conv-only", "conv"]),
    ("BN", &[Branch::Bn], &["bn"]),
    ("BN+R", &[Branch::Region], &["bn+r", "bn-r"]),
    ("RAM", &[Branch::Attribute], &["ram", "all"]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stages: Vec<StageSpec>,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub weights: LossWeights,
    pub region_reduction: RegionReduction,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan::canonical(30)
    }
}

impl TrainPlan {
    /// baseline, BN, BN+R, RAM with `epochs` each.
    pub fn canonical(epochs: usize) -> Self {
        TrainPlan {
            stages: CANONICAL_STAGES
                .iter()
                .map(|(name, add, _)| StageSpec {
                    name: name.to_string(),
                    add: add.to_vec(),
                    epochs,
                })
                .collect(),
            batch_size: 16,
            sgd: SgdConfig::default(),
            weights: LossWeights::default(),
            region_reduction: RegionReduction::Mean,
            seed: 0,
        }
    }

    /// Index of the canonical stage named by `alias` (case-insensitive).
    pub fn canonical_index(alias: &str) -> Result<usize> {
        let a = alias.to_ascii_lowercase();
        CANONICAL_STAGES
            .iter()
            .position(|(name, _, aliases)| name.eq_ignore_ascii_case(&a) || aliases.contains(&a.as_str()))
            .ok_or_else(|| {
                RamError::Config(format!(
                    "unknown stage `{alias}` (baseline|conv-only|bn|bn+r|ram)"
                ))
            })
    }

    /// Drops the stages after `alias`.
    pub fn truncate_to(&mut self, alias: &str) -> Result<()> {
        let idx = Self::canonical_index(alias)?;
        let name = CANONICAL_STAGES[idx].0;
        let pos = self
            .stages
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| RamError::Config(format!("plan has no stage `{name}`")))?;
        self.stages.truncate(pos + 1);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(RamError::Config("the plan has no stages".into()));
        }
        if self.batch_size == 0 {
            return Err(RamError::Config("train.batch_size must be at least 1".into()));
        }
        self.sgd.validate()?;
        self.weights.validate()?;
        let mut seen = vec![Branch::Conv];
        for s in &self.stages {
            for &b in &s.add {
                if seen.contains(&b) {
                    return Err(RamError::Config(format!(
                        "stage `{}` adds branch `{b}`, which is already present",
                        s.name
                    )));
                }
                if b == Branch::Attribute && !seen.contains(&Branch::Conv) {
                    return Err(RamError::Config("the attribute branch needs the conv branch".into()));
                }
                seen.push(b);
            }
        }
        Ok(())
    }

    /// Reads the `train.*` keys. `train.stage` cuts the canonical plan,
    /// `train.stage_epochs` (comma list) overrides `train.epochs` per stage.
    pub fn apply_kv(kv: &mut KvMap, seed: u64) -> Result<Self> {
        let epochs = kv.take_or("train.epochs", 30usize)?;
        let mut plan = TrainPlan::canonical(epochs);
        plan.seed = seed;
        plan.batch_size = kv.take_or("train.batch_size", plan.batch_size)?;
        plan.sgd = SgdConfig {
            learning_rate: kv.take_or("train.lr", plan.sgd.learning_rate)?,
            decay_factor: kv.take_or("train.lr_decay", plan.sgd.decay_factor)?,
            decay_epoch_period: kv.take_or("train.lr_decay_epochs", plan.sgd.decay_epoch_period)?,
            momentum: kv.take_or("train.momentum", plan.sgd.momentum)?,
        };
        plan.weights = LossWeights {
            lambda1: kv.take_or("train.lambda1", 1.0)?,
            lambda2: kv.take_or("train.lambda2", 1.0)?,
            lambda3: kv.take_or("train.lambda3", 1.0)?,
        };
        plan.region_reduction = kv.take_or("train.region_loss", RegionReduction::Mean)?;
        let last = kv.take("train.stage").unwrap_or_else(|| "ram".into());
        plan.truncate_to(&last)?;
        if let Some(list) = kv.take("train.stage_epochs") {
            let values: Vec<usize> = list
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| RamError::Config(format!("train.stage_epochs: bad list `{list}`")))?;
            if values.len() != plan.stages.len() {
                return Err(RamError::Config(format!(
                    "train.stage_epochs has {} entries for {} stages",
                    values.len(),
                    plan.stages.len()
                )));
            }
            for (s, e) in plan.stages.iter_mut().zip(values) {
                s.epochs = e;
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let last = self.stages.last().map_or("ram", |s| s.name.as_str());
        let epochs: Vec<String> = self.stages.iter().map(|s| s.epochs.to_string()).collect();
        vec![
            ("train.stage".into(), last.to_ascii_lowercase()),
            ("train.stage_epochs".into(), epochs.join(",")),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.lr".into(), self.sgd.learning_rate.to_string()),
            ("train.lr_decay".into(), self.sgd.decay_factor.to_string()),
            ("train.lr_decay_epochs".into(), self.sgd.decay_epoch_period.to_string()),
            ("train.momentum".into(), self.sgd.momentum.to_string()),
            ("train.lambda1".into(), self.weights.lambda1.to_string()),
            ("train.lambda2".into(), self.weights.lambda2.to_string()),
            ("train.lambda3".into(), self.weights.lambda3.to_string()),
            ("train.region_loss".into(), self.region_reduction.to_string()),
        ]
    }
}
