use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph};
use crate::data::{make_batches, Batch, Dataset};
use crate::error::{RamError, Result};
use crate::model::{Branch, Mode, RamModel};
use crate::nn::{sgd_step, BoundParams, SgdState};

use super::loss::{total_loss_graph, BranchLossVars, BranchLosses};
use super::plan::{StageSpec, TrainPlan};

/// Losses averaged over the batches of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub stage_index: usize,
    /// Epoch within the stage, from 0.
    pub epoch: usize,
    pub lr: f64,
    pub losses: BranchLosses,
    pub total: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| RamError::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| RamError::io(path, e))
    }
}

/// Loss nodes of one training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BranchPass {
    pub losses: BranchLossVars,
    /// Batch statistics of the BN branch, when active.
    pub bn_stats: Option<BatchStats>,
    pub params: BoundParams,
}

/// Runs `model` on `batch` in training mode and attaches one
/// cross-entropy per classifier (attribute losses mask missing labels).
pub fn branch_losses(g: &mut Graph, model: &RamModel, batch: &Batch) -> Result<BranchPass> {
    let x = g.constant(batch.images.clone());
    let out = model.forward(g, x, Mode::Train)?;
    let mut losses = BranchLossVars {
        conv: Some(g.softmax_cross_entropy(out.logits.conv, &batch.ids)?),
        ..Default::default()
    };
    if let Some(l) = out.logits.bn {
        losses.bn = Some(g.softmax_cross_entropy(l, &batch.ids)?);
    }
    for &l in &out.logits.regions {
        losses.regions.push(g.softmax_cross_entropy(l, &batch.ids)?);
    }
    if out.logits.attributes.len() != batch.attributes.len() {
        return Err(RamError::Data(format!(
            "{} attribute classifiers but the batch carries {} label sets",
            out.logits.attributes.len(),
            batch.attributes.len()
        )));
    }
    for (&l, labels) in out.logits.attributes.iter().zip(&batch.attributes) {
        losses.attributes.push(g.softmax_cross_entropy(l, labels)?);
    }
    Ok(BranchPass {
        losses,
        bn_stats: out.bn_stats,
        params: out.params,
    })
}

/// Attribute names in classifier order, or none when the branch is off.
pub fn attribute_names(model: &RamModel) -> Vec<String> {
    if model.is_active(Branch::Attribute) {
        model.config().attributes.iter().map(|a| a.name.clone()).collect()
    } else {
        Vec::new()
    }
}

fn check_labels(model: &RamModel, data: &Dataset) -> Result<()> {
    if let Some(i) = data.labels.iter().position(Option::is_none) {
        return Err(RamError::Data(format!(
            "training sample {} has no identity label",
            data.samples[i].image_path
        )));
    }
    if model.is_active(Branch::Attribute) {
        for a in &model.config().attributes {
            if data.samples.iter().all(|s| s.attribute(&a.name).is_none()) {
                return Err(RamError::Data(format!(
                    "the attribute branch is active but no training sample has a `{}` label",
                    a.name
                )));
            }
        }
    }
    Ok(())
}

/// Trains `model` for one stage. `stage_index` decorrelates the shuffles
/// of successive stages; the learning-rate schedule restarts at epoch 0.
pub fn train_stage(mut model: RamModel, data: &Dataset, stage: &StageSpec, stage_index: usize, plan: &TrainPlan, log: &mut TrainLog) -> Result<RamModel> {
    plan.validate()?;
    check_labels(&model, data)?;
    let attr_names = attribute_names(&model);
    let shuffle_seed = plan.seed ^ ((stage_index as u64) << 48);
    let uses_batch_stats = model.is_active(Branch::Bn);
    let mut sgd = SgdState::new(plan.sgd);

    for epoch in 0..stage.epochs {
        let mut sum = BranchLosses::default();
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in make_batches(data, plan.batch_size, shuffle_seed, epoch, &attr_names)? {
            // Batch statistics are undefined for a single image.
            if uses_batch_stats && batch.indices.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let pass = branch_losses(&mut g, &model, &batch)?;
            let loss = total_loss_graph(&mut g, &pass.losses, &plan.weights, plan.region_reduction)?;
            g.backward(loss)?;
            let mut grads = pass.params.gradients(&g);
            let values = pass.losses.values(&g);
            total += g.value(loss).data()[0];
            accumulate(&mut sum, &values);
            batches += 1;
            sgd_step(model.params_mut(), &mut grads, &mut sgd, epoch)?;
            if let Some(stats) = pass.bn_stats {
                model.update_running_stats(&stats)?;
            }
        }
        if batches == 0 {
            return Err(RamError::Data("no usable training batch in an epoch".into()));
        }
        let n = batches as f64;
        log.records.push(EpochRecord {
            stage: stage.name.clone(),
            stage_index,
            epoch,
            lr: plan.sgd.learning_rate_at(epoch),
            losses: scale(&sum, 1.0 / n),
            total: total / n,
            batches,
        });
    }
    Ok(model)
}

fn accumulate(sum: &mut BranchLosses, v: &BranchLosses) {
    let add = |a: &mut Option<f64>, b: Option<f64>| {
        if let Some(b) = b {
            *a = Some(a.unwrap_or(0.0) + b);
        }
    };
    add(&mut sum.conv, v.conv);
    add(&mut sum.bn, v.bn);
    let add_vec = |a: &mut Vec<f64>, b: &[f64]| {
        if a.is_empty() {
            a.resize(b.len(), 0.0);
        }
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    };
    add_vec(&mut sum.regions, &v.regions);
    add_vec(&mut sum.attributes, &v.attributes);
}

fn scale(l: &BranchLosses, f: f64) -> BranchLosses {
    BranchLosses {
        conv: l.conv.map(|v| v * f),
        bn: l.bn.map(|v| v * f),
        regions: l.regions.iter().map(|v| v * f).collect(),
        attributes: l.attributes.iter().map(|v| v * f).collect(),
    }
}

/// Runs every stage of `plan` from a conv-only `model`, adding each
/// stage's branches first. `on_stage` sees the model after every stage.
pub fn run_plan<F>(plan: &TrainPlan, model: RamModel, data: &Dataset, log: &mut TrainLog, mut on_stage: F) -> Result<RamModel>
where
    F: FnMut(&StageSpec, &RamModel) -> Result<()>,
{
    plan.validate()?;
    if model.config().active.len() != 1 {
        return Err(RamError::Config(format!(
            "a plan starts from a conv-only model, got branches {}",
            model.config().active
        )));
    }
    let mut model = model;
    for (i, stage) in plan.stages.iter().enumerate() {
        let ctx = |e: RamError| RamError::Stage {
            stage: stage.name.clone(),
            source: Box::new(e),
        };
        for &b in &stage.add {
            model = model.add_branch(b).map_err(ctx)?;
        }
        model = train_stage(model, data, stage, i, plan, log).map_err(ctx)?;
        on_stage(stage, &model).map_err(ctx)?;
    }
    Ok(model)
}
