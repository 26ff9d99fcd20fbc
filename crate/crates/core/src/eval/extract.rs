use crate::data::Dataset;
use crate::error::{RamError, Result};
use crate::model::{concat_features, FeatureSelection, Mode, RamModel};

use super::protocol::{evaluate_protocol, MetricsReport, ProtocolSpec};
use super::table::{FeatureTable, SampleRef};

/// Eval-mode descriptors for every image of `data`, in dataset order.
pub fn extract_features(model: &RamModel, data: &Dataset, selection: &FeatureSelection, batch_size: usize) -> Result<FeatureTable> {
    if batch_size == 0 {
        return Err(RamError::Config("batch size must be at least 1".into()));
    }
    if selection.is_empty() {
        return Err(RamError::Eval("empty feature selection".into()));
    }
    if let Some(b) = selection.required_branches().into_iter().find(|&b| !model.is_active(b)) {
        return Err(RamError::Eval(format!(
            "selection {selection} needs the `{b}` branch, which the model does not have (active: {})",
            model.config().active
        )));
    }
    let cfg = model.config();
    let dim = selection.dim(
        cfg.fc_dims.conv,
        cfg.fc_dims.bn,
        cfg.fc_dims.region,
        cfg.region_count,
        cfg.fc_dims.attribute,
    )?;
    let mut table = FeatureTable::new(dim);
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size) {
        let batch = data.batch(chunk, &[]);
        let out = model.forward_features(&batch.images, Mode::Eval)?;
        for (&i, bf) in chunk.iter().zip(&out.features) {
            let f = concat_features(bf, selection, cfg.normalize_features)?;
            table.push(SampleRef::from(&data.samples[i]), &f)?;
        }
    }
    Ok(table)
}

/// Extracts `selection` over `data` and scores it under `protocol`.
pub fn evaluate_model(model: &RamModel, data: &Dataset, selection: &FeatureSelection, protocol: &ProtocolSpec, batch_size: usize) -> Result<MetricsReport> {
    let table = extract_features(model, data, selection, batch_size)?;
    let mut report = evaluate_protocol(&table, protocol)?;
    report.selection = Some(selection.to_string());
    Ok(report)
}
