use std::fs;
use std::path::{Path, PathBuf};

use ram_core::config::RunConfig;
use ram_core::data::{load_manifest, write_synthetic, Dataset, DatasetManifest, Split, MANIFEST_NAME};
use ram_core::eval::{evaluate_model, extract_features, MetricsReport, ProtocolKind};
use ram_core::model::{load_checkpoint, save_checkpoint, FeatureSelection, RamModel};
use ram_core::train::{run_plan, TrainLog};
use ram_core::{RamError, Result};

pub const TRAIN_LOG_NAME: &str = "train_log.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| RamError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| RamError::io(path, e))
}

fn manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| RamError::Config("no dataset: set data.manifest or pass --manifest".into()))?;
    load_manifest(path)
}

fn input_dims(model: &ram_core::model::RamConfig) -> (usize, usize, usize) {
    (model.input_channels, model.input_height, model.input_width)
}

/// Images scored by the protocol: tagged query/gallery for `fixed_split`,
/// every non-training image for `random_gallery`.
fn eval_splits(cfg: &RunConfig) -> &'static [Split] {
    match cfg.protocol.kind {
        ProtocolKind::FixedSplit => &[Split::Query, Split::Gallery],
        ProtocolKind::RandomGallery => &[Split::Query, Split::Gallery, Split::Test],
    }
}

/// File-name form of a selection: `[f_c;f_b]` becomes `f_c+f_b`.
pub fn selection_slug(s: &FeatureSelection) -> String {
    s.to_string().trim_matches(|c| c == '[' || c == ']').replace(';', "+")
}

fn check_selections(model: &RamModel, selections: &[FeatureSelection]) -> Result<()> {
    for s in selections {
        if let Some(b) = s.required_branches().into_iter().find(|&b| !model.is_active(b)) {
            return Err(RamError::Eval(format!(
                "selection {s} needs the `{b}` branch; the checkpoint has {}",
                model.config().active
            )));
        }
    }
    Ok(())
}

pub fn gen_synthetic(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let m = write_synthetic(&cfg.synthetic, out)?;
    cfg.write_resolved(out)?;
    println!("wrote {} images and {}", m.samples.len(), out.join(MANIFEST_NAME).display());
    Ok(())
}

/// Trains every stage of the plan; returns the checkpoint directories.
fn train_into(cfg: &mut RunConfig, out: &Path) -> Result<Vec<(String, PathBuf)>> {
    let manifest = manifest(cfg)?;
    cfg.fit_to_data(&manifest)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let data = Dataset::load(&manifest, &[Split::Train], input_dims(&cfg.model), cfg.data.resize)?;
    let model = RamModel::new(cfg.model.clone())?;
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let result = run_plan(&cfg.plan, model, &data, &mut log, |stage, m| {
        let dir = out.join(&stage.name);
        save_checkpoint(m, &dir)?;
        println!("stage {}: {} parameters -> {}", stage.name, m.num_parameters(), dir.display());
        checkpoints.push((stage.name.clone(), dir));
        Ok(())
    });
    log.save(&out.join(TRAIN_LOG_NAME))?;
    result?;
    Ok(checkpoints)
}

pub fn train(mut cfg: RunConfig, out: &Path) -> Result<()> {
    train_into(&mut cfg, out).map(|_| ())
}

pub fn extract(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    check_selections(&model, &cfg.selections)?;
    let manifest = manifest(cfg)?;
    let data = Dataset::load(&manifest, eval_splits(cfg), input_dims(model.config()), cfg.data.resize)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    for sel in &cfg.selections {
        let table = extract_features(&model, &data, sel, cfg.data.eval_batch_size)?;
        let path = out.join(format!("features_{}.ramf", selection_slug(sel)));
        table.save(&path)?;
        println!("{sel}: {} x {} -> {}", table.len(), table.dim(), path.display());
    }
    Ok(())
}

/// One row of the comparison table.
struct Row {
    model: String,
    report: MetricsReport,
    dim: usize,
}

fn render_tables(rows: &[Row]) -> (String, String) {
    let mut csv = String::from("model,feature,dim,map,top1,top5\n");
    let mut md = String::from("| model | feature | dim | mAP | Top-1 | Top-5 |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let feature = r.report.selection.clone().unwrap_or_default();
        let top5 = r.report.top5.map_or(String::new(), |v| format!("{v:.4}"));
        csv.push_str(&format!(
            "{},{feature},{},{:.6},{:.6},{}\n",
            r.model,
            r.dim,
            r.report.map,
            r.report.top1,
            r.report.top5.map_or(String::new(), |v| format!("{v:.6}"))
        ));
        md.push_str(&format!(
            "| {} | {feature} | {} | {:.4} | {:.4} | {top5} |\n",
            r.model, r.dim, r.report.map, r.report.top1
        ));
    }
    (csv, md)
}

fn score(cfg: &RunConfig, name: &str, model: &RamModel, data: &Dataset, selections: &[FeatureSelection], out: &Path) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for sel in selections {
        let report = evaluate_model(model, data, sel, &cfg.protocol, cfg.data.eval_batch_size)?;
        report.save(&out.join(format!("metrics_{}.json", selection_slug(sel))))?;
        let c = model.config();
        let dim = sel.dim(c.fc_dims.conv, c.fc_dims.bn, c.fc_dims.region, c.region_count, c.fc_dims.attribute)?;
        rows.push(Row {
            model: name.to_string(),
            report,
            dim,
        });
    }
    Ok(rows)
}

fn write_tables(out: &Path, rows: &[Row]) -> Result<()> {
    let (csv, md) = render_tables(rows);
    write(&out.join("ablation.csv"), &csv)?;
    write(&out.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    check_selections(&model, &cfg.selections)?;
    let manifest = manifest(cfg)?;
    let data = Dataset::load(&manifest, eval_splits(cfg), input_dims(model.config()), cfg.data.resize)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let name = checkpoint
        .file_name()
        .map_or_else(|| checkpoint.display().to_string(), |n| n.to_string_lossy().into_owned());
    let rows = score(cfg, &name, &model, &data, &cfg.selections, out)?;
    write_tables(out, &rows)
}

pub fn ablate(mut cfg: RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    if cfg.data.manifest.is_none() {
        let data_dir = out.join("data");
        create_dir(&data_dir)?;
        write_synthetic(&cfg.synthetic, &data_dir)?;
        cfg.data.manifest = Some(data_dir.join(MANIFEST_NAME));
    }
    let checkpoints = train_into(&mut cfg, &out.join("checkpoints"))?;
    cfg.write_resolved(out)?;
    let manifest = manifest(&cfg)?;
    let data = Dataset::load(&manifest, eval_splits(&cfg), input_dims(&cfg.model), cfg.data.resize)?;
    let mut rows = Vec::new();
    for (name, dir) in checkpoints {
        let model = load_checkpoint(&dir)?;
        let usable: Vec<FeatureSelection> = cfg
            .selections
            .iter()
            .filter(|s| s.required_branches().iter().all(|&b| model.is_active(b)))
            .cloned()
            .collect();
        let metrics_dir = out.join("metrics").join(&name);
        create_dir(&metrics_dir)?;
        rows.extend(score(&cfg, &name, &model, &data, &usable, &metrics_dir)?);
    }
    write_tables(out, &rows)
}
