//! Checkpoint directories: `model.txt` (architecture keys), `manifest.txt`
//! (one `name file shape` line per tensor, sorted by name) and one `.ramt`
//! file per parameter or buffer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{RamError, Result};
use crate::kv::{self, KvMap};
use crate::tensor::{format_shape, parse_shape, Tensor};

use super::config::RamConfig;
use super::ram::RamModel;

pub const MODEL_FILE: &str = "model.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn save_checkpoint(model: &RamModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| RamError::io(dir, e))?;
    let model_path = dir.join(MODEL_FILE);
    fs::write(&model_path, kv::render(&model.config().to_kv())).map_err(|e| RamError::io(&model_path, e))?;
    let store = model.params();
    let tensors: BTreeMap<&str, &Tensor> = store.params().chain(store.buffers()).collect();
    let mut manifest = String::new();
    for (name, t) in tensors {
        let file = format!("{name}.ramt");
        t.save(&dir.join(&file))?;
        manifest.push_str(&format!("{name} {file} {}\n", format_shape(t.shape())));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest).map_err(|e| RamError::io(&manifest_path, e))
}

pub fn load_config(dir: &Path) -> Result<RamConfig> {
    let mut kv = KvMap::load(&dir.join(MODEL_FILE))?;
    let mut config = RamConfig {
        stem: Vec::new(),
        ..RamConfig::default()
    };
    config.apply_kv(&mut kv)?;
    kv.finish()?;
    Ok(config)
}

pub fn load_checkpoint(dir: &Path) -> Result<RamModel> {
    let config = load_config(dir)?;
    let mut model = RamModel::new(config)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| RamError::io(&manifest_path, e))?;
    let parse_err = |line: usize, message: String| RamError::Parse {
        path: manifest_path.display().to_string(),
        line,
        message,
    };
    let mut seen = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, file, shape] = fields[..] else {
            return Err(parse_err(i + 1, format!("expected `name file shape`, got `{line}`")));
        };
        let shape = parse_shape(shape).ok_or_else(|| parse_err(i + 1, format!("bad shape `{shape}`")))?;
        let tensor = Tensor::load(&dir.join(file))?;
        if tensor.shape() != shape {
            return Err(parse_err(
                i + 1,
                format!("`{file}` has shape {:?}, manifest says {shape:?}", tensor.shape()),
            ));
        }
        seen.insert(name.to_string(), tensor);
    }
    let store = model.params_mut();
    let expected: Vec<String> = store
        .params()
        .chain(store.buffers())
        .map(|(n, _)| n.to_string())
        .collect();
    for name in &expected {
        let tensor = seen
            .remove(name)
            .ok_or_else(|| RamError::Model(format!("checkpoint lacks `{name}`")))?;
        let slot = if store.contains_param(name) {
            store.param_mut(name)?
        } else {
            store.buffer_mut(name)?
        };
        if slot.shape() != tensor.shape() {
            return Err(RamError::shape(format!("checkpoint tensor {name}"), tensor.shape(), slot.shape()));
        }
        *slot = tensor;
    }
    if let Some(extra) = seen.keys().next() {
        return Err(RamError::Model(format!(
            "checkpoint has `{extra}`, which the configured branches do not use"
        )));
    }
    Ok(model)
}
