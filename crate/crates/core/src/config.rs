//! Whole-run configuration: one flat `section.key = value` file with the
//! sections `run`, `model`, `train`, `data`, `synthetic` and `eval`, plus
//! command-line overrides. Unknown keys are errors.
//!
//! `run.seed` seeds everything (synthetic data, initialization, shuffling,
//! evaluation trials) unless `model.init_seed` or `eval.seed` is given.

use std::path::{Path, PathBuf};

use crate::data::{DatasetManifest, ResizeMode, SyntheticSpec};
use crate::error::{RamError, Result};
use crate::eval::ProtocolSpec;
use crate::kv::{render, KvMap};
use crate::model::{parse_selections, FeatureSelection, RamConfig};
use crate::train::TrainPlan;

pub const RESOLVED_CONFIG_NAME: &str = "config.txt";

const DEFAULT_SELECTIONS: &str = "f_c,[f_c;f_b],[f_c;f_b;f_r],[f_c;f_b;f_r;f_a]";

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub resize: ResizeMode,
    pub eval_batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            resize: ResizeMode::Nearest,
            eval_batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: RamConfig,
    pub plan: TrainPlan,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub protocol: ProtocolSpec,
    pub selections: Vec<FeatureSelection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_kv(KvMap::new("defaults")).expect("defaults are valid")
    }
}

impl RunConfig {
    /// Reads `file` (if any), applies `overrides` on top, and resolves.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut kv = match file {
            Some(p) => KvMap::load(p)?,
            None => KvMap::new("flags"),
        };
        for (k, v) in overrides {
            kv.set(k, v);
        }
        Self::from_kv(kv)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KvMap::parse(text, "config")?)
    }

    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let seed: u64 = kv.take_or("run.seed", 0)?;
        if !kv.contains("model.init_seed") {
            kv.set("model.init_seed", seed);
        }
        if !kv.contains("eval.seed") {
            kv.set("eval.seed", seed);
        }

        let mut model = RamConfig::default();
        model.apply_kv(&mut kv)?;
        let plan = TrainPlan::apply_kv(&mut kv, seed)?;
        let data = DataConfig {
            manifest: kv.take("data.manifest").filter(|m| !m.is_empty()).map(PathBuf::from),
            resize: kv.take_or("data.resize", ResizeMode::Nearest)?,
            eval_batch_size: kv.take_or("data.eval_batch_size", 32usize)?,
        };
        if data.eval_batch_size == 0 {
            return Err(RamError::Config("data.eval_batch_size must be at least 1".into()));
        }
        let mut synthetic = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        synthetic.apply_kv(&mut kv)?;
        synthetic.validate()?;
        let protocol = ProtocolSpec::apply_kv(&mut kv)?;
        let selections = parse_selections(&kv.take("eval.selections").unwrap_or_else(|| DEFAULT_SELECTIONS.into()))?;
        kv.finish()?;
        Ok(RunConfig {
            seed,
            model,
            plan,
            data,
            synthetic,
            protocol,
            selections,
        })
    }

    /// Fills the data-derived model fields: the identity count, and the
    /// class count of attributes given without one. Declared counts must
    /// cover the labels present.
    pub fn fit_to_data(&mut self, manifest: &DatasetManifest) -> Result<()> {
        self.model.num_ids = manifest.num_train_ids();
        for a in &mut self.model.attributes {
            let present = match a.name.as_str() {
                "color" => manifest.colors.len(),
                "type" => manifest.types.len(),
                other => {
                    return Err(RamError::Config(format!(
                        "unknown attribute `{other}` (the manifest has color and type)"
                    )))
                }
            };
            if a.classes == 0 {
                a.classes = present;
            } else if a.classes < present {
                return Err(RamError::Config(format!(
                    "attribute `{}` declares {} classes but the data has {present}",
                    a.name, a.classes
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = vec![("run.seed".to_string(), self.seed.to_string())];
        out.extend(self.model.to_kv());
        out.extend(self.plan.to_kv());
        out.push((
            "data.manifest".into(),
            self.data.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        ));
        out.push(("data.resize".into(), self.data.resize.to_string()));
        out.push(("data.eval_batch_size".into(), self.data.eval_batch_size.to_string()));
        out.extend(self.synthetic.to_kv());
        out.extend(self.protocol.to_kv());
        let sels: Vec<String> = self.selections.iter().map(ToString::to_string).collect();
        out.push(("eval.selections".into(), sels.join(",")));
        out
    }

    pub fn render(&self) -> String {
        render(&self.to_kv())
    }

    /// Writes the resolved config as `config.txt` under `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_NAME);
        std::fs::write(&path, self.render()).map_err(|e| RamError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(c.plan.stages.len(), 4);
        assert_eq!(c.selections.len(), 4);
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn seed_propagates_unless_overridden() {
        let c = RunConfig::parse("run.seed = 9\n").unwrap();
        assert_eq!((c.model.init_seed, c.plan.seed, c.synthetic.seed, c.protocol.seed), (9, 9, 9, 9));
        let c = RunConfig::parse("run.seed = 9\nmodel.init_seed = 2\n").unwrap();
        assert_eq!(c.model.init_seed, 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("train.lerning_rate = 0.1\n").is_err());
        assert!(RunConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "run.seed = 1\ntrain.lr = 0.5\n").unwrap();
        let c = RunConfig::load(Some(&p), &[("run.seed".into(), "4".into())]).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.plan.sgd.learning_rate, 0.5);
    }
}
