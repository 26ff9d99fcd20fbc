use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{RamError, Result};
use crate::nn::{BatchNormLayer, BoundParams, FcLayer, ParamStore};
use crate::tensor::Tensor;

use super::config::{Branch, Geometry, RamConfig, StemOp};
use super::features::BranchFeatures;
use super::region::split_regions;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN; caller applies running-stat updates.
    Train,
    Eval,
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Stem,
    Head(Branch),
    Classifier(Branch),
}

impl ParamGroup {
    pub fn of(name: &str) -> Result<ParamGroup> {
        let first = name.split('.').next().unwrap_or_default();
        if first == "stem" {
            return Ok(ParamGroup::Stem);
        }
        let branch: Branch = first
            .parse()
            .map_err(|_| RamError::Model(format!("parameter `{name}` has no owning group")))?;
        if name.split('.').any(|seg| seg == "cls") {
            Ok(ParamGroup::Classifier(branch))
        } else {
            Ok(ParamGroup::Head(branch))
        }
    }
}

/// Graph handles of the per-branch features (one row per image).
#[derive(Debug, Clone)]
pub struct FeatureVars {
    pub conv: Var,
    pub bn: Option<Var>,
    pub regions: Vec<Var>,
    pub attribute: Option<Var>,
}

/// Graph handles of every active classifier's logits.
#[derive(Debug, Clone)]
pub struct LogitVars {
    pub conv: Var,
    pub bn: Option<Var>,
    pub regions: Vec<Var>,
    /// One per configured attribute, in config order.
    pub attributes: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub feature_map: Var,
    pub features: FeatureVars,
    pub logits: LogitVars,
    /// Present in train mode when the BN branch is active.
    pub bn_stats: Option<BatchStats>,
    /// Graph handles of the parameters this pass used.
    pub params: BoundParams,
}

/// Evaluated features and logits for a batch, detached from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub features: Vec<BranchFeatures>,
    pub conv_logits: Tensor,
    pub bn_logits: Option<Tensor>,
    pub region_logits: Vec<Tensor>,
    pub attribute_logits: Vec<Tensor>,
}

/// The multi-branch model: a shared convolutional stem producing the
/// feature map, and up to four heads on top of it.
///
/// Parameter names: `stem.l{i}.*`, `conv.{fc1,fc2,cls}.*`,
/// `bn.norm.*` and `bn.{fc1,fc2,cls}.*`, `region.{i}.{fc1,fc2,cls}.*`
/// (region 0 is the top band), `attribute.fc.*` and `attribute.{name}.cls.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct RamModel {
    config: RamConfig,
    geometry: Geometry,
    store: ParamStore,
}

struct Stack {
    fc1: FcLayer,
    fc2: FcLayer,
    cls: FcLayer,
}

impl RamModel {
    pub fn new(config: RamConfig) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        let mut model = RamModel {
            config,
            geometry,
            store: ParamStore::new(),
        };
        let seed = model.config.init_seed;
        for op in &model.geometry.stem {
            if let StemOp::Conv(conv) = op {
                conv.init(&mut model.store, seed);
            }
        }
        for b in model.config.active.iter() {
            model.init_branch(b);
        }
        Ok(model)
    }

    pub fn config(&self) -> &RamConfig {
        &self.config
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_active(&self, b: Branch) -> bool {
        self.config.active.contains(b)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn pooled_len(&self, pooled: (usize, usize)) -> usize {
        self.geometry.map.0 * pooled.0 * pooled.1
    }

    fn stack(&self, prefix: &str, in_dim: usize, width: usize) -> Stack {
        Stack {
            fc1: FcLayer::new(format!("{prefix}.fc1"), in_dim, width),
            fc2: FcLayer::new(format!("{prefix}.fc2"), width, width),
            cls: FcLayer::new(format!("{prefix}.cls"), width, self.config.num_ids),
        }
    }

    fn conv_stack(&self) -> Stack {
        let in_dim = self.pooled_len(self.geometry.global_pooled);
        self.stack("conv", in_dim, self.config.fc_dims.conv)
    }

    fn bn_stack(&self) -> Stack {
        let in_dim = self.pooled_len(self.geometry.global_pooled);
        self.stack("bn", in_dim, self.config.fc_dims.bn)
    }

    fn region_stack(&self, i: usize) -> Stack {
        let in_dim = self.pooled_len(self.geometry.region_pooled);
        self.stack(&format!("region.{i}"), in_dim, self.config.fc_dims.region)
    }

    fn bn_layer(&self) -> BatchNormLayer {
        BatchNormLayer {
            name: "bn.norm".into(),
            channels: self.geometry.map.0,
            momentum: self.config.bn_momentum,
            eps: self.config.bn_eps,
        }
    }

    fn attribute_fc(&self) -> FcLayer {
        FcLayer::new("attribute.fc", self.config.fc_dims.conv, self.config.fc_dims.attribute)
    }

    fn attribute_classifiers(&self) -> Vec<FcLayer> {
        self.config
            .attributes
            .iter()
            .map(|a| {
                FcLayer::new(
                    format!("attribute.{}.cls", a.name),
                    self.config.fc_dims.attribute,
                    a.classes,
                )
            })
            .collect()
    }

    fn init_stack(&mut self, stack: Stack) {
        let seed = self.config.init_seed;
        for layer in [stack.fc1, stack.fc2, stack.cls] {
            layer.init(&mut self.store, seed);
        }
    }

    fn init_branch(&mut self, b: Branch) {
        let seed = self.config.init_seed;
        match b {
            Branch::Conv => self.init_stack(self.conv_stack()),
            Branch::Bn => {
                self.bn_layer().init(&mut self.store);
                self.init_stack(self.bn_stack());
            }
            Branch::Region => {
                for i in 0..self.geometry.regions.k {
                    self.init_stack(self.region_stack(i));
                }
            }
            Branch::Attribute => {
                self.attribute_fc().init(&mut self.store, seed);
                for cls in self.attribute_classifiers() {
                    cls.init(&mut self.store, seed);
                }
            }
        }
    }

    /// Returns a new model with `branch` added. Existing parameters are
    /// copied unchanged; the new branch is freshly initialized.
    pub fn add_branch(&self, branch: Branch) -> Result<RamModel> {
        if self.is_active(branch) {
            return Err(RamError::Model(format!("branch `{branch}` is already active")));
        }
        if branch == Branch::Attribute && !self.is_active(Branch::Conv) {
            return Err(RamError::Model(
                "the attribute branch reads the conv branch's first FC output".into(),
            ));
        }
        let mut next = self.clone();
        next.config.active = next.config.active.with(branch);
        next.config.validate()?;
        next.init_branch(branch);
        Ok(next)
    }

    /// Applies the BN branch's batch statistics to its running averages.
    pub fn update_running_stats(&mut self, stats: &BatchStats) -> Result<()> {
        self.bn_layer().update_running(&mut self.store, stats)
    }

    fn flatten(g: &mut Graph, v: Var) -> Result<Var> {
        let shape = g.shape(v).to_vec();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        g.reshape(v, &[n, rest])
    }

    fn run_stack(g: &mut Graph, params: &BoundParams, stack: &Stack, x: Var) -> Result<(Var, Var, Var)> {
        let h1 = stack.fc1.forward(g, params, x)?;
        let h1 = g.relu(h1);
        let h2 = stack.fc2.forward(g, params, h1)?;
        let feature = g.relu(h2);
        let logits = stack.cls.forward(g, params, feature)?;
        Ok((h1, feature, logits))
    }

    /// Builds the forward graph for an NCHW batch `x`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let expected = [cfg.input_channels, cfg.input_height, cfg.input_width];
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != expected {
            return Err(RamError::layer(
                "input",
                format!("expected N x {expected:?}, got {shape:?}"),
            ));
        }
        let params = self.store.bind(g);

        let mut m = x;
        for (i, op) in self.geometry.stem.iter().enumerate() {
            m = match op {
                StemOp::Conv(conv) => {
                    let y = conv.forward(g, &params, m)?;
                    g.relu(y)
                }
                StemOp::Pool(pool) => pool.forward(g, m, &format!("stem.l{i}"))?,
            };
        }

        let pooled = cfg.global_pool.forward(g, m, "conv.pool")?;
        let flat = Self::flatten(g, pooled)?;
        let (conv_hidden, f_c, conv_logits) = Self::run_stack(g, &params, &self.conv_stack(), flat)?;

        let mut bn_stats = None;
        let (f_b, bn_logits) = if self.is_active(Branch::Bn) {
            let (mb, stats) = self
                .bn_layer()
                .forward(g, &params, &self.store, m, mode == Mode::Train)?;
            bn_stats = stats;
            let pooled = cfg.global_pool.forward(g, mb, "bn.pool")?;
            let flat = Self::flatten(g, pooled)?;
            let (_, f, logits) = Self::run_stack(g, &params, &self.bn_stack(), flat)?;
            (Some(f), Some(logits))
        } else {
            (None, None)
        };

        let mut region_features = Vec::new();
        let mut region_logits = Vec::new();
        if self.is_active(Branch::Region) {
            let parts = split_regions(g, m, &self.geometry.regions)?;
            for (i, part) in parts.into_iter().enumerate() {
                let pooled = cfg.region_pool.forward(g, part, &format!("region.{i}.pool"))?;
                let flat = Self::flatten(g, pooled)?;
                let (_, f, logits) = Self::run_stack(g, &params, &self.region_stack(i), flat)?;
                region_features.push(f);
                region_logits.push(logits);
            }
        }

        let mut attribute_logits = Vec::new();
        let f_a = if self.is_active(Branch::Attribute) {
            let h = self.attribute_fc().forward(g, &params, conv_hidden)?;
            let f = g.relu(h);
            for cls in self.attribute_classifiers() {
                attribute_logits.push(cls.forward(g, &params, f)?);
            }
            Some(f)
        } else {
            None
        };

        Ok(ForwardOutput {
            feature_map: m,
            features: FeatureVars {
                conv: f_c,
                bn: f_b,
                regions: region_features,
                attribute: f_a,
            },
            logits: LogitVars {
                conv: conv_logits,
                bn: bn_logits,
                regions: region_logits,
                attributes: attribute_logits,
            },
            bn_stats,
            params,
        })
    }

    /// Runs a batch and returns detached per-image features and logits.
    /// Train mode uses batch statistics but does not touch running stats.
    pub fn forward_features(&self, x: &Tensor, mode: Mode) -> Result<BatchOutput> {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let out = self.forward(&mut g, input, mode)?;
        let n = x.shape()[0];
        let rows = |g: &Graph, v: Var| -> Vec<Vec<f64>> {
            let t = g.value(v);
            let d = t.numel() / n;
            t.data().chunks(d).map(<[f64]>::to_vec).collect()
        };
        let conv = rows(&g, out.features.conv);
        let bn = out.features.bn.map(|v| rows(&g, v));
        let regions: Vec<Vec<Vec<f64>>> = out.features.regions.iter().map(|&v| rows(&g, v)).collect();
        let attribute = out.features.attribute.map(|v| rows(&g, v));
        let features = (0..n)
            .map(|i| BranchFeatures {
                conv: Some(conv[i].clone()),
                bn: bn.as_ref().map(|b| b[i].clone()),
                regions: (!regions.is_empty()).then(|| regions.iter().map(|r| r[i].clone()).collect()),
                attribute: attribute.as_ref().map(|a| a[i].clone()),
            })
            .collect();
        Ok(BatchOutput {
            features,
            conv_logits: g.value(out.logits.conv).clone(),
            bn_logits: out.logits.bn.map(|v| g.value(v).clone()),
            region_logits: out.logits.regions.iter().map(|&v| g.value(v).clone()).collect(),
            attribute_logits: out.logits.attributes.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }
}
