use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{RamError, Result};
use crate::kv::KvMap;
use crate::nn::{ConvLayer, PoolLayer};

use super::region::RegionSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Conv,
    Bn,
    Region,
    Attribute,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Conv, Branch::Bn, Branch::Region, Branch::Attribute];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Conv => "conv",
            Branch::Bn => "bn",
            Branch::Region => "region",
            Branch::Attribute => "attribute",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Branch {
    type Err = RamError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conv" => Ok(Branch::Conv),
            "bn" => Ok(Branch::Bn),
            "region" | "r" => Ok(Branch::Region),
            "attribute" | "attr" => Ok(Branch::Attribute),
            other => Err(RamError::Config(format!("unknown branch `{other}`"))),
        }
    }
}

/// Set of active branches, always listed in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BranchSet(u8);

impl BranchSet {
    pub fn conv_only() -> Self {
        BranchSet::default().with(Branch::Conv)
    }

    pub fn all() -> Self {
        Branch::ALL.into_iter().fold(BranchSet::default(), BranchSet::with)
    }

    fn bit(b: Branch) -> u8 {
        1 << (b as u8)
    }

    pub fn with(self, b: Branch) -> Self {
        BranchSet(self.0 | Self::bit(b))
    }

    pub fn contains(self, b: Branch) -> bool {
        self.0 & Self::bit(b) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Branch> {
        Branch::ALL.into_iter().filter(move |&b| self.contains(b))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn validate(self) -> Result<()> {
        if !self.contains(Branch::Conv) {
            return Err(RamError::Config("the conv branch is always required".into()));
        }
        Ok(())
    }
}

impl fmt::Display for BranchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Branch::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for BranchSet {
    type Err = RamError;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .try_fold(BranchSet::default(), |set, t| Ok(set.with(t.parse()?)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemLayer {
    /// Convolution followed by ReLU.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool { kernel: usize, stride: usize },
}

impl fmt::Display for StemLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StemLayer::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv:{out_channels}:{kernel}:{stride}:{padding}"),
            StemLayer::MaxPool { kernel, stride } => write!(f, "pool:{kernel}:{stride}"),
        }
    }
}

fn parse_numbers(s: &str, n: usize, what: &str) -> Result<Vec<usize>> {
    let nums: Vec<usize> = s
        .split(':')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| RamError::Config(format!("bad {what} `{s}`")))?;
    if nums.len() != n || nums.iter().any(|&v| v == 0 && what != "padding") {
        return Err(RamError::Config(format!("bad {what} `{s}`")));
    }
    Ok(nums)
}

impl FromStr for StemLayer {
    type Err = RamError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("conv:") {
            let v: Vec<usize> = rest
                .split(':')
                .map(|t| t.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| RamError::Config(format!("bad stem conv `{s}`")))?;
            match v[..] {
                [o, k, st, p] if o > 0 && k > 0 && st > 0 => Ok(StemLayer::Conv {
                    out_channels: o,
                    kernel: k,
                    stride: st,
                    padding: p,
                }),
                _ => Err(RamError::Config(format!(
                    "stem conv must be conv:out:kernel:stride:padding, got `{s}`"
                ))),
            }
        } else if let Some(rest) = s.strip_prefix("pool:") {
            let v = parse_numbers(rest, 2, "stem pool")?;
            Ok(StemLayer::MaxPool {
                kernel: v[0],
                stride: v[1],
            })
        } else {
            Err(RamError::Config(format!("unknown stem layer `{s}`")))
        }
    }
}

fn parse_pool(s: &str) -> Result<PoolLayer> {
    let v = parse_numbers(s, 2, "pool")?;
    Ok(PoolLayer {
        kernel: v[0],
        stride: v[1],
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSpec {
    pub name: String,
    pub classes: usize,
}

/// Width of each branch's FC stack (and therefore of its feature).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcDims {
    pub conv: usize,
    pub bn: usize,
    pub region: usize,
    pub attribute: usize,
}

impl Default for FcDims {
    fn default() -> Self {
        FcDims {
            conv: 64,
            bn: 64,
            region: 64,
            attribute: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RamConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub stem: Vec<StemLayer>,
    /// Pooling of the whole map in the conv and BN branches.
    pub global_pool: PoolLayer,
    /// Pooling of each region in the region branch.
    pub region_pool: PoolLayer,
    pub region_count: usize,
    pub region_height: usize,
    pub region_overlap: usize,
    pub fc_dims: FcDims,
    pub num_ids: usize,
    pub attributes: Vec<AttributeSpec>,
    pub active: BranchSet,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// L2-normalize each branch feature before concatenation.
    pub normalize_features: bool,
    pub init_seed: u64,
}

impl Default for RamConfig {
    fn default() -> Self {
        RamConfig {
            input_channels: 3,
            input_height: 32,
            input_width: 32,
            stem: vec![
                StemLayer::Conv {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
                StemLayer::MaxPool { kernel: 2, stride: 2 },
                StemLayer::Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
            ],
            global_pool: PoolLayer { kernel: 3, stride: 2 },
            region_pool: PoolLayer { kernel: 3, stride: 2 },
            region_count: 3,
            region_height: 7,
            region_overlap: 4,
            fc_dims: FcDims::default(),
            num_ids: 10,
            attributes: vec![
                AttributeSpec {
                    name: "color".into(),
                    classes: 4,
                },
                AttributeSpec {
                    name: "type".into(),
                    classes: 3,
                },
            ],
            active: BranchSet::conv_only(),
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            normalize_features: true,
            init_seed: 0,
        }
    }
}

/// Resolved shapes derived from a config.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub stem: Vec<StemOp>,
    /// Feature map `(C, H, W)`.
    pub map: (usize, usize, usize),
    pub regions: RegionSpec,
    pub global_pooled: (usize, usize),
    pub region_pooled: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StemOp {
    Conv(ConvLayer),
    Pool(PoolLayer),
}

impl RamConfig {
    pub fn geometry(&self) -> Result<Geometry> {
        let (mut c, mut h, mut w) = (self.input_channels, self.input_height, self.input_width);
        if c == 0 || h == 0 || w == 0 {
            return Err(RamError::Config("input dimensions must be positive".into()));
        }
        let mut ops = Vec::with_capacity(self.stem.len());
        for (i, layer) in self.stem.iter().enumerate() {
            match *layer {
                StemLayer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let conv = ConvLayer {
                        name: format!("stem.l{i}"),
                        in_channels: c,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    };
                    (h, w) = conv.output_size(h, w).ok_or_else(|| {
                        RamError::Config(format!("stem layer {i} ({layer}) does not fit a {h}x{w} input"))
                    })?;
                    c = out_channels;
                    ops.push(StemOp::Conv(conv));
                }
                StemLayer::MaxPool { kernel, stride } => {
                    let pool = PoolLayer { kernel, stride };
                    (h, w) = pool.output_size(h, w).ok_or_else(|| {
                        RamError::Config(format!("stem layer {i} ({layer}) does not fit a {h}x{w} input"))
                    })?;
                    ops.push(StemOp::Pool(pool));
                }
            }
        }
        if !ops.iter().any(|op| matches!(op, StemOp::Conv(_))) {
            return Err(RamError::Config("the stem needs at least one convolution".into()));
        }
        let regions = RegionSpec::new(
            self.region_count,
            c,
            h,
            w,
            self.region_height,
            self.region_overlap,
        )?;
        let global_pooled = self.global_pool.output_size(h, w).ok_or_else(|| {
            RamError::Config(format!("global pool does not fit the {h}x{w} feature map"))
        })?;
        let region_pooled = self
            .region_pool
            .output_size(self.region_height, w)
            .ok_or_else(|| {
                RamError::Config(format!(
                    "region pool does not fit a {}x{w} region",
                    self.region_height
                ))
            })?;
        Ok(Geometry {
            stem: ops,
            map: (c, h, w),
            regions,
            global_pooled,
            region_pooled,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.active.validate()?;
        self.geometry()?;
        let d = self.fc_dims;
        if [d.conv, d.bn, d.region, d.attribute].contains(&0) {
            return Err(RamError::Config("fc dims must be positive".into()));
        }
        if self.num_ids < 2 {
            return Err(RamError::Config(format!(
                "need at least 2 identities, got {}",
                self.num_ids
            )));
        }
        if self.active.contains(Branch::Attribute) && self.attributes.is_empty() {
            return Err(RamError::Config(
                "the attribute branch needs at least one attribute".into(),
            ));
        }
        if let Some(a) = self.attributes.iter().find(|a| a.classes < 1) {
            return Err(RamError::Config(format!("attribute `{}` has no classes", a.name)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || !(self.bn_eps > 0.0) {
            return Err(RamError::Config("bn momentum must be in (0,1) and eps positive".into()));
        }
        Ok(())
    }

    /// Reads the architecture keys under `model.` (everything except the
    /// data-derived identity and attribute counts when those are absent).
    pub fn apply_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        if let Some(input) = kv.take("model.input") {
            let dims: Vec<usize> = input
                .split('x')
                .map(|t| t.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| RamError::Config(format!("bad model.input `{input}`")))?;
            let [c, h, w] = dims[..] else {
                return Err(RamError::Config(format!("model.input must be CxHxW, got `{input}`")));
            };
            (self.input_channels, self.input_height, self.input_width) = (c, h, w);
        }
        if let Some(stem) = kv.take("model.stem") {
            self.stem = stem
                .split(',')
                .map(str::parse)
                .collect::<Result<_>>()?;
        }
        if let Some(p) = kv.take("model.global_pool") {
            self.global_pool = parse_pool(&p)?;
        }
        if let Some(p) = kv.take("model.region_pool") {
            self.region_pool = parse_pool(&p)?;
        }
        self.region_count = kv.take_or("model.regions", self.region_count)?;
        self.region_height = kv.take_or("model.region_height", self.region_height)?;
        self.region_overlap = kv.take_or("model.region_overlap", self.region_overlap)?;
        if let Some(d) = kv.take_parsed::<usize>("model.fc_dim")? {
            self.fc_dims = FcDims {
                conv: d,
                bn: d,
                region: d,
                attribute: d,
            };
        }
        self.fc_dims.conv = kv.take_or("model.fc_dim_conv", self.fc_dims.conv)?;
        self.fc_dims.bn = kv.take_or("model.fc_dim_bn", self.fc_dims.bn)?;
        self.fc_dims.region = kv.take_or("model.fc_dim_region", self.fc_dims.region)?;
        self.fc_dims.attribute = kv.take_or("model.fc_dim_attribute", self.fc_dims.attribute)?;
        self.num_ids = kv.take_or("model.num_ids", self.num_ids)?;
        if let Some(attrs) = kv.take("model.attributes") {
            self.attributes = parse_attributes(&attrs)?;
        }
        if let Some(b) = kv.take("model.branches") {
            self.active = b.parse()?;
        }
        self.bn_momentum = kv.take_or("model.bn_momentum", self.bn_momentum)?;
        self.bn_eps = kv.take_or("model.bn_eps", self.bn_eps)?;
        self.normalize_features = kv.take_or("model.normalize_features", self.normalize_features)?;
        self.init_seed = kv.take_or("model.init_seed", self.init_seed)?;
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let stem: Vec<String> = self.stem.iter().map(ToString::to_string).collect();
        let attrs: Vec<String> = self
            .attributes
            .iter()
            .map(|a| format!("{}:{}", a.name, a.classes))
            .collect();
        [
            (
                "model.input",
                format!("{}x{}x{}", self.input_channels, self.input_height, self.input_width),
            ),
            ("model.stem", stem.join(",")),
            (
                "model.global_pool",
                format!("{}:{}", self.global_pool.kernel, self.global_pool.stride),
            ),
            (
                "model.region_pool",
                format!("{}:{}", self.region_pool.kernel, self.region_pool.stride),
            ),
            ("model.regions", self.region_count.to_string()),
            ("model.region_height", self.region_height.to_string()),
            ("model.region_overlap", self.region_overlap.to_string()),
            ("model.fc_dim_conv", self.fc_dims.conv.to_string()),
            ("model.fc_dim_bn", self.fc_dims.bn.to_string()),
            ("model.fc_dim_region", self.fc_dims.region.to_string()),
            ("model.fc_dim_attribute", self.fc_dims.attribute.to_string()),
            ("model.num_ids", self.num_ids.to_string()),
            ("model.attributes", attrs.join(",")),
            ("model.branches", self.active.to_string()),
            ("model.bn_momentum", self.bn_momentum.to_string()),
            ("model.bn_eps", self.bn_eps.to_string()),
            ("model.normalize_features", self.normalize_features.to_string()),
            ("model.init_seed", self.init_seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// `color:10,type:9`; a bare name means "count taken from the data" (0).
pub fn parse_attributes(s: &str) -> Result<Vec<AttributeSpec>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| match t.split_once(':') {
            Some((name, n)) => n
                .trim()
                .parse()
                .map(|classes| AttributeSpec {
                    name: name.trim().to_string(),
                    classes,
                })
                .map_err(|_| RamError::Config(format!("bad attribute `{t}`"))),
            None => Ok(AttributeSpec {
                name: t.to_string(),
                classes: 0,
            }),
        })
        .collect()
}
