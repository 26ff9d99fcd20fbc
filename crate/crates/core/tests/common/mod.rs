//! Shared helpers for the integration tests: a finite-difference gradient
//! checker, per-layer random instances, naive forward oracles and
//! brute-force retrieval metrics.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ram_core::autograd::{Graph, Var};
use ram_core::data::{Split, SyntheticDataset, SyntheticSpec};
use ram_core::eval::{FeatureTable, SampleRef};
use ram_core::model::{AttributeSpec, RamConfig};
use ram_core::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-6;
pub const INSTANCES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero (no ReLU kinks within a finite-difference step).
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values at least 0.01 apart, randomly placed (no max ties).
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        data.swap(i, j);
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn projected(g: &mut Graph, y: Var, proj: &Tensor) -> Var {
    let r = g.constant(proj.clone());
    let p = g.mul(y, r).unwrap();
    g.sum(p)
}

fn eval_scalar(inputs: &[Tensor], build: &Build, proj: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = build(&mut g, &vars);
    let s = projected(&mut g, y, proj);
    g.value(s).data()[0]
}

/// Relative error `||a - n|| / max(||a||, ||n||)` between the analytic
/// gradient of `sum(build(inputs) * R)` and its central difference, over
/// all inputs at once. `R` is a fixed random projection.
pub fn gradient_error(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars);
    let proj = uniform(&mut rng(seed ^ 0xabcdef), g.shape(y), -1.0, 1.0);
    let s = projected(&mut g, y, &proj);
    g.backward(s).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval_scalar(&work, build, &proj);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval_scalar(&work, build, &proj);
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A layer under gradient test: name and a generator of random instances
/// returning (inputs, forward builder).
pub struct LayerCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>),
}

fn conv_case(r: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>) {
    let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let k = r.random_range(1..=3);
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=1);
    let h = r.random_range(k.max(3)..=6);
    let w = r.random_range(k.max(3)..=6);
    let inputs = vec![
        uniform(r, &[n, c, h, w], -1.0, 1.0),
        uniform(r, &[o, c, k, k], -1.0, 1.0),
        uniform(r, &[o], -0.5, 0.5),
    ];
    (inputs, Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad).unwrap()))
}

fn maxpool_case(r: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>) {
    let k = r.random_range(1..=3);
    let stride = r.random_range(1..=3);
    let (n, c) = (r.random_range(1..=2), r.random_range(1..=3));
    let h = r.random_range(k..=7);
    let w = r.random_range(k..=7);
    let inputs = vec![distinct(r, &[n, c, h, w])];
    (inputs, Box::new(move |g, v| g.max_pool2d(v[0], k, stride).unwrap()))
}

fn bn_case(r: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>) {
    let n = r.random_range(2..=4);
    let c = r.random_range(1..=3);
    let h = r.random_range(1..=3);
    let w = r.random_range(2..=3);
    let inputs = vec![
        uniform(r, &[n, c, h, w], -2.0, 2.0),
        uniform(r, &[c], 0.5, 1.5),
        uniform(r, &[c], -0.5, 0.5),
    ];
    (inputs, Box::new(|g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0))
}

fn fc_case(r: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>) {
    let (n, i, o) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
    let inputs = vec![
        uniform(r, &[n, i], -1.0, 1.0),
        uniform(r, &[o, i], -1.0, 1.0),
        uniform(r, &[o], -1.0, 1.0),
    ];
    (inputs, Box::new(|g, v| g.linear(v[0], v[1], v[2]).unwrap()))
}

fn relu_case(r: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>) {
    let shape = [r.random_range(1..=3), r.random_range(1..=5)];
    (vec![away_from_zero(r, &shape)], Box::new(|g, v| g.relu(v[0])))
}

fn softmax_ce_case(r: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>) {
    let (n, c) = (r.random_range(1..=5), r.random_range(2..=6));
    let mut labels: Vec<Option<usize>> = (0..n)
        .map(|_| r.random_bool(0.8).then(|| r.random_range(0..c)))
        .collect();
    labels[0] = Some(r.random_range(0..c));
    let inputs = vec![uniform(r, &[n, c], -3.0, 3.0)];
    (inputs, Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap()))
}

pub const LAYERS: [LayerCase; 6] = [
    LayerCase { name: "conv", make: conv_case },
    LayerCase { name: "maxpool", make: maxpool_case },
    LayerCase { name: "batchnorm-train", make: bn_case },
    LayerCase { name: "fc", make: fc_case },
    LayerCase { name: "relu", make: relu_case },
    LayerCase { name: "softmax-ce", make: softmax_ce_case },
];

/// Worst relative error over `INSTANCES` random instances of `case`.
pub fn worst_gradient_error(case: &LayerCase, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..INSTANCES)
        .map(|i| {
            let (inputs, build) = (case.make)(&mut r);
            gradient_error(&inputs, build.as_ref(), seed.wrapping_add(i as u64))
        })
        .fold(0.0, f64::max)
}

// Naive forward oracles, written straight from the definitions.

pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[oi];
                    for ci in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.get(&[ni, ci, iy as usize, ix as usize])
                                    * w.get(&[oi, ci, dy, dx]);
                            }
                        }
                    }
                    let off = out.offset(&[ni, oi, y, xx]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

pub fn naive_maxpool(x: &Tensor, k: usize, stride: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..k {
                        for dx in 0..k {
                            best = best.max(x.get(&[ni, ci, y * stride + dy, xx * stride + dx]));
                        }
                    }
                    let off = out.offset(&[ni, ci, y, xx]);
                    out.data_mut()[off] = best;
                }
            }
        }
    }
    out
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let off = out.offset(&[i, j]);
            out.data_mut()[off] = (0..k).map(|p| a.get(&[i, p]) * b.get(&[p, j])).sum();
        }
    }
    out
}

/// `-ln(softmax(z)_label)` averaged over labelled rows, without max-shifting.
pub fn naive_softmax_ce(z: &Tensor, labels: &[Option<usize>]) -> f64 {
    let c = z.shape()[1];
    let mut total = 0.0;
    let mut count = 0;
    for (r, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            let row = &z.data()[r * c..(r + 1) * c];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[*l].exp() / denom).ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

// Brute-force retrieval oracles.

/// Precision at each positive position, recounted from scratch.
pub fn brute_ap(flags: &[bool]) -> f64 {
    let positives = flags.iter().filter(|&&f| f).count();
    let mut sum = 0.0;
    for i in 0..flags.len() {
        if flags[i] {
            let hits = flags[..=i].iter().filter(|&&f| f).count();
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / positives as f64
}

/// Gallery order by true Euclidean distance, ties to the lower index,
/// via a selection sort.
pub fn brute_order(q: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let dist = |g: &Vec<f64>| q.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let d: Vec<f64> = gallery.iter().map(dist).collect();
    let mut remaining: Vec<usize> = (0..gallery.len()).collect();
    let mut order = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for p in 1..remaining.len() {
            if d[remaining[p]] < d[remaining[best]] {
                best = p;
            }
        }
        order.push(remaining.remove(best));
    }
    order
}

/// First-match scan over each query's flags.
pub fn brute_cmc(all_flags: &[Vec<bool>], k_max: usize) -> Vec<f64> {
    let valid: Vec<&Vec<bool>> = all_flags.iter().filter(|f| f.contains(&true)).collect();
    (1..=k_max)
        .map(|k| {
            let hits = valid.iter().filter(|f| f.iter().take(k).any(|&x| x)).count();
            hits as f64 / valid.len() as f64
        })
        .collect()
}

pub fn table(ids: &[u64], features: &[Vec<f64>], split: Split) -> FeatureTable {
    let mut t = FeatureTable::new(features[0].len());
    for (i, (&id, f)) in ids.iter().zip(features).enumerate() {
        let s = SampleRef {
            image_path: format!("{i}.ppm"),
            vehicle_id: id,
            camera_id: None,
            split,
        };
        t.push(s, f).unwrap();
    }
    t
}

/// Model config sized for a synthetic dataset.
pub fn model_config_for(ds: &SyntheticDataset, seed: u64) -> RamConfig {
    let m = ds.manifest().unwrap();
    RamConfig {
        num_ids: m.num_train_ids(),
        init_seed: seed,
        attributes: vec![
            AttributeSpec { name: "color".into(), classes: m.colors.len() },
            AttributeSpec { name: "type".into(), classes: m.types.len() },
        ],
        ..RamConfig::default()
    }
}

/// A small synthetic set: `ids` identities (half held out), 4 images each.
pub fn small_synthetic(ids: usize, seed: u64) -> SyntheticDataset {
    ram_core::data::generate_synthetic(&SyntheticSpec {
        num_ids: ids,
        images_per_id: 4,
        num_test_ids: ids / 2,
        queries_per_id: 1,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}
