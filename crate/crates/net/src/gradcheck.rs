//! Finite-difference checks of the reverse-mode gradients in double
//! precision.
//!
//! Each block is reduced to the scalar `L = sum(out * R)` with a fixed random
//! `R`. Per-element checks compare the analytic gradient with central
//! differences on a sample of entries of every input and parameter; the
//! error of a tensor is `max |a - n| / max(max |a|, max |n|)` over its
//! sampled entries. The full refinement loop is instead checked along random
//! directions in the joint parameter and input space.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::Serialize;

use crate::error::{NetError, Result};
use crate::graph::{Graph, Var};
use crate::model::{self, ModelConfig};
use crate::params::{Initializer, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const STACK_TOLERANCE: f64 = 1e-3;
/// Entries sampled per tensor.
const SAMPLES: usize = 24;
const DIRECTIONS: usize = 3;

pub const BLOCKS: [&str; 12] = [
    "conv",
    "resize",
    "warp",
    "local_corr",
    "global_corr",
    "l2_norm",
    "decoder",
    "pyramid",
    "convgru",
    "convex_upsample",
    "hierarchical",
    "refine",
];

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub block: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub tensors: Vec<TensorCheck>,
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Block {
    params: ParamStore<f64>,
    inputs: Vec<(String, Tensor<f64>)>,
    build: Build,
    directional: bool,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let d = Uniform::new(lo, hi).expect("valid range");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Small but structurally complete configuration.
fn check_config() -> ModelConfig {
    ModelConfig {
        pyramid_channels: [6, 5, 4, 4],
        decoder_widths: [6, 5, 4, 4, 3],
        global_grid: 2,
        local_radius: 2,
        refine_radius: 2,
        hidden: 6,
        motion: 5,
        context: 4,
        iterations: 2,
        seed: 11,
    }
}

/// Parameters with nonzero biases, so gates and ReLUs are not all at the
/// same operating point.
fn perturbed_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore<f64>> {
    let mut p = cfg.init_params::<f64>()?;
    for i in 0..p.len() {
        let bias = p.name(i).ends_with(".b");
        let noise = normal(rng, p.tensor(i).shape(), if bias { 0.1 } else { 0.02 });
        p.tensor_mut(i).add_assign(&noise);
    }
    Ok(p)
}

fn make_block(name: &str, seed: u64) -> Result<Block> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = check_config();
    let none = ParamStore::new();
    let block = |params, inputs, build: Build| Block { params, inputs, build, directional: false };
    Ok(match name {
        "conv" => {
            let mut p = ParamStore::new();
            Initializer::new(seed).conv(&mut p, "c", 3, 4, 3, 1.0)?;
            let b = normal(&mut rng, &[4], 0.1);
            *p.get_mut("c.b").expect("bias") = b;
            block(
                p,
                vec![("x".into(), normal(&mut rng, &[3, 7, 6], 1.0))],
                Box::new(|g, v| {
                    let w = g.param("c.w")?;
                    let b = g.param("c.b")?;
                    g.conv(v[0], w, Some(b), 2, 1)
                }),
            )
        }
        "resize" => block(
            none,
            vec![("x".into(), normal(&mut rng, &[2, 5, 4], 1.0))],
            Box::new(|g, v| g.resize(v[0], 9, 7, &[1.75, 1.8])),
        ),
        "warp" => block(
            none,
            vec![
                ("x".into(), normal(&mut rng, &[3, 6, 7], 1.0)),
                ("flow".into(), uniform(&mut rng, &[2, 6, 7], -2.3, 2.3)),
            ],
            Box::new(|g, v| g.warp(v[0], v[1], false)),
        ),
        "local_corr" => block(
            none,
            vec![("a".into(), normal(&mut rng, &[4, 5, 6], 1.0)), ("b".into(), normal(&mut rng, &[4, 5, 6], 1.0))],
            Box::new(|g, v| g.local_corr(v[0], v[1], 2)),
        ),
        "global_corr" => block(
            none,
            vec![("r".into(), normal(&mut rng, &[4, 3, 2], 1.0)), ("q".into(), normal(&mut rng, &[4, 4, 5], 1.0))],
            Box::new(|g, v| g.global_corr(v[0], v[1])),
        ),
        "l2_norm" => block(
            none,
            vec![("x".into(), normal(&mut rng, &[5, 4, 4], 1.0))],
            Box::new(|g, v| g.l2_norm(v[0])),
        ),
        "decoder" => {
            let p = perturbed_params(&cfg, &mut rng)?;
            let c2 = (2 * cfg.local_radius + 1).pow(2) + 2;
            let c1 = cfg.global_grid.pow(2) + 2;
            block(
                p,
                vec![("x2".into(), normal(&mut rng, &[c2, 4, 5], 1.0)), ("x1".into(), normal(&mut rng, &[c1, 3, 3], 1.0))],
                Box::new(|g, v| {
                    let a = model::flow_decoder(g, 2, v[0])?;
                    let b = model::flow_decoder(g, 1, v[1])?;
                    let a = g.resize(a, 3, 3, &[1.0])?;
                    g.add(a, b)
                }),
            )
        }
        "pyramid" => {
            let p = perturbed_params(&cfg, &mut rng)?;
            block(
                p,
                vec![("image".into(), uniform(&mut rng, &[3, 32, 32], -0.5, 0.5))],
                Box::new(|g, v| {
                    let x = model::extract_pyramid(g, v[0])?;
                    let a = g.resize(x[0], 8, 8, &[1.0])?;
                    let a = g.slice(a, 0, 4)?;
                    g.add(a, x[3])
                }),
            )
        }
        "convgru" => {
            let p = perturbed_params(&cfg, &mut rng)?;
            block(
                p,
                vec![
                    ("x".into(), normal(&mut rng, &[cfg.context + cfg.motion, 4, 5], 1.0)),
                    ("h".into(), uniform(&mut rng, &[cfg.hidden, 4, 5], -0.9, 0.9)),
                ],
                Box::new(|g, v| model::convgru_cell(g, v[0], v[1])),
            )
        }
        "convex_upsample" => block(
            none,
            vec![
                ("residual".into(), normal(&mut rng, &[2, 3, 4], 1.0)),
                ("logits".into(), normal(&mut rng, &[144, 3, 4], 1.0)),
            ],
            Box::new(|g, v| {
                let w = g.softmax9(v[1])?;
                g.convex_upsample(v[0], w)
            }),
        ),
        "hierarchical" => {
            let p = perturbed_params(&cfg, &mut rng)?;
            let c = cfg.pyramid_channels;
            let (s, t): (Vec<_>, Vec<_>) = [(c[0], 1), (c[1], 2), (c[2], 4), (c[3], 8)]
                .iter()
                .enumerate()
                .map(|(i, &(ch, n))| {
                    let a = (format!("src{}", i + 1), uniform(&mut rng, &[ch, n, n], 0.0, 1.0));
                    let b = (format!("tgt{}", i + 1), uniform(&mut rng, &[ch, n, n], 0.0, 1.0));
                    (a, b)
                })
                .unzip();
            let inputs = s.into_iter().chain(t).collect();
            let cfg2 = cfg.clone();
            Block {
                params: p,
                inputs,
                build: Box::new(move |g, v| {
                    let f = model::hierarchical_align(g, &cfg2, &[v[0], v[1], v[2], v[3]], &[v[4], v[5], v[6], v[7]])?;
                    let a = g.resize(f[0], 4, 4, &[1.0])?;
                    let b = g.resize(f[1], 4, 4, &[1.0])?;
                    g.sum(&[a, b, f[2]])
                }),
                directional: false,
            }
        }
        "refine" => {
            // Stride-4 features of a 32x32 input.
            let p = perturbed_params(&cfg, &mut rng)?;
            let c4 = cfg.pyramid_channels[3];
            let cfg2 = cfg.clone();
            Block {
                params: p,
                inputs: vec![
                    ("flow".into(), uniform(&mut rng, &[2, 32, 32], -3.0, 3.0)),
                    ("x4s".into(), uniform(&mut rng, &[c4, 8, 8], 0.0, 1.0)),
                    ("x4t".into(), uniform(&mut rng, &[c4, 8, 8], 0.0, 1.0)),
                ],
                build: Box::new(move |g, v| {
                    let steps = model::refine_recurrent(g, &cfg2, v[0], v[1], v[2], cfg2.iterations)?;
                    Ok(steps.last().expect("iterations > 0").flow)
                }),
                directional: true,
            }
        }
        other => return Err(NetError::invalid(format!("unknown gradcheck block {other}; known: {}", BLOCKS.join(", ")))),
    })
}

fn eval(block: &Block, params: &ParamStore<f64>, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::inference(params);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (block.build)(&mut g, &vars)?;
    let l = g.dot(out, r)?;
    Ok(g.value(l).item())
}

/// Checks one named block (see [`BLOCKS`]).
pub fn check_block(name: &str, seed: u64) -> Result<BlockReport> {
    let block = make_block(name, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let inputs: Vec<Tensor<f64>> = block.inputs.iter().map(|(_, t)| t.clone()).collect();

    let mut g = Graph::new(&block.params);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (block.build)(&mut g, &vars)?;
    let r = normal(&mut rng, g.value(out).shape(), 1.0);
    let loss = g.dot(out, &r)?;
    let grads = g.backward(loss)?;
    let input_grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let param_grads = grads.params(&block.params);
    let used = g.used_params();

    let tolerance = if block.directional { STACK_TOLERANCE } else { BLOCK_TOLERANCE };
    let tensors = if block.directional {
        directional_checks(&block, &inputs, &input_grads, &param_grads, &r, &mut rng)?
    } else {
        elementwise_checks(&block, &inputs, &input_grads, &param_grads, &used, &r, &mut rng)?
    };
    let max_rel_err = tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max);
    if !max_rel_err.is_finite() {
        return Err(NetError::Numerical(format!("gradcheck of {name} produced a non-finite error")));
    }
    Ok(BlockReport { block: name.into(), tolerance, max_rel_err, passed: max_rel_err < tolerance, tensors })
}

fn elementwise_checks(
    block: &Block,
    inputs: &[Tensor<f64>],
    input_grads: &[Tensor<f64>],
    param_grads: &[Tensor<f64>],
    used: &[usize],
    r: &Tensor<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TensorCheck>> {
    let mut out = Vec::new();
    let mut check = |name: String, len: usize, analytic: &Tensor<f64>, perturb: &mut dyn FnMut(usize, f64) -> Result<f64>| -> Result<()> {
        let idx: Vec<usize> = if len <= SAMPLES { (0..len).collect() } else { sample(rng, len, SAMPLES).into_vec() };
        let (mut err, mut scale) = (0.0f64, 0.0f64);
        for &i in &idx {
            let numeric = (perturb(i, STEP)? - perturb(i, -STEP)?) / (2.0 * STEP);
            let a = analytic.data()[i];
            err = err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let rel_err = if scale > 0.0 { err / scale } else { 0.0 };
        out.push(TensorCheck { name, checked: idx.len(), rel_err });
        Ok(())
    };
    for (k, (name, t)) in block.inputs.iter().enumerate() {
        let mut perturb = |i: usize, h: f64| {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += h;
            eval(block, &block.params, &xs, r)
        };
        check(name.clone(), t.len(), &input_grads[k], &mut perturb)?;
    }
    for &k in used {
        let mut perturb = |i: usize, h: f64| {
            let mut p = block.params.clone();
            p.tensor_mut(k).data_mut()[i] += h;
            eval(block, &p, inputs, r)
        };
        check(block.params.name(k).to_string(), block.params.tensor(k).len(), &param_grads[k], &mut perturb)?;
    }
    Ok(out)
}

fn directional_checks(
    block: &Block,
    inputs: &[Tensor<f64>],
    input_grads: &[Tensor<f64>],
    param_grads: &[Tensor<f64>],
    r: &Tensor<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TensorCheck>> {
    let mut out = Vec::new();
    for d in 0..DIRECTIONS {
        let dirs_in: Vec<Tensor<f64>> = inputs.iter().map(|t| normal(rng, t.shape(), 1.0)).collect();
        let dirs_p: Vec<Tensor<f64>> = block.params.tensors().iter().map(|t| normal(rng, t.shape(), 1.0)).collect();
        let dot = |a: &[Tensor<f64>], b: &[Tensor<f64>]| -> f64 {
            a.iter().zip(b).map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| u * v).sum::<f64>()).sum()
        };
        let analytic = dot(input_grads, &dirs_in) + dot(param_grads, &dirs_p);
        let at = |h: f64| {
            let xs: Vec<Tensor<f64>> = inputs
                .iter()
                .zip(&dirs_in)
                .map(|(t, d)| {
                    let mut t = t.clone();
                    t.data_mut().iter_mut().zip(d.data()).for_each(|(v, dv)| *v += h * dv);
                    t
                })
                .collect();
            let mut p = block.params.clone();
            for (k, dk) in dirs_p.iter().enumerate() {
                p.tensor_mut(k).data_mut().iter_mut().zip(dk.data()).for_each(|(v, dv)| *v += h * dv);
            }
            eval(block, &p, &xs, r)
        };
        let numeric = (at(STEP)? - at(-STEP)?) / (2.0 * STEP);
        let scale = analytic.abs().max(numeric.abs());
        let rel_err = if scale > 0.0 { (analytic - numeric).abs() / scale } else { 0.0 };
        out.push(TensorCheck { name: format!("direction {d}"), checked: 1, rel_err });
    }
    Ok(out)
}

/// Checks every block.
pub fn check_all(seed: u64) -> Result<Vec<BlockReport>> {
    BLOCKS.iter().map(|b| check_block(b, seed)).collect()
}
