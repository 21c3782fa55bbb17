//! Supervised training on synthetic triplets and self-supervised fine-tuning
//! on unlabeled pairs.
//!
//! Per-sample gradients are computed independently, optionally on several
//! threads, and always summed in sample order, so results do not depend on
//! the thread count.

use std::path::Path;

use docalign_core::filter::sobel_gradients;
use docalign_core::synth::{derive_seed, load_record, random_flow, read_manifest, warp_clean, SynthParams};
use docalign_core::{FlowField, Image};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::graph::{Graph, Var};
use crate::model::{self, flow_tensor, image_tensor, resize_flow_tensor, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One supervised example: the photo is the source, the clean page the
/// target, and the flow lives on the target grid.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub flow: Tensor<f32>,
}

impl Sample {
    pub fn new(id: &str, source: &Image, target: &Image, flow: &FlowField) -> Result<Self> {
        if source.dims() != target.dims() || flow.dims() != target.dims() {
            return Err(NetError::shape(format!(
                "{id}: source {:?}, target {:?}, flow {:?}",
                source.dims(),
                target.dims(),
                flow.dims()
            )));
        }
        let (h, w) = target.dims();
        model::check_input_dims(h, w)?;
        Ok(Self { id: id.into(), source: image_tensor(source), target: image_tensor(target), flow: flow_tensor(flow) })
    }
}

/// Dihedral relabeling of a sample. Bit 0 of `k` flips x, bit 1 flips y,
/// bit 2 transposes (square samples only). With `A` the map from new to old
/// pixel coordinates, images become `I(A p)` and the flow `A^T f(A p)`, so
/// the pair stays consistent with its flow.
pub fn dihedral(s: &Sample, k: u8) -> Result<Sample> {
    let (_, h, w) = s.target.chw();
    let transpose = k & 4 != 0;
    if transpose && h != w {
        return Err(NetError::shape(format!("transpose needs a square sample, got {h}x{w}")));
    }
    let (flip_x, flip_y) = (k & 1 != 0, k & 2 != 0);
    let src_index = |x: usize, y: usize| {
        let (mut u, mut v) = if transpose { (y, x) } else { (x, y) };
        if flip_x {
            u = w - 1 - u;
        }
        if flip_y {
            v = h - 1 - v;
        }
        v * w + u
    };
    let remap = |t: &Tensor<f32>| {
        let c = t.shape()[0];
        let mut out = vec![0.0; t.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * h + y) * w + x] = t.data()[ch * h * w + src_index(x, y)];
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    };
    let mut flow = remap(&s.flow)?;
    let n = h * w;
    let d = flow.data_mut();
    if flip_x {
        d[..n].iter_mut().for_each(|v| *v = -*v);
    }
    if flip_y {
        d[n..].iter_mut().for_each(|v| *v = -*v);
    }
    if transpose {
        let (a, b) = d.split_at_mut(n);
        a.swap_with_slice(b);
    }
    Ok(Sample { id: format!("{}#d{k}", s.id), source: remap(&s.source)?, target: remap(&s.target)?, flow })
}

/// Loads every triplet of a synthetic dataset manifest.
pub fn load_samples(manifest: &Path) -> Result<Vec<Sample>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .map(|rec| {
            let t = load_record(root, rec)?;
            Sample::new(&t.id, &t.photo, &t.clean, &t.flow)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Loss weights of the stride-32, 16 and 8 flows.
    pub level_weights: [f64; 3],
    /// Loss weight of each refinement iteration.
    pub iteration_weight: f64,
    /// Replace each drawn sample by a random dihedral relabeling of itself.
    pub augment: bool,
    pub seed: u64,
    /// Worker threads for per-sample gradients; 0 runs serially.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            decay: 0.3,
            decay_every: 30,
            batch_size: 4,
            epochs: 100,
            max_steps: None,
            level_weights: [1.0; 3],
            iteration_weight: 1.0,
            augment: false,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.decay > 0.0
            && self.decay_every > 0
            && self.batch_size > 0
            && self.epochs > 0
            && self.level_weights.iter().all(|&w| w >= 0.0)
            && self.iteration_weight >= 0.0;
        if !ok {
            return Err(NetError::invalid("training hyperparameters must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in params.tensor_mut(k).data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *p = (*p as f64 - upd) as f32;
            }
        }
    }
}

/// `Σ_l w_l L1(f_l, resize(gt)) + Σ_n w_n L1(f^n, gt)`, each term a mean
/// over its elements.
pub fn supervised_loss(g: &mut Graph<f32>, levels: &[Var], iterations: &[Var], gt: &Tensor<f32>, cfg: &TrainConfig) -> Result<Var> {
    let mut terms = Vec::with_capacity(levels.len() + iterations.len());
    for (l, &f) in levels.iter().enumerate() {
        let (_, h, w) = g.value(f).chw();
        let target = resize_flow_tensor(gt, h, w)?;
        let t = g.l1(f, &target)?;
        terms.push(g.affine(t, cfg.level_weights[l] as f32, 0.0));
    }
    for &f in iterations {
        let t = g.l1(f, gt)?;
        terms.push(g.affine(t, cfg.iteration_weight as f32, 0.0));
    }
    g.sum(&terms)
}

/// Loss and parameter gradients of one example.
pub type Evaluated = (f64, Vec<Tensor<f32>>);

fn supervised_grad(model: &Model<f32>, s: &Sample, cfg: &TrainConfig) -> Result<Evaluated> {
    let mut g = Graph::new(&model.params);
    let src = g.input(s.source.clone());
    let tgt = g.input(s.target.clone());
    let out = model::forward(&mut g, &model.config, src, tgt)?;
    let loss = supervised_loss(&mut g, &out.levels, &out.iterations, &s.flow, cfg)?;
    let value = g.value(loss).item() as f64;
    let grads = g.backward(loss)?;
    Ok((value, grads.params(&model.params)))
}

/// Runs `f` over `items`, on up to `threads` scoped workers, returning
/// results in item order.
pub fn map_ordered<I: Sync, R: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Mean loss and mean gradients, accumulated in item order.
fn reduce(results: Vec<Evaluated>) -> Evaluated {
    let n = results.len() as f32;
    let mut it = results.into_iter();
    let (mut loss, mut acc) = it.next().expect("non-empty batch");
    for (l, g) in it {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    for a in &mut acc {
        a.scale_assign(1.0 / n);
    }
    (loss / n as f64, acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Trains `model` in place and returns the per-step loss log. `on_step`
/// sees every entry, with the updated model, as it is produced.
pub fn train_supervised(
    model: &mut Model<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog, &Model<f32>),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(NetError::invalid("training set is empty"));
    }
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                return Ok(log);
            }
            let items: Vec<Sample> = batch
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    let (_, h, w) = s.target.chw();
                    if cfg.augment {
                        let k: u8 = rng.random_range(0..if h == w { 8 } else { 4 });
                        dihedral(s, k)
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<_>>()?;
            let m: &Model<f32> = model;
            let (loss, grads) = reduce(map_ordered(&items, cfg.threads, |s| supervised_grad(m, s, cfg))?);
            if !loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
                return Err(NetError::Numerical(format!("non-finite loss or gradient at epoch {epoch}, step {step}")));
            }
            adam.step(&mut model.params, &grads, lr);
            let entry = StepLog { epoch, step, loss };
            on_step(&entry, model);
            log.push(entry);
            step += 1;
        }
    }
    Ok(log)
}

/// Writes a `epoch,step,loss` CSV.
pub fn write_loss_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| NetError::io(path, std::io::Error::other(e)))?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| NetError::io(path, e))
}

/// Mean supervised metrics of `model` on `samples`.
pub fn mean_supervised_loss(model: &Model<f32>, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    let losses = map_ordered(samples, cfg.threads, |s| {
        let mut g = Graph::inference(&model.params);
        let src = g.input(s.source.clone());
        let tgt = g.input(s.target.clone());
        let out = model::forward(&mut g, &model.config, src, tgt)?;
        let l = supervised_loss(&mut g, &out.levels, &out.iterations, &s.flow, cfg)?;
        Ok(g.value(l).item() as f64)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfSupConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Flow-warped copies of the source added to each pair's mini-batch.
    pub augmentations: usize,
    /// Generator settings of the augmentation flows, rescaled to the pair
    /// size.
    pub synth: SynthParams,
    pub seed: u64,
    pub threads: usize,
}

impl Default for SelfSupConfig {
    fn default() -> Self {
        Self { lr: 1e-4, epochs: 10, augmentations: 3, synth: SynthParams::default(), seed: 0, threads: 0 }
    }
}

/// An unlabeled pair: pre-aligned source and target.
#[derive(Debug, Clone)]
pub struct Pair {
    pub source: Image,
    pub target: Image,
}

/// Sobel gradients of an image as a `[2, h, w]` tensor.
fn gradient_tensor(img: &Image) -> Tensor<f32> {
    let gm = sobel_gradients(img);
    let (h, w) = gm.dims();
    Tensor::new(vec![2, h, w], gm.to_planar()).expect("gradient size")
}

/// `mean |warp(G(source), f) - G(target)|` with `f` the model prediction.
fn alignment_loss(g: &mut Graph<f32>, cfg: &ModelConfig, source: &Image, target: &Image) -> Result<Var> {
    let src = g.input(image_tensor(source));
    let tgt = g.input(image_tensor(target));
    let out = model::forward(g, cfg, src, tgt)?;
    let gs = g.input(gradient_tensor(source));
    let warped = g.warp(gs, out.flow, true)?;
    g.l1(warped, &gradient_tensor(target))
}

/// Mean gradient-alignment loss of the model's predictions over `pairs`.
pub fn mean_alignment_loss(model: &Model<f32>, pairs: &[Pair], threads: usize) -> Result<f64> {
    let losses = map_ordered(pairs, threads, |p| {
        let mut g = Graph::inference(&model.params);
        let l = alignment_loss(&mut g, &model.config, &p.source, &p.target)?;
        Ok(g.value(l).item() as f64)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfSupReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean loss on the original pairs after each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: Vec<StepLog>,
}

/// Fine-tunes `model` on unlabeled pairs by gradient alignment. Each step
/// optimizes one pair together with `augmentations` copies whose source is
/// warped by a random generator flow.
pub fn selfsup_finetune(model: &mut Model<f32>, pairs: &[Pair], cfg: &SelfSupConfig) -> Result<SelfSupReport> {
    if pairs.is_empty() {
        return Err(NetError::invalid("no pairs to fine-tune on"));
    }
    if cfg.lr <= 0.0 || cfg.epochs == 0 {
        return Err(NetError::invalid("fine-tuning needs a positive learning rate and epoch count"));
    }
    for p in pairs {
        let (h, w) = p.target.dims();
        if p.source.dims() != (h, w) {
            return Err(NetError::shape(format!("pair source {:?} vs target {:?}", p.source.dims(), (h, w))));
        }
        model::check_input_dims(h, w)?;
    }
    let initial_loss = mean_alignment_loss(model, pairs, cfg.threads)?;
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let (mut steps, mut epoch_losses) = (Vec::new(), Vec::new());
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let p = &pairs[i];
            let (h, w) = p.target.dims();
            let synth = cfg.synth.rescaled(h.max(w));
            let mut batch = vec![p.source.clone()];
            for k in 0..cfg.augmentations {
                let seed = derive_seed(cfg.seed, step * cfg.augmentations as u64 + k as u64);
                let flow = random_flow(&synth, seed)?;
                let flow = if flow.dims() == (h, w) { flow } else { crop_flow(&flow, h, w)? };
                batch.push(warp_clean(&p.source, &flow)?);
            }
            let m: &Model<f32> = model;
            let results = map_ordered(&batch, cfg.threads, |src| {
                let mut g = Graph::new(&m.params);
                let l = alignment_loss(&mut g, &m.config, src, &p.target)?;
                let value = g.value(l).item() as f64;
                Ok((value, g.backward(l)?.params(&m.params)))
            })?;
            let (loss, grads) = reduce(results);
            if !loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
                return Err(NetError::Numerical(format!("non-finite fine-tuning loss at epoch {epoch}")));
            }
            adam.step(&mut model.params, &grads, cfg.lr);
            steps.push(StepLog { epoch, step: step as usize, loss });
            step += 1;
        }
        epoch_losses.push(mean_alignment_loss(model, pairs, cfg.threads)?);
    }
    let final_loss = *epoch_losses.last().expect("at least one epoch");
    Ok(SelfSupReport { initial_loss, final_loss, epoch_losses, steps })
}

fn crop_flow(f: &FlowField, h: usize, w: usize) -> Result<FlowField> {
    Ok(FlowField::from_fn(h, w, |x, y| f.get(x, y))?)
}
