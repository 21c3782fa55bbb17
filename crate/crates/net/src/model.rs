//! The aligner: a plain convolutional feature pyramid, hierarchical flow
//! decoders with global and local correlation, and recurrent refinement at
//! a quarter of the input resolution with convex upsampling.
//!
//! Flows are `[2, h, w]` tensors (channel 0 = dx, channel 1 = dy) in pixel
//! units of their own grid, defined on the target grid: the source sampled
//! at `p + f(p)` matches the target at `p`.

use docalign_core::{FlowField, Image};
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Initializer, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Strides of pyramid levels 1..4.
pub const STRIDES: [usize; 4] = [32, 16, 8, 4];
/// Input sides must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;
/// Coarse-to-fine upsampling factor of the refinement module.
pub const UPSAMPLE: usize = 4;
/// 16 sub-pixel positions times a 3x3 kernel.
pub const UPSAMPLE_WEIGHTS: usize = 144;
/// Gain of the He initialization of layers that emit flows or logits.
const OUTPUT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels of pyramid levels 1..4 (strides 32, 16, 8, 4).
    pub pyramid_channels: [usize; 4],
    /// Output channels of the first five decoder convolutions; the sixth
    /// emits the 2-channel residual.
    pub decoder_widths: [usize; 5],
    /// Side of the grid the level-1 reference features are resampled to
    /// before global correlation; fixes the decoder input width.
    pub global_grid: usize,
    /// Local correlation radius at levels 2 and 3.
    pub local_radius: usize,
    /// Local correlation radius inside the refinement loop.
    pub refine_radius: usize,
    pub hidden: usize,
    pub motion: usize,
    pub context: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pyramid_channels: [64, 48, 32, 16],
            decoder_widths: [128, 128, 96, 64, 32],
            global_grid: 8,
            local_radius: 9,
            refine_radius: 4,
            hidden: 96,
            motion: 64,
            context: 64,
            iterations: 7,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow variant for desk-scale training on 64x64 pairs.
    pub fn tiny() -> Self {
        Self {
            pyramid_channels: [32, 24, 16, 16],
            decoder_widths: [32, 32, 24, 16, 8],
            global_grid: 2,
            local_radius: 4,
            refine_radius: 4,
            hidden: 32,
            motion: 32,
            context: 16,
            iterations: 7,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.pyramid_channels.iter().chain(&self.decoder_widths).all(|&c| c > 0)
            && self.global_grid > 0
            && self.hidden > 0
            && self.motion > 0
            && self.context > 0;
        if !positive {
            return Err(NetError::invalid("model widths must be positive"));
        }
        Ok(())
    }

    fn corr_channels(&self, level: usize) -> usize {
        if level == 1 {
            self.global_grid * self.global_grid
        } else {
            (2 * self.local_radius + 1).pow(2)
        }
    }

    /// Input channels of each convolution of decoder `level`.
    fn decoder_inputs(&self, level: usize) -> [usize; 6] {
        let input = self.corr_channels(level) + 2;
        let w = self.decoder_widths;
        let mut out = [0; 6];
        let mut acc = input;
        for i in 0..6 {
            out[i] = if level == 1 { if i == 0 { input } else { w[i - 1] } } else { acc };
            if i < 5 {
                acc += w[i];
            }
        }
        out
    }

    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn init_params<T: Real>(&self) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut s = ParamStore::new();
        let mut init = Initializer::new(self.seed);
        let [c1, c2, c3, c4] = self.pyramid_channels;
        for (name, cin, cout) in [
            ("pyr.s4.c0", 3, c4),
            ("pyr.s4.c1", c4, c4),
            ("pyr.s3.c0", c4, c3),
            ("pyr.s3.c1", c3, c3),
            ("pyr.s2.c0", c3, c2),
            ("pyr.s2.c1", c2, c2),
            ("pyr.s1.c0", c2, c1),
            ("pyr.s1.c1", c1, c1),
        ] {
            init.conv(&mut s, name, cin, cout, 3, 1.0)?;
        }
        for level in 1..=3 {
            let ins = self.decoder_inputs(level);
            for i in 0..6 {
                let cout = if i < 5 { self.decoder_widths[i] } else { 2 };
                let gain = if i == 5 { OUTPUT_GAIN } else { 1.0 };
                init.conv(&mut s, &format!("dec{level}.c{i}"), ins[i], cout, 3, gain)?;
            }
        }
        let corr = (2 * self.refine_radius + 1).pow(2);
        let (h, m, x) = (self.hidden, self.motion, self.context);
        init.conv(&mut s, "ref.ctx", c4, x, 3, 1.0)?;
        init.conv(&mut s, "ref.h0", c4, h, 1, 1.0)?;
        init.conv(&mut s, "ref.motion", 2 + corr, m, 3, 1.0)?;
        for gate in ["gru.z", "gru.r", "gru.q"] {
            init.conv(&mut s, gate, h + x + m, h, 3, 1.0)?;
        }
        init.conv(&mut s, "fdec.c0", h, h, 3, 1.0)?;
        init.conv(&mut s, "fdec.c1", h, 2, 3, OUTPUT_GAIN)?;
        init.conv(&mut s, "wdec.c0", h + 2, h, 3, 1.0)?;
        init.conv(&mut s, "wdec.c1", h, UPSAMPLE_WEIGHTS, 1, OUTPUT_GAIN)?;
        Ok(s)
    }
}

/// A configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = config.init_params()?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.init_params::<T>()?.check_layout(&params)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    /// Saves the parameters to `path` and the configuration next to it as
    /// `path` + `.json`.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        let side = sidecar(path);
        std::fs::write(&side, serde_json::to_string_pretty(&self.config)?).map_err(|e| NetError::io(&side, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| NetError::io(&side, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        Self::from_params(config, ParamStore::load(path)?)
    }

    /// Predicted flow from `source` to `target` (same size, sides multiples
    /// of 32).
    pub fn predict(&self, source: &Image, target: &Image) -> Result<FlowField> {
        let mut g = Graph::inference(&self.params);
        let s = g.input(image_tensor(source));
        let t = g.input(image_tensor(target));
        let out = forward(&mut g, &self.config, s, t)?;
        tensor_to_flow(g.value(out.flow))
    }
}

/// Path of the configuration written next to a checkpoint.
pub fn sidecar(path: &std::path::Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// RGB planes centered on zero.
pub fn image_tensor<T: Real>(img: &Image) -> Tensor<T> {
    let rgb = img.to_rgb();
    let (h, w) = rgb.dims();
    let planar = rgb.to_planar();
    Tensor::new(vec![3, h, w], planar.iter().map(|&v| T::lit(v as f64 - 0.5)).collect()).expect("planar size")
}

pub fn flow_tensor<T: Real>(f: &FlowField) -> Tensor<T> {
    let (h, w) = f.dims();
    let (dx, dy) = f.planes();
    let data = dx.iter().chain(&dy).map(|&v| T::lit(v as f64)).collect();
    Tensor::new(vec![2, h, w], data).expect("flow size")
}

pub fn tensor_to_flow<T: Real>(t: &Tensor<T>) -> Result<FlowField> {
    let (c, h, w) = t.chw();
    if c != 2 {
        return Err(NetError::shape(format!("flow tensor has {c} channels")));
    }
    let d: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
    Ok(FlowField::from_planes(h, w, &d[..h * w], &d[h * w..])?)
}

/// Bilinear resampling of a flow tensor with displacement rescaling, the
/// graph-free twin of the resize used inside the model.
pub fn resize_flow_tensor<T: Real>(f: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let (_, h, w) = f.chw();
    let x = g.input(f.clone());
    let r = g.resize(x, oh, ow, &[T::lit(ow as f64 / w as f64), T::lit(oh as f64 / h as f64)])?;
    Ok(g.value(r).clone())
}

pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(NetError::shape(format!(
            "input is {h}x{w}; both sides must be positive multiples of {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}

fn conv<T: Real>(g: &mut Graph<T>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let k = g.value(w).shape()[2];
    g.conv(x, w, Some(b), stride, k / 2)
}

fn conv_relu<T: Real>(g: &mut Graph<T>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(g, name, x, stride)?;
    Ok(g.relu(y))
}

/// Features `[X1, X2, X3, X4]` at strides 32, 16, 8, 4 of a `[3, H, W]`
/// image tensor. Each stage is two 3x3 convolutions, the first with stride
/// 2; a level is the second convolution before its ReLU, so features are
/// signed and their cosine correlations discriminative.
pub fn extract_pyramid<T: Real>(g: &mut Graph<T>, image: Var) -> Result<[Var; 4]> {
    let (_, h, w) = g.value(image).chw();
    check_input_dims(h, w)?;
    let mut x = image;
    let mut levels = Vec::with_capacity(4);
    for (stage, second_stride) in [("s4", 2), ("s3", 1), ("s2", 1), ("s1", 1)] {
        if stage != "s4" {
            x = g.relu(x);
        }
        x = conv_relu(g, &format!("pyr.{stage}.c0"), x, 2)?;
        x = conv(g, &format!("pyr.{stage}.c1"), x, second_stride)?;
        levels.push(x);
    }
    Ok([levels[3], levels[2], levels[1], levels[0]])
}

/// Decoder of `level` (1..=3) on `input = [correlation, up(f_{l-1})]`.
/// Levels 2 and 3 feed every convolution the block input and all previous
/// outputs; level 1 is a plain chain.
pub fn flow_decoder<T: Real>(g: &mut Graph<T>, level: usize, input: Var) -> Result<Var> {
    let mut outputs = vec![input];
    let mut x = input;
    for i in 0..6 {
        let inp = if level == 1 { x } else { g.concat(&outputs)? };
        let y = conv(g, &format!("dec{level}.c{i}"), inp, 1)?;
        x = if i < 5 { g.relu(y) } else { y };
        outputs.push(x);
    }
    Ok(x)
}

fn upsample_flow<T: Real>(g: &mut Graph<T>, f: Var, oh: usize, ow: usize) -> Result<Var> {
    let (_, h, w) = g.value(f).chw();
    g.resize(f, oh, ow, &[T::lit(ow as f64 / w as f64), T::lit(oh as f64 / h as f64)])
}

/// Flows `[f1, f2, f3]` at strides 32, 16, 8.
pub fn hierarchical_align<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, src: &[Var; 4], tgt: &[Var; 4]) -> Result<[Var; 3]> {
    let mut flows: Vec<Var> = Vec::with_capacity(3);
    for level in 1..=3 {
        let (_, h, w) = g.value(tgt[level - 1]).chw();
        let up = match flows.last() {
            None => g.input(Tensor::zeros(&[2, h, w])),
            Some(&prev) => upsample_flow(g, prev, h, w)?,
        };
        let warped = g.warp(src[level - 1], up, false)?;
        let query = g.l2_norm(tgt[level - 1])?;
        let corr = if level == 1 {
            let n = cfg.global_grid;
            let r = g.resize(warped, n, n, &[T::one()])?;
            let r = g.l2_norm(r)?;
            g.global_corr(r, query)?
        } else {
            let r = g.l2_norm(warped)?;
            g.local_corr(r, query, cfg.local_radius)?
        };
        let input = g.concat(&[corr, up])?;
        let residual = flow_decoder(g, level, input)?;
        flows.push(g.add(up, residual)?);
    }
    Ok([flows[0], flows[1], flows[2]])
}

/// Standard convolutional GRU:
/// `z = s(W_z [h, x])`, `r = s(W_r [h, x])`, `q = tanh(W_q [r*h, x])`,
/// `h' = (1 - z) * h + z * q`.
pub fn convgru_cell<T: Real>(g: &mut Graph<T>, x: Var, h: Var) -> Result<Var> {
    let hx = g.concat(&[h, x])?;
    let z = conv(g, "gru.z", hx, 1)?;
    let z = g.sigmoid(z);
    let r = conv(g, "gru.r", hx, 1)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h)?;
    let rhx = g.concat(&[rh, x])?;
    let q = conv(g, "gru.q", rhx, 1)?;
    let q = g.tanh(q);
    let keep = g.affine(z, -T::one(), T::one());
    let a = g.mul(keep, h)?;
    let b = g.mul(z, q)?;
    g.add(a, b)
}

/// Checks that `weights` holds normalized 3x3 kernels and upsamples.
/// Fine pixel `(4Y + a, 4X + b)` is the weighted sum over the coarse 3x3
/// neighborhood of `(Y, X)` (replicate padded) of `4 * residual`, using the
/// kernel in channels `(4a + b) * 9 .. + 9`.
pub fn convex_upsample<T: Real>(residual: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = weights.chw();
    if c != UPSAMPLE_WEIGHTS {
        return Err(NetError::shape(format!("upsample weights have {c} channels, need 144")));
    }
    let n = h * w;
    let tol = T::lit(1e-4);
    for grp in 0..16 {
        for p in 0..n {
            let mut s = T::zero();
            for k in 0..9 {
                let v = weights.data()[(grp * 9 + k) * n + p];
                if v < T::zero() {
                    return Err(NetError::invalid(format!("negative upsample weight at kernel {grp}, pixel {p}")));
                }
                s = s + v;
            }
            if (s - T::one()).abs() > tol {
                return Err(NetError::invalid(format!("upsample kernel {grp} at pixel {p} sums to {:?}", s)));
            }
        }
    }
    convex_upsample_values(residual, weights)
}

pub(crate) fn convex_upsample_values<T: Real>(residual: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (fc, h, w) = residual.chw();
    if weights.shape() != [UPSAMPLE_WEIGHTS, h, w] {
        return Err(NetError::shape(format!("upsample weights {:?} for {h}x{w} residual", weights.shape())));
    }
    let n = h * w;
    let (fh, fw) = (UPSAMPLE * h, UPSAMPLE * w);
    let (f, wv) = (residual.data(), weights.data());
    let four = T::lit(UPSAMPLE as f64);
    let mut out = vec![T::zero(); fc * fh * fw];
    for yy in 0..h {
        for xx in 0..w {
            let p = yy * w + xx;
            let mut nb = [0usize; 9];
            for (k, q) in nb.iter_mut().enumerate() {
                let (dy, dx) = ((k / 3) as i64 - 1, (k % 3) as i64 - 1);
                let ny = (yy as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let nx = (xx as i64 + dx).clamp(0, w as i64 - 1) as usize;
                *q = ny * w + nx;
            }
            for a in 0..UPSAMPLE {
                for b in 0..UPSAMPLE {
                    let pos = a * UPSAMPLE + b;
                    let o = (UPSAMPLE * yy + a) * fw + UPSAMPLE * xx + b;
                    for ci in 0..fc {
                        let mut v = T::zero();
                        for (k, &q) in nb.iter().enumerate() {
                            v = v + wv[(pos * 9 + k) * n + p] * (four * f[ci * n + q]);
                        }
                        out[ci * fh * fw + o] = v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![fc, fh, fw], out)
}

/// One refinement iteration's intermediates.
#[derive(Debug, Clone, Copy)]
pub struct RefineStep {
    pub hidden: Var,
    pub coarse_residual: Var,
    pub weights: Var,
    pub flow: Var,
}

/// Recurrent refinement of a full-resolution flow using the stride-4
/// features. Returns one entry per iteration.
pub fn refine_recurrent<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    f_init: Var,
    x4s: Var,
    x4t: Var,
    iterations: usize,
) -> Result<Vec<RefineStep>> {
    let (_, h4, w4) = g.value(x4s).chw();
    let (_, fh, fw) = g.value(f_init).chw();
    if (fh, fw) != (UPSAMPLE * h4, UPSAMPLE * w4) {
        return Err(NetError::shape(format!("flow {fh}x{fw} for {h4}x{w4} stride-4 features")));
    }
    let ctx = conv_relu(g, "ref.ctx", x4s, 1)?;
    let h0 = conv(g, "ref.h0", x4s, 1)?;
    let mut h = g.tanh(h0);
    let query = g.l2_norm(x4t)?;
    let mut f = f_init;
    let mut steps = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let down = g.resize(f, h4, w4, &[T::lit(w4 as f64 / fw as f64), T::lit(h4 as f64 / fh as f64)])?;
        let warped = g.warp(x4s, down, false)?;
        let reference = g.l2_norm(warped)?;
        let corr = g.local_corr(reference, query, cfg.refine_radius)?;
        let mi = g.concat(&[down, corr])?;
        let motion = conv_relu(g, "ref.motion", mi, 1)?;
        let x = g.concat(&[ctx, motion])?;
        h = convgru_cell(g, x, h)?;
        let d = conv_relu(g, "fdec.c0", h, 1)?;
        let coarse = conv(g, "fdec.c1", d, 1)?;
        let wi = g.concat(&[coarse, h])?;
        let wh = conv_relu(g, "wdec.c0", wi, 1)?;
        let logits = conv(g, "wdec.c1", wh, 1)?;
        let weights = g.softmax9(logits)?;
        let delta = g.convex_upsample(coarse, weights)?;
        f = g.add(f, delta)?;
        steps.push(RefineStep { hidden: h, coarse_residual: coarse, weights, flow: f });
    }
    Ok(steps)
}

/// Everything the losses need from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Hierarchical flows at strides 32, 16, 8.
    pub levels: [Var; 3],
    /// Upsampled `f3`, the refinement's starting point.
    pub initial: Var,
    /// Flow after each refinement iteration.
    pub iterations: Vec<Var>,
    /// Final full-resolution flow.
    pub flow: Var,
}

/// Full model on `[3, H, W]` source and target tensors.
pub fn forward<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, source: Var, target: Var) -> Result<ForwardOutput> {
    let (cs, hs, ws) = g.value(source).chw();
    let (ct, ht, wt) = g.value(target).chw();
    if (cs, hs, ws) != (ct, ht, wt) {
        return Err(NetError::shape(format!("source {cs}x{hs}x{ws} vs target {ct}x{ht}x{wt}")));
    }
    let ps = extract_pyramid(g, source)?;
    let pt = extract_pyramid(g, target)?;
    let levels = hierarchical_align(g, cfg, &ps, &pt)?;
    let initial = upsample_flow(g, levels[2], hs, ws)?;
    let steps = refine_recurrent(g, cfg, initial, ps[3], pt[3], cfg.iterations)?;
    let iterations: Vec<Var> = steps.iter().map(|s| s.flow).collect();
    let flow = iterations.last().copied().unwrap_or(initial);
    Ok(ForwardOutput { levels, initial, iterations, flow })
}
