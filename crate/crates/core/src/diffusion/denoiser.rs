//! Residual MLP noise predictor `ε_θ(z_t, t)`.
//!
//! The input is the noisy latent concatenated with a learned embedding of
//! the timestep (sinusoidal features through a two-layer SiLU head). A
//! linear layer lifts it to the model width, followed by pre-norm residual
//! blocks `x + L2(drop(silu(L1(silu(LN(x))))))` and a normalized linear
//! read-out.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub dropout: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            width: 256,
            blocks: 4,
            time_dim: 128,
            dropout: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.width == 0 || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::invalid("denoiser dims must be positive and time_dim even"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn init(out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((out, inp), |_| rng.random_range(-bound..bound)),
            b: Array1::from_shape_fn(out, |_| rng.random_range(-bound..bound)),
        }
    }

    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            w: Array2::zeros((out, inp)),
            b: Array1::zeros(out),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.w.nrows()));
        general_mat_mul(1.0, x, &self.w.t(), 0.0, &mut y);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad` (if any) and returns the
    /// gradient with respect to the input.
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: Option<&mut Linear>) -> Array2<f64> {
        if let Some(g) = grad {
            general_mat_mul(1.0, &dy.t(), x, 1.0, &mut g.w);
            g.b += &dy.sum_axis(Axis(0));
        }
        let mut dx = Array2::zeros((dy.nrows(), self.w.ncols()));
        general_mat_mul(1.0, dy, &self.w, 0.0, &mut dx);
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    fn new(width: usize) -> Self {
        Self {
            gain: Array1::ones(width),
            bias: Array1::zeros(width),
        }
    }

    fn zeros(width: usize) -> Self {
        Self {
            gain: Array1::zeros(width),
            bias: Array1::zeros(width),
        }
    }

    /// Returns `(output, normalized input, 1/std per row)`.
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * *is);
        }
        let out = &xhat * &self.gain + &self.bias;
        (out, xhat, inv)
    }

    fn backward(
        &self,
        xhat: &Array2<f64>,
        inv: &Array1<f64>,
        dy: &Array2<f64>,
        grad: Option<&mut LayerNorm>,
    ) -> Array2<f64> {
        if let Some(g) = grad {
            g.gain += &(dy * xhat).sum_axis(Axis(0));
            g.bias += &dy.sum_axis(Axis(0));
        }
        let n = dy.ncols() as f64;
        let mut dx = dy * &self.gain;
        for ((mut row, xr), is) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv) {
            let m1 = row.sum() / n;
            let m2 = row.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
            for (d, xh) in row.iter_mut().zip(xr) {
                *d = is * (*d - m1 - xh * m2);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub norm: LayerNorm,
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    pub config: DenoiserConfig,
    pub time1: Linear,
    pub time2: Linear,
    pub input: Linear,
    pub blocks: Vec<ResBlock>,
    pub out_norm: LayerNorm,
    pub out: Linear,
}

fn silu(a: f64) -> f64 {
    a * crate::diffmath::sigmoid(a)
}

fn silu_grad(a: f64) -> f64 {
    let s = crate::diffmath::sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

/// Sinusoidal features of the timestep: `[sin(t·f_i), cos(t·f_i)]` with
/// geometrically spaced `f_i = 10000^(−i/half)`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (t as f64 * f).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    out
}

struct BlockTape {
    xhat: Array2<f64>,
    inv: Array1<f64>,
    n: Array2<f64>,
    s1: Array2<f64>,
    a: Array2<f64>,
    mask: Option<Array2<f64>>,
    d: Array2<f64>,
}

struct Tape {
    feats: Array2<f64>,
    ta: Array2<f64>,
    th: Array2<f64>,
    cat: Array2<f64>,
    blocks: Vec<BlockTape>,
    out_xhat: Array2<f64>,
    out_inv: Array1<f64>,
    out_n: Array2<f64>,
    out_s: Array2<f64>,
}

impl DenoiserWeights {
    pub fn init(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, w, e) = (config.latent_dim, config.width, config.time_dim);
        Ok(Self {
            config,
            time1: Linear::init(e, e, rng),
            time2: Linear::init(e, e, rng),
            input: Linear::init(w, d + e, rng),
            blocks: (0..config.blocks)
                .map(|_| ResBlock {
                    norm: LayerNorm::new(w),
                    l1: Linear::init(w, w, rng),
                    l2: Linear::init(w, w, rng),
                })
                .collect(),
            out_norm: LayerNorm::new(w),
            out: Linear::init(d, w, rng),
        })
    }

    /// All-zero tensors of the right shapes (also the gradient accumulator).
    pub fn zeros(config: DenoiserConfig) -> Self {
        let (d, w, e) = (config.latent_dim, config.width, config.time_dim);
        Self {
            config,
            time1: Linear::zeros(e, e),
            time2: Linear::zeros(e, e),
            input: Linear::zeros(w, d + e),
            blocks: (0..config.blocks)
                .map(|_| ResBlock {
                    norm: LayerNorm::zeros(w),
                    l1: Linear::zeros(w, w),
                    l2: Linear::zeros(w, w),
                })
                .collect(),
            out_norm: LayerNorm::zeros(w),
            out: Linear::zeros(d, w),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        type Entry<'a> = (String, Vec<usize>, &'a [f64]);
        fn lin<'a>(out: &mut Vec<Entry<'a>>, name: &str, l: &'a Linear) {
            out.push((format!("{name}.weight"), l.w.shape().to_vec(), l.w.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), l.b.shape().to_vec(), l.b.as_slice().expect("standard layout")));
        }
        fn ln<'a>(out: &mut Vec<Entry<'a>>, name: &str, n: &'a LayerNorm) {
            out.push((format!("{name}.gain"), n.gain.shape().to_vec(), n.gain.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), n.bias.shape().to_vec(), n.bias.as_slice().expect("standard layout")));
        }
        let mut out = Vec::new();
        lin(&mut out, "time1", &self.time1);
        lin(&mut out, "time2", &self.time2);
        lin(&mut out, "input", &self.input);
        for (i, b) in self.blocks.iter().enumerate() {
            ln(&mut out, &format!("blocks.{i}.norm"), &b.norm);
            lin(&mut out, &format!("blocks.{i}.l1"), &b.l1);
            lin(&mut out, &format!("blocks.{i}.l2"), &b.l2);
        }
        ln(&mut out, "out_norm", &self.out_norm);
        lin(&mut out, "out", &self.out);
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn lin(l: &mut Linear) -> [&mut [f64]; 2] {
            [
                l.w.as_slice_mut().expect("standard layout"),
                l.b.as_slice_mut().expect("standard layout"),
            ]
        }
        fn ln(n: &mut LayerNorm) -> [&mut [f64]; 2] {
            [
                n.gain.as_slice_mut().expect("standard layout"),
                n.bias.as_slice_mut().expect("standard layout"),
            ]
        }
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(lin(&mut self.time1));
        out.extend(lin(&mut self.time2));
        out.extend(lin(&mut self.input));
        for b in &mut self.blocks {
            out.extend(ln(&mut b.norm));
            out.extend(lin(&mut b.l1));
            out.extend(lin(&mut b.l2));
        }
        out.extend(ln(&mut self.out_norm));
        out.extend(lin(&mut self.out));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub(crate) fn from_tensors(config: DenoiserConfig, mut take: impl FnMut(&str, &[usize]) -> Result<Vec<f64>>) -> Result<Self> {
        let mut w = Self::zeros(config);
        let names: Vec<(String, Vec<usize>)> = w.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        for ((name, shape), dst) in names.iter().zip(w.tensors_mut()) {
            dst.copy_from_slice(&take(name, shape)?);
        }
        Ok(w)
    }

    fn check(&self, z: &Array2<f64>, t: &[usize]) -> Result<()> {
        if z.ncols() != self.config.latent_dim || z.nrows() != t.len() {
            return Err(Error::shape(format!(
                "denoiser input {}x{} with {} timesteps, expected latent dim {}",
                z.nrows(),
                z.ncols(),
                t.len(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    fn forward_tape(&self, z: &Array2<f64>, t: &[usize], rng: Option<&mut dyn rand::RngCore>) -> (Array2<f64>, Tape) {
        let e = self.config.time_dim;
        let d = self.config.latent_dim;
        let bsz = z.nrows();
        let mut feats = Array2::zeros((bsz, e));
        for (mut row, &ti) in feats.rows_mut().into_iter().zip(t) {
            row.assign(&Array1::from(timestep_features(ti, e)));
        }
        let ta = self.time1.forward(&feats);
        let th = ta.mapv(silu);
        let temb = self.time2.forward(&th);
        let mut cat = Array2::zeros((bsz, d + e));
        cat.slice_mut(s![.., ..d]).assign(z);
        cat.slice_mut(s![.., d..]).assign(&temb);
        let mut x = self.input.forward(&cat);

        let p = self.config.dropout;
        let mut rng = rng;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (n, xhat, inv) = b.norm.forward(&x);
            let s1 = n.mapv(silu);
            let a = b.l1.forward(&s1);
            let s2 = a.mapv(silu);
            let (mask, dd) = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let m = Array2::from_shape_fn(s2.raw_dim(), |_| if r.random::<f64>() < p { 0.0 } else { keep });
                    let dd = &s2 * &m;
                    (Some(m), dd)
                }
                _ => (None, s2),
            };
            x += &b.l2.forward(&dd);
            blocks.push(BlockTape {
                xhat,
                inv,
                n,
                s1,
                a,
                mask,
                d: dd,
            });
        }
        let (out_n, out_xhat, out_inv) = self.out_norm.forward(&x);
        let out_s = out_n.mapv(silu);
        let y = self.out.forward(&out_s);
        (
            y,
            Tape {
                feats,
                ta,
                th,
                cat,
                blocks,
                out_xhat,
                out_inv,
                out_n,
                out_s,
            },
        )
    }

    /// Back-propagates `dy`; accumulates parameter gradients when `grad` is
    /// given and returns the gradient with respect to the latent input.
    fn backward(&self, tape: &Tape, dy: &Array2<f64>, mut grad: Option<&mut DenoiserWeights>) -> Array2<f64> {
        let d = self.config.latent_dim;
        let ds = self.out.backward(&tape.out_s, dy, grad.as_deref_mut().map(|g| &mut g.out));
        let dn = &ds * &tape.out_n.mapv(silu_grad);
        let mut dx = self
            .out_norm
            .backward(&tape.out_xhat, &tape.out_inv, &dn, grad.as_deref_mut().map(|g| &mut g.out_norm));
        for (i, (b, bt)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let mut gb = grad.as_deref_mut().map(|g| &mut g.blocks[i]);
            let dd = b.l2.backward(&bt.d, &dx, gb.as_deref_mut().map(|g| &mut g.l2));
            let ds2 = match &bt.mask {
                Some(m) => &dd * m,
                None => dd,
            };
            let da = &ds2 * &bt.a.mapv(silu_grad);
            let ds1 = b.l1.backward(&bt.s1, &da, gb.as_deref_mut().map(|g| &mut g.l1));
            let dn = &ds1 * &bt.n.mapv(silu_grad);
            dx += &b.norm.backward(&bt.xhat, &bt.inv, &dn, gb.map(|g| &mut g.norm));
        }
        let dcat = self.input.backward(&tape.cat, &dx, grad.as_deref_mut().map(|g| &mut g.input));
        if let Some(g) = grad {
            let dtemb = dcat.slice(s![.., d..]).to_owned();
            let dth = self.time2.backward(&tape.th, &dtemb, Some(&mut g.time2));
            let dta = &dth * &tape.ta.mapv(silu_grad);
            self.time1.backward(&tape.feats, &dta, Some(&mut g.time1));
        }
        dcat.slice(s![.., ..d]).to_owned()
    }

    /// Predicted noise for a batch of latents (one per row), inference mode.
    pub fn apply_batch(&self, z: &Array2<f64>, t: &[usize]) -> Result<Array2<f64>> {
        self.check(z, t)?;
        Ok(self.forward_tape(z, t, None).0)
    }

    pub fn apply(&self, z: &[f64], t: usize) -> Result<Vec<f64>> {
        let zb = Array2::from_shape_vec((1, z.len()), z.to_vec()).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.apply_batch(&zb, &[t])?.into_raw_vec_and_offset().0)
    }

    /// Prediction and the vector-Jacobian product `(∂ε̂/∂z)ᵀ · cot` per row.
    pub fn apply_vjp(&self, z: &Array2<f64>, t: &[usize], cot: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check(z, t)?;
        if cot.raw_dim() != z.raw_dim() {
            return Err(Error::shape("cotangent must match the latent batch"));
        }
        let (y, tape) = self.forward_tape(z, t, None);
        let dz = self.backward(&tape, cot, None);
        Ok((y, dz))
    }

    /// Training-mode squared-error loss against `target` (mean over all
    /// entries) with parameter gradients; dropout masks drawn from `rng`.
    pub fn loss_and_grads(
        &self,
        z: &Array2<f64>,
        t: &[usize],
        target: &Array2<f64>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(f64, DenoiserWeights)> {
        self.check(z, t)?;
        if target.raw_dim() != z.raw_dim() {
            return Err(Error::shape("target must match the latent batch"));
        }
        let (y, tape) = self.forward_tape(z, t, Some(rng));
        let diff = &y - target;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let dy = diff * (2.0 / n);
        let mut grad = Self::zeros(self.config);
        self.backward(&tape, &dy, Some(&mut grad));
        Ok((loss, grad))
    }
}
