//! Meta-learning of the shared network weights across a field dataset,
//! per-field latent fitting, reconstruction quality and latent statistics.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::field_model::{grid_points, LatentCode, SirenConfig, SirenWeights, VectorFieldGrid};
use crate::optim::{Adam, AdamConfig};

/// Lower bound applied to per-dimension latent standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub outer_iterations: usize,
    pub fields_per_batch: usize,
    pub points_per_field: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub seed: u64,
    /// Treat adapted latents as constants in the outer gradient.
    #[serde(default)]
    pub first_order: bool,
}

impl Default for MetaConfig {
    /// Full-scale recipe: 10k iterations of 24 fields with 16.5k points each.
    fn default() -> Self {
        Self {
            outer_iterations: 10_000,
            fields_per_batch: 24,
            points_per_field: 16_500,
            inner_steps: 3,
            inner_lr: 1e-2,
            outer_lr: 3e-6,
            seed: 0,
            first_order: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iterations == 0
            || self.fields_per_batch == 0
            || self.points_per_field == 0
            || self.inner_steps == 0
        {
            return Err(Error::invalid("meta-learning counts must be positive"));
        }
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MetaTrained {
    pub weights: SirenWeights,
    /// Mean post-adaptation reconstruction loss per outer iteration.
    pub losses: Vec<f64>,
}

/// Checks the dataset is nonempty with a shared resolution and returns that
/// resolution.
fn dataset_shape(dataset: &[VectorFieldGrid]) -> Result<(usize, usize)> {
    let first = dataset.first().ok_or_else(|| Error::invalid("empty dataset"))?;
    let shape = (first.width, first.height);
    if dataset.iter().any(|g| (g.width, g.height) != shape) {
        return Err(Error::invalid("dataset grids must share a resolution"));
    }
    Ok(shape)
}

pub fn meta_train(dataset: &[VectorFieldGrid], cfg: &MetaConfig, scfg: SirenConfig) -> Result<MetaTrained> {
    meta_train_with(dataset, cfg, scfg, |_, _| {})
}

/// [`meta_train`] with a callback invoked after every outer iteration with
/// `(iteration, loss)`.
pub fn meta_train_with(
    dataset: &[VectorFieldGrid],
    cfg: &MetaConfig,
    scfg: SirenConfig,
    mut observe: impl FnMut(usize, f64),
) -> Result<MetaTrained> {
    cfg.validate()?;
    let (width, height) = dataset_shape(dataset)?;
    let centers = grid_points(width, height);
    let targets: Vec<Array2<f64>> = dataset.iter().map(VectorFieldGrid::as_matrix).collect();
    let n_points = width * height;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = SirenWeights::init(scfg, &mut rng)?;
    let sizes: Vec<usize> = weights.tensors().iter().map(|(_, _, t)| t.len()).collect();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.outer_lr), &sizes);
    let batch = cfg.fields_per_batch.min(dataset.len());
    let per_field = cfg.points_per_field.min(n_points);

    let mut losses = Vec::with_capacity(cfg.outer_iterations);
    for iteration in 0..cfg.outer_iterations {
        let fields = index::sample(&mut rng, dataset.len(), batch);
        let mut total = SirenWeights::zeros(scfg);
        let mut loss = 0.0;
        for f in fields.iter() {
            let idx = index::sample(&mut rng, n_points, per_field).into_vec();
            let pts = centers.select(Axis(0), &idx);
            let tgt = targets[f].select(Axis(0), &idx);
            let (l, g, _) =
                weights.meta_loss_and_grads(&pts, &tgt, cfg.inner_steps, cfg.inner_lr, cfg.first_order)?;
            loss += l;
            total.axpy(1.0, &g);
        }
        loss /= batch as f64;
        if !loss.is_finite() || !total.squared_norm().is_finite() {
            return Err(Error::Divergence { iteration, loss });
        }
        let scale = 1.0 / batch as f64;
        let grads: Vec<Vec<f64>> = total
            .tensors()
            .iter()
            .map(|(_, _, t)| t.iter().map(|v| v * scale).collect())
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        opt.step(weights.tensors_mut(), &grad_refs);
        losses.push(loss);
        observe(iteration, loss);
    }
    Ok(MetaTrained { weights, losses })
}

/// Result of fitting one field.
#[derive(Debug, Clone)]
pub struct LatentFit {
    pub code: LatentCode,
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Gradient descent on the latent from zero over every grid cell. A step
/// that would increase the loss is retried with half the step size, so the
/// final loss never exceeds the initial one.
pub fn fit_latent(w: &SirenWeights, field: &VectorFieldGrid, steps: usize, lr: f64) -> Result<LatentCode> {
    Ok(fit_latent_report(w, field, steps, lr)?.code)
}

pub fn fit_latent_report(w: &SirenWeights, field: &VectorFieldGrid, steps: usize, lr: f64) -> Result<LatentFit> {
    if steps == 0 {
        return Err(Error::invalid("fit_latent needs at least one step"));
    }
    if !(lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let pts = field.centers();
    let tgt = field.as_matrix();
    let mut z = LatentCode::zeros(w.latent_dim());
    let mut cur = w.loss_and_grads(&z, &pts, &tgt, false)?;
    if !cur.loss.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            loss: cur.loss,
        });
    }
    let initial_mse = cur.loss;
    let mut step = lr;
    'outer: for _ in 0..steps {
        loop {
            let cand = LatentCode(z.0.iter().zip(&cur.latent).map(|(a, g)| a - step * g).collect());
            let next = w.loss_and_grads(&cand, &pts, &tgt, false)?;
            if next.loss.is_finite() && next.loss <= cur.loss {
                z = cand;
                cur = next;
                break;
            }
            step *= 0.5;
            if step < lr * 1e-9 {
                break 'outer;
            }
        }
    }
    Ok(LatentFit {
        code: z,
        initial_mse,
        final_mse: cur.loss,
    })
}

pub fn mse(a: &VectorFieldGrid, b: &VectorFieldGrid) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape("grids differ in resolution"));
    }
    let n = a.values.len() as f64;
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio in dB; identical grids give `+inf`.
pub fn psnr(a: &VectorFieldGrid, b: &VectorFieldGrid, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::invalid("data range must be positive"));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(psnr_from_mse(m, data_range))
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    10.0 * (data_range * data_range / mse).log10()
}

/// Global max minus min over every scalar component of the dataset.
pub fn data_range(fields: &[VectorFieldGrid]) -> f64 {
    let (lo, hi) = fields
        .iter()
        .flat_map(|g| g.values.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, z: &LatentCode) -> Vec<f64> {
        z.0.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, n: &[f64]) -> LatentCode {
        LatentCode(
            n.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| v * s + m)
                .collect(),
        )
    }

    /// Content fingerprint (FNV-1a over the bit patterns), used to check two
    /// latent summaries were normalized the same way.
    pub fn id(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.mean.iter().chain(&self.std) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Elementwise mean and population standard deviation, the latter floored at
/// [`STD_FLOOR`].
pub fn latent_stats(latents: &[LatentCode]) -> Result<LatentStats> {
    if latents.len() < 2 {
        return Err(Error::invalid("latent statistics need at least two latents"));
    }
    let d = latents[0].dim();
    if latents.iter().any(|z| z.dim() != d) {
        return Err(Error::shape("latents differ in dimension"));
    }
    let n = latents.len() as f64;
    let mut mean = vec![0.0; d];
    for z in latents {
        for (m, v) in mean.iter_mut().zip(&z.0) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for z in latents {
        for ((s, v), m) in var.iter_mut().zip(&z.0).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    Ok(LatentStats { mean, std })
}

/// Fitted latents with their normalization statistics and source field ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStore {
    pub latents: Vec<LatentCode>,
    pub stats: LatentStats,
    pub source_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LatentStoreMeta {
    count: usize,
    dim: usize,
    stats: LatentStats,
    source_ids: Vec<String>,
}

impl LatentStore {
    pub fn new(latents: Vec<LatentCode>, source_ids: Vec<String>) -> Result<Self> {
        if latents.len() != source_ids.len() {
            return Err(Error::shape("one source id per latent required"));
        }
        let stats = latent_stats(&latents)?;
        Ok(Self {
            latents,
            stats,
            source_ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    /// Latents normalized with the store's statistics, one per row.
    pub fn normalized(&self) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((self.latents.len(), d));
        for (i, z) in self.latents.iter().enumerate() {
            for (j, v) in self.stats.normalize(z).into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let d = self.dim();
        let flat: Vec<f64> = self.latents.iter().flat_map(|z| z.0.iter().copied()).collect();
        let meta = LatentStoreMeta {
            count: self.latents.len(),
            dim: d,
            stats: self.stats.clone(),
            source_ids: self.source_ids.clone(),
        };
        write_checkpoint(
            dir,
            stem,
            "latents",
            &meta,
            &[("latents".into(), vec![self.latents.len(), d], &flat)],
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (meta, mut map) = read_checkpoint::<LatentStoreMeta>(dir, stem, "latents")?;
        let flat = map.take("latents", &[meta.count, meta.dim])?;
        if meta.source_ids.len() != meta.count || meta.stats.dim() != meta.dim {
            return Err(Error::Header("latent store manifest is inconsistent".into()));
        }
        let latents = flat.chunks_exact(meta.dim.max(1)).map(|c| LatentCode(c.to_vec())).collect();
        Ok(Self {
            latents,
            stats: meta.stats,
            source_ids: meta.source_ids,
        })
    }
}
