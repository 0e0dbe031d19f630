//! Topology energies over the predicted clean latent and the guided
//! ancestral sampler.
//!
//! Each specified critical point contributes a presence term (field norm at
//! the location), optionally a type term (sigmoids of the ordered
//! eigenvalue real parts of the spatial Jacobian) and optionally a stability
//! term (sigmoid of the discriminant). The gradient of the summed energy
//! with respect to the noisy latent is added, scaled by `ω`, to the
//! predicted noise inside the guidance window.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffmath::{
    analyze_jacobian, delta_grad, eigen_real_parts_grad, sigmoid, sigmoid_grad, CriticalKind, Jacobian2, Stability,
};
use crate::diffusion::{predict_clean_from_eps, sample_batch, sample_seed, DiffusionModel};
use crate::error::{Error, Result};
use crate::field_model::{DomainPoint, HeadGradients, LatentCode, SirenWeights};

/// Minimum distance of a specified location from the domain boundary.
pub const SPEC_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPointSpec {
    pub p: DomainPoint,
    pub kind: Option<CriticalKind>,
    pub stability: Option<Stability>,
}

impl CriticalPointSpec {
    pub fn presence(x: f64, y: f64) -> Self {
        Self {
            p: DomainPoint::new(x, y),
            kind: None,
            stability: None,
        }
    }

    pub fn with_kind(mut self, kind: CriticalKind) -> Self {
        self.kind = Some(kind);
        self
    }

    pub fn with_stability(mut self, stability: Stability) -> Self {
        self.stability = Some(stability);
        self
    }

    fn validate(&self, label: &str) -> Result<()> {
        let DomainPoint { x, y } = self.p;
        for (axis, v) in [("x", x), ("y", y)] {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{label}.{axis}: {v} outside [-1, 1]")));
            }
            if v.abs() > 1.0 - SPEC_MARGIN {
                return Err(Error::invalid(format!(
                    "{label}.{axis}: {v} within {SPEC_MARGIN} of the domain boundary"
                )));
            }
        }
        if self.kind == Some(CriticalKind::Degenerate) {
            return Err(Error::invalid(format!("{label}.type: degenerate points cannot be prescribed")));
        }
        if self.stability == Some(Stability::Indeterminate) {
            return Err(Error::invalid(format!("{label}.stability: must be stable or unstable")));
        }
        if self.kind == Some(CriticalKind::Saddle) && self.stability == Some(Stability::Unstable) {
            return Err(Error::invalid(format!("{label}.stability: a saddle is always a node (stable)")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub points: Vec<CriticalPointSpec>,
}

impl TopologySpec {
    pub fn new(points: Vec<CriticalPointSpec>) -> Result<Self> {
        let spec = Self { points };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("points: at least one critical point is required"));
        }
        for (i, p) in self.points.iter().enumerate() {
            p.validate(&format!("points[{i}]"))?;
            for (j, q) in self.points[..i].iter().enumerate() {
                if p.p == q.p {
                    return Err(Error::invalid(format!("points[{i}]: same location as points[{j}]")));
                }
            }
        }
        Ok(())
    }
}

/// One point of the JSON specification document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecPointDoc {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "type", default)]
    pub kind: Option<CriticalKind>,
    #[serde(default)]
    pub stability: Option<Stability>,
}

/// JSON specification document: the points plus optional sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    pub points: Vec<SpecPointDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SpecDocument {
    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::invalid(format!("malformed specification: {e}")))
    }

    pub fn to_spec(&self) -> Result<TopologySpec> {
        TopologySpec::new(
            self.points
                .iter()
                .map(|p| CriticalPointSpec {
                    p: DomainPoint::new(p.x, p.y),
                    kind: p.kind,
                    stability: p.stability,
                })
                .collect(),
        )
    }

    pub fn from_spec(spec: &TopologySpec) -> Self {
        Self {
            points: spec
                .points
                .iter()
                .map(|p| SpecPointDoc {
                    x: p.p.x,
                    y: p.p.y,
                    kind: p.kind,
                    stability: p.stability,
                })
                .collect(),
            omega: None,
            t_start: None,
            t_end: None,
            seed: None,
        }
    }
}

/// Which sign pair a saddle target uses for the ordered eigenvalues.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaddleBetas {
    /// `(+1, −1)`: pushes the smaller real part negative and the larger
    /// positive, consistent with the sink/source conventions.
    #[default]
    Ordered,
    /// `(−1, +1)`: the opposite assignment.
    Swapped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BetaTargets {
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub beta_s: Option<f64>,
}

/// Sign targets for the type and stability energies. Minimizing
/// `σ(β·λ)` drives `λ` toward `−β·∞`.
pub fn spec_to_betas(kind: Option<CriticalKind>, stability: Option<Stability>, saddle: SaddleBetas) -> BetaTargets {
    let (beta1, beta2) = match kind {
        Some(CriticalKind::Sink) => (Some(1.0), Some(1.0)),
        Some(CriticalKind::Source) => (Some(-1.0), Some(-1.0)),
        Some(CriticalKind::Saddle) => match saddle {
            SaddleBetas::Ordered => (Some(1.0), Some(-1.0)),
            SaddleBetas::Swapped => (Some(-1.0), Some(1.0)),
        },
        Some(CriticalKind::Degenerate) | None => (None, None),
    };
    let beta_s = match stability {
        Some(Stability::Stable) => Some(-1.0),
        Some(Stability::Unstable) => Some(1.0),
        Some(Stability::Indeterminate) | None => None,
    };
    BetaTargets { beta1, beta2, beta_s }
}

/// `‖f‖` and its gradient with respect to `f` (zero at `f = 0`).
pub fn presence_energy(value: [f64; 2]) -> (f64, [f64; 2]) {
    let n = value[0].hypot(value[1]);
    if n > 0.0 {
        (n, [value[0] / n, value[1] / n])
    } else {
        (0.0, [0.0, 0.0])
    }
}

/// `σ(β₁λ₁) + σ(β₂λ₂)` over the ordered eigenvalue real parts and its
/// gradient with respect to the Jacobian entries.
pub fn type_energy(j: Jacobian2, beta1: f64, beta2: f64) -> Result<(f64, [f64; 4])> {
    let a = analyze_jacobian(j)?;
    let (g1, g2) = eigen_real_parts_grad(j);
    let e = sigmoid(beta1 * a.lam1_re) + sigmoid(beta2 * a.lam2_re);
    let s1 = beta1 * sigmoid_grad(beta1 * a.lam1_re);
    let s2 = beta2 * sigmoid_grad(beta2 * a.lam2_re);
    let mut g = [0.0; 4];
    for i in 0..4 {
        g[i] = s1 * g1[i] + s2 * g2[i];
    }
    Ok((e, g))
}

/// `σ(β_s·Δ)` and its gradient with respect to the Jacobian entries.
pub fn stability_energy(j: Jacobian2, beta_s: f64) -> Result<(f64, [f64; 4])> {
    let a = analyze_jacobian(j)?;
    let s = beta_s * sigmoid_grad(beta_s * a.delta);
    Ok((sigmoid(beta_s * a.delta), delta_grad(j).map(|v| s * v)))
}

/// Energy of one specified point given the field value and Jacobian there,
/// with head gradients for the latent pullback.
pub fn point_energy(
    value: [f64; 2],
    j: Jacobian2,
    spec: &CriticalPointSpec,
    saddle: SaddleBetas,
) -> Result<(f64, HeadGradients)> {
    let (mut e, gv) = presence_energy(value);
    let mut head = HeadGradients {
        value: gv,
        jacobian: [0.0; 4],
    };
    let betas = spec_to_betas(spec.kind, spec.stability, saddle);
    if let (Some(b1), Some(b2)) = (betas.beta1, betas.beta2) {
        let (et, gt) = type_energy(j, b1, b2)?;
        e += et;
        head.jacobian.iter_mut().zip(gt).for_each(|(h, g)| *h += g);
    }
    if let Some(bs) = betas.beta_s {
        let (es, gs) = stability_energy(j, bs)?;
        e += es;
        head.jacobian.iter_mut().zip(gs).for_each(|(h, g)| *h += g);
    }
    Ok((e, head))
}

pub fn energy_presence(w: &SirenWeights, z: &LatentCode, p: DomainPoint) -> Result<f64> {
    Ok(presence_energy(w.evaluate(z, p)?).0)
}

pub fn energy_type(w: &SirenWeights, z: &LatentCode, p: DomainPoint, beta1: f64, beta2: f64) -> Result<f64> {
    Ok(type_energy(w.spatial_jacobian(z, p)?, beta1, beta2)?.0)
}

pub fn energy_stability(w: &SirenWeights, z: &LatentCode, p: DomainPoint, beta_s: f64) -> Result<f64> {
    Ok(stability_energy(w.spatial_jacobian(z, p)?, beta_s)?.0)
}

/// Summed energy of every specified point and its gradient with respect to
/// the (denormalized) latent code.
pub fn energy_total_grad(
    w: &SirenWeights,
    z: &LatentCode,
    spec: &TopologySpec,
    saddle: SaddleBetas,
) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut grad = vec![0.0; z.dim()];
    for sp in &spec.points {
        let mut err = None;
        let (e, g) = w.value_jacobian_pullback(z, sp.p, |v, j| match point_energy(v, j, sp, saddle) {
            Ok(r) => r,
            Err(e) => {
                err = Some(e);
                (f64::NAN, HeadGradients::default())
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        total += e;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((total, grad))
}

pub fn energy_total(w: &SirenWeights, z: &LatentCode, spec: &TopologySpec, saddle: SaddleBetas) -> Result<f64> {
    let mut total = 0.0;
    for sp in &spec.points {
        let (v, j) = w.value_and_jacobian(z, sp.p)?;
        total += point_energy(v, j, sp, saddle)?.0;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f64,
    /// Guidance is applied for `t_end < t ≤ t_start`.
    pub t_start: usize,
    pub t_end: usize,
    pub full_chain: bool,
    #[serde(default)]
    pub saddle_betas: SaddleBetas,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 2.0,
            t_start: 600,
            t_end: 0,
            full_chain: true,
            saddle_betas: SaddleBetas::Ordered,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::invalid(format!("omega: {} must be finite and non-negative", self.omega)));
        }
        if !(self.t_start <= steps && self.t_start > self.t_end) {
            return Err(Error::invalid(format!(
                "guidance window needs T >= t_start > t_end >= 0 (T={steps}, t_start={}, t_end={})",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }

    pub fn in_window(&self, t: usize) -> bool {
        t > self.t_end && t <= self.t_start
    }

    /// Whether guidance changes anything at all.
    pub fn active(&self) -> bool {
        self.omega != 0.0 && self.t_start > self.t_end
    }
}

/// Trained field network and latent diffusion model used together.
#[derive(Debug, Clone)]
pub struct Models {
    pub siren: SirenWeights,
    pub diffusion: DiffusionModel,
}

impl Models {
    pub fn new(siren: SirenWeights, diffusion: DiffusionModel) -> Result<Self> {
        if siren.latent_dim() != diffusion.weights.latent_dim() {
            return Err(Error::shape("field network and denoiser disagree on the latent dimension"));
        }
        Ok(Self { siren, diffusion })
    }

    pub fn decode(&self, normalized: &[f64]) -> LatentCode {
        self.diffusion.stats.denormalize(normalized)
    }
}

/// Energy gradient with respect to each row of the noisy batch `z_t`, given
/// the denoiser's noise prediction `eps_hat` for that batch. Also returns
/// the energies at the predicted clean latents.
pub fn guidance_gradient_batch(
    z_t: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    spec: &TopologySpec,
    models: &Models,
    cfg: &GuidanceConfig,
) -> Result<(Vec<f64>, Array2<f64>)> {
    let s = &models.diffusion.schedule;
    s.check_t(t)?;
    let stats = &models.diffusion.stats;
    let mut g_hat = Array2::zeros(z_t.raw_dim());
    let mut energies = Vec::with_capacity(z_t.nrows());
    for i in 0..z_t.nrows() {
        let zh = predict_clean_from_eps(
            z_t.row(i).as_slice().expect("standard layout"),
            t,
            eps_hat.row(i).as_slice().expect("standard layout"),
            s,
        )?;
        let z = stats.denormalize(&zh);
        let (e, g) = energy_total_grad(&models.siren, &z, spec, cfg.saddle_betas)?;
        energies.push(e);
        // Chain through the denormalization z = ẑ·std + mean.
        for (j, (gv, sd)) in g.iter().zip(&stats.std).enumerate() {
            g_hat[[i, j]] = gv * sd;
        }
    }
    let ab = s.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    let grad = if cfg.full_chain {
        // ẑ = (z_t − √(1−ᾱ)·ε_θ(z_t))/√ᾱ ⇒ ∇_{z_t} = (g − √(1−ᾱ)·J_εᵀ g)/√ᾱ.
        let ts = vec![t; z_t.nrows()];
        let (_, vjp) = models.diffusion.weights.apply_vjp(z_t, &ts, &g_hat)?;
        (&g_hat - &(vjp * (1.0 - ab).sqrt())) * inv
    } else {
        g_hat * inv
    };
    Ok((energies, grad))
}

/// Energy gradient with respect to one noisy latent.
pub fn guidance_gradient(
    z_t: &[f64],
    t: usize,
    spec: &TopologySpec,
    models: &Models,
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let z = Array2::from_shape_vec((1, z_t.len()), z_t.to_vec()).map_err(|e| Error::shape(e.to_string()))?;
    let eps = models.diffusion.weights.apply_batch(&z, &[t])?;
    let (_, g) = guidance_gradient_batch(&z, t, &eps, spec, models, cfg)?;
    Ok(g.into_raw_vec_and_offset().0)
}

/// Guided noise prediction `ε̂ + ω·∇E` (plain `ε̂` outside the window).
pub fn guided_eps(
    z_t: &[f64],
    t: usize,
    spec: &TopologySpec,
    models: &Models,
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let mut eps = models.diffusion.weights.apply(z_t, t)?;
    if cfg.active() && cfg.in_window(t) {
        let g = guidance_gradient(z_t, t, spec, models, cfg)?;
        eps.iter_mut().zip(g).for_each(|(e, g)| *e += cfg.omega * g);
    }
    Ok(eps)
}

/// One guided ancestral step; `noise` must be zero at `t = 1`.
pub fn guided_step(
    z_t: &[f64],
    t: usize,
    spec: &TopologySpec,
    models: &Models,
    cfg: &GuidanceConfig,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let eps = guided_eps(z_t, t, spec, models, cfg)?;
    crate::diffusion::ddpm_step(z_t, t, &eps, noise, &models.diffusion.schedule)
}

/// Per-step record of the energy at the predicted clean latent, for
/// inspecting how guidance acts over the trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    /// `(t, energy per sample)` for every guided step.
    pub steps: Vec<(usize, Vec<f64>)>,
}

/// Guided sampling of one latent per seed (rows stepped together).
/// Returns normalized latents. With `ω = 0` or an empty window this is
/// exactly the unguided sampler.
pub fn guided_sample_batch(
    spec: &TopologySpec,
    models: &Models,
    cfg: &GuidanceConfig,
    seeds: &[u64],
    mut trace: Option<&mut EnergyTrace>,
) -> Result<Array2<f64>> {
    spec.validate()?;
    let s = &models.diffusion.schedule;
    cfg.validate(s.steps())?;
    if !cfg.active() {
        return sample_batch(&models.diffusion.weights, s, seeds, None);
    }
    let mut hook = |t: usize, z: &Array2<f64>, eps: &mut Array2<f64>| -> Result<()> {
        if !cfg.in_window(t) {
            return Ok(());
        }
        let (energies, g) = guidance_gradient_batch(z, t, eps, spec, models, cfg)?;
        eps.scaled_add(cfg.omega, &g);
        if let Some(tr) = trace.as_deref_mut() {
            tr.steps.push((t, energies));
        }
        Ok(())
    };
    sample_batch(&models.diffusion.weights, s, seeds, Some(&mut hook))
}

/// One guided draw, denormalized and ready for the field network.
pub fn guided_sample(spec: &TopologySpec, models: &Models, cfg: &GuidanceConfig, seed: u64) -> Result<LatentCode> {
    let z = guided_sample_batch(spec, models, cfg, &[sample_seed(seed, 0)], None)?;
    Ok(models.decode(z.row(0).as_slice().expect("standard layout")))
}
