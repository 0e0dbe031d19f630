//! Metrics — alignment with a specification, hit distance, Fréchet distance
//! between Gaussian summaries of latent sets, topology histograms — and the
//! evaluation protocols that combine sampling, extraction and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{CriticalKind, Stability};
use crate::diffusion::{sample_batch, sample_seed};
use crate::error::{Error, Result};
use crate::field_model::{DomainPoint, ModulatedField};
use crate::guidance::{guided_sample_batch, CriticalPointSpec, GuidanceConfig, Models, TopologySpec, SPEC_MARGIN};
use crate::rng::stream_rng;
use crate::topo_extract::{extract, CriticalPoint, ExtractConfig};

/// Default hit radius in normalized domain units (2% of the side length).
pub const DEFAULT_HIT_RADIUS: f64 = 0.04;
/// Side length of the normalized domain `[−1, 1]²`.
pub const DOMAIN_SIDE: f64 = 2.0;

const EIG_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `D × D`.
    pub cov: Vec<f64>,
    /// Fingerprint of the normalization the latents were expressed in.
    #[serde(default)]
    pub stats_id: Option<u64>,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

/// Sample mean and covariance (denominator `N`) of the rows of `latents`,
/// symmetrized with negative eigenvalues clamped to zero.
pub fn gaussian_summary(latents: &Array2<f64>) -> Result<GaussianSummary> {
    let (n, d) = latents.dim();
    if n < 2 {
        return Err(Error::invalid("a Gaussian summary needs at least two latents"));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latents"));
    }
    let mean = latents.mean_axis(Axis(0)).expect("non-empty");
    let centered = latents - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let eig = SymmetricEigen::new(m.clone());
    let m = if eig.eigenvalues.iter().any(|&l| l < 0.0) {
        let vals = eig.eigenvalues.map(|l| l.max(0.0));
        &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
    } else {
        m
    };
    let mut flat = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            flat.push(0.5 * (m[(i, j)] + m[(j, i)]));
        }
    }
    Ok(GaussianSummary {
        mean: mean.to_vec(),
        cov: flat,
        stats_id: None,
    })
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| if l > EIG_CLAMP { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with the trace of the product
/// root computed as `Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn frechet_distance(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64> {
    if g1.dim() != g2.dim() || g1.cov.len() != g1.dim() * g1.dim() || g2.cov.len() != g2.dim() * g2.dim() {
        return Err(Error::shape(format!("summary dimensions {} and {} differ", g1.dim(), g2.dim())));
    }
    if let (Some(a), Some(b)) = (g1.stats_id, g2.stats_id) {
        if a != b {
            return Err(Error::invalid("summaries were computed under different latent normalizations"));
        }
    }
    let mean_term: f64 = g1.mean.iter().zip(&g2.mean).map(|(a, b)| (a - b).powi(2)).sum();
    let s1 = g1.cov_matrix();
    let s2 = g2.cov_matrix();
    let r1 = sqrt_psd(&s1);
    let inner = &r1 * &s2 * &r1;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_root: f64 = eig.eigenvalues.iter().map(|&l| if l > EIG_CLAMP { l.sqrt() } else { 0.0 }).sum();
    Ok((mean_term + s1.trace() + s2.trace() - 2.0 * tr_root).max(0.0))
}

/// One evaluated sample: what was asked for and what was extracted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub spec: TopologySpec,
    pub extracted: Vec<CriticalPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub n_samples: usize,
    pub aligned_count: usize,
    pub aligned_fraction: f64,
    /// Mean and standard deviation of the hit distance over aligned samples,
    /// as a fraction of the domain side length.
    pub hit_distance_avg: f64,
    pub hit_distance_std: f64,
}

fn matches(spec: &CriticalPointSpec, cp: &CriticalPoint) -> bool {
    spec.kind.is_none_or(|k| cp.cls.kind == k) && spec.stability.is_none_or(|s| cp.cls.stability == s)
}

/// Distance from the spec location to the nearest extracted point that
/// matches its type/stability requirements, if any lies within `radius`.
pub fn point_hit(spec: &CriticalPointSpec, extracted: &[CriticalPoint], radius: f64) -> Option<f64> {
    extracted
        .iter()
        .filter(|cp| matches(spec, cp))
        .map(|cp| cp.location.distance(&spec.p))
        .filter(|&d| d <= radius)
        .min_by(f64::total_cmp)
}

/// Fraction of samples in which every specified point is matched within
/// `hit_radius`; hit distances are averaged over the points of aligned
/// samples.
pub fn alignment(results: &[SampleResult], hit_radius: f64) -> Result<AlignmentReport> {
    if results.is_empty() {
        return Err(Error::invalid("alignment needs at least one sample"));
    }
    if !(hit_radius > 0.0) {
        return Err(Error::invalid("hit radius must be positive"));
    }
    let mut aligned = 0;
    let mut dists = Vec::new();
    for r in results {
        let hits: Option<Vec<f64>> = r.spec.points.iter().map(|p| point_hit(p, &r.extracted, hit_radius)).collect();
        if let Some(h) = hits {
            aligned += 1;
            dists.extend(h.into_iter().map(|d| d / DOMAIN_SIDE));
        }
    }
    let (avg, std) = mean_std(&dists);
    Ok(AlignmentReport {
        n_samples: results.len(),
        aligned_count: aligned,
        aligned_fraction: aligned as f64 / results.len() as f64,
        hit_distance_avg: avg,
        hit_distance_std: std,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyHistogram {
    /// Counts keyed by `"kind/stability"`.
    pub by_class: BTreeMap<String, usize>,
    /// Number of fields having each total critical-point count.
    pub totals: BTreeMap<usize, usize>,
}

pub fn topology_histogram(fields: &[Vec<CriticalPoint>]) -> TopologyHistogram {
    let mut h = TopologyHistogram::default();
    for f in fields {
        *h.totals.entry(f.len()).or_default() += 1;
        for cp in f {
            *h.by_class.entry(format!("{}/{}", cp.cls.kind, cp.cls.stability)).or_default() += 1;
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Fixed locations, each sampled with many noise seeds.
    VariedNoiseFixedSpecs,
    /// One noise seed shared across many locations.
    FixedNoiseVariedLocations,
    /// Type and stability prescribed together.
    Combined,
    /// Pairs of points at decreasing separations.
    MultipointDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub n_locations: usize,
    pub n_seeds: usize,
    /// Seeds locations and noise.
    pub seed: u64,
    pub hit_radius: f64,
    pub guidance: GuidanceConfig,
    pub extract: ExtractConfig,
    /// Pair separations for the multi-point protocol.
    #[serde(default = "default_separations")]
    pub separations: Vec<f64>,
}

fn default_separations() -> Vec<f64> {
    vec![1.17, 0.78, 0.39]
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::VariedNoiseFixedSpecs,
            n_locations: 10,
            n_seeds: 20,
            seed: 0,
            hit_radius: DEFAULT_HIT_RADIUS,
            guidance: GuidanceConfig::default(),
            extract: ExtractConfig::default(),
            separations: default_separations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub specification: String,
    /// FD between the row's samples and the data latents (normalized).
    pub fd: f64,
    pub alignment: AlignmentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub config: ProtocolConfig,
    pub rows: Vec<ProtocolRow>,
}

impl ProtocolReport {
    /// Plain-text table: Specification, FD, Alignment, Hit Distance Avg/Std.
    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.specification.len()).max().unwrap_or(0).max(13);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<w$}  {:>8}  {:>9}  {:>16}  {:>16}",
            "Specification", "FD", "Alignment", "Hit Distance Avg", "Hit Distance Std"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>8.3}  {:>8.1}%  {:>15.2}%  {:>15.2}%",
                r.specification,
                r.fd,
                100.0 * r.alignment.aligned_fraction,
                100.0 * r.alignment.hit_distance_avg,
                100.0 * r.alignment.hit_distance_std
            );
        }
        s
    }
}

/// `n` random locations at least `SPEC_MARGIN` inside the domain.
pub fn random_locations(n: usize, seed: u64) -> Vec<DomainPoint> {
    let mut rng = stream_rng(seed, 1);
    let lim = 1.0 - SPEC_MARGIN;
    (0..n)
        .map(|_| DomainPoint::new(rng.random_range(-lim..lim), rng.random_range(-lim..lim)))
        .collect()
}

/// Extracts the critical points of each normalized latent (one per row).
pub fn extract_latents(models: &Models, latents: &Array2<f64>, cfg: &ExtractConfig) -> Result<Vec<Vec<CriticalPoint>>> {
    latents
        .rows()
        .into_iter()
        .map(|row| {
            let z = models.decode(row.as_slice().expect("standard layout"));
            extract(&ModulatedField::new(&models.siren, &z)?, cfg)
        })
        .collect()
}

/// Summary of normalized latents tagged with the model's normalization.
pub fn latent_summary(models: &Models, latents: &Array2<f64>) -> Result<GaussianSummary> {
    let mut g = gaussian_summary(latents)?;
    g.stats_id = Some(models.diffusion.stats.id());
    Ok(g)
}

struct RowPlan {
    label: String,
    /// `(spec, seeds)` groups; `None` spec means unguided draws evaluated
    /// against the presence spec of each location.
    groups: Vec<(TopologySpec, Vec<u64>)>,
    guided: bool,
}

fn point(p: DomainPoint, kind: Option<CriticalKind>, stability: Option<Stability>) -> CriticalPointSpec {
    CriticalPointSpec { p, kind, stability }
}

fn label(kind: Option<CriticalKind>, stability: Option<Stability>) -> String {
    match (kind, stability) {
        (None, None) => "Presence".into(),
        (Some(k), None) => capitalize(&k.to_string()),
        (None, Some(s)) => capitalize(&s.to_string()),
        (Some(k), Some(s)) => format!("{} + {}", capitalize(&s.to_string()), capitalize(&k.to_string())),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
}

/// Noise seeds of location group `g`: every (location, seed) pair draws its
/// own noise, so a row's samples are independent draws.
fn group_seeds(cfg: &ProtocolConfig, g: usize) -> Vec<u64> {
    (0..cfg.n_seeds).map(|i| sample_seed(cfg.seed, g * cfg.n_seeds + i)).collect()
}

fn plan(cfg: &ProtocolConfig) -> Result<Vec<RowPlan>> {
    let types: Vec<(Option<CriticalKind>, Option<Stability>)> = match cfg.kind {
        ProtocolKind::VariedNoiseFixedSpecs | ProtocolKind::FixedNoiseVariedLocations => vec![
            (None, None),
            (Some(CriticalKind::Sink), None),
            (Some(CriticalKind::Source), None),
            (Some(CriticalKind::Saddle), None),
        ],
        ProtocolKind::Combined => vec![
            (Some(CriticalKind::Sink), Some(Stability::Stable)),
            (Some(CriticalKind::Sink), Some(Stability::Unstable)),
            (Some(CriticalKind::Source), Some(Stability::Stable)),
            (Some(CriticalKind::Source), Some(Stability::Unstable)),
            (Some(CriticalKind::Saddle), Some(Stability::Stable)),
        ],
        ProtocolKind::MultipointDistance => Vec::new(),
    };
    let single = |locs: &[DomainPoint], seeds_for: &dyn Fn(usize) -> Vec<u64>| -> Result<Vec<RowPlan>> {
        let mut rows = vec![RowPlan {
            label: "Baseline".into(),
            groups: locs
                .iter()
                .enumerate()
                .map(|(i, &p)| Ok((TopologySpec::new(vec![point(p, None, None)])?, seeds_for(i))))
                .collect::<Result<_>>()?,
            guided: false,
        }];
        for &(k, s) in &types {
            rows.push(RowPlan {
                label: label(k, s),
                groups: locs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| Ok((TopologySpec::new(vec![point(p, k, s)])?, seeds_for(i))))
                    .collect::<Result<_>>()?,
                guided: true,
            });
        }
        Ok(rows)
    };
    match cfg.kind {
        ProtocolKind::VariedNoiseFixedSpecs | ProtocolKind::Combined => {
            let locs = random_locations(cfg.n_locations, cfg.seed);
            single(&locs, &|i| group_seeds(cfg, i))
        }
        ProtocolKind::FixedNoiseVariedLocations => {
            let locs = random_locations(cfg.n_locations * cfg.n_seeds, cfg.seed);
            single(&locs, &|_| vec![sample_seed(cfg.seed, 0)])
        }
        ProtocolKind::MultipointDistance => {
            let mut rows = Vec::new();
            let mut rng = stream_rng(cfg.seed, 2);
            let pairs = [
                (CriticalKind::Saddle, CriticalKind::Saddle),
                (CriticalKind::Sink, CriticalKind::Source),
            ];
            for &sep in &cfg.separations {
                let lim = 1.0 - SPEC_MARGIN;
                if sep >= 2.0 * lim {
                    return Err(Error::invalid(format!("separation {sep} does not fit inside the margin")));
                }
                // Horizontal pairs whose midpoint keeps both ends in range.
                let centers: Vec<DomainPoint> = (0..cfg.n_locations)
                    .map(|_| {
                        let half = sep / 2.0;
                        DomainPoint::new(rng.random_range(-(lim - half)..=(lim - half)), rng.random_range(-lim..lim))
                    })
                    .collect();
                for &(a, b) in &pairs {
                    let groups = centers
                        .iter()
                        .enumerate()
                        .map(|(g, c)| {
                            let spec = TopologySpec::new(vec![
                                point(DomainPoint::new(c.x - sep / 2.0, c.y), Some(a), None),
                                point(DomainPoint::new(c.x + sep / 2.0, c.y), Some(b), None),
                            ])?;
                            Ok((spec, group_seeds(cfg, g)))
                        })
                        .collect::<Result<_>>()?;
                    rows.push(RowPlan {
                        label: format!("{} + {} @ {sep:.2}", capitalize(&a.to_string()), capitalize(&b.to_string())),
                        groups,
                        guided: true,
                    });
                }
            }
            Ok(rows)
        }
    }
}

/// Runs a protocol: guided sampling per row, extraction, alignment against
/// the row's specifications and FD against the data latents (normalized,
/// one per row of `data`).
pub fn run_protocol(
    cfg: &ProtocolConfig,
    models: &Models,
    data: &Array2<f64>,
    mut progress: impl FnMut(&str),
) -> Result<ProtocolReport> {
    if cfg.n_locations == 0 || cfg.n_seeds == 0 {
        return Err(Error::invalid("protocol needs at least one location and one seed"));
    }
    let data_summary = latent_summary(models, data)?;
    let s = &models.diffusion.schedule;
    let mut rows = Vec::new();
    for row in plan(cfg)? {
        progress(&row.label);
        let mut results = Vec::new();
        let mut latents: Vec<Vec<f64>> = Vec::new();
        let mut unguided_cache: BTreeMap<Vec<u64>, (Array2<f64>, Vec<Vec<CriticalPoint>>)> = BTreeMap::new();
        for (spec, seeds) in &row.groups {
            let (z, extracted) = if row.guided {
                let z = guided_sample_batch(spec, models, &cfg.guidance, seeds, None)?;
                let e = extract_latents(models, &z, &cfg.extract)?;
                (z, e)
            } else {
                if !unguided_cache.contains_key(seeds) {
                    let z = sample_batch(&models.diffusion.weights, s, seeds, None)?;
                    let e = extract_latents(models, &z, &cfg.extract)?;
                    unguided_cache.insert(seeds.clone(), (z, e));
                }
                unguided_cache[seeds].clone()
            };
            for (i, ex) in extracted.into_iter().enumerate() {
                latents.push(z.row(i).to_vec());
                results.push(SampleResult {
                    spec: spec.clone(),
                    extracted: ex,
                });
            }
        }
        let report = alignment(&results, cfg.hit_radius)?;
        let row_seeds: BTreeSet<u64> = row.groups.iter().flat_map(|(_, seeds)| seeds.iter().copied()).collect();
        if !row.guided && row_seeds.len() < latents.len() {
            // Alignment pairs unguided draws with the guided rows' seeds; when
            // those repeat (fixed noise), the FD instead uses as many distinct
            // draws as the row has samples.
            let first = cfg.n_locations * cfg.n_seeds;
            let seeds: Vec<u64> = (0..latents.len()).map(|k| sample_seed(cfg.seed, first + k)).collect();
            let z = sample_batch(&models.diffusion.weights, s, &seeds, None)?;
            latents = z.rows().into_iter().map(|r| r.to_vec()).collect();
        }
        let fd = if latents.len() >= 2 {
            let d = latents[0].len();
            let flat: Vec<f64> = latents.into_iter().flatten().collect();
            let m = Array2::from_shape_vec((flat.len() / d, d), flat).map_err(|e| Error::shape(e.to_string()))?;
            frechet_distance(&latent_summary(models, &m)?, &data_summary)?
        } else {
            f64::NAN
        };
        rows.push(ProtocolRow {
            specification: row.label,
            fd,
            alignment: report,
        });
    }
    Ok(ProtocolReport {
        config: cfg.clone(),
        rows,
    })
}
