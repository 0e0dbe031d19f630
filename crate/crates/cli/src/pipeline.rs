//! Sampling shared by the command line and the HTTP service, so both
//! produce identical fields for identical inputs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use topoguide::diffusion::sample_batch;
use topoguide::field_model::{LatentCode, ModulatedField, VectorFieldGrid};
use topoguide::guidance::{guided_sample_batch, GuidanceConfig, Models, SpecDocument, TopologySpec};
use topoguide::topo_extract::{extract, CriticalPoint, ExtractConfig};
use topoguide::Result;

/// Output resolution, guidance and extraction settings of a sampling run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSettings {
    pub guidance: GuidanceConfig,
    pub resolution: usize,
    pub extract: ExtractConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub seed: u64,
    /// Latent in the diffusion model's normalized space.
    pub normalized: Vec<f64>,
    pub latent: LatentCode,
    pub grid: VectorFieldGrid,
    pub critical_points: Vec<CriticalPoint>,
}

/// Guidance settings for a specification document: explicit overrides win
/// over values in the document, which win over `base`.
pub fn resolve_guidance(
    base: GuidanceConfig,
    doc: Option<&SpecDocument>,
    omega: Option<f64>,
    t_start: Option<usize>,
    t_end: Option<usize>,
) -> GuidanceConfig {
    let mut g = base;
    if let Some(d) = doc {
        g.omega = d.omega.unwrap_or(g.omega);
        g.t_start = d.t_start.unwrap_or(g.t_start);
        g.t_end = d.t_end.unwrap_or(g.t_end);
    }
    g.omega = omega.unwrap_or(g.omega);
    g.t_start = t_start.unwrap_or(g.t_start);
    g.t_end = t_end.unwrap_or(g.t_end);
    g
}

/// One sample per seed, guided by `spec` when given, each decoded to a grid
/// and passed through critical point extraction.
pub fn draw(
    models: &Models,
    spec: Option<&TopologySpec>,
    settings: &SampleSettings,
    seeds: &[u64],
) -> Result<Vec<SampleOutput>> {
    settings.extract.validate()?;
    let z: Array2<f64> = match spec {
        Some(s) => guided_sample_batch(s, models, &settings.guidance, seeds, None)?,
        None => sample_batch(&models.diffusion.weights, &models.diffusion.schedule, seeds, None)?,
    };
    seeds
        .iter()
        .zip(z.rows())
        .map(|(&seed, row)| {
            let normalized = row.to_vec();
            let latent = models.decode(&normalized);
            let grid = models.siren.evaluate_grid(&latent, settings.resolution, settings.resolution)?;
            let critical_points = extract(&ModulatedField::new(&models.siren, &latent)?, &settings.extract)?;
            Ok(SampleOutput {
                seed,
                normalized,
                latent,
                grid,
                critical_points,
            })
        })
        .collect()
}
