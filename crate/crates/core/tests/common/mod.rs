#![allow(dead_code)]

use rand::Rng;
use topoguide::diffusion::{DenoiserConfig, DenoiserWeights, DiffusionModel, NoiseSchedule, ScheduleConfig};
use topoguide::field_model::{SirenConfig, SirenWeights};
use topoguide::guidance::Models;
use topoguide::latent_fit::LatentStats;
use topoguide::rng::stream_rng;

/// Small randomly initialized models with nontrivial latent statistics.
pub fn tiny_models(seed: u64, steps: usize) -> Models {
    let mut rng = stream_rng(seed, 0);
    let d = 5;
    let siren = SirenWeights::init(
        SirenConfig {
            hidden_width: 16,
            hidden_layers: 2,
            latent_dim: d,
            omega0: 3.0,
        },
        &mut rng,
    )
    .unwrap();
    let den = DenoiserWeights::init(
        DenoiserConfig {
            latent_dim: d,
            width: 24,
            blocks: 2,
            time_dim: 8,
            dropout: 0.0,
        },
        &mut rng,
    )
    .unwrap();
    let schedule = NoiseSchedule::new(ScheduleConfig {
        steps,
        ..ScheduleConfig::default()
    })
    .unwrap();
    let stats = LatentStats {
        mean: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        std: (0..d).map(|_| rng.random_range(0.3..1.5)).collect(),
    };
    Models::new(siren, DiffusionModel::new(den, schedule, stats).unwrap()).unwrap()
}

/// ‖a − b‖ / max(‖b‖, floor).
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(floor)
}
