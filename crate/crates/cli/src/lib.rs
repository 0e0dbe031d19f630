//! Command-line workflow: dataset synthesis, field-network meta-learning,
//! latent fitting, denoiser training, guided sampling, extraction,
//! evaluation and the HTTP service.

pub mod pipeline;
pub mod service;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use topoguide::checkpoint::CHECKPOINT_VERSION;
use topoguide::dataset::{import_grid, read_dataset, synth_generate, write_dataset, export_grid, FieldRecord, SynthConfig, VF2D_VERSION};
use topoguide::diffmath::DEFAULT_EPS_CLASS;
use topoguide::diffusion::{sample_seed, train_denoiser_with, DdpmTrainConfig, DenoiserConfig, DiffusionModel, NoiseSchedule, ScheduleConfig};
use topoguide::evaluation::{
    alignment, frechet_distance, gaussian_summary, run_protocol, topology_histogram, ProtocolConfig, ProtocolKind,
    SampleResult, DEFAULT_HIT_RADIUS,
};
use topoguide::field_model::{LatentCode, ModulatedField, SirenConfig};
use topoguide::guidance::{GuidanceConfig, Models, SaddleBetas, SpecDocument, TopologySpec};
use topoguide::latent_fit::{data_range, fit_latent_report, meta_train_with, psnr_from_mse, LatentStore, MetaConfig};
use topoguide::run_dir::RunDirectory;
use topoguide::topo_extract::{extract, extract_grid, CriticalPoint, ExtractConfig};

use crate::pipeline::{draw, resolve_guidance, SampleSettings};

/// Exit status for invalid command lines.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for failures while executing a valid command.
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "topoguide", version, about = "Topology-guided latent diffusion for 2D vector fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset with exact critical point ground truth.
    Synth(SynthArgs),
    /// Meta-learn the shared field network on a dataset.
    TrainInr(TrainInrArgs),
    /// Fit one latent code per dataset field.
    FitLatents(FitLatentsArgs),
    /// Train the latent denoiser.
    TrainDdpm(TrainDdpmArgs),
    /// Draw (optionally guided) samples, decode and extract their topology.
    Sample(SampleArgs),
    /// Extract critical points from a gridded field or sampled latents.
    Extract(ExtractArgs),
    /// Compute metrics over samples or run an evaluation protocol.
    Eval(EvalArgs),
    /// Serve sampling and extraction over HTTP.
    Serve(ServeArgs),
    /// Re-run a command from its config snapshot.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n_fields: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 4)]
    pub modes: usize,
    #[arg(long, default_value_t = 0.7)]
    pub decay: f64,
    #[arg(long, default_value_t = 0)]
    pub anchors: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Resolution of the dense ground-truth zero search.
    #[arg(long, default_value_t = 1024)]
    pub gt_res: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainInrArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 8)]
    pub fields_per_batch: usize,
    #[arg(long, default_value_t = 1024)]
    pub points_per_field: usize,
    #[arg(long, default_value_t = 3)]
    pub inner_steps: usize,
    #[arg(long, default_value_t = 10.0)]
    pub inner_lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub outer_lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub first_order: bool,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 30.0)]
    pub omega0: f64,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitLatentsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    /// Gradient steps per field; the default matches the meta-learned
    /// inner loop.
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 10.0)]
    pub lr: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainDdpmArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 128)]
    pub time_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_end: f64,
    #[arg(long, default_value_t = 500)]
    pub log_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaddleBetasArg {
    Ordered,
    Swapped,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ExtractOpts {
    #[arg(long, default_value_t = 256)]
    pub grid_res: usize,
    #[arg(long, default_value_t = 256)]
    pub samples_per_cell: usize,
    #[arg(long, default_value_t = 0.02)]
    pub tau: f64,
    #[arg(long, default_value_t = DEFAULT_EPS_CLASS)]
    pub eps_class: f64,
    #[arg(long, default_value_t = 0)]
    pub extract_seed: u64,
}

impl ExtractOpts {
    pub fn config(&self) -> ExtractConfig {
        ExtractConfig {
            grid_res: self.grid_res,
            samples_per_cell: self.samples_per_cell,
            norm_accept_tau: self.tau,
            eps_class: self.eps_class,
            seed: self.extract_seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GuidanceOpts {
    /// Guidance strength (overrides the specification file).
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub t_start: Option<usize>,
    #[arg(long)]
    pub t_end: Option<usize>,
    /// Treat the noise prediction as constant in the guidance gradient.
    #[arg(long)]
    pub stop_grad: bool,
    #[arg(long, value_enum, default_value_t = SaddleBetasArg::Ordered)]
    pub saddle_betas: SaddleBetasArg,
}

impl GuidanceOpts {
    fn base(&self) -> GuidanceConfig {
        GuidanceConfig {
            full_chain: !self.stop_grad,
            saddle_betas: match self.saddle_betas {
                SaddleBetasArg::Ordered => SaddleBetas::Ordered,
                SaddleBetasArg::Swapped => SaddleBetas::Swapped,
            },
            ..GuidanceConfig::default()
        }
    }

    fn resolve(&self, doc: Option<&SpecDocument>) -> GuidanceConfig {
        resolve_guidance(self.base(), doc, self.omega, self.t_start, self.t_end)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Specification files; without any, samples are unguided.
    #[arg(long)]
    pub spec: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Base seed (overrides the specification file; default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reuse the same noise seeds for every specification.
    #[arg(long)]
    pub lock_noise: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Resolution of the written field grids.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[command(flatten)]
    pub guidance: GuidanceOpts,
    #[command(flatten)]
    pub extract: ExtractOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ExtractArgs {
    /// A VF2D field file (extraction on its bilinear interpolant).
    #[arg(long, conflicts_with = "samples")]
    pub field: Option<PathBuf>,
    /// A sample directory; extraction on the decoded latents.
    #[arg(long, requires = "model")]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub extract: ExtractOpts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Fd,
    Alignment,
    Histogram,
    Protocol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolArg {
    VariedNoise,
    FixedNoise,
    Combined,
    Multipoint,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Dataset directory (histogram of its ground truth).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_HIT_RADIUS)]
    pub hit_radius: f64,
    #[arg(long, value_enum, default_value_t = ProtocolArg::VariedNoise)]
    pub protocol: ProtocolArg,
    #[arg(long, default_value_t = 10)]
    pub locations: usize,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub guidance: GuidanceOpts,
    #[command(flatten)]
    pub extract: ExtractOpts,
    /// Report path (JSON); defaults next to the inputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Port (default from TOPOGUIDE_PORT, else 8080).
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A `config.<stage>.json` snapshot written by an earlier run.
    pub snapshot: PathBuf,
}

/// Everything needed to re-run a command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub tool_version: String,
    pub checkpoint_version: u32,
    pub vf2d_version: u32,
    #[serde(flatten)]
    pub command: Command,
}

impl Snapshot {
    pub fn of(command: &Command) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_version: CHECKPOINT_VERSION,
            vf2d_version: VF2D_VERSION,
            command: command.clone(),
        }
    }
}

/// Parses `argv` and runs the command; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

pub fn execute(command: &Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => synth(command, a),
        Command::TrainInr(a) => train_inr(command, a),
        Command::FitLatents(a) => fit_latents(command, a),
        Command::TrainDdpm(a) => train_ddpm(command, a),
        Command::Sample(a) => sample(command, a),
        Command::Extract(a) => extract_cmd(command, a),
        Command::Eval(a) => eval(command, a),
        Command::Serve(a) => service::serve_blocking(a),
        Command::Replay(a) => {
            let snap: Snapshot = serde_json::from_slice(
                &fs::read(&a.snapshot).with_context(|| format!("reading {}", a.snapshot.display()))?,
            )
            .context("parsing snapshot")?;
            if matches!(snap.command, Command::Replay(_)) {
                bail!("a snapshot cannot replay another replay");
            }
            execute(&snap.command)
        }
    }
}

fn write_snapshot(dir: &Path, stage: &str, command: &Command) -> anyhow::Result<()> {
    RunDirectory::new(dir).write_snapshot(stage, &Snapshot::of(command))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        if !d.as_os_str().is_empty() {
            fs::create_dir_all(d)?;
        }
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn synth(command: &Command, a: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_fields: a.n_fields,
        resolution: a.resolution,
        n_modes: a.modes,
        amplitude_decay: a.decay,
        n_linear_anchors: a.anchors,
        seed: a.seed,
        ground_truth_res: a.gt_res,
    };
    let records = synth_generate(&cfg)?;
    write_dataset(&records, &a.out, Some(&cfg))?;
    write_snapshot(&a.out, "synth", command)?;
    let total: usize = records.iter().map(|r| r.ground_truth.as_ref().map_or(0, Vec::len)).sum();
    println!(
        "wrote {} fields to {} ({:.2} critical points per field)",
        records.len(),
        a.out.display(),
        total as f64 / records.len() as f64
    );
    Ok(())
}

fn load_grids(data: &Path) -> anyhow::Result<Vec<FieldRecord>> {
    let (_, records) = read_dataset(data).with_context(|| format!("reading dataset {}", data.display()))?;
    if records.is_empty() {
        bail!("dataset {} is empty", data.display());
    }
    Ok(records)
}

fn train_inr(command: &Command, a: &TrainInrArgs) -> anyhow::Result<()> {
    let records = load_grids(&a.data)?;
    let grids: Vec<_> = records.into_iter().map(|r| r.grid).collect();
    let cfg = MetaConfig {
        outer_iterations: a.iterations,
        fields_per_batch: a.fields_per_batch,
        points_per_field: a.points_per_field,
        inner_steps: a.inner_steps,
        inner_lr: a.inner_lr,
        outer_lr: a.outer_lr,
        seed: a.seed,
        first_order: a.first_order,
    };
    let scfg = SirenConfig {
        hidden_width: a.width,
        hidden_layers: a.layers,
        latent_dim: a.latent_dim,
        omega0: a.omega0,
    };
    let log_every = a.log_every.max(1);
    let mut window = 0.0;
    let trained = meta_train_with(&grids, &cfg, scfg, |it, loss| {
        window += loss;
        if (it + 1) % log_every == 0 {
            eprintln!("train-inr iteration {:>6}  loss {:.6}", it + 1, window / log_every as f64);
            window = 0.0;
        }
    })?;
    let run = RunDirectory::create(&a.run)?;
    run.save_siren(&trained.weights)?;
    write_json(&a.run.join("losses.train-inr.json"), &trained.losses)?;
    write_snapshot(&a.run, "train-inr", command)?;
    println!("saved field network to {}", a.run.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FitReport {
    fields: usize,
    data_range: f64,
    mean_psnr: f64,
    min_psnr: f64,
    mean_initial_mse: f64,
    mean_final_mse: f64,
}

fn fit_latents(command: &Command, a: &FitLatentsArgs) -> anyhow::Result<()> {
    let run = RunDirectory::new(&a.run);
    let w = run.load_siren()?;
    let records = load_grids(&a.data)?;
    let grids: Vec<_> = records.iter().map(|r| r.grid.clone()).collect();
    let range = data_range(&grids);
    let mut latents = Vec::with_capacity(records.len());
    let mut ids = Vec::with_capacity(records.len());
    let (mut psnr_sum, mut psnr_min, mut init_sum, mut fin_sum) = (0.0, f64::INFINITY, 0.0, 0.0);
    for (i, rec) in records.iter().enumerate() {
        let fit = fit_latent_report(&w, &rec.grid, a.steps, a.lr)?;
        // The loss is the mean over both components, i.e. the grid MSE.
        let p = psnr_from_mse(fit.final_mse, range);
        psnr_sum += p;
        psnr_min = psnr_min.min(p);
        init_sum += fit.initial_mse;
        fin_sum += fit.final_mse;
        latents.push(fit.code);
        ids.push(rec.id.clone());
        if (i + 1) % 200 == 0 {
            eprintln!("fit-latents {}/{}  mean psnr {:.2} dB", i + 1, records.len(), psnr_sum / (i + 1) as f64);
        }
    }
    let n = records.len() as f64;
    let report = FitReport {
        fields: records.len(),
        data_range: range,
        mean_psnr: psnr_sum / n,
        min_psnr: psnr_min,
        mean_initial_mse: init_sum / n,
        mean_final_mse: fin_sum / n,
    };
    let store = LatentStore::new(latents, ids)?;
    run.save_latents(&store)?;
    write_json(&a.run.join("fit-latents.report.json"), &report)?;
    write_snapshot(&a.run, "fit-latents", command)?;
    println!(
        "fitted {} latents: mean PSNR {:.2} dB (min {:.2})",
        report.fields, report.mean_psnr, report.min_psnr
    );
    Ok(())
}

fn train_ddpm(command: &Command, a: &TrainDdpmArgs) -> anyhow::Result<()> {
    let run = RunDirectory::new(&a.run);
    let store = run.load_latents()?;
    let schedule = NoiseSchedule::new(ScheduleConfig {
        steps: a.steps,
        beta_start: a.beta_start,
        beta_end: a.beta_end,
    })?;
    let arch = DenoiserConfig {
        latent_dim: store.dim(),
        width: a.width,
        blocks: a.blocks,
        time_dim: a.time_dim,
        dropout: a.dropout,
    };
    let cfg = DdpmTrainConfig {
        iterations: a.iterations,
        batch_size: a.batch_size,
        lr: a.lr,
        clip_norm: a.clip,
        seed: a.seed,
    };
    let log_every = a.log_every.max(1);
    let mut window = 0.0;
    let trained = train_denoiser_with(&store.normalized(), &schedule, arch, &cfg, |it, loss| {
        window += loss;
        if (it + 1) % log_every == 0 {
            eprintln!("train-ddpm iteration {:>6}  loss {:.5}", it + 1, window / log_every as f64);
            window = 0.0;
        }
    })?;
    let model = DiffusionModel::new(trained.weights, schedule, store.stats.clone())?;
    run.save_denoiser(&model)?;
    write_json(&a.run.join("losses.train-ddpm.json"), &trained.losses)?;
    write_snapshot(&a.run, "train-ddpm", command)?;
    println!("saved denoiser to {}", a.run.display());
    Ok(())
}

/// One written sample, as listed in a sample directory's summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Index into `specs`, or `None` for unguided samples.
    pub spec: Option<usize>,
    pub seed: u64,
    pub file: String,
    pub critical_points_file: String,
    pub n_critical_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSummary {
    pub model: PathBuf,
    pub specs: Vec<SpecDocument>,
    /// Resolved guidance settings per specification.
    pub guidance: Vec<GuidanceConfig>,
    pub resolution: usize,
    pub extract: ExtractConfig,
    pub lock_noise: bool,
    pub samples: Vec<SampleEntry>,
}

/// Normalized latents of a sample directory, row order as in the summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleLatents {
    pub stats_id: u64,
    pub normalized: Vec<Vec<f64>>,
}

fn to_array(rows: &[Vec<f64>]) -> anyhow::Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.len() != d * rows.len() {
        bail!("ragged latent rows");
    }
    Ok(Array2::from_shape_vec((rows.len(), d), flat)?)
}

fn sample(command: &Command, a: &SampleArgs) -> anyhow::Result<()> {
    let models = RunDirectory::new(&a.model).load_models()?;
    let docs: Vec<SpecDocument> = a
        .spec
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SpecDocument::parse(&text).with_context(|| format!("in {}", p.display()))
        })
        .collect::<anyhow::Result<_>>()?;
    let specs: Vec<TopologySpec> = docs
        .iter()
        .zip(&a.spec)
        .map(|(d, p)| d.to_spec().with_context(|| format!("in {}", p.display())))
        .collect::<anyhow::Result<_>>()?;
    let extract_cfg = a.extract.config();
    fs::create_dir_all(&a.out)?;

    // (spec index, guidance) jobs; a single unguided job without specs.
    let jobs: Vec<(Option<usize>, GuidanceConfig)> = if specs.is_empty() {
        vec![(None, a.guidance.resolve(None))]
    } else {
        docs.iter().enumerate().map(|(j, d)| (Some(j), a.guidance.resolve(Some(d)))).collect()
    };
    let mut entries = Vec::new();
    let mut latents = Vec::new();
    for (job, &(j, guidance)) in jobs.iter().enumerate() {
        let base = a.seed.or(j.and_then(|j| docs[j].seed)).unwrap_or(0);
        let offset = if a.lock_noise { 0 } else { job * a.count };
        let seeds: Vec<u64> = (0..a.count).map(|i| sample_seed(base, offset + i)).collect();
        let settings = SampleSettings {
            guidance,
            resolution: a.resolution,
            extract: extract_cfg,
        };
        if let Some(j) = j {
            println!(
                "spec {j}: omega {} window ({}, {}] full_chain {}",
                guidance.omega, guidance.t_end, guidance.t_start, guidance.full_chain
            );
        }
        let outputs = draw(&models, j.map(|j| &specs[j]), &settings, &seeds)?;
        let prefix = match j {
            Some(j) if specs.len() > 1 => format!("spec{j}"),
            _ => "sample".to_string(),
        };
        for (i, out) in outputs.into_iter().enumerate() {
            let file = format!("{prefix}_{i:04}.vf2d");
            let cp_file = format!("{prefix}_{i:04}.cp.json");
            let rec = FieldRecord {
                id: file.clone(),
                grid: out.grid,
                ground_truth: None,
                analytic: None,
            };
            export_grid(&rec, &a.out.join(&file))?;
            write_json(&a.out.join(&cp_file), &out.critical_points)?;
            entries.push(SampleEntry {
                spec: j,
                seed: out.seed,
                file,
                critical_points_file: cp_file,
                n_critical_points: out.critical_points.len(),
            });
            latents.push(out.normalized);
        }
    }
    let summary = SampleSummary {
        model: a.model.clone(),
        specs: docs,
        guidance: jobs.iter().map(|j| j.1).collect(),
        resolution: a.resolution,
        extract: extract_cfg,
        lock_noise: a.lock_noise,
        samples: entries,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    write_json(
        &a.out.join("latents.json"),
        &SampleLatents {
            stats_id: models.diffusion.stats.id(),
            normalized: latents,
        },
    )?;
    write_snapshot(&a.out, "sample", command)?;
    println!("wrote {} samples to {}", summary.samples.len(), a.out.display());
    Ok(())
}

fn extract_cmd(command: &Command, a: &ExtractArgs) -> anyhow::Result<()> {
    let cfg = a.extract.config();
    let _ = command;
    if let Some(field) = &a.field {
        let rec = import_grid(field)?;
        let cps = extract_grid(&rec.grid, &cfg)?;
        write_json(&a.out, &cps)?;
        println!("{} critical points", cps.len());
        return Ok(());
    }
    let (Some(samples), Some(model)) = (&a.samples, &a.model) else {
        bail!("extract needs --field, or --samples with --model");
    };
    let models = RunDirectory::new(model).load_models()?;
    let lat: SampleLatents = read_json(&samples.join("latents.json"))?;
    check_stats(&models, lat.stats_id)?;
    let reports: Vec<Vec<CriticalPoint>> = lat
        .normalized
        .iter()
        .map(|n| {
            let z: LatentCode = models.decode(n);
            extract(&ModulatedField::new(&models.siren, &z)?, &cfg)
        })
        .collect::<topoguide::Result<_>>()?;
    write_json(&a.out, &reports)?;
    println!("extracted {} samples", reports.len());
    Ok(())
}

fn check_stats(models: &Models, stats_id: u64) -> anyhow::Result<()> {
    if models.diffusion.stats.id() != stats_id {
        bail!("samples were drawn under a different latent normalization than this model");
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FdReport {
    fd: f64,
    n_samples: usize,
    n_data: usize,
}

fn eval(command: &Command, a: &EvalArgs) -> anyhow::Result<()> {
    let _ = command;
    let need = |p: &Option<PathBuf>, what: &str| -> anyhow::Result<PathBuf> {
        p.clone().ok_or_else(|| anyhow::anyhow!("--mode {:?} needs --{what}", a.mode))
    };
    match a.mode {
        EvalMode::Fd => {
            let model = need(&a.model, "model")?;
            let samples = need(&a.samples, "samples")?;
            let run = RunDirectory::new(&model);
            let models = run.load_models()?;
            let lat: SampleLatents = read_json(&samples.join("latents.json"))?;
            check_stats(&models, lat.stats_id)?;
            let store = run.load_latents()?;
            let data = store.normalized();
            let mut g1 = gaussian_summary(&to_array(&lat.normalized)?)?;
            let mut g2 = gaussian_summary(&data)?;
            g1.stats_id = Some(lat.stats_id);
            g2.stats_id = Some(models.diffusion.stats.id());
            let report = FdReport {
                fd: frechet_distance(&g1, &g2)?,
                n_samples: lat.normalized.len(),
                n_data: data.nrows(),
            };
            println!("FD {:.4}", report.fd);
            write_json(&a.out.clone().unwrap_or_else(|| samples.join("eval.fd.json")), &report)
        }
        EvalMode::Alignment => {
            let samples = need(&a.samples, "samples")?;
            let summary: SampleSummary = read_json(&samples.join("summary.json"))?;
            let specs: Vec<TopologySpec> = summary.specs.iter().map(SpecDocument::to_spec).collect::<topoguide::Result<_>>()?;
            let mut results = Vec::new();
            for e in &summary.samples {
                let Some(j) = e.spec else { continue };
                results.push(SampleResult {
                    spec: specs[j].clone(),
                    extracted: read_json(&samples.join(&e.critical_points_file))?,
                });
            }
            let report = alignment(&results, a.hit_radius)?;
            println!(
                "alignment {:.1}% over {} samples, hit distance {:.2}% ± {:.2}%",
                100.0 * report.aligned_fraction,
                report.n_samples,
                100.0 * report.hit_distance_avg,
                100.0 * report.hit_distance_std
            );
            write_json(&a.out.clone().unwrap_or_else(|| samples.join("eval.alignment.json")), &report)
        }
        EvalMode::Histogram => {
            let (fields, default_out): (Vec<Vec<CriticalPoint>>, PathBuf) = if let Some(data) = &a.data {
                let (_, recs) = read_dataset(data)?;
                let f = recs.into_iter().map(|r| r.ground_truth.unwrap_or_default()).collect();
                (f, data.join("eval.histogram.json"))
            } else {
                let samples = need(&a.samples, "samples")?;
                let summary: SampleSummary = read_json(&samples.join("summary.json"))?;
                let f = summary
                    .samples
                    .iter()
                    .map(|e| read_json(&samples.join(&e.critical_points_file)))
                    .collect::<anyhow::Result<_>>()?;
                (f, samples.join("eval.histogram.json"))
            };
            let h = topology_histogram(&fields);
            println!("{}", serde_json::to_string_pretty(&h)?);
            write_json(&a.out.clone().unwrap_or(default_out), &h)
        }
        EvalMode::Protocol => {
            let model = need(&a.model, "model")?;
            let run = RunDirectory::new(&model);
            let models = run.load_models()?;
            let data = run.load_latents()?.normalized();
            let cfg = ProtocolConfig {
                kind: match a.protocol {
                    ProtocolArg::VariedNoise => ProtocolKind::VariedNoiseFixedSpecs,
                    ProtocolArg::FixedNoise => ProtocolKind::FixedNoiseVariedLocations,
                    ProtocolArg::Combined => ProtocolKind::Combined,
                    ProtocolArg::Multipoint => ProtocolKind::MultipointDistance,
                },
                n_locations: a.locations,
                n_seeds: a.seeds,
                seed: a.seed,
                hit_radius: a.hit_radius,
                guidance: a.guidance.resolve(None),
                extract: a.extract.config(),
                ..ProtocolConfig::default()
            };
            let report = run_protocol(&cfg, &models, &data, |row| eprintln!("protocol row: {row}"))?;
            print!("{}", report.to_table());
            let out = a.out.clone().unwrap_or_else(|| model.join(format!("eval.protocol.{:?}.json", a.protocol).to_lowercase()));
            write_json(&out, &report)?;
            fs::write(out.with_extension("txt"), report.to_table())?;
            Ok(())
        }
    }
}
