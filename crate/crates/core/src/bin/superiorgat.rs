use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use superiorgat::experiment::{run_experiment, ExperimentConfig, Method};
use superiorgat::synth::SceneKind;
use superiorgat::Error;

/// Reconstruct z of dropped LiDAR beams and benchmark against baselines.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// TOML config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// KITTI `.bin` file or directory of frames.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Use a simulated scanner over an analytic scene instead of `--input`.
    #[arg(long, value_enum)]
    synthetic: Option<SceneKind>,
    /// Points per synthetic frame.
    #[arg(long)]
    synthetic_points: Option<usize>,
    /// Gaussian z-noise of synthetic scenes, meters.
    #[arg(long)]
    noise: Option<f64>,
    /// Horizontal field of view of synthetic scans, degrees.
    #[arg(long)]
    fov: Option<f64>,
    /// Neighbourhood sizes.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    methods: Option<Vec<Method>>,
    /// Frame limit.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Run every epoch regardless of the training loss.
    #[arg(long, conflicts_with = "patience")]
    no_early_stop: bool,
    #[arg(long)]
    sample_target: Option<usize>,
    /// Drop every n-th beam.
    #[arg(long)]
    dropout_nth: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Write zero timings so outputs are byte-identical across runs.
    #[arg(long)]
    no_timings: bool,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    dump_config: bool,
}

impl Cli {
    fn resolve(self) -> Result<(ExperimentConfig, bool), Error> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.input {
            c.input = Some(v);
        }
        if let Some(kind) = self.synthetic {
            let mut spec = c.synthetic.take().unwrap_or_default();
            spec.kind = kind;
            c.synthetic = Some(spec);
        }
        if let Some(spec) = c.synthetic.as_mut() {
            if let Some(n) = self.synthetic_points {
                spec.points = n;
            }
            if let Some(s) = self.noise {
                spec.noise_sigma = s;
            }
            if let Some(f) = self.fov {
                spec.fov_deg = f;
            }
        } else if self.synthetic_points.is_some() || self.noise.is_some() || self.fov.is_some() {
            return Err(Error::InvalidConfig(
                "--synthetic-points, --noise and --fov need a synthetic scene".into(),
            ));
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.methods {
            c.methods = v;
        }
        if let Some(v) = self.frames {
            c.frames = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.patience {
            c.train.patience = Some(v);
        }
        if self.no_early_stop {
            c.train.patience = None;
        }
        if let Some(v) = self.sample_target {
            c.sample_target = v;
        }
        if let Some(v) = self.dropout_nth {
            c.dropout_nth = v;
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if self.no_timings {
            c.record_timings = false;
        }
        Ok((c, self.dump_config))
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::TruncatedRecord { .. } => "truncated_record",
        Error::InvalidConfig(_) => "invalid_config",
        Error::Shape { .. } => "shape",
        Error::NonFinite { .. } => "non_finite",
        Error::EmptySegment { .. } => "empty_segment",
        Error::Backward(_) => "backward",
        Error::EmptyInput(_) => "empty_input",
        Error::Diverged { .. } => "diverged",
        Error::Csv(_) => "csv",
        Error::Checkpoint(_) => "checkpoint",
    }
}

fn run() -> Result<(), Error> {
    let (config, dump) = Cli::parse().resolve()?;
    if dump {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let summary = run_experiment(&config)?;
    println!("method,k,frames,rmse_z,rmse_xyz,chamfer,train_s");
    for a in &summary.aggregates {
        println!(
            "{},{},{},{:.4}±{:.4},{:.4}±{:.4},{:.4}±{:.4},{:.2}",
            a.method,
            a.k,
            a.frames,
            a.rmse_z.mean,
            a.rmse_z.sd,
            a.rmse_xyz.mean,
            a.rmse_xyz.sd,
            a.chamfer.mean,
            a.chamfer.sd,
            a.train_s.mean
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '"'], " ");
            eprintln!("error kind={} message=\"{msg}\"", error_kind(&e));
            ExitCode::from(if matches!(e, Error::InvalidConfig(_)) { 2 } else { 1 })
        }
    }
}
