//! End-to-end experiments: frames → dropout → graph → reconstruct → score.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{linear_interp, nearest_neighbor_sub, NnMode, DEFAULT_AZIMUTH_BINS};
use crate::error::{Error, Result};
use crate::graph::{add_beam_edges, build_knn_graph, Graph, KnnSpace};
use crate::ingest::{
    apply_beam_dropout, estimate_beams, read_kitti_bin, stratified_sample, BeamModel, DropoutPattern,
    SparseFrame,
};
use crate::metrics::{
    aggregate_by_method, evaluate, write_predictions, write_reports, write_summary, write_xz_projection,
    z_only_points, Aggregate, ChamferScope, EvalReport, RunInfo,
};
use crate::model::{Architecture, ModelConfig};
use crate::synth::{synthesize_scene, SyntheticSceneSpec};
use crate::trainer::{predict_dropped, train_frame, write_loss_history, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Linear,
    Nn,
    SimpleGcn,
    GatBaseline,
    SuperiorGat,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Nn => "nn",
            Method::SimpleGcn => "simple_gcn",
            Method::GatBaseline => "gat_baseline",
            Method::SuperiorGat => "superior_gat",
        }
    }

    pub fn architecture(&self) -> Option<Architecture> {
        match self {
            Method::SimpleGcn => Some(Architecture::SimpleGcn),
            Method::GatBaseline => Some(Architecture::GatBaseline),
            Method::SuperiorGat => Some(Architecture::SuperiorGat),
            Method::Linear | Method::Nn => None,
        }
    }

    pub const ALL: [Method; 5] = [
        Method::Linear,
        Method::Nn,
        Method::SimpleGcn,
        Method::GatBaseline,
        Method::SuperiorGat,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// A KITTI `.bin` file or a directory of them. Ignored when `synthetic`
    /// is set.
    pub input: Option<PathBuf>,
    pub synthetic: Option<SyntheticSceneSpec>,
    /// Maximum number of frames (synthetic: number of generated frames).
    pub frames: usize,
    pub sample_target: usize,
    pub dropout_nth: usize,
    pub dropout_offset: usize,
    pub k: Vec<usize>,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    /// Write wall times; off makes every output file reproducible byte for
    /// byte.
    pub record_timings: bool,
    pub knn_space: KnnSpace,
    pub beam_edges: bool,
    pub azimuth_bins: usize,
    pub nn_mode: NnMode,
    pub chamfer_scope: ChamferScope,
    pub projection_stride: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            input: None,
            synthetic: None,
            frames: 1,
            sample_target: 50_000,
            dropout_nth: 4,
            dropout_offset: 0,
            k: vec![10],
            methods: Method::ALL.to_vec(),
            seed: 0,
            out: PathBuf::from("out"),
            workers: 1,
            record_timings: true,
            knn_space: KnnSpace::Planar,
            beam_edges: false,
            azimuth_bins: DEFAULT_AZIMUTH_BINS,
            nn_mode: NnMode::FullXyz,
            chamfer_scope: ChamferScope::Dropped,
            projection_stride: 15,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("at least one method is required".into()));
        }
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Error::InvalidConfig("k list must be non-empty and positive".into()));
        }
        if self.frames == 0 {
            return Err(Error::InvalidConfig("frames must be >= 1".into()));
        }
        if self.dropout_nth == 0 {
            return Err(Error::InvalidConfig("dropout period must be >= 1".into()));
        }
        if self.projection_stride == 0 {
            return Err(Error::InvalidConfig("projection stride must be >= 1".into()));
        }
        if self.synthetic.is_none() && self.input.is_none() {
            return Err(Error::InvalidConfig("either an input path or a synthetic scene is required".into()));
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if self.methods.iter().any(|m| m.architecture().is_some()) {
            self.model.validate().or_else(|e| match e {
                // layer count is set per architecture
                Error::InvalidConfig(m) if m.contains("one layer") => Ok(()),
                e => Err(e),
            })?;
            self.train.validate()?;
        }
        Ok(())
    }

    pub fn dropout(&self) -> DropoutPattern {
        DropoutPattern::EveryNth {
            n: self.dropout_nth,
            offset: self.dropout_offset,
        }
    }
}

/// Where a frame comes from.
#[derive(Clone, Debug)]
enum FrameSource {
    Kitti(PathBuf),
    Synthetic(SyntheticSceneSpec),
}

#[derive(Clone, Debug)]
struct FrameJob {
    index: usize,
    tag: String,
    source: FrameSource,
}

fn frame_jobs(config: &ExperimentConfig) -> Result<Vec<FrameJob>> {
    if let Some(spec) = &config.synthetic {
        return Ok((0..config.frames)
            .map(|i| {
                let mut s = spec.clone();
                s.seed = spec.seed.wrapping_add(config.seed).wrapping_add(i as u64);
                FrameJob {
                    index: i,
                    tag: format!("{}_{i:03}", spec.kind.tag()),
                    source: FrameSource::Synthetic(s),
                }
            })
            .collect());
    }
    let input = config.input.as_ref().expect("validated");
    let mut files = if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        v.sort();
        v
    } else {
        vec![input.clone()]
    };
    files.truncate(config.frames);
    if files.is_empty() {
        return Err(Error::EmptyInput("no .bin frames found"));
    }
    Ok(files
        .into_iter()
        .enumerate()
        .map(|(index, p)| FrameJob {
            index,
            tag: p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("frame_{index:03}")),
            source: FrameSource::Kitti(p),
        })
        .collect())
}

/// Builds the dropped-out frame for a job.
fn load_frame(config: &ExperimentConfig, job: &FrameJob) -> Result<SparseFrame> {
    let cloud = match &job.source {
        FrameSource::Synthetic(spec) => synthesize_scene(spec)?,
        FrameSource::Kitti(path) => {
            let read = read_kitti_bin(path)?;
            if read.skipped_non_finite > 0 {
                warn!("{}: skipped {} non-finite records", job.tag, read.skipped_non_finite);
            }
            let est = estimate_beams(&read.cloud, BeamModel::default())?;
            stratified_sample(&est.cloud, config.sample_target, frame_seed(config.seed, job.index))?
        }
    };
    apply_beam_dropout(&cloud, config.dropout())
}

fn frame_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add(index as u64)
}

fn build_graph(config: &ExperimentConfig, frame: &SparseFrame, k: usize) -> Result<Graph> {
    let g = build_knn_graph(frame, k, config.knn_space)?;
    if config.beam_edges {
        add_beam_edges(&g, frame)
    } else {
        Ok(g)
    }
}

/// One method's reconstruction of a frame, before scoring.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: EvalReport,
    pub reconstructed: Vec<[f64; 3]>,
    pub loss_history: Option<Vec<crate::trainer::EpochRecord>>,
}

fn run_method(
    config: &ExperimentConfig,
    frame: &SparseFrame,
    graph: &Graph,
    tag: &str,
    index: usize,
    k: usize,
    method: Method,
) -> Result<RunOutput> {
    let (reconstructed, train_s, infer_s, history) = match method {
        Method::Linear => {
            let t = std::time::Instant::now();
            let z = linear_interp(frame, config.azimuth_bins)?;
            (z_only_points(frame, &z)?, 0.0, t.elapsed().as_secs_f64(), None)
        }
        Method::Nn => {
            let t = std::time::Instant::now();
            let p = nearest_neighbor_sub(frame, config.nn_mode)?;
            (p, 0.0, t.elapsed().as_secs_f64(), None)
        }
        _ => {
            let arch = method.architecture().expect("learned method");
            let mc = ModelConfig {
                architecture: arch,
                layers: arch.default_layers(),
                ..config.model
            };
            let tc = TrainConfig {
                seed: frame_seed(config.seed, index),
                ..config.train.clone()
            };
            let out = train_frame(frame, graph, &mc, &tc)?;
            let (z, infer_s) = predict_dropped(frame, graph, &out.params)?;
            (z_only_points(frame, &z)?, out.wall_time_s, infer_s, Some(out.history))
        }
    };
    let (train_s, infer_s) = if config.record_timings {
        (train_s, infer_s)
    } else {
        (0.0, 0.0)
    };
    let info = RunInfo {
        frame: tag.to_string(),
        method: method.tag().to_string(),
        k,
        train_s,
        infer_s,
    };
    let report = evaluate(frame, &reconstructed, info, config.chamfer_scope)?;
    Ok(RunOutput {
        report,
        reconstructed,
        loss_history: history,
    })
}

/// Writes the X-Z profile of a reconstruction; see
/// [`crate::metrics::write_xz_projection`].
pub fn emit_xz_projection(frame: &SparseFrame, z_hat: &[f64], stride: usize, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_xz_projection(frame, z_hat, stride, std::io::BufWriter::new(file))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

fn write_run_files(config: &ExperimentConfig, frame: &SparseFrame, run: &RunOutput) -> Result<()> {
    let r = &run.report;
    let stem = format!("{}_{}_k{}", r.frame, r.method, r.k);
    let out = &config.out;
    write_predictions(frame, &run.reconstructed, create(&out.join("predictions").join(format!("{stem}.csv")))?)?;
    let z: Vec<f64> = run.reconstructed.iter().map(|p| p[2]).collect();
    emit_xz_projection(frame, &z, config.projection_stride, out.join("projections").join(format!("{stem}.csv")))?;
    if let Some(h) = &run.loss_history {
        write_loss_history(h, config.record_timings, create(&out.join("losses").join(format!("{stem}.csv")))?)?;
    }
    Ok(())
}

fn run_frame(config: &ExperimentConfig, job: &FrameJob) -> Result<Vec<EvalReport>> {
    let frame = load_frame(config, job)?;
    info!(
        "{}: {} points, {} dropped",
        job.tag,
        frame.len(),
        frame.dropped_indices().len()
    );
    let mut reports = Vec::new();
    for &k in &config.k {
        let graph = build_graph(config, &frame, k)?;
        for &method in &config.methods {
            let run = run_method(config, &frame, &graph, &job.tag, job.index, k, method)?;
            info!(
                "{} k={k} {}: rmse_z={:.4} chamfer={:.4}",
                job.tag,
                method.tag(),
                run.report.rmse_z,
                run.report.chamfer
            );
            write_run_files(config, &frame, &run)?;
            reports.push(run.report);
        }
    }
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub reports: Vec<EvalReport>,
    pub aggregates: Vec<Aggregate>,
    pub skipped_frames: Vec<String>,
}

/// Runs every frame × k × method and writes `runs.csv`, `summary.csv`,
/// `config.toml` and per-run `predictions/`, `projections/` and `losses/`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    for sub in ["predictions", "projections", "losses"] {
        let d = config.out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let cfg_path = config.out.join("config.toml");
    fs::write(&cfg_path, config.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;

    let jobs = frame_jobs(config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let results: Vec<(String, Result<Vec<EvalReport>>)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| (job.tag.clone(), run_frame(config, job)))
            .collect()
    });

    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for (tag, res) in results {
        match res {
            Ok(r) => reports.extend(r),
            // unreadable or unusable input frames are skipped; model failures are not
            Err(e @ (Error::Io { .. } | Error::TruncatedRecord { .. } | Error::EmptyInput(_)))
                if config.synthetic.is_none() =>
            {
                warn!("skipping frame {tag}: {e}");
                skipped.push(tag);
            }
            Err(e) => return Err(e),
        }
    }
    if reports.is_empty() {
        return Err(Error::EmptyInput("no frame could be processed"));
    }
    let aggregates = aggregate_by_method(&reports)?;
    write_reports(&reports, create(&config.out.join("runs.csv"))?)?;
    write_summary(&aggregates, create(&config.out.join("summary.csv"))?)?;
    Ok(ExperimentSummary {
        reports,
        aggregates,
        skipped_frames: skipped,
    })
}
