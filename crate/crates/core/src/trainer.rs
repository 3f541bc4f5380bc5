//! Per-frame optimisation with masked self-supervision.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_features, Graph};
use crate::ingest::{stratified_quotas, SparseFrame};
use crate::model::{forward_features, init_params, FeatureScaler, ModelConfig, ModelParams, NamedArray};
use crate::tensor::{Tape, Tensor};

/// Where the regression targets come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// A fresh beam-stratified subset of observed nodes is re-masked each
    /// epoch and regressed against its known z.
    #[default]
    MaskedObserved,
    /// Regresses the dropped nodes' ground truth directly. Leaks the
    /// evaluation targets; only meant for ablations.
    TransductiveLeaking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mask_fraction: f64,
    pub seed: u64,
    /// Epochs without a new best training loss before stopping; `None` runs
    /// every epoch.
    pub patience: Option<usize>,
    pub supervision: Supervision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mask_fraction: 0.25,
            seed: 0,
            patience: Some(30),
            supervision: Supervision::MaskedObserved,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask_fraction must lie in (0, 1), got {}",
                self.mask_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam moments mirroring a parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(arrays: &[NamedArray]) -> Self {
        Self {
            m: arrays.iter().map(|a| vec![0.0; a.data.len()]).collect(),
            v: arrays.iter().map(|a| vec![0.0; a.data.len()]).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(
    arrays: &mut [NamedArray],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if grads.len() != arrays.len() || state.m.len() != arrays.len() {
        return Err(Error::shape("adam_step", "parameter count"));
    }
    state.step += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (k, array) in arrays.iter_mut().enumerate() {
        let g = &grads[k];
        if g.len() != array.data.len() || state.m[k].len() != g.len() {
            return Err(Error::shape("adam_step", format!("array {}", array.name)));
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            array.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest training loss seen during the run.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

/// Beam-stratified subset of `candidates` with about `fraction` of them
/// (at least one), in ascending index order.
pub fn supervision_mask(
    frame: &SparseFrame,
    candidates: &[usize],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let beams = frame.beams();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); frame.num_beams()];
    for &i in candidates {
        members[beams[i]].push(i);
    }
    let hist: Vec<usize> = members.iter().map(Vec::len).collect();
    let target = ((candidates.len() as f64 * fraction).round() as usize).clamp(1, candidates.len());
    let quotas = stratified_quotas(&hist, target);
    let mut out = Vec::with_capacity(target);
    for (idx, &q) in members.iter().zip(&quotas) {
        if q > 0 {
            out.extend(rand::seq::index::sample(rng, idx.len(), q).into_iter().map(|p| idx[p]));
        }
    }
    out.sort_unstable();
    out
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fits a fresh model on a single frame.
pub fn train_frame(
    frame: &SparseFrame,
    graph: &Graph,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    if graph.num_nodes() != frame.len() {
        return Err(Error::shape("train_frame", "graph and frame sizes differ"));
    }
    let observed = frame.observed_indices();
    let dropped = frame.dropped_indices();
    if observed.is_empty() {
        return Err(Error::EmptyInput("train_frame: no observed nodes"));
    }
    let start = Instant::now();
    let base = build_features(frame);
    let mut params = init_params(model_config, train_config.seed)?;
    params.scaler = FeatureScaler::fit(frame);
    let mut adam = AdamState::new(&params.arrays);
    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut history = Vec::with_capacity(train_config.epochs);
    let mut is_dropped = vec![false; frame.len()];
    for &i in &dropped {
        is_dropped[i] = true;
    }

    for epoch in 0..train_config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(train_config.seed, epoch));
        let (features, targets) = match train_config.supervision {
            Supervision::MaskedObserved => {
                let sup = supervision_mask(frame, &observed, train_config.mask_fraction, &mut rng);
                assert!(
                    sup.iter().all(|&i| !is_dropped[i]),
                    "supervision indices intersect dropped nodes"
                );
                let z: Vec<f64> = sup.iter().map(|&i| frame.z_masked[i]).collect();
                (base.with_z_zeroed(&sup), (sup, z))
            }
            Supervision::TransductiveLeaking => {
                if dropped.is_empty() {
                    return Err(Error::EmptyInput("train_frame: no dropped nodes to fit"));
                }
                let z: Vec<f64> = dropped.iter().map(|&i| frame.z_truth()[i]).collect();
                (base.clone(), (dropped.clone(), z))
            }
        };
        let (sup, z) = targets;

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = forward_features(&mut tape, graph, &features, &params, &bound)?;
        let picked = tape.gather_rows(out.z_hat, Arc::from(sup))?;
        let target = tape.constant(Tensor::column(z));
        let loss_var = tape.mse_loss(picked, target)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        history.push(EpochRecord {
            epoch,
            loss,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if loss < best.0 {
            best = (loss, params.clone(), epoch);
        } else if let Some(p) = train_config.patience {
            if epoch - best.2 >= p {
                break;
            }
        }
        let mut grads = tape.backward(loss_var)?;
        let flat: Vec<Vec<f64>> = bound
            .vars
            .iter()
            .zip(&params.arrays)
            .map(|(&v, a)| {
                grads
                    .take(v)
                    .map(Tensor::into_data)
                    .unwrap_or_else(|| vec![0.0; a.data.len()])
            })
            .collect();
        adam_step(
            &mut params.arrays,
            &flat,
            &mut adam,
            train_config.learning_rate,
            (train_config.beta1, train_config.beta2),
            train_config.eps,
        )?;
    }

    Ok(TrainOutcome {
        params: best.1,
        history,
        best_epoch: best.2,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// ẑ at the dropped nodes under the frame's own masking, plus inference time
/// in seconds.
pub fn predict_dropped(frame: &SparseFrame, graph: &Graph, params: &ModelParams) -> Result<(Vec<f64>, f64)> {
    let start = Instant::now();
    let dropped = frame.dropped_indices();
    if dropped.is_empty() {
        return Ok((Vec::new(), start.elapsed().as_secs_f64()));
    }
    let features = build_features(frame);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_features(&mut tape, graph, &features, params, &bound)?;
    let all = tape.value(out.z_hat).data();
    let z = dropped.iter().map(|&i| all[i]).collect();
    Ok((z, start.elapsed().as_secs_f64()))
}

/// Loss history as `epoch,loss,elapsed_ms`. With `timings` off the elapsed
/// column is written as 0 so the file is reproducible byte for byte.
pub fn write_loss_history<W: Write>(history: &[EpochRecord], timings: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss", "elapsed_ms"])?;
    for r in history {
        let ms = if timings { r.elapsed_ms } else { 0.0 };
        w.write_record([r.epoch.to_string(), format!("{:?}", r.loss), format!("{ms:.3}")])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
