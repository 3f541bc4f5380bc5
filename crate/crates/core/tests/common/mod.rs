//! Oracles and checks shared by the integration tests and the acceptance
//! runner. Every check returns `Err(description)` on the first violation.

#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use superiorgat::experiment::{ExperimentConfig, Method};
use superiorgat::graph::{build_knn_graph, build_knn_graph_brute_force, Graph, KnnSpace, NodeFeatures};
use superiorgat::ingest::{apply_beam_dropout, DropoutPattern, PointCloud, RawPoint, SparseFrame};
use superiorgat::metrics::{chamfer, chamfer_brute_force};
use superiorgat::model::{
    forward_features, gat_attention_layer, init_params, predict, Activation, Architecture, HeadVars,
    ModelConfig, ModelParams, ATTENTION_SLOPE,
};
use superiorgat::spatial::{brute_force_knn, KdTree};
use superiorgat::synth::{SceneKind, SyntheticSceneSpec};
use superiorgat::tensor::{Segments, Tape, Tensor, Var};
use superiorgat::trainer::{train_frame, TrainConfig};

pub type Check = Result<String, String>;

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[0.05, 2)` and random sign, keeping finite
/// differences away from activation kinks.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random frame over a 16-beam layout with a smooth surface.
pub fn random_frame(n: usize, seed: u64) -> SparseFrame {
    let mut r = rng(seed);
    let mut pts = Vec::with_capacity(n);
    let mut beams = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y): (f64, f64) = (r.random_range(-10.0..10.0), r.random_range(-10.0..10.0));
        let z = -1.7 + 0.3 * (0.4 * x).sin() + 0.02 * y + r.random_range(-0.02..0.02);
        pts.push(RawPoint::new(x, y, z, 0.0));
        beams.push((i * 7 + 3) % 16);
    }
    let cloud = PointCloud::with_beams(pts, beams, 16).unwrap();
    apply_beam_dropout(&cloud, DropoutPattern::default()).unwrap()
}

pub fn small_model(arch: Architecture) -> ModelConfig {
    let mut c = ModelConfig::new(arch);
    c.heads = 2;
    c.head_dim = 4;
    c.ffn_hidden = 8;
    c.decoder_hidden = 6;
    c
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference check of `d mse(f(inputs), target) / d inputs` for
/// every input. Returns the worst relative error (vector norm per input).
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> Result<f64, String>
where
    F: Fn(&mut Tape, &[Var]) -> superiorgat::Result<Var>,
{
    let eval = |vals: &[Tensor], target: Option<&Tensor>| -> superiorgat::Result<(f64, Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let out_val = tape.value(out).clone();
        let target = match target {
            Some(t) => t.clone(),
            None => {
                let data = (0..out_val.numel()).map(|i| (i as f64 * 0.7).sin()).collect();
                Tensor::new(out_val.shape().to_vec(), data)?
            }
        };
        let t = tape.constant(target.clone());
        let loss = tape.mse_loss(out, t)?;
        let l = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(vals)
            .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
            .collect();
        Ok((l, target, g))
    };
    let (_, target, analytic) = eval(inputs, None).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.numel()];
        for j in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let lp = eval(&plus, Some(&target)).map_err(|e| e.to_string())?.0;
            let lm = eval(&minus, Some(&target)).map_err(|e| e.to_string())?.0;
            numeric[j] = (lp - lm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(analytic[k].data(), &numeric));
    }
    Ok(worst)
}

fn random_segments(r: &mut ChaCha8Rng, segments: usize, max_len: usize) -> (Segments, usize) {
    let mut offsets = vec![0];
    for _ in 0..segments {
        let len = r.random_range(1..=max_len);
        offsets.push(offsets.last().unwrap() + len);
    }
    let items = *offsets.last().unwrap();
    (Segments::new(offsets).unwrap(), items)
}

/// Every differentiable tape operation on `instances` random inputs.
pub fn check_op_gradients(instances: usize, seed: u64) -> Check {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: Result<f64, String>| -> Result<(), String> {
        let e = e.map_err(|m| format!("{name}: {m}"))?;
        match worst.iter_mut().find(|(n, _)| *n == name) {
            Some(w) => w.1 = w.1.max(e),
            None => worst.push((name, e)),
        }
        if e > OP_TOL {
            return Err(format!("{name}: relative error {e:.3e} > {OP_TOL:e}"));
        }
        Ok(())
    };
    for inst in 0..instances {
        let mut r = rng(seed.wrapping_add(inst as u64));
        let n = r.random_range(1..=30);
        let f = r.random_range(1..=5);
        let g = r.random_range(1..=4);
        let a = random_tensor(&mut r, &[n, f], -1.0, 1.0);
        let b = random_tensor(&mut r, &[f, g], -1.0, 1.0);
        record("matmul", gradcheck(&[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1])))?;
        let a2 = random_tensor(&mut r, &[n, f], -1.0, 1.0);
        record("add", gradcheck(&[a.clone(), a2], |t, v| t.add(v[0], v[1])))?;
        let bias = random_tensor(&mut r, &[f], -1.0, 1.0);
        record("add_bias", gradcheck(&[a.clone(), bias.clone()], |t, v| t.add_bias(v[0], v[1])))?;
        let c = r.random_range(-2.0..2.0);
        record("scale", gradcheck(&[a.clone()], |t, v| t.scale(v[0], c)))?;
        record("add_const", gradcheck(&[a.clone()], |t, v| t.add_const(v[0], c)))?;
        let s = random_tensor(&mut r, &[1], -1.5, 1.5);
        record("mul_scalar", gradcheck(&[a.clone(), s], |t, v| t.mul_scalar(v[0], v[1])))?;
        let kinked = away_from_zero(&mut r, &[n, f]);
        record("leaky_relu", gradcheck(&[kinked.clone()], |t, v| t.leaky_relu(v[0], 0.2)))?;
        record("elu", gradcheck(&[kinked.clone()], |t, v| t.elu(v[0], 1.0)))?;
        let wide = random_tensor(&mut r, &[n, f], -4.0, 4.0);
        record("sigmoid", gradcheck(&[wide], |t, v| t.sigmoid(v[0])))?;
        let other = random_tensor(&mut r, &[n, g], -1.0, 1.0);
        record("concat_cols", gradcheck(&[a.clone(), other], |t, v| t.concat_cols(&[v[0], v[1]])))?;
        let lo = r.random_range(0..n);
        let hi = r.random_range(lo + 1..=n);
        record("slice_rows", gradcheck(&[a.clone()], |t, v| t.slice_rows(v[0], lo, hi)))?;
        let idx: Arc<[usize]> = (0..r.random_range(1..=40)).map(|_| r.random_range(0..n)).collect();
        record("gather_rows", gradcheck(&[a.clone()], |t, v| t.gather_rows(v[0], idx.clone())))?;
        let nseg = r.random_range(1..=8);
        let (segs, items) = random_segments(&mut r, nseg, 6);
        let logits = random_tensor(&mut r, &[items, 1], -3.0, 3.0);
        let segs2 = segs.clone();
        record("segment_softmax", gradcheck(&[logits.clone()], move |t, v| t.segment_softmax(v[0], &segs2)))?;
        let values = random_tensor(&mut r, &[items, f], -1.0, 1.0);
        let weights = random_tensor(&mut r, &[items], -1.0, 1.0);
        let segs3 = segs.clone();
        record(
            "segment_weighted_sum",
            gradcheck(&[values, weights], move |t, v| t.segment_weighted_sum(v[0], v[1], &segs3)),
        )?;
        let fl = f.max(2);
        let x = random_tensor(&mut r, &[n, fl], -2.0, 2.0);
        let gain = random_tensor(&mut r, &[fl], 0.5, 1.5);
        let beta = random_tensor(&mut r, &[fl], -0.5, 0.5);
        record(
            "layer_norm",
            gradcheck(&[x, gain, beta], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        )?;
        let target = random_tensor(&mut r, &[n, f], -1.0, 1.0);
        record(
            "mse_loss",
            gradcheck(&[a.clone(), target], |t, v| t.mse_loss(v[0], v[1])),
        )?;
        record("sum", gradcheck(&[a.clone()], |t, v| t.sum(v[0])))?;
    }
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
    Ok(format!("{} ops x {instances} instances, max rel err: {}", worst.len(), summary.join(" ")))
}

/// Loss of a model on a frame: MSE of ẑ at a fixed node subset.
fn model_loss(
    graph: &Graph,
    features: &NodeFeatures,
    params: &ModelParams,
    sup: &Arc<[usize]>,
    target: &Tensor,
) -> superiorgat::Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_features(&mut tape, graph, features, params, &bound)?;
    let picked = tape.gather_rows(out.z_hat, sup.clone())?;
    let t = tape.constant(target.clone());
    let loss = tape.mse_loss(picked, t)?;
    let l = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let g = bound
        .vars
        .iter()
        .zip(&params.arrays)
        .map(|(&v, a)| grads.take(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; a.data.len()]))
        .collect();
    Ok((l, g))
}

/// End-to-end gradient of the masked training loss with respect to every
/// parameter, or a random subset of `max_coords` of them.
pub fn check_model_gradients(arch: Architecture, config: ModelConfig, instances: usize, max_coords: Option<usize>, seed: u64) -> Check {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for inst in 0..instances {
        let s = seed.wrapping_add(1000 * inst as u64);
        let mut r = rng(s);
        let n = r.random_range(12..=30);
        let frame = random_frame(n, s);
        let k = r.random_range(2..=6);
        let graph = build_knn_graph(&frame, k, KnnSpace::Planar).map_err(|e| e.to_string())?;
        let cfg = ModelConfig { architecture: arch, layers: arch.default_layers(), ..config };
        let mut params = init_params(&cfg, s).map_err(|e| e.to_string())?;
        params.scaler = superiorgat::model::FeatureScaler::fit(&frame);
        // move the gate off its symmetric start
        if let Some(g) = params.get_mut("gate_logit") {
            g.data[0] = r.random_range(-1.0..1.0);
        }
        let observed = frame.observed_indices();
        let sup: Vec<usize> = observed.iter().copied().filter(|_| r.random_bool(0.4)).collect();
        let sup: Arc<[usize]> = if sup.is_empty() { vec![observed[0]].into() } else { sup.into() };
        let features = superiorgat::graph::build_features(&frame).with_z_zeroed(&sup);
        let target = Tensor::column(sup.iter().map(|&i| frame.z_masked[i]).collect());
        let (_, analytic) = model_loss(&graph, &features, &params, &sup, &target).map_err(|e| e.to_string())?;

        let mut all: Vec<(usize, usize)> = params
            .arrays
            .iter()
            .enumerate()
            .flat_map(|(a, arr)| (0..arr.data.len()).map(move |j| (a, j)))
            .collect();
        if let Some(m) = max_coords {
            all.shuffle(&mut r);
            all.truncate(m);
        }
        let mut ana = Vec::with_capacity(all.len());
        let mut num = Vec::with_capacity(all.len());
        for &(a, j) in &all {
            let mut p = params.clone();
            p.arrays[a].data[j] += FD_STEP;
            let lp = model_loss(&graph, &features, &p, &sup, &target).map_err(|e| e.to_string())?.0;
            p.arrays[a].data[j] -= 2.0 * FD_STEP;
            let lm = model_loss(&graph, &features, &p, &sup, &target).map_err(|e| e.to_string())?.0;
            num.push((lp - lm) / (2.0 * FD_STEP));
            ana.push(analytic[a][j]);
        }
        let e = rel_err(&ana, &num);
        coords += all.len();
        worst = worst.max(e);
        if e > END_TO_END_TOL {
            return Err(format!("{} instance {inst}: relative error {e:.3e} > {END_TO_END_TOL:e}", arch.tag()));
        }
    }
    Ok(format!("{} x {instances} instances, {coords} coordinates, max rel err {worst:.2e}", arch.tag()))
}

/// Random CSR rows over `n` nodes with 1..=max_deg distinct sources each.
pub fn random_graph(r: &mut ChaCha8Rng, n: usize, max_deg: usize) -> Graph {
    let mut offsets = vec![0];
    let mut ids = Vec::new();
    for _ in 0..n {
        let deg = r.random_range(1..=max_deg.min(n));
        let picks = rand::seq::index::sample(r, n, deg);
        ids.extend(picks.into_iter());
        offsets.push(ids.len());
    }
    let features = NodeFeatures::new(Tensor::zeros(vec![n, 4])).unwrap();
    Graph::from_csr(offsets, ids, features).unwrap()
}

/// Dense N×N masked attention computed from scratch with plain loops.
pub fn dense_attention(
    adjacency: &[Vec<bool>],
    h: &[Vec<f64>],
    heads: &[(Vec<Vec<f64>>, Vec<f64>)],
    act: Activation,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = h.len();
    let mut out = vec![Vec::new(); n];
    let mut alphas = Vec::new();
    for (w, a) in heads {
        let fp = w[0].len();
        let hp: Vec<Vec<f64>> = h
            .iter()
            .map(|row| (0..fp).map(|c| row.iter().zip(w).map(|(x, wr)| x * wr[c]).sum()).collect())
            .collect();
        let mut alpha = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut e = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if adjacency[i][j] {
                    let s: f64 = (0..fp).map(|c| a[c] * hp[i][c] + a[fp + c] * hp[j][c]).sum();
                    e[j] = if s > 0.0 { s } else { ATTENTION_SLOPE * s };
                }
            }
            let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
            for j in 0..n {
                alpha[i][j] = (e[j] - m).exp() / z;
            }
            for c in 0..fp {
                let agg: f64 = (0..n).map(|j| alpha[i][j] * hp[j][c]).sum();
                out[i].push(act.eval(agg));
            }
        }
        alphas.push(alpha);
    }
    (out, alphas)
}

/// Sparse attention layer against [`dense_attention`] on random graphs.
pub fn check_dense_attention(instances: usize, seed: u64) -> Check {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let mut r = rng(seed.wrapping_add(inst as u64));
        let n = r.random_range(1..=100);
        let heads = if inst % 2 == 0 { 1 } else { 4 };
        let f_in = r.random_range(1..=6);
        let fp = r.random_range(1..=8);
        let act = if r.random_bool(0.5) {
            Activation::LeakyRelu { slope: 0.2 }
        } else {
            Activation::Elu { alpha: 1.0 }
        };
        let graph = random_graph(&mut r, n, 12);
        let h = random_tensor(&mut r, &[n, f_in], -2.0, 2.0);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let mut head_vars = Vec::new();
        let mut dense_heads = Vec::new();
        for _ in 0..heads {
            let w = random_tensor(&mut r, &[f_in, fp], -1.0, 1.0);
            let a = random_tensor(&mut r, &[2 * fp, 1], -1.0, 1.0);
            dense_heads.push((
                (0..f_in).map(|i| w.row(i).to_vec()).collect::<Vec<_>>(),
                a.data().to_vec(),
            ));
            head_vars.push(HeadVars { w: tape.constant(w), a: tape.constant(a) });
        }
        let out = gat_attention_layer(&mut tape, &graph, hv, &head_vars, act).map_err(|e| e.to_string())?;
        let mut adj = vec![vec![false; n]; n];
        for i in 0..n {
            for &j in graph.neighbors(i) {
                adj[i][j] = true;
            }
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| h.row(i).to_vec()).collect();
        let (dense, dense_alpha) = dense_attention(&adj, &rows, &dense_heads, act);
        let sparse = tape.value(out.h);
        for i in 0..n {
            for (c, want) in dense[i].iter().enumerate() {
                let d = (sparse.at(i, c) - want).abs();
                worst = worst.max(d);
                if d > 1e-9 {
                    return Err(format!("instance {inst}: node {i} col {c} differs by {d:.3e}"));
                }
            }
        }
        for (k, alpha) in out.alpha.iter().enumerate() {
            let vals = tape.value(*alpha).data();
            let mut e = 0;
            for i in 0..n {
                for &j in graph.neighbors(i) {
                    let d = (vals[e] - dense_alpha[k][i][j]).abs();
                    worst = worst.max(d);
                    if d > 1e-9 {
                        return Err(format!("instance {inst}: alpha[{i},{j}] differs by {d:.3e}"));
                    }
                    e += 1;
                }
            }
        }
    }
    Ok(format!("{instances} random graphs (N <= 100, K in {{1, 4}}), max abs diff {worst:.2e}"))
}

/// Relabelling the points of a frame permutes the predictions the same way.
pub fn check_permutation_equivariance(instances: usize, seed: u64) -> Check {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let s = seed.wrapping_add(inst as u64);
        let mut r = rng(s);
        let n = r.random_range(20..=120);
        let frame = random_frame(n, s);
        let k = r.random_range(3..=10);
        let graph = build_knn_graph(&frame, k, KnnSpace::Planar).map_err(|e| e.to_string())?;
        let tc = TrainConfig { epochs: 5, seed: s, ..TrainConfig::default() };
        let params = train_frame(&frame, &graph, &ModelConfig::default(), &tc)
            .map_err(|e| e.to_string())?
            .params;
        let base = predict(&graph, &params).map_err(|e| e.to_string())?;

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        // new position p holds old point perm[p]
        let pts = perm.iter().map(|&i| frame.cloud.points[i]).collect();
        let beams = perm.iter().map(|&i| frame.beams()[i]).collect();
        let cloud = PointCloud::with_beams(pts, beams, frame.num_beams()).map_err(|e| e.to_string())?;
        let pframe = apply_beam_dropout(&cloud, DropoutPattern::default()).map_err(|e| e.to_string())?;
        let pgraph = build_knn_graph(&pframe, k, KnnSpace::Planar).map_err(|e| e.to_string())?;
        let permuted = predict(&pgraph, &params).map_err(|e| e.to_string())?;
        for (p, &i) in perm.iter().enumerate() {
            let d = (permuted[p] - base[i]).abs();
            worst = worst.max(d);
            if d > 1e-9 {
                return Err(format!("instance {inst}: node {i} moved to {p} differs by {d:.3e}"));
            }
        }
    }
    Ok(format!("{instances} random relabelings, max abs diff {worst:.2e}"))
}

fn chain_graph(n: usize, r: &mut ChaCha8Rng) -> Graph {
    // node i receives from itself and i - 1
    let mut offsets = vec![0];
    let mut ids = Vec::new();
    for i in 0..n {
        ids.push(i);
        if i > 0 {
            ids.push(i - 1);
        }
        offsets.push(ids.len());
    }
    let features = NodeFeatures::new(random_tensor(r, &[n, 4], -1.0, 1.0)).unwrap();
    Graph::from_csr(offsets, ids, features).unwrap()
}

fn output_at(graph: &Graph, features: &NodeFeatures, params: &ModelParams, node: usize) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_features(&mut tape, graph, features, params, &bound).unwrap();
    tape.value(out.z_hat).data()[node]
}

fn perturbed(features: &NodeFeatures, node: usize) -> NodeFeatures {
    let mut t = features.tensor().clone();
    let cols = t.cols();
    for c in 0..cols {
        t.data_mut()[node * cols + c] += 0.75 + 0.1 * c as f64;
    }
    NodeFeatures::new(t).unwrap()
}

/// On a chain, SuperiorGAT sees exactly one hop and the 3-layer GAT
/// baseline sees three.
pub fn check_receptive_field(instances: usize, seed: u64) -> Check {
    let n = 8;
    let target = n - 1;
    let mut min_change = f64::INFINITY;
    for inst in 0..instances {
        let s = seed.wrapping_add(inst as u64);
        let mut r = rng(s);
        let graph = chain_graph(n, &mut r);
        let feats = graph.features.clone();
        let sg = init_params(&ModelConfig::default(), s).map_err(|e| e.to_string())?;
        let before = output_at(&graph, &feats, &sg, target);
        for hops in 2..n {
            let after = output_at(&graph, &perturbed(&feats, target - hops), &sg, target);
            if (after - before).abs() > 1e-12 {
                return Err(format!("instance {inst}: {hops}-hop perturbation moved SuperiorGAT by {:.3e}", after - before));
            }
        }
        let one_hop = (output_at(&graph, &perturbed(&feats, target - 1), &sg, target) - before).abs();
        if one_hop <= 1e-9 {
            return Err(format!("instance {inst}: 1-hop perturbation left SuperiorGAT unchanged"));
        }
        let gat = init_params(&ModelConfig::new(Architecture::GatBaseline), s).map_err(|e| e.to_string())?;
        let gb = output_at(&graph, &feats, &gat, target);
        let three = (output_at(&graph, &perturbed(&feats, target - 3), &gat, target) - gb).abs();
        if three <= 1e-9 {
            return Err(format!("instance {inst}: 3-hop perturbation left the GAT baseline unchanged"));
        }
        let four = (output_at(&graph, &perturbed(&feats, target - 4), &gat, target) - gb).abs();
        if four > 1e-12 {
            return Err(format!("instance {inst}: 4-hop perturbation moved the 3-layer GAT baseline"));
        }
        min_change = min_change.min(one_hop).min(three);
    }
    Ok(format!("{instances} chains; smallest detected in-range response {min_change:.2e}"))
}

/// kd-tree kNN and kNN graphs equal brute force; indexed Chamfer equals the
/// quadratic scan.
pub fn check_knn_and_chamfer(instances: usize, seed: u64) -> Check {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let s = seed.wrapping_add(inst as u64);
        let mut r = rng(s);
        let n = r.random_range(1..=2000);
        // quantised coordinates produce exact distance ties
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| [r.random_range(-200..200) as f64 * 0.1, r.random_range(-200..200) as f64 * 0.1])
            .collect();
        let tree = KdTree::new(pts.clone());
        let k = r.random_range(1..=20);
        for q in (0..n).step_by((n / 50).max(1)) {
            let mut a: Vec<usize> = tree.knn(&pts[q], k, Some(q)).iter().map(|nb| nb.index).collect();
            let mut b: Vec<usize> = brute_force_knn(&pts, &pts[q], k, Some(q)).iter().map(|nb| nb.index).collect();
            a.sort_unstable();
            b.sort_unstable();
            if a != b {
                return Err(format!("instance {inst}: kNN of {q} differs from brute force"));
            }
        }
        if n >= 8 {
            let frame = random_frame(n.min(600), s);
            let kk = k.min(frame.len() - 1).max(1);
            let g1 = build_knn_graph(&frame, kk, KnnSpace::Planar).map_err(|e| e.to_string())?;
            let g2 = build_knn_graph_brute_force(&frame, kk, KnnSpace::Planar).map_err(|e| e.to_string())?;
            for i in 0..frame.len() {
                let mut a = g1.neighbors(i).to_vec();
                let mut b = g2.neighbors(i).to_vec();
                a.sort_unstable();
                b.sort_unstable();
                if a != b {
                    return Err(format!("instance {inst}: graph row {i} differs from brute force"));
                }
            }
        }
        let set = |r: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
            (0..r.random_range(1..=500))
                .map(|_| [r.random_range(-20.0..20.0), r.random_range(-20.0..20.0), r.random_range(-3.0..1.0)])
                .collect()
        };
        let (a, b) = (set(&mut r), set(&mut r));
        let fast = chamfer(&a, &b).map_err(|e| e.to_string())?;
        let slow = chamfer_brute_force(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((fast - slow).abs());
        if (fast - slow).abs() > 1e-12 {
            return Err(format!("instance {inst}: chamfer {fast} vs brute force {slow}"));
        }
    }
    Ok(format!("{instances} instances, max chamfer diff {worst:.2e}"))
}

/// Sinusoidal terrain scanned over a 90° sector, dense enough that a
/// dropped point's nearest planar neighbours mostly share its own beam.
pub fn terrain_scene(points: usize) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        kind: SceneKind::Sinusoidal,
        points,
        fov_deg: 90.0,
        ..SyntheticSceneSpec::default()
    }
}

pub fn experiment(out: &Path, spec: SyntheticSceneSpec, methods: Vec<Method>, k: Vec<usize>, frames: usize) -> ExperimentConfig {
    ExperimentConfig {
        synthetic: Some(spec),
        methods,
        k,
        frames,
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

/// Sorted relative paths of every CSV below `root`.
pub fn csv_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Byte-compares every CSV of two output directories.
pub fn compare_csv_trees(a: &Path, b: &Path) -> Check {
    let fa = csv_files(a);
    let fb = csv_files(b);
    if fa != fb {
        return Err(format!("file sets differ: {} vs {}", fa.len(), fb.len()));
    }
    for f in &fa {
        if std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap() {
            return Err(format!("{} differs", f.display()));
        }
    }
    Ok(format!("{} CSV files byte-identical", fa.len()))
}

/// √3 identity between rmse_xyz and rmse_z: holds for every z-only method
/// and fails for nearest-neighbour substitution whenever a substituted
/// point moved in (x, y).
pub fn check_sqrt3(spec: &SyntheticSceneSpec, k: usize, epochs: usize) -> Check {
    use superiorgat::baselines::{linear_interp, nearest_neighbor_sub, NnMode, DEFAULT_AZIMUTH_BINS};
    use superiorgat::metrics::{evaluate, z_only_points, ChamferScope, RunInfo};
    use superiorgat::trainer::predict_dropped;

    let err = |e: superiorgat::Error| e.to_string();
    let cloud = superiorgat::synth::synthesize_scene(spec).map_err(err)?;
    let frame = apply_beam_dropout(&cloud, DropoutPattern::default()).map_err(err)?;
    let graph = build_knn_graph(&frame, k, KnnSpace::Planar).map_err(err)?;
    let mut z_only: Vec<(String, Vec<[f64; 3]>)> = Vec::new();
    let z = linear_interp(&frame, DEFAULT_AZIMUTH_BINS).map_err(err)?;
    z_only.push(("linear".into(), z_only_points(&frame, &z).map_err(err)?));
    for arch in [Architecture::SimpleGcn, Architecture::GatBaseline, Architecture::SuperiorGat] {
        let tc = TrainConfig { epochs, ..TrainConfig::default() };
        let out = train_frame(&frame, &graph, &ModelConfig::new(arch), &tc).map_err(err)?;
        let (z, _) = predict_dropped(&frame, &graph, &out.params).map_err(err)?;
        z_only.push((arch.tag().into(), z_only_points(&frame, &z).map_err(err)?));
    }
    let mut lines = Vec::new();
    for (name, rec) in &z_only {
        let r = evaluate(&frame, rec, RunInfo::default(), ChamferScope::Dropped).map_err(err)?;
        let gap = (r.rmse_xyz * 3f64.sqrt() - r.rmse_z).abs();
        if gap > 1e-12 {
            return Err(format!("{name}: |rmse_xyz*sqrt3 - rmse_z| = {gap:.3e}"));
        }
        lines.push(format!("{name} ({:.4}, {:.4})", r.rmse_z, r.rmse_xyz));
    }
    let nn = nearest_neighbor_sub(&frame, NnMode::FullXyz).map_err(err)?;
    let moved = frame
        .dropped_indices()
        .iter()
        .zip(&nn)
        .any(|(&i, p)| frame.xy(i) != [p[0], p[1]]);
    let r = evaluate(&frame, &nn, RunInfo::default(), ChamferScope::Dropped).map_err(err)?;
    let gap = (r.rmse_xyz * 3f64.sqrt() - r.rmse_z).abs();
    if moved && gap <= 1e-12 {
        return Err("nn: identity holds although substituted points moved in (x, y)".into());
    }
    lines.push(format!("nn ({:.4}, {:.4}) breaks it", r.rmse_z, r.rmse_xyz));
    Ok(lines.join(", "))
}
