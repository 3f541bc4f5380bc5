//! Reconstruction error metrics over dropped points.
//!
//! This is the only module that reads ground-truth z of dropped points.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SparseFrame;
use crate::spatial::KdTree;

pub const REPORT_HEADER: [&str; 9] = [
    "frame", "method", "k", "rmse_z", "rmse_xyz", "chamfer", "train_s", "infer_s", "n_dropped",
];

/// One evaluated (frame, method, k) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame: String,
    pub method: String,
    pub k: usize,
    pub rmse_z: f64,
    pub rmse_xyz: f64,
    pub chamfer: f64,
    pub train_s: f64,
    pub infer_s: f64,
    pub n_dropped: usize,
}

/// Which point sets the Chamfer distance compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChamferScope {
    /// Reconstructed dropped points against their ground truth.
    #[default]
    Dropped,
    /// Observed plus reconstructed points against the full true cloud.
    FullCloud,
}

fn check_lengths(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a == 0 || b == 0 {
        return Err(Error::EmptyInput(op));
    }
    if a != b {
        return Err(Error::shape(op, format!("{a} vs {b}")));
    }
    Ok(())
}

pub fn rmse_z(z_hat: &[f64], z_true: &[f64]) -> Result<f64> {
    check_lengths("rmse_z", z_hat.len(), z_true.len())?;
    let sse: f64 = z_hat.iter().zip(z_true).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / z_hat.len() as f64).sqrt())
}

/// Per-coordinate RMSE: `sqrt(mean ‖p̂ − p‖² / 3)`.
pub fn rmse_xyz(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    check_lengths("rmse_xyz", pred.len(), truth.len())?;
    let sse: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| crate::spatial::dist2(p, t))
        .sum();
    Ok((sse / (3.0 * pred.len() as f64)).sqrt())
}

fn directed_mean(from: &[[f64; 3]], to: &KdTree<3>) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| to.nearest(p).expect("non-empty set").dist())
        .sum();
    total / from.len() as f64
}

/// Symmetric mean nearest-neighbour distance (un-squared, averaged over both
/// directions).
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("chamfer"));
    }
    let ta = KdTree::new(a.to_vec());
    let tb = KdTree::new(b.to_vec());
    Ok(0.5 * (directed_mean(a, &tb) + directed_mean(b, &ta)))
}

/// O(|A||B|) reference implementation of [`chamfer`].
pub fn chamfer_brute_force(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("chamfer"));
    }
    let dir = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| crate::spatial::dist2(p, q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (dir(a, b) + dir(b, a)))
}

/// Lifts per-dropped-point z estimates into 3-D points that keep the
/// observed `(x, y)`.
pub fn z_only_points(frame: &SparseFrame, z_hat: &[f64]) -> Result<Vec<[f64; 3]>> {
    let dropped = frame.dropped_indices();
    if dropped.len() != z_hat.len() {
        return Err(Error::shape(
            "z_only_points",
            format!("{} estimates for {} dropped points", z_hat.len(), dropped.len()),
        ));
    }
    Ok(dropped
        .iter()
        .zip(z_hat)
        .map(|(&i, &z)| {
            let [x, y] = frame.xy(i);
            [x, y, z]
        })
        .collect())
}

fn true_points(frame: &SparseFrame, indices: &[usize]) -> Vec<[f64; 3]> {
    let z = frame.z_truth();
    indices
        .iter()
        .map(|&i| {
            let [x, y] = frame.xy(i);
            [x, y, z[i]]
        })
        .collect()
}

/// Timing and labelling that accompany a reconstruction.
#[derive(Clone, Debug, Default)]
pub struct RunInfo {
    pub frame: String,
    pub method: String,
    pub k: usize,
    pub train_s: f64,
    pub infer_s: f64,
}

/// Scores a reconstruction of the dropped points (given in
/// `frame.dropped_indices()` order).
pub fn evaluate(
    frame: &SparseFrame,
    reconstructed: &[[f64; 3]],
    info: RunInfo,
    scope: ChamferScope,
) -> Result<EvalReport> {
    let dropped = frame.dropped_indices();
    check_lengths("evaluate", reconstructed.len(), dropped.len())?;
    let truth = true_points(frame, &dropped);
    let z_hat: Vec<f64> = reconstructed.iter().map(|p| p[2]).collect();
    let z_true: Vec<f64> = truth.iter().map(|p| p[2]).collect();
    let chamfer = match scope {
        ChamferScope::Dropped => chamfer(reconstructed, &truth)?,
        ChamferScope::FullCloud => {
            let observed = true_points(frame, &frame.observed_indices());
            let mut rec = observed.clone();
            rec.extend_from_slice(reconstructed);
            let mut full = observed;
            full.extend(truth.iter().copied());
            chamfer(&rec, &full)?
        }
    };
    Ok(EvalReport {
        frame: info.frame,
        method: info.method,
        k: info.k,
        rmse_z: rmse_z(&z_hat, &z_true)?,
        rmse_xyz: rmse_xyz(reconstructed, &truth)?,
        chamfer,
        train_s: info.train_s,
        infer_s: info.infer_s,
        n_dropped: dropped.len(),
    })
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for n = 1).
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Mean ± SD of every metric across a group of reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub k: usize,
    pub frames: usize,
    pub rmse_z: MeanSd,
    pub rmse_xyz: MeanSd,
    pub chamfer: MeanSd,
    pub train_s: MeanSd,
    pub infer_s: MeanSd,
}

pub const SUMMARY_HEADER: [&str; 13] = [
    "method", "k", "frames", "rmse_z_mean", "rmse_z_sd", "rmse_xyz_mean", "rmse_xyz_sd",
    "chamfer_mean", "chamfer_sd", "train_s_mean", "train_s_sd", "infer_s_mean", "infer_s_sd",
];

/// Aggregates reports over frames. Reports are expected to share one method
/// and k; the first report's labels are used.
pub fn aggregate(reports: &[EvalReport]) -> Result<Aggregate> {
    let first = reports.first().ok_or(Error::EmptyInput("aggregate"))?;
    let stat = |f: fn(&EvalReport) -> f64| {
        let v: Vec<f64> = reports.iter().map(f).collect();
        let (mean, sd) = mean_sd(&v).expect("non-empty");
        MeanSd { mean, sd }
    };
    Ok(Aggregate {
        method: first.method.clone(),
        k: first.k,
        frames: reports.len(),
        rmse_z: stat(|r| r.rmse_z),
        rmse_xyz: stat(|r| r.rmse_xyz),
        chamfer: stat(|r| r.chamfer),
        train_s: stat(|r| r.train_s),
        infer_s: stat(|r| r.infer_s),
    })
}

/// Groups reports by (method, k), keeping first-seen order.
pub fn aggregate_by_method(reports: &[EvalReport]) -> Result<Vec<Aggregate>> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in reports {
        let key = (r.method.clone(), r.k);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(m, k)| {
            let group: Vec<EvalReport> =
                reports.iter().filter(|r| r.method == m && r.k == k).cloned().collect();
            aggregate(&group)
        })
        .collect()
}

fn fmt(v: f64) -> String {
    format!("{v:.9}")
}

pub fn write_reports<W: Write>(reports: &[EvalReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        w.write_record([
            r.frame.clone(),
            r.method.clone(),
            r.k.to_string(),
            fmt(r.rmse_z),
            fmt(r.rmse_xyz),
            fmt(r.chamfer),
            fmt(r.train_s),
            fmt(r.infer_s),
            r.n_dropped.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_summary<W: Write>(aggs: &[Aggregate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for a in aggs {
        let mut row = vec![a.method.clone(), a.k.to_string(), a.frames.to_string()];
        for s in [a.rmse_z, a.rmse_xyz, a.chamfer, a.train_s, a.infer_s] {
            row.push(fmt(s.mean));
            row.push(fmt(s.sd));
        }
        w.write_record(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Dumps reconstructed and true dropped points so reported metrics can be
/// recomputed offline.
pub fn write_predictions<W: Write>(
    frame: &SparseFrame,
    reconstructed: &[[f64; 3]],
    out: W,
) -> Result<()> {
    let dropped = frame.dropped_indices();
    check_lengths("write_predictions", reconstructed.len(), dropped.len())?;
    let truth = true_points(frame, &dropped);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "x_pred", "y_pred", "z_pred", "x_true", "y_true", "z_true"])?;
    for ((i, p), t) in dropped.iter().zip(reconstructed).zip(&truth) {
        let mut row = vec![i.to_string()];
        row.extend(p.iter().chain(t).map(|v| format!("{v:?}")));
        w.write_record(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a predictions dump back as `(predicted, true)` point lists.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for row in r.deserialize() {
        let (_, xp, yp, zp, xt, yt, zt): (usize, f64, f64, f64, f64, f64, f64) = row?;
        pred.push([xp, yp, zp]);
        truth.push([xt, yt, zt]);
    }
    Ok((pred, truth))
}

/// X-Z profile rows `x,z_truth,z_pred,dropped`: every `stride`-th dropped
/// point (always at least the first) followed by all observed points.
pub fn write_xz_projection<W: Write>(
    frame: &SparseFrame,
    z_hat: &[f64],
    stride: usize,
    out: W,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidConfig("projection stride must be >= 1".into()));
    }
    let dropped = frame.dropped_indices();
    if z_hat.len() != dropped.len() {
        return Err(Error::shape("write_xz_projection", "prediction count"));
    }
    let z = frame.z_truth();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "z_truth", "z_pred", "dropped"])?;
    let mut emitted = 0;
    for (n, (&i, &zh)) in dropped.iter().zip(z_hat).enumerate() {
        if n % stride == 0 {
            let x = frame.cloud.points[i].x;
            w.write_record([format!("{x:?}"), format!("{:?}", z[i]), format!("{zh:?}"), "1".into()])?;
            emitted += 1;
        }
    }
    for i in frame.observed_indices() {
        let x = frame.cloud.points[i].x;
        let zi = format!("{:?}", z[i]);
        w.write_record([format!("{x:?}"), zi.clone(), zi, "0".into()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(emitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn rmse_z_examples() {
        assert_eq!(rmse_z(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse_z(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(rmse_z(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 12.5f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(rmse_z(&[], &[]), Err(Error::EmptyInput(_))));
        assert!(rmse_z(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_xyz_reduces_to_z_over_root3() {
        // published pairs: 0.472 -> 0.272 and 0.181 -> 0.104
        for (z, xyz) in [(0.472, 0.272), (0.181, 0.104)] {
            let pred = [[1.0, 2.0, z]];
            let truth = [[1.0, 2.0, 0.0]];
            let r = rmse_xyz(&pred, &truth).unwrap();
            assert_abs_diff_eq!(r * 3f64.sqrt(), z, epsilon = 1e-15);
            assert_abs_diff_eq!(r, xyz, epsilon = 1e-3);
        }
        assert_eq!(rmse_xyz(&[[1.0, 1.0, 1.0]], &[[1.0, 1.0, 1.0]]).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_examples() {
        let a = [[0.0, 0.0, 0.0]];
        assert_eq!(chamfer(&a, &[[3.0, 4.0, 0.0]]).unwrap(), 5.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &[]).is_err());
        // asymmetric coverage: A={0}, B={0,2} -> 0.5*(0 + 1)
        let b = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(chamfer(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn mean_sd_examples() {
        let (m, s) = mean_sd(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert_abs_diff_eq!(s, 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(mean_sd(&[4.0]).unwrap(), (4.0, 0.0));
        assert_eq!(mean_sd(&[2.5, 2.5, 2.5]).unwrap().1, 0.0);
        assert!(mean_sd(&[]).is_none());
    }

    #[test]
    fn aggregate_groups() {
        let rep = |m: &str, v: f64| EvalReport {
            frame: "f".into(),
            method: m.into(),
            k: 10,
            rmse_z: v,
            rmse_xyz: v,
            chamfer: v,
            train_s: 0.0,
            infer_s: 0.0,
            n_dropped: 1,
        };
        let aggs = aggregate_by_method(&[rep("a", 1.0), rep("b", 5.0), rep("a", 3.0)]).unwrap();
        assert_eq!(aggs.len(), 2);
        assert_eq!(aggs[0].method, "a");
        assert_eq!(aggs[0].rmse_z.mean, 2.0);
        assert_eq!(aggs[1].rmse_z, MeanSd { mean: 5.0, sd: 0.0 });
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let r = EvalReport {
            frame: "000001".into(),
            method: "linear".into(),
            k: 10,
            rmse_z: 0.25,
            rmse_xyz: 0.25 / 3f64.sqrt(),
            chamfer: 0.125,
            train_s: 0.0,
            infer_s: 0.5,
            n_dropped: 42,
        };
        let mut buf = Vec::new();
        write_reports(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("frame,method,k,rmse_z,rmse_xyz,chamfer,train_s,infer_s,n_dropped\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, text).unwrap();
        let back = read_reports(&p).unwrap();
        assert_eq!(back[0].method, "linear");
        assert_abs_diff_eq!(back[0].rmse_xyz, r.rmse_xyz, epsilon = 1e-9);
    }

    fn point_set(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<[f64; 3]>> {
        prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -3.0f64..3.0), n)
            .prop_map(|v| v.into_iter().map(|(x, y, z)| [x, y, z]).collect())
    }

    proptest! {
        #[test]
        fn chamfer_matches_brute_force(a in point_set(1..120), b in point_set(1..120)) {
            let fast = chamfer(&a, &b).unwrap();
            let slow = chamfer_brute_force(&a, &b).unwrap();
            prop_assert!((fast - slow).abs() <= 1e-12);
        }

        #[test]
        fn chamfer_symmetric_and_translation_invariant(
            a in point_set(1..60), b in point_set(1..60), t in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0)
        ) {
            let ab = chamfer(&a, &b).unwrap();
            prop_assert!((ab - chamfer(&b, &a).unwrap()).abs() <= 1e-12);
            prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
            let shift = |s: &[[f64; 3]]| s.iter().map(|p| [p[0] + t.0, p[1] + t.1, p[2] + t.2]).collect::<Vec<_>>();
            prop_assert!((ab - chamfer(&shift(&a), &shift(&b)).unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn rmse_z_order_invariant(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..50), rot in 0usize..50) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let r = rot % pairs.len();
            let mut a2 = a.clone();
            let mut b2 = b.clone();
            a2.rotate_left(r);
            b2.rotate_left(r);
            a2.reverse();
            b2.reverse();
            let x = rmse_z(&a, &b).unwrap();
            let y = rmse_z(&a2, &b2).unwrap();
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }
    }
}
