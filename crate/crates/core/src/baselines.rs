//! Parameter-free reconstruction baselines.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SparseFrame;
use crate::spatial::KdTree;

pub const DEFAULT_AZIMUTH_BINS: usize = 360;

/// For every azimuth bin and beam, the observed point closest to the bin
/// centre.
#[derive(Clone, Debug)]
pub struct AzimuthBins {
    bin_count: usize,
    num_beams: usize,
    best: Vec<Option<usize>>,
}

impl AzimuthBins {
    pub fn build(frame: &SparseFrame, bin_count: usize) -> Result<Self> {
        if bin_count < 8 {
            return Err(Error::InvalidConfig("azimuth bin count must be >= 8".into()));
        }
        let num_beams = frame.num_beams();
        let mut best: Vec<Option<usize>> = vec![None; bin_count * num_beams];
        let mut gap = vec![f64::INFINITY; bin_count * num_beams];
        let beams = frame.beams();
        for i in frame.observed_indices() {
            let az = frame.cloud.points[i].azimuth();
            let bin = Self::bin_of(bin_count, az);
            let d = (az - Self::center(bin_count, bin)).abs();
            let slot = bin * num_beams + beams[i];
            if d < gap[slot] {
                gap[slot] = d;
                best[slot] = Some(i);
            }
        }
        Ok(Self {
            bin_count,
            num_beams,
            best,
        })
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    pub fn bin_of(bin_count: usize, azimuth: f64) -> usize {
        let frac = (azimuth + PI).rem_euclid(TAU) / TAU;
        ((frac * bin_count as f64) as usize).min(bin_count - 1)
    }

    fn center(bin_count: usize, bin: usize) -> f64 {
        -PI + (bin as f64 + 0.5) * TAU / bin_count as f64
    }

    pub fn point(&self, bin: usize, beam: usize) -> Option<usize> {
        self.best[bin * self.num_beams + beam]
    }

    /// Nearest observed beam strictly below `beam` in `bin`.
    fn below(&self, bin: usize, beam: usize) -> Option<(usize, usize)> {
        (0..beam).rev().find_map(|b| self.point(bin, b).map(|i| (b, i)))
    }

    /// Nearest observed beam strictly above `beam` in `bin`.
    fn above(&self, bin: usize, beam: usize) -> Option<(usize, usize)> {
        (beam + 1..self.num_beams).find_map(|b| self.point(bin, b).map(|i| (b, i)))
    }

    /// Bins at ring distance `r` from `bin`, nearest-first.
    fn ring(&self, bin: usize, r: usize) -> Vec<usize> {
        let n = self.bin_count;
        let lo = (bin + n - r % n) % n;
        let hi = (bin + r) % n;
        if lo == hi {
            vec![lo]
        } else {
            vec![lo, hi]
        }
    }
}

/// Interpolates z across the beam stack inside azimuth bins.
///
/// For each dropped point the nearest observed beams below and above its own
/// beam are looked up in its azimuth bin; when a side is missing there, the
/// search widens to neighbouring bins. ẑ is the linear interpolation of the
/// two bracketing points' z against beam index; if one side does not exist
/// anywhere (top or bottom of the stack) the other side's z is copied.
///
/// Returns one estimate per dropped point, in `frame.dropped_indices()` order.
pub fn linear_interp(frame: &SparseFrame, bin_count: usize) -> Result<Vec<f64>> {
    if frame.observed_indices().is_empty() {
        return Err(Error::EmptyInput("linear_interp: no observed points"));
    }
    let bins = AzimuthBins::build(frame, bin_count)?;
    let beams = frame.beams();
    let z = &frame.z_masked;
    let max_ring = bin_count / 2;
    let pick = |cands: Vec<(usize, usize)>, prefer_high: bool| {
        cands.into_iter().max_by(|a, b| {
            let ord = if prefer_high { a.0.cmp(&b.0) } else { b.0.cmp(&a.0) };
            ord.then(b.1.cmp(&a.1))
        })
    };
    let out = frame
        .dropped_indices()
        .into_iter()
        .map(|i| {
            let b = beams[i];
            let bin = AzimuthBins::bin_of(bin_count, frame.cloud.points[i].azimuth());
            let mut lower = None;
            let mut upper = None;
            for r in 0..=max_ring {
                let ring = bins.ring(bin, r);
                if lower.is_none() {
                    lower = pick(ring.iter().filter_map(|&c| bins.below(c, b)).collect(), true);
                }
                if upper.is_none() {
                    upper = pick(ring.iter().filter_map(|&c| bins.above(c, b)).collect(), false);
                }
                if lower.is_some() && upper.is_some() {
                    break;
                }
            }
            match (lower, upper) {
                (Some((bl, il)), Some((bu, iu))) => {
                    let t = (b - bl) as f64 / (bu - bl) as f64;
                    z[il] + (z[iu] - z[il]) * t
                }
                (Some((_, i)), None) | (None, Some((_, i))) => z[i],
                (None, None) => unreachable!("at least one observed point exists"),
            }
        })
        .collect();
    Ok(out)
}

/// What a nearest-neighbour substitution copies from the matched point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnMode {
    /// Replace the dropped point by the matched point's full `(x, y, z)`.
    #[default]
    FullXyz,
    /// Keep `(x, y)`, copy only `z`.
    ZOnly,
}

/// Replaces each dropped point with its planar nearest observed neighbour.
///
/// Returns one reconstructed `(x, y, z)` per dropped point, in
/// `frame.dropped_indices()` order.
pub fn nearest_neighbor_sub(frame: &SparseFrame, mode: NnMode) -> Result<Vec<[f64; 3]>> {
    let observed = frame.observed_indices();
    if observed.is_empty() {
        return Err(Error::EmptyInput("nearest_neighbor_sub: no observed points"));
    }
    let tree = KdTree::new(observed.iter().map(|&i| frame.xy(i)).collect());
    Ok(frame
        .dropped_indices()
        .into_iter()
        .map(|i| {
            let nb = tree.nearest(&frame.xy(i)).expect("non-empty tree");
            let j = observed[nb.index];
            let [x, y] = frame.xy(j);
            match mode {
                NnMode::FullXyz => [x, y, frame.z_masked[j]],
                NnMode::ZOnly => {
                    let [xi, yi] = frame.xy(i);
                    [xi, yi, frame.z_masked[j]]
                }
            }
        })
        .collect())
}
