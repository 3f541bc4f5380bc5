//! LiDAR frame ingestion: KITTI velodyne decoding, beam estimation,
//! beam-stratified sampling and structured beam dropout.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per KITTI velodyne record: four little-endian `f32`.
pub const KITTI_RECORD_BYTES: usize = 16;

/// HDL-64E vertical field of view, degrees.
pub const HDL64_ELEV_MIN_DEG: f64 = -24.8;
pub const HDL64_ELEV_MAX_DEG: f64 = 2.0;
pub const HDL64_BEAMS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectance, clamped to `[0, 1]`.
    pub r: f64,
}

impl RawPoint {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self {
            x,
            y,
            z,
            r: r.clamp(0.0, 1.0),
        }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Elevation angle in degrees.
    pub fn elevation_deg(&self) -> f64 {
        self.z.atan2(self.x.hypot(self.y)).to_degrees()
    }

    pub fn azimuth(&self) -> f64 {
        self.y.atan2(self.x)
    }
}

/// An ordered LiDAR frame with optional per-point beam indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<RawPoint>,
    beams: Option<Vec<usize>>,
    num_beams: usize,
}

impl PointCloud {
    pub fn new(points: Vec<RawPoint>) -> Self {
        Self {
            points,
            beams: None,
            num_beams: HDL64_BEAMS,
        }
    }

    pub fn with_beams(points: Vec<RawPoint>, beams: Vec<usize>, num_beams: usize) -> Result<Self> {
        if beams.len() != points.len() {
            return Err(Error::InvalidConfig(format!(
                "{} beam indices for {} points",
                beams.len(),
                points.len()
            )));
        }
        if num_beams == 0 {
            return Err(Error::InvalidConfig("num_beams must be positive".into()));
        }
        if let Some(b) = beams.iter().find(|&&b| b >= num_beams) {
            return Err(Error::InvalidConfig(format!(
                "beam index {b} outside [0, {num_beams})"
            )));
        }
        Ok(Self {
            points,
            beams: Some(beams),
            num_beams,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_beams(&self) -> usize {
        self.num_beams
    }

    pub fn beams(&self) -> Option<&[usize]> {
        self.beams.as_deref()
    }

    pub(crate) fn require_beams(&self, op: &str) -> Result<&[usize]> {
        self.beams
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("{op} requires beam indices")))
    }

    /// Point count per beam.
    pub fn beam_histogram(&self) -> Result<Vec<usize>> {
        let beams = self.require_beams("beam_histogram")?;
        let mut hist = vec![0; self.num_beams];
        for &b in beams {
            hist[b] += 1;
        }
        Ok(hist)
    }

    /// Sub-cloud of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            beams: self
                .beams
                .as_ref()
                .map(|b| indices.iter().map(|&i| b[i]).collect()),
            num_beams: self.num_beams,
        }
    }
}

/// Result of decoding a velodyne `.bin` file.
#[derive(Clone, Debug)]
pub struct BinRead {
    pub cloud: PointCloud,
    /// Records dropped because a coordinate or reflectance was NaN/Inf.
    pub skipped_non_finite: usize,
}

pub fn decode_kitti_bin(bytes: &[u8]) -> Result<BinRead> {
    if bytes.len() % KITTI_RECORD_BYTES != 0 {
        return Err(Error::TruncatedRecord { len: bytes.len() });
    }
    let mut points = Vec::with_capacity(bytes.len() / KITTI_RECORD_BYTES);
    let mut skipped = 0;
    for rec in bytes.chunks_exact(KITTI_RECORD_BYTES) {
        let mut v = [0f32; 4];
        for (slot, word) in v.iter_mut().zip(rec.chunks_exact(4)) {
            *slot = f32::from_le_bytes([word[0], word[1], word[2], word[3]]);
        }
        if v.iter().all(|c| c.is_finite()) {
            points.push(RawPoint::new(v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64));
        } else {
            skipped += 1;
        }
    }
    Ok(BinRead {
        cloud: PointCloud::new(points),
        skipped_non_finite: skipped,
    })
}

pub fn read_kitti_bin(path: impl AsRef<Path>) -> Result<BinRead> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_kitti_bin(&bytes)
}

pub fn encode_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * KITTI_RECORD_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_kitti_bin(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_kitti_bin(cloud)).map_err(|e| Error::io(path, e))
}

/// Vertical field-of-view model used to quantise elevation into beams.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamModel {
    pub num_beams: usize,
    pub elev_min_deg: f64,
    pub elev_max_deg: f64,
}

impl Default for BeamModel {
    fn default() -> Self {
        Self {
            num_beams: HDL64_BEAMS,
            elev_min_deg: HDL64_ELEV_MIN_DEG,
            elev_max_deg: HDL64_ELEV_MAX_DEG,
        }
    }
}

impl BeamModel {
    fn validate(&self) -> Result<()> {
        if self.num_beams < 2 {
            return Err(Error::InvalidConfig("num_beams must be >= 2".into()));
        }
        if !(self.elev_min_deg < self.elev_max_deg) {
            return Err(Error::InvalidConfig("elev_min must be < elev_max".into()));
        }
        Ok(())
    }

    pub fn beam_of_elevation(&self, elev_deg: f64) -> usize {
        let frac = (elev_deg - self.elev_min_deg) / (self.elev_max_deg - self.elev_min_deg);
        let b = (frac * self.num_beams as f64).floor();
        b.clamp(0.0, (self.num_beams - 1) as f64) as usize
    }

    /// Elevation at the centre of a beam's angular bin.
    pub fn beam_center_deg(&self, beam: usize) -> f64 {
        let step = (self.elev_max_deg - self.elev_min_deg) / self.num_beams as f64;
        self.elev_min_deg + (beam as f64 + 0.5) * step
    }
}

#[derive(Clone, Debug)]
pub struct BeamEstimate {
    pub cloud: PointCloud,
    /// Indices of points at the sensor origin; they are assigned beam 0.
    pub origin_points: Vec<usize>,
}

/// Assigns each point the beam whose elevation bin contains it.
pub fn estimate_beams(cloud: &PointCloud, model: BeamModel) -> Result<BeamEstimate> {
    model.validate()?;
    let mut origin_points = Vec::new();
    let beams = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.x == 0.0 && p.y == 0.0 && p.z == 0.0 {
                origin_points.push(i);
                0
            } else {
                model.beam_of_elevation(p.elevation_deg())
            }
        })
        .collect();
    if !origin_points.is_empty() {
        log::warn!("{} points at the sensor origin assigned beam 0", origin_points.len());
    }
    Ok(BeamEstimate {
        cloud: PointCloud::with_beams(cloud.points.clone(), beams, model.num_beams)?,
        origin_points,
    })
}

/// Splits `total` across buckets proportionally to `weights` with
/// largest-remainder rounding. Ties go to the lower bucket index.
pub(crate) fn largest_remainder(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut quotas = Vec::with_capacity(weights.len());
    let mut rems = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let exact = w as u128 * total as u128;
        quotas.push((exact / sum as u128) as usize);
        rems.push((exact % sum as u128, i));
    }
    let assigned: usize = quotas.iter().sum();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(total - assigned) {
        quotas[i] += 1;
    }
    quotas
}

/// Per-beam quotas summing to `min(target, total)` that keep every
/// non-empty beam alive when `target` allows it.
pub(crate) fn stratified_quotas(hist: &[usize], target: usize) -> Vec<usize> {
    let total: usize = hist.iter().sum();
    let target = target.min(total);
    let mut quotas = largest_remainder(hist, target);
    let nonempty = hist.iter().filter(|&&c| c > 0).count();
    if target >= nonempty {
        while let Some(starved) = (0..hist.len()).find(|&b| hist[b] > 0 && quotas[b] == 0) {
            // largest quota donates; ties to the lower beam
            let donor = (0..hist.len())
                .max_by(|&a, &b| quotas[a].cmp(&quotas[b]).then(b.cmp(&a)))
                .expect("non-empty histogram");
            quotas[donor] -= 1;
            quotas[starved] += 1;
        }
    }
    quotas
}

/// Beam-stratified subsample to `target` points, preserving original order.
pub fn stratified_sample(cloud: &PointCloud, target: usize, seed: u64) -> Result<PointCloud> {
    let beams = cloud.require_beams("stratified_sample")?;
    if target >= cloud.len() {
        return Ok(cloud.clone());
    }
    let hist = cloud.beam_histogram()?;
    let nonempty = hist.iter().filter(|&&c| c > 0).count();
    if target < nonempty {
        return Err(Error::InvalidConfig(format!(
            "sample target {target} is below the {nonempty} non-empty beams"
        )));
    }
    let quotas = stratified_quotas(&hist, target);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cloud.num_beams()];
    for (i, &b) in beams.iter().enumerate() {
        members[b].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(target);
    for (idx, quota) in members.iter().zip(&quotas) {
        if *quota == 0 {
            continue;
        }
        let picks = rand::seq::index::sample(&mut rng, idx.len(), *quota);
        keep.extend(picks.into_iter().map(|p| idx[p]));
    }
    keep.sort_unstable();
    Ok(cloud.select(&keep))
}

/// Which beams lose their returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropoutPattern {
    /// Beams with `beam % n == offset` are dropped.
    EveryNth { n: usize, offset: usize },
}

impl Default for DropoutPattern {
    fn default() -> Self {
        DropoutPattern::EveryNth { n: 4, offset: 0 }
    }
}

impl DropoutPattern {
    pub fn drops(&self, beam: usize) -> bool {
        match *self {
            DropoutPattern::EveryNth { n, offset } => beam % n == offset % n,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            DropoutPattern::EveryNth { n: 0, .. } => {
                Err(Error::InvalidConfig("dropout period must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A frame after beam dropout. Dropped points keep their `(x, y)`; only
/// their `z` is hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFrame {
    pub cloud: PointCloud,
    pub dropped_mask: Vec<bool>,
    pub z_masked: Vec<f64>,
    z_truth: Vec<f64>,
}

impl SparseFrame {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn beams(&self) -> &[usize] {
        self.cloud.beams().expect("sparse frames always carry beams")
    }

    pub fn num_beams(&self) -> usize {
        self.cloud.num_beams()
    }

    pub fn dropped_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.dropped_mask[i]).collect()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.dropped_mask[i]).collect()
    }

    pub fn dropped_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.dropped_mask.iter().filter(|&&d| d).count() as f64 / self.len() as f64
    }

    /// Ground-truth z of every point, dropped ones included. Evaluation code
    /// reads this; reconstruction methods must work from `z_masked`.
    pub fn z_truth(&self) -> &[f64] {
        &self.z_truth
    }

    /// Planar positions, which survive dropout.
    pub fn xy(&self, i: usize) -> [f64; 2] {
        self.cloud.points[i].xy()
    }
}

pub fn apply_beam_dropout(cloud: &PointCloud, pattern: DropoutPattern) -> Result<SparseFrame> {
    pattern.validate()?;
    let beams = cloud.require_beams("apply_beam_dropout")?;
    let dropped_mask: Vec<bool> = beams.iter().map(|&b| pattern.drops(b)).collect();
    let n_dropped = dropped_mask.iter().filter(|&&d| d).count();
    if n_dropped == 0 || n_dropped == cloud.len() {
        return Err(Error::InvalidConfig(format!(
            "dropout pattern {pattern:?} drops {n_dropped} of {} points",
            cloud.len()
        )));
    }
    let z_truth: Vec<f64> = cloud.points.iter().map(|p| p.z).collect();
    let z_masked = z_truth
        .iter()
        .zip(&dropped_mask)
        .map(|(&z, &d)| if d { 0.0 } else { z })
        .collect();
    Ok(SparseFrame {
        cloud: cloud.clone(),
        dropped_mask,
        z_masked,
        z_truth,
    })
}
