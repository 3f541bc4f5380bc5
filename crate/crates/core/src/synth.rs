//! Simulated 64-beam scanner over analytic scenes.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{stratified_sample, BeamModel, PointCloud, RawPoint};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Flat ground at `-sensor_height`.
    #[default]
    Plane,
    /// Ground undulating as `A·sin(2πx/λ)·sin(2πy/λ)`.
    Sinusoidal,
    /// Flat ground meeting a vertical wall at `x = wall_distance`.
    WallGround,
}

impl SceneKind {
    pub fn tag(&self) -> &'static str {
        match self {
            SceneKind::Plane => "plane",
            SceneKind::Sinusoidal => "sinusoidal",
            SceneKind::WallGround => "wall_ground",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub kind: SceneKind,
    /// Maximum planar range of a return, meters.
    pub extent_m: f64,
    /// Exact number of points in the produced cloud.
    pub points: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub sensor_height: f64,
    pub amplitude: f64,
    pub wavelength: f64,
    pub wall_distance: f64,
    pub wall_height: f64,
    /// Horizontal field of view centred on +x, degrees.
    pub fov_deg: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::Plane,
            extent_m: 40.0,
            points: 4000,
            noise_sigma: 0.0,
            seed: 0,
            sensor_height: 1.73,
            amplitude: 0.5,
            wavelength: 12.0,
            wall_distance: 12.0,
            wall_height: 4.0,
            fov_deg: 360.0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points < 100 {
            return Err(Error::InvalidConfig("synthetic point count must be >= 100".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise sigma must be >= 0".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 360.0) {
            return Err(Error::InvalidConfig("field of view must lie in (0, 360]".into()));
        }
        if !(self.extent_m > 0.0) || !(self.sensor_height > 0.0) || !(self.wavelength > 0.0) {
            return Err(Error::InvalidConfig(
                "extent, sensor height and wavelength must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Ground height at `(x, y)`; the wall is handled separately.
    pub fn ground(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            SceneKind::Sinusoidal => {
                let w = TAU / self.wavelength;
                -self.sensor_height + self.amplitude * (w * x).sin() * (w * y).sin()
            }
            _ => -self.sensor_height,
        }
    }

    /// First surface hit of a ray from the origin, if within range.
    fn cast(&self, elev: f64, azimuth: f64) -> Option<[f64; 3]> {
        let (ce, se) = (elev.cos(), elev.sin());
        let (ca, sa) = (azimuth.cos(), azimuth.sin());
        let at = |t: f64| [t * ce * ca, t * ce * sa, t * se];
        let t_max = self.extent_m / ce;
        match self.kind {
            SceneKind::Plane | SceneKind::WallGround => {
                let mut best = if se < 0.0 {
                    Some(self.sensor_height / -se)
                } else {
                    None
                };
                if self.kind == SceneKind::WallGround && ca > 0.0 {
                    let t = self.wall_distance / (ce * ca);
                    let z = t * se;
                    if z >= -self.sensor_height && z <= self.wall_height - self.sensor_height {
                        best = Some(best.map_or(t, |g| g.min(t)));
                    }
                }
                best.filter(|&t| t <= t_max).map(at)
            }
            SceneKind::Sinusoidal => {
                // march until the ray passes below the surface, then bisect
                let f = |t: f64| {
                    let p = at(t);
                    p[2] - self.ground(p[0], p[1])
                };
                let step = (self.wavelength / 48.0).min(0.25);
                let mut lo = 0.0;
                let mut t = step;
                while t <= t_max {
                    if f(t) <= 0.0 {
                        let mut hi = t;
                        for _ in 0..60 {
                            let mid = 0.5 * (lo + hi);
                            if f(mid) > 0.0 {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                        }
                        let p = at(hi);
                        // snap onto the surface so noise-free clouds are exact
                        return Some([p[0], p[1], self.ground(p[0], p[1])]);
                    }
                    lo = t;
                    t += step;
                }
                None
            }
        }
    }
}

fn scan(spec: &SyntheticSceneSpec, model: &BeamModel, azimuths: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut points = Vec::new();
    let mut beams = Vec::new();
    for b in 0..model.num_beams {
        let elev = model.beam_center_deg(b).to_radians();
        let fov = spec.fov_deg.to_radians();
        let phase = rng.random_range(0.0..1.0);
        for j in 0..azimuths {
            let az = -0.5 * fov + fov * (j as f64 + phase) / azimuths as f64;
            if let Some([x, y, z]) = spec.cast(elev, az) {
                let dz = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                points.push(RawPoint::new(x, y, z + dz, 0.0));
                beams.push(b);
            }
        }
    }
    PointCloud::with_beams(points, beams, model.num_beams)
}

/// Scans the scene with the default HDL-64E beam layout and subsamples to
/// exactly `spec.points` points, beam-stratified.
pub fn synthesize_scene(spec: &SyntheticSceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let model = BeamModel::default();
    let want = (spec.points as f64 * 1.2).ceil() as usize;
    let mut azimuths = 64;
    for _ in 0..8 {
        let cloud = scan(spec, &model, azimuths, spec.seed)?;
        if cloud.len() >= want {
            return stratified_sample(&cloud, spec.points, spec.seed ^ 0x5eed);
        }
        let grow = if cloud.is_empty() {
            4.0
        } else {
            want as f64 / cloud.len() as f64
        };
        azimuths = ((azimuths as f64 * grow).ceil() as usize + 1).min(1 << 16);
    }
    Err(Error::InvalidConfig(format!(
        "scene yields too few returns for {} points",
        spec.points
    )))
}
