//! Seeded synthetic data: Gaussian-blob phantoms and random cubic B-spline
//! deformations, combined into registration pairs with known flow.

mod bspline;

pub use bspline::{bspline_flow_from_controls, random_bspline_flow, BSplineFieldSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    add3, check_same_grid, sample::Stencil, warp_volume, FlowField, GridSpec, Vec3, Volume,
};
use crate::metrics::{warp_mask, LandmarkSet, SegmentationMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub blobs: usize,
    /// Peak amplitude range of each blob.
    pub intensity: [f64; 2],
    /// Standard-deviation range of each blob, in voxels.
    pub sigma: [f64; 2],
    /// Width of one extra unit-amplitude "body" blob near the centre, as a
    /// fraction of the smallest dimension; it dominates the half-max mask.
    /// Zero disables it.
    pub body_scale: f64,
    /// Exponent on the body's squared radius: 1 is Gaussian, larger values
    /// flatten the top and sharpen the edge so texture cannot tear the mask.
    pub body_power: f64,
    /// Texture blob centres are redrawn (a bounded number of times) while
    /// closer than this multiple of the summed sigmas to an earlier blob.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            blobs: 320,
            intensity: [0.2, 0.6],
            sigma: [1.3, 2.8],
            body_scale: 0.22,
            body_power: 3.0,
            min_separation: 0.75,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<GridSpec> {
        let grid = GridSpec::from_dims(self.dims)?;
        if self.blobs == 0 {
            return Err(Error::Config("phantom needs at least one blob".into()));
        }
        let ok = |r: [f64; 2], min: f64| r[0].is_finite() && r[1].is_finite() && min < r[0] && r[0] <= r[1];
        if !ok(self.intensity, 0.0) || !ok(self.sigma, 0.0) {
            return Err(Error::Config(format!(
                "phantom ranges must satisfy 0 < lo <= hi: intensity {:?}, sigma {:?}",
                self.intensity, self.sigma
            )));
        }
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.body_scale) || !nonneg(self.min_separation) || !(self.body_power >= 1.0 && self.body_power.is_finite()) {
            return Err(Error::Config(format!(
                "phantom body_scale {}, min_separation {} must be >= 0 and body_power {} >= 1",
                self.body_scale, self.min_separation, self.body_power
            )));
        }
        Ok(grid)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    /// Voxels above half the volume's maximum.
    pub mask: SegmentationMask,
    /// One landmark per texture blob, at its centre.
    pub landmarks: LandmarkSet,
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Sum of isotropic Gaussian blobs with centres in the inner 70% of each
/// axis, on top of an optional wide body blob.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let grid = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hi = grid.upper_bounds();
    let mut blobs = Vec::with_capacity(spec.blobs);
    let mut landmarks = LandmarkSet::default();
    if spec.body_scale > 0.0 {
        let c: Vec3 = std::array::from_fn(|a| hi[a] * rng.gen_range(0.45..=0.55));
        let min_dim = grid.dims().into_iter().min().unwrap_or(2) as f64;
        let sigma = spec.body_scale * min_dim;
        blobs.push((c, 1.0, 0.5 / (sigma * sigma), spec.body_power));
    }
    let textured = blobs.len();
    let draw_centre = |rng: &mut ChaCha8Rng| -> Vec3 { std::array::from_fn(|a| rng.gen_range(0.15 * hi[a]..=0.85 * hi[a])) };
    for k in 0..spec.blobs {
        let mut c = draw_centre(&mut rng);
        let amp = sample_range(&mut rng, spec.intensity);
        let sigma = sample_range(&mut rng, spec.sigma);
        if spec.min_separation > 0.0 {
            let clashes = |c: Vec3, blobs: &[(Vec3, f64, f64, f64)]| {
                blobs[textured..].iter().any(|&(o, _, ko, _)| {
                    let reach = spec.min_separation * ((0.5 / ko).sqrt() + sigma);
                    (0..3).map(|a| (o[a] - c[a]).powi(2)).sum::<f64>() < reach * reach
                })
            };
            // Crowded specs fall back to the last draw rather than looping.
            for _ in 0..200 {
                if !clashes(c, &blobs) {
                    break;
                }
                c = draw_centre(&mut rng);
            }
        }
        landmarks.push(format!("blob{k}"), c)?;
        blobs.push((c, amp, 0.5 / (sigma * sigma), 1.0));
    }
    // Each blob is summed over its +-5 sigma box, beyond which it is below
    // 4e-6 of its peak.
    let mut data = vec![0.0; grid.len()];
    let dims = grid.dims();
    for &(c, amp, k, pw) in &blobs {
        let r = (12.5f64.powf(1.0 / pw) / k).sqrt();
        let span = |a: usize| {
            let lo = (c[a] - r).floor().max(0.0) as usize;
            let hi = ((c[a] + r).ceil() as usize).min(dims[a] - 1);
            lo..=hi
        };
        for z in span(2) {
            for y in span(1) {
                let dyz = (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                for x in span(0) {
                    let d2 = (x as f64 - c[0]).powi(2) + dyz;
                    data[grid.index(x, y, z)] += amp * (-(k * d2).powf(pw)).exp();
                }
            }
        }
    }
    let volume = Volume::from_raw(grid, data);
    let (_, max) = volume.min_max();
    let mask = SegmentationMask::from_volume(&volume, 0.5 * max);
    Ok(Phantom { volume, mask, landmarks })
}

/// A registration pair whose fixed-to-moving flow is known exactly.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub fixed: Volume,
    pub moving: Volume,
    /// Displacement `g` with `moving(x + g(x)) ~ fixed(x)`.
    pub ground_truth: FlowField,
    pub fixed_mask: SegmentationMask,
    pub moving_mask: SegmentationMask,
    pub fixed_landmarks: LandmarkSet,
    pub moving_landmarks: LandmarkSet,
}

const INVERSE_ITERATIONS: usize = 30;

/// Numerical inverse `h` of the deformation `x -> x + g(x)`, from the fixed
/// point `h(y) = -g(y + h(y))`.
pub fn invert_flow(g: &FlowField) -> FlowField {
    let grid = g.grid();
    let data = g.data();
    let mut h: Vec<Vec3> = data.iter().map(|d| [-d[0], -d[1], -d[2]]).collect();
    for _ in 0..INVERSE_ITERATIONS {
        for (i, hi) in h.iter_mut().enumerate() {
            let d = Stencil::new(&grid, add3(grid.position(i), *hi)).interpolate3(data);
            *hi = [-d[0], -d[1], -d[2]];
        }
    }
    FlowField::from_raw(grid, h)
}

/// Deforms `phantom` so that `flow` is the ground-truth registration flow.
///
/// The moving image is the fixed image resampled through the inverse of
/// `flow`; warping the moving image by `flow` then recovers the fixed image,
/// which is what a registration flow means. Landmarks map as `x + flow(x)`.
pub fn make_pair(phantom: &Phantom, flow: &FlowField) -> Result<SyntheticPair> {
    let grid = phantom.volume.grid();
    check_same_grid(&grid, &flow.grid(), "make_pair")?;
    let inverse = invert_flow(flow);
    let moving = warp_volume(&phantom.volume, &inverse)?;
    let moving_mask = warp_mask(&phantom.mask, &inverse)?;
    let mut moving_landmarks = LandmarkSet::default();
    for (name, x) in phantom.landmarks.iter() {
        let d = Stencil::new(&grid, x).interpolate3(flow.data());
        moving_landmarks.push(name, add3(x, d))?;
    }
    Ok(SyntheticPair {
        fixed: phantom.volume.clone(),
        moving,
        ground_truth: flow.clone(),
        fixed_mask: phantom.mask.clone(),
        moving_mask,
        fixed_landmarks: phantom.landmarks.clone(),
        moving_landmarks,
    })
}
