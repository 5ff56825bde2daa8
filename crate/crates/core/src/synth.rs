//! Synthetic volumetric segmentation cases: a background plus one
//! axis-aligned ellipsoid per foreground class, rendered as an intensity
//! volume with Gaussian noise and an exact voxel label map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Noise level added to every voxel intensity.
pub const NOISE_SIGMA: f64 = 0.1;
/// Semi-axis range as a fraction of the cube edge.
pub const SEMI_AXIS_RANGE: (f64, f64) = (0.16, 0.24);
/// Minimum fraction of the volume each foreground class must occupy.
pub const MIN_CLASS_FRACTION: f64 = 0.01;
/// Placement attempts per ellipsoid before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// One axis-aligned ellipsoid. A voxel at integer coordinates (d, h, w)
/// belongs to it when the point (d+0.5, h+0.5, w+0.5) lies inside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub class: u8,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains_voxel(&self, voxel: [usize; 3]) -> bool {
        let mut q = 0.0;
        for axis in 0..3 {
            let d = (voxel[axis] as f64 + 0.5 - self.center[axis]) / self.semi_axes[axis];
            q += d * d;
        }
        q <= 1.0
    }
}

/// One training example: intensity volume, voxel labels, isotropic spacing.
#[derive(Debug)]
pub struct SegmentationCase {
    /// Intensities, shape 1 x 1 x size x size x size, float32.
    pub volume: Tensor,
    /// Row-major voxel labels in [0, num_classes).
    pub labels: Vec<u8>,
    pub shape: [usize; 3],
    pub num_classes: usize,
    /// Voxel spacing per axis, fixed at 1.0.
    pub spacing: f64,
}

fn validate_args(size: usize, num_classes: usize) -> Result<()> {
    if size == 0 || size % 16 != 0 {
        return Err(Error::Config(format!(
            "case size must be a positive multiple of 16, got {size}"
        )));
    }
    if !(2..=256).contains(&num_classes) {
        return Err(Error::Config(format!(
            "num_classes must be in 2..=256, got {num_classes}"
        )));
    }
    Ok(())
}

fn rasterize(ellipsoid: &Ellipsoid, size: usize) -> Vec<usize> {
    let bounds = |axis: usize| {
        let lo = (ellipsoid.center[axis] - ellipsoid.semi_axes[axis] - 0.5).floor().max(0.0) as usize;
        let hi = ((ellipsoid.center[axis] + ellipsoid.semi_axes[axis] + 0.5).ceil() as usize).min(size);
        (lo, hi)
    };
    let (d0, d1) = bounds(0);
    let (h0, h1) = bounds(1);
    let (w0, w1) = bounds(2);
    let mut voxels = Vec::new();
    for d in d0..d1 {
        for h in h0..h1 {
            for w in w0..w1 {
                if ellipsoid.contains_voxel([d, h, w]) {
                    voxels.push((d * size + h) * size + w);
                }
            }
        }
    }
    voxels
}

fn plan_with_rng(rng: &mut ChaCha20Rng, size: usize, num_classes: usize) -> Result<Vec<Ellipsoid>> {
    let s = size as f64;
    let min_voxels = (MIN_CLASS_FRACTION * s * s * s).ceil() as usize;
    let mut occupancy = vec![false; size * size * size];
    let mut plan = Vec::with_capacity(num_classes - 1);
    for class in 1..num_classes {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let mut semi_axes = [0.0; 3];
            let mut center = [0.0; 3];
            for axis in 0..3 {
                semi_axes[axis] = rng.gen_range(SEMI_AXIS_RANGE.0 * s..SEMI_AXIS_RANGE.1 * s);
                center[axis] = rng.gen_range(semi_axes[axis]..s - semi_axes[axis]);
            }
            let candidate = Ellipsoid { class: class as u8, center, semi_axes };
            let voxels = rasterize(&candidate, size);
            if voxels.len() < min_voxels || voxels.iter().any(|&v| occupancy[v]) {
                continue;
            }
            for &v in &voxels {
                occupancy[v] = true;
            }
            plan.push(candidate);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place a non-overlapping ellipsoid for class {class} \
                 after {MAX_PLACEMENT_ATTEMPTS} attempts (size {size}, {num_classes} classes)"
            )));
        }
    }
    Ok(plan)
}

/// The deterministic ellipsoid layout a given seed produces. Exposed so the
/// label map can be re-derived independently of the rendered case.
pub fn plan_ellipsoids(seed: u64, size: usize, num_classes: usize) -> Result<Vec<Ellipsoid>> {
    validate_args(size, num_classes)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    plan_with_rng(&mut rng, size, num_classes)
}

/// Generate one case: plan ellipsoids, rasterize the label map, and render
/// intensities as class/(num_classes-1) plus Gaussian noise.
pub fn generate_synthetic_case(seed: u64, size: usize, num_classes: usize) -> Result<SegmentationCase> {
    let plan = plan_ellipsoids(seed, size, num_classes)?;
    let voxel_count = size * size * size;
    let mut labels = vec![0u8; voxel_count];
    for ellipsoid in &plan {
        for v in rasterize(ellipsoid, size) {
            labels[v] = ellipsoid.class;
        }
    }

    // The noise stream gets its own seed so the plan alone reproduces the
    // label map.
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let scale = 1.0 / (num_classes - 1) as f64;
    let data: Vec<f32> = labels
        .iter()
        .map(|&label| (label as f64 * scale + noise.sample(&mut rng)) as f32)
        .collect();
    let volume = Tensor::from_vec_f32(&[1, 1, size, size, size], data)?;
    Ok(SegmentationCase {
        volume,
        labels,
        shape: [size, size, size],
        num_classes,
        spacing: 1.0,
    })
}
