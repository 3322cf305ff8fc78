//! Evaluation metrics and synthetic phantoms with known deformations.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    resample_field, sample_field_trilinear, warp_mask_nearest, warp_volume, GridSpec, LabelMask, Vec3,
    VectorField3, Volume3,
};

/// `2|A∩B| / (|A|+|B|)` for one label; 1 when the label is absent from both.
pub fn dice(a: &LabelMask, b: &LabelMask, label: u16) -> Result<f64> {
    a.grid().check_same_dims(b.grid(), "dice")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Per-label Dice over the non-background labels of `fixed`, and their mean.
pub fn dice_report(warped: &LabelMask, fixed: &LabelMask) -> Result<(BTreeMap<u16, f64>, f64)> {
    let mut per_label = BTreeMap::new();
    for label in fixed.labels().into_iter().filter(|&l| l != 0) {
        per_label.insert(label, dice(warped, fixed, label)?);
    }
    let mean = if per_label.is_empty() {
        1.0
    } else {
        per_label.values().sum::<f64>() / per_label.len() as f64
    };
    Ok((per_label, mean))
}

/// `det(I + ∇S)` per node, `∇` by central differences in unit coordinates
/// and one-sided differences on the boundary.
pub fn jacobian_determinant(s: &VectorField3) -> Result<Volume3> {
    let d = s.dims();
    if d.iter().any(|&n| n < 3) {
        return Err(Error::InvalidGrid(format!("jacobian needs >= 3 nodes per axis, got {d:?}")));
    }
    let grid = *s.grid();
    let h = grid.unit_step();
    Ok(Volume3::from_fn(grid, |ijk| {
        let mut j = [[0.0; 3]; 3];
        for b in 0..3 {
            let (lo, hi) = match ijk[b] {
                0 => (0, 1),
                i if i == d[b] - 1 => (i - 1, i),
                i => (i - 1, i + 1),
            };
            let step = (hi - lo) as f64 * h[b];
            let mut p = ijk;
            p[b] = hi;
            let up = s.at(p[0], p[1], p[2]);
            p[b] = lo;
            let down = s.at(p[0], p[1], p[2]);
            for a in 0..3 {
                j[a][b] = (up[a] - down[a]) / step;
            }
        }
        for (a, row) in j.iter_mut().enumerate() {
            row[a] += 1.0;
        }
        det3(&j)
    }))
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Share of interior nodes (one-node shell excluded) with `det ≤ 0`.
pub fn fold_fraction(det: &Volume3) -> f64 {
    let d = det.dims();
    let mut interior = 0usize;
    let mut folded = 0usize;
    for k in 1..d[2].saturating_sub(1) {
        for j in 1..d[1].saturating_sub(1) {
            for i in 1..d[0].saturating_sub(1) {
                interior += 1;
                folded += (det.at(i, j, k) <= 0.0) as usize;
            }
        }
    }
    if interior == 0 {
        0.0
    } else {
        folded as f64 / interior as f64
    }
}

/// Mean and max of `|S − S_gt|` in voxels.
pub fn endpoint_error(s: &VectorField3, s_gt: &VectorField3) -> Result<(f64, f64)> {
    s.grid().check_same_dims(s_gt.grid(), "endpoint_error")?;
    let scale: Vec3 = s.dims().map(|n| (n - 1) as f64 / 2.0);
    let errs: Vec<f64> = s
        .data()
        .iter()
        .zip(s_gt.data())
        .map(|(a, b)| (0..3).map(|c| ((a[c] - b[c]) * scale[c]).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let max = errs.iter().copied().fold(0.0, f64::max);
    Ok((mean, max))
}

/// Mean `|S|` in voxels.
pub fn mean_displacement_voxels(s: &VectorField3) -> f64 {
    let scale: Vec3 = s.dims().map(|n| (n - 1) as f64 / 2.0);
    let sum: f64 = s
        .data()
        .iter()
        .map(|v| (0..3).map(|c| (v[c] * scale[c]).powi(2)).sum::<f64>().sqrt())
        .sum();
    sum / s.data().len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice_per_label: BTreeMap<u16, f64>,
    pub dice_mean: f64,
    pub fold_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_endpoint_error_voxels: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_endpoint_error_voxels: Option<f64>,
    pub runtime_seconds: f64,
}

/// Warps `moving_mask` by `s` onto the fixed grid and scores it. When a
/// ground-truth field is given and lives on a different grid, `s` is
/// resampled onto it before the endpoint comparison.
pub fn evaluate_field(
    s: &VectorField3,
    moving_mask: &LabelMask,
    fixed_mask: &LabelMask,
    ground_truth: Option<&VectorField3>,
) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    moving_mask.grid().check_same_dims(fixed_mask.grid(), "masks")?;
    let warped = warp_mask_nearest(moving_mask, s, fixed_mask.grid());
    let (dice_per_label, dice_mean) = dice_report(&warped, fixed_mask)?;
    let fold = fold_fraction(&jacobian_determinant(s)?);
    let epe = match ground_truth {
        Some(gt) if gt.dims() == s.dims() => Some(endpoint_error(s, gt)?),
        Some(gt) => Some(endpoint_error(&resample_field(s, gt.dims())?, gt)?),
        None => None,
    };
    Ok(EvalReport {
        dice_per_label,
        dice_mean,
        fold_fraction: fold,
        mean_endpoint_error_voxels: epe.map(|e| e.0),
        max_endpoint_error_voxels: epe.map(|e| e.1),
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub n_blobs: usize,
    pub intensity_range: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            n_blobs: 3,
            intensity_range: (0.0, 1.0),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n < 8) {
            return Err(Error::InvalidArgument(format!("phantom dims must be >= 8, got {:?}", self.dims)));
        }
        if self.n_blobs == 0 || self.n_blobs > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("n_blobs out of range: {}", self.n_blobs)));
        }
        let (lo, hi) = self.intensity_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidArgument(format!("bad intensity range ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    center: Vec3,
    radii: Vec3,
    level: f64,
    phase: Vec3,
}

impl Blob {
    /// Ellipsoidal radius: < 1 inside.
    fn rho(&self, p: Vec3) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn bounding(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }
}

const EDGE_WIDTH: f64 = 0.12;
const TEXTURE: f64 = 0.12;
const PLACEMENT_ATTEMPTS: usize = 2000;
const MIN_LABEL_VOXELS: usize = 32;

/// Seeded phantom of non-overlapping textured ellipsoids over a graded
/// background. Label `i + 1` marks the interior of blob `i`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume3, LabelMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // radius shrinks with the blob count so the packing stays feasible
    let base = 0.42 / (spec.n_blobs as f64).cbrt();
    let gap = 2.0 * EDGE_WIDTH * base;
    let mut blobs: Vec<Blob> = Vec::with_capacity(spec.n_blobs);
    for b in 0..spec.n_blobs {
        let radii: Vec3 = std::array::from_fn(|_| base * rng.gen_range(0.8..1.2));
        let extent = radii.iter().copied().fold(0.0, f64::max);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let lim = 1.0 - extent - gap;
            if lim <= 0.0 {
                break;
            }
            let center: Vec3 = std::array::from_fn(|_| rng.gen_range(-lim..lim));
            let clear = blobs.iter().all(|o| {
                let dist = (0..3).map(|a| (center[a] - o.center[a]).powi(2)).sum::<f64>().sqrt();
                dist > extent + o.bounding() + gap
            });
            if clear {
                placed = Some(center);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::PhantomFit(format!("could not place blob {} of {} without overlap", b + 1, spec.n_blobs))
        })?;
        blobs.push(Blob {
            center,
            radii,
            level: 0.45 + 0.5 * (b as f64 + rng.gen_range(0.2..0.8)) / spec.n_blobs as f64,
            phase: std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU)),
        });
    }

    let grid = GridSpec::with_dims(spec.dims)?;
    let (lo, hi) = spec.intensity_range;
    let node = |ijk: [usize; 3]| grid.normalize(ijk.map(|v| v as f64));
    let image = Volume3::from_fn(grid, |ijk| {
        let p = node(ijk);
        let background = 0.08 + 0.06 * (p[0] + 0.5 * p[1] - 0.3 * p[2]) / 1.8;
        let mut value = background;
        for b in &blobs {
            let m = 0.5 * (1.0 - ((b.rho(p) - 1.0) / EDGE_WIDTH).tanh());
            let texture = 1.0
                + TEXTURE
                    * ((3.0 * p[0] + b.phase[0]).sin() * (2.5 * p[1] + b.phase[1]).cos()
                        + 0.5 * (3.5 * p[2] + b.phase[2]).sin());
            value += m * (b.level * texture - background);
        }
        (lo + (hi - lo) * value).clamp(lo, hi)
    });
    let mask = LabelMask::from_fn(grid, |ijk| {
        let p = node(ijk);
        blobs
            .iter()
            .position(|b| b.rho(p) < 1.0)
            .map_or(0, |i| (i + 1) as u16)
    });
    let mut counts = vec![0usize; blobs.len() + 1];
    for &l in mask.data() {
        counts[l as usize] += 1;
    }
    if let Some(l) = (1..counts.len()).find(|&l| counts[l] < MIN_LABEL_VOXELS) {
        return Err(Error::PhantomFit(format!(
            "label {l} covers {} voxels (minimum {MIN_LABEL_VOXELS}) at dims {:?}",
            counts[l], spec.dims
        )));
    }
    Ok((image, mask))
}

/// Centroid of a label's support in unit coordinates.
pub fn label_centroid(mask: &LabelMask, label: u16) -> Option<Vec3> {
    let g = mask.grid();
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (idx, &l) in mask.data().iter().enumerate() {
        if l == label {
            let p = g.node_unit(idx);
            for a in 0..3 {
                sum[a] += p[a];
            }
            n += 1;
        }
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpDeformSpec {
    pub center: Vec3,
    pub amplitude_voxels: f64,
    pub direction: Vec3,
    pub sigma: f64,
}

impl Default for BumpDeformSpec {
    fn default() -> Self {
        Self {
            center: [0.0; 3],
            amplitude_voxels: 4.0,
            direction: [1.0, 0.0, 0.0],
            sigma: 0.4,
        }
    }
}

impl BumpDeformSpec {
    pub fn validate(&self) -> Result<()> {
        let norm = self.direction.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("direction must be unit length, |d| = {norm}")));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.amplitude_voxels >= 0.0) || !self.amplitude_voxels.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "amplitude must be >= 0, got {}",
                self.amplitude_voxels
            )));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("center must be finite".into()));
        }
        Ok(())
    }

    /// `amplitude · max|∇g|` in voxel units, where `g` is the unit Gaussian
    /// profile. Values below 1 keep `I + ∇S` invertible everywhere.
    pub fn fold_bound(&self, dims: [usize; 3]) -> f64 {
        let min_sigma_vox = (0..3)
            .map(|a| self.sigma * (dims[a] - 1) as f64 / 2.0)
            .fold(f64::INFINITY, f64::min);
        self.amplitude_voxels * (-0.5f64).exp() / min_sigma_vox
    }
}

/// Gaussian bump `S(x) = A·d·exp(−|x−c|²/2σ²)`, with the voxel amplitude
/// converted to unit coordinates per axis.
pub fn make_bump_deformation(spec: &BumpDeformSpec, dims: [usize; 3]) -> Result<VectorField3> {
    spec.validate()?;
    let grid = GridSpec::with_dims(dims)?;
    let bound = spec.fold_bound(dims);
    if bound >= 1.0 {
        return Err(Error::FoldingDeformation(format!(
            "amplitude {} voxels with sigma {} folds (gradient bound {bound:.3} >= 1)",
            spec.amplitude_voxels, spec.sigma
        )));
    }
    let amp: Vec3 = std::array::from_fn(|a| spec.amplitude_voxels * spec.direction[a] * 2.0 / (dims[a] - 1) as f64);
    let two_s2 = 2.0 * spec.sigma * spec.sigma;
    Ok(VectorField3::from_fn(grid, |ijk| {
        let p = grid.normalize(ijk.map(|v| v as f64));
        let r2: f64 = (0..3).map(|a| (p[a] - spec.center[a]).powi(2)).sum();
        let g = (-r2 / two_s2).exp();
        amp.map(|c| c * g)
    }))
}

#[derive(Clone, Debug)]
pub struct SynthPair {
    pub moving: Volume3,
    pub fixed: Volume3,
    pub moving_mask: LabelMask,
    pub fixed_mask: LabelMask,
    /// Field `S` with `moving(x + S(x)) = fixed(x)`.
    pub recovery_target: VectorField3,
}

const INVERSE_ITERS: usize = 100;

/// `fixed` is the phantom, `moving` the phantom pulled back through `S_gt`.
/// The recovery target solves `S(x) = −S_gt(x + S(x))` by fixed-point
/// iteration, which contracts for every accepted bump.
pub fn synth_pair(phantom: &(Volume3, LabelMask), s_gt: &VectorField3) -> Result<SynthPair> {
    let (image, mask) = phantom;
    image.grid().check_same_dims(mask.grid(), "phantom mask")?;
    image.grid().check_same_dims(s_gt.grid(), "deformation")?;
    let grid = *image.grid();
    let moving = warp_volume(image, s_gt, &grid);
    let moving_mask = warp_mask_nearest(mask, s_gt, &grid);

    let data: Vec<Vec3> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.node_unit(idx);
            let mut s = [0.0; 3];
            for _ in 0..INVERSE_ITERS {
                let q = sample_field_trilinear(s_gt, [x[0] + s[0], x[1] + s[1], x[2] + s[2]]);
                let next = q.map(|c| 0.0 - c);
                let delta = (0..3).map(|a| (next[a] - s[a]).abs()).fold(0.0, f64::max);
                s = next;
                if delta < 1e-14 {
                    break;
                }
            }
            s
        })
        .collect();
    Ok(SynthPair {
        moving,
        fixed: image.clone(),
        moving_mask,
        fixed_mask: mask.clone(),
        recovery_target: VectorField3::new(grid, data)?,
    })
}
