//! Regular 3D grids, continuous sampling and warping.
//!
//! Every continuous coordinate in this crate is a *unit coordinate*: each axis
//! of a grid is mapped affinely so that node 0 sits at −1 and node `dim − 1`
//! at +1. Displacement fields store offsets in the same units, which lets a
//! field of one density be applied to an image of another.
//!
//! Sampling outside `[−1, 1]³` clamps to the border.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidGrid(format!(
                "every dimension must be at least 2, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Voxel index (possibly fractional or out of range) to unit coordinates.
    pub fn normalize(&self, index: Vec3) -> Vec3 {
        std::array::from_fn(|a| 2.0 * index[a] / (self.dims[a] - 1) as f64 - 1.0)
    }

    /// Inverse of [`GridSpec::normalize`].
    pub fn denormalize(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|a| (p[a] + 1.0) * 0.5 * (self.dims[a] - 1) as f64)
    }

    #[inline]
    pub fn node_unit(&self, idx: usize) -> Vec3 {
        let c = self.coords(idx);
        self.normalize([c[0] as f64, c[1] as f64, c[2] as f64])
    }

    /// Distance between neighbouring nodes, in unit coordinates.
    pub fn unit_step(&self) -> Vec3 {
        std::array::from_fn(|a| 2.0 / (self.dims[a] - 1) as f64)
    }

    /// Same node layout with new dims; spacing rescaled so the physical
    /// extent is unchanged.
    pub fn resized(&self, dims: [usize; 3]) -> Result<Self> {
        let spacing = std::array::from_fn(|a| {
            self.spacing[a] * (self.dims[a] - 1) as f64 / (dims[a].max(2) - 1) as f64
        });
        Self::new(dims, spacing, self.origin)
    }

    pub fn check_same_dims(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::GridMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Values stored on the nodes of a [`GridSpec`], x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    grid: GridSpec,
    data: Vec<T>,
}

pub type Volume3 = Grid3<f64>;
pub type VectorField3 = Grid3<Vec3>;
pub type LabelMask = Grid3<u16>;

impl<T: Copy + Send + Sync> Grid3<T> {
    pub fn filled(grid: GridSpec, value: T) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([usize; 3]) -> T + Sync) -> Self {
        let data = (0..grid.len())
            .into_par_iter()
            .map(|idx| f(grid.coords(idx)))
            .collect();
        Self { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.index(i, j, k)]
    }

    fn check_len(grid: &GridSpec, len: usize) -> Result<()> {
        if len != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {len} does not match dims {:?}",
                grid.dims
            )));
        }
        Ok(())
    }
}

impl Volume3 {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        Self::check_len(&grid, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume voxel {i}")));
        }
        Ok(Self { grid, data })
    }
}

impl VectorField3 {
    pub fn new(grid: GridSpec, data: Vec<Vec3>) -> Result<Self> {
        Self::check_len(&grid, data.len())?;
        if let Some(i) = data.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("vector field node {i}")));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::filled(grid, [0.0; 3])
    }
}

impl LabelMask {
    pub fn new(grid: GridSpec, data: Vec<u16>) -> Result<Self> {
        Self::check_len(&grid, data.len())?;
        Ok(Self { grid, data })
    }

    /// Sorted distinct labels, background included.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.data.clone();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

// ---------------------------------------------------------------------------
// Interpolation kernels (index space)
// ---------------------------------------------------------------------------

pub(crate) trait Lerp: Copy {
    fn lerp(a: Self, b: Self, f: f64) -> Self;
}

impl Lerp for f64 {
    #[inline]
    fn lerp(a: f64, b: f64, f: f64) -> f64 {
        if f == 0.0 {
            a
        } else if f == 1.0 {
            b
        } else {
            a * (1.0 - f) + b * f
        }
    }
}

impl Lerp for Vec3 {
    #[inline]
    fn lerp(a: Vec3, b: Vec3, f: f64) -> Vec3 {
        [
            f64::lerp(a[0], b[0], f),
            f64::lerp(a[1], b[1], f),
            f64::lerp(a[2], b[2], f),
        ]
    }
}

/// Lower cell index and fraction along one axis. Coordinates are clamped to
/// `[0, dim − 1]`; integer coordinates belong to the cell below them.
#[inline]
pub(crate) fn cell(c: f64, dim: usize) -> (usize, f64) {
    let top = (dim - 1) as f64;
    let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, top) };
    let i0 = (c.ceil() - 1.0).clamp(0.0, (dim - 2) as f64);
    (i0 as usize, c - i0)
}

#[inline]
pub(crate) fn interp<T: Lerp>(data: &[T], dims: [usize; 3], cx: (usize, f64), cy: (usize, f64), cz: (usize, f64)) -> T {
    let sx = 1;
    let sy = dims[0];
    let sz = dims[0] * dims[1];
    let base = cx.0 + sy * cy.0 + sz * cz.0;
    let row = |o: usize| T::lerp(data[o], data[o + sx], cx.1);
    let c00 = row(base);
    let c10 = row(base + sy);
    let c01 = row(base + sz);
    let c11 = row(base + sy + sz);
    let c0 = T::lerp(c00, c10, cy.1);
    let c1 = T::lerp(c01, c11, cy.1);
    T::lerp(c0, c1, cz.1)
}

/// Value and index-space gradient of the trilinear interpolant. Axes whose
/// coordinate lies strictly outside the grid get a zero derivative (clamp).
#[inline]
pub(crate) fn interp_with_gradient(data: &[f64], dims: [usize; 3], c: Vec3) -> (f64, Vec3) {
    let cx = cell(c[0], dims[0]);
    let cy = cell(c[1], dims[1]);
    let cz = cell(c[2], dims[2]);
    let sy = dims[0];
    let sz = dims[0] * dims[1];
    let base = cx.0 + sy * cy.0 + sz * cz.0;
    let v = |o: usize| data[base + o];
    let (v000, v100) = (v(0), v(1));
    let (v010, v110) = (v(sy), v(sy + 1));
    let (v001, v101) = (v(sz), v(sz + 1));
    let (v011, v111) = (v(sy + sz), v(sy + sz + 1));
    let (fx, fy, fz) = (cx.1, cy.1, cz.1);

    let c00 = f64::lerp(v000, v100, fx);
    let c10 = f64::lerp(v010, v110, fx);
    let c01 = f64::lerp(v001, v101, fx);
    let c11 = f64::lerp(v011, v111, fx);
    let c0 = f64::lerp(c00, c10, fy);
    let c1 = f64::lerp(c01, c11, fy);
    let value = f64::lerp(c0, c1, fz);

    let inside = |a: usize| c[a] >= 0.0 && c[a] <= (dims[a] - 1) as f64;
    let mut g = [0.0; 3];
    if inside(0) {
        let d00 = v100 - v000;
        let d10 = v110 - v010;
        let d01 = v101 - v001;
        let d11 = v111 - v011;
        g[0] = f64::lerp(f64::lerp(d00, d10, fy), f64::lerp(d01, d11, fy), fz);
    }
    if inside(1) {
        g[1] = f64::lerp(c10 - c00, c11 - c01, fz);
    }
    if inside(2) {
        g[2] = c1 - c0;
    }
    (value, g)
}

/// Per-axis lookup of `(cell, fraction)` for mapping the nodes of one grid
/// onto another. Both grids span the same unit cube, so the map is separable.
#[derive(Clone, Debug)]
pub(crate) struct AxisTables {
    pub(crate) axes: [Vec<(usize, f64)>; 3],
}

impl AxisTables {
    pub(crate) fn new(from: [usize; 3], onto: [usize; 3]) -> Self {
        let axes = std::array::from_fn(|a| {
            let ratio = (from[a] - 1) as f64 / (onto[a] - 1) as f64;
            (0..onto[a])
                .map(|i| cell(i as f64 * ratio, from[a]))
                .collect()
        });
        Self { axes }
    }

    #[inline]
    pub(crate) fn get(&self, ijk: [usize; 3]) -> [(usize, f64); 3] {
        [self.axes[0][ijk[0]], self.axes[1][ijk[1]], self.axes[2][ijk[2]]]
    }
}

/// Output node index mapped into the index space of a `dims` grid, plus a
/// unit-coordinate displacement.
#[inline]
pub(crate) fn displaced_index(ijk: [usize; 3], ratio: Vec3, half_extent: Vec3, s: Vec3) -> Vec3 {
    std::array::from_fn(|a| ijk[a] as f64 * ratio[a] + s[a] * half_extent[a])
}

#[inline]
pub(crate) fn index_ratio(from: [usize; 3], onto: [usize; 3]) -> Vec3 {
    std::array::from_fn(|a| (from[a] - 1) as f64 / (onto[a] - 1) as f64)
}

#[inline]
pub(crate) fn half_extent(dims: [usize; 3]) -> Vec3 {
    std::array::from_fn(|a| 0.5 * (dims[a] - 1) as f64)
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

pub fn normalize_coords(grid: &GridSpec, voxel_index: Vec3) -> Vec3 {
    grid.normalize(voxel_index)
}

pub fn denormalize_coords(grid: &GridSpec, p: Vec3) -> Vec3 {
    grid.denormalize(p)
}

pub fn sample_trilinear(vol: &Volume3, p: Vec3) -> f64 {
    let d = vol.dims();
    let c = vol.grid.denormalize(p);
    interp(&vol.data, d, cell(c[0], d[0]), cell(c[1], d[1]), cell(c[2], d[2]))
}

pub fn sample_field_trilinear(field: &VectorField3, p: Vec3) -> Vec3 {
    let d = field.dims();
    let c = field.grid.denormalize(p);
    interp(&field.data, d, cell(c[0], d[0]), cell(c[1], d[1]), cell(c[2], d[2]))
}

/// Analytic derivative of the trilinear interpolant with respect to unit
/// coordinates.
pub fn spatial_gradient(vol: &Volume3, p: Vec3) -> Vec3 {
    let d = vol.dims();
    let (_, g) = interp_with_gradient(&vol.data, d, vol.grid.denormalize(p));
    let h = half_extent(d);
    [g[0] * h[0], g[1] * h[1], g[2] * h[2]]
}

/// Pull-back warp: `out(x) = vol(x + S(x))` for every node `x` of `out_grid`.
pub fn warp_volume(vol: &Volume3, s: &VectorField3, out_grid: &GridSpec) -> Volume3 {
    let vd = vol.dims();
    let sd = s.dims();
    let od = out_grid.dims;
    let s_tables = AxisTables::new(sd, od);
    let ratio = index_ratio(vd, od);
    let half = half_extent(vd);
    let data = (0..out_grid.len())
        .into_par_iter()
        .map(|idx| {
            let ijk = out_grid.coords(idx);
            let [cx, cy, cz] = s_tables.get(ijk);
            let disp = interp(&s.data, sd, cx, cy, cz);
            let c = displaced_index(ijk, ratio, half, disp);
            interp(&vol.data, vd, cell(c[0], vd[0]), cell(c[1], vd[1]), cell(c[2], vd[2]))
        })
        .collect();
    Volume3 {
        grid: *out_grid,
        data,
    }
}

/// Pull-back warp of a label mask with nearest-neighbour lookup.
pub fn warp_mask_nearest(mask: &LabelMask, s: &VectorField3, out_grid: &GridSpec) -> LabelMask {
    let md = mask.dims();
    let sd = s.dims();
    let od = out_grid.dims;
    let s_tables = AxisTables::new(sd, od);
    let ratio = index_ratio(md, od);
    let half = half_extent(md);
    let data = (0..out_grid.len())
        .into_par_iter()
        .map(|idx| {
            let ijk = out_grid.coords(idx);
            let [cx, cy, cz] = s_tables.get(ijk);
            let disp = interp(&s.data, sd, cx, cy, cz);
            let c = displaced_index(ijk, ratio, half, disp);
            let n: [usize; 3] = std::array::from_fn(|a| {
                let v = if c[a].is_nan() { 0.0 } else { c[a] };
                v.round().clamp(0.0, (md[a] - 1) as f64) as usize
            });
            mask.data[mask.grid.index(n[0], n[1], n[2])]
        })
        .collect();
    LabelMask {
        grid: *out_grid,
        data,
    }
}

/// Trilinear resampling of a field onto a grid of `new_dims` nodes spanning
/// the same unit cube.
pub fn resample_field(field: &VectorField3, new_dims: [usize; 3]) -> Result<VectorField3> {
    let grid = field.grid.resized(new_dims)?;
    let d = field.dims();
    let tables = AxisTables::new(d, new_dims);
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [cx, cy, cz] = tables.get(grid.coords(idx));
            interp(&field.data, d, cx, cy, cz)
        })
        .collect();
    Ok(VectorField3 { grid, data })
}

/// Box-average pooling. Each input voxel contributes to the output node
/// nearest to it in unit coordinates.
pub fn downsample_volume(vol: &Volume3, new_dims: [usize; 3]) -> Result<Volume3> {
    let d = vol.dims();
    if new_dims.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument(format!(
            "downsample target {new_dims:?} has a dimension below 2"
        )));
    }
    if (0..3).any(|a| new_dims[a] > d[a]) {
        return Err(Error::InvalidArgument(format!(
            "downsample target {new_dims:?} exceeds source dims {d:?}"
        )));
    }
    let grid = vol.grid.resized(new_dims)?;
    let bins: [Vec<usize>; 3] = std::array::from_fn(|a| {
        let ratio = (new_dims[a] - 1) as f64 / (d[a] - 1) as f64;
        (0..d[a])
            .map(|i| ((i as f64 * ratio).round() as usize).min(new_dims[a] - 1))
            .collect()
    });
    let mut sums = vec![0.0; grid.len()];
    let mut counts = vec![0usize; grid.len()];
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let o = grid.index(bins[0][i], bins[1][j], bins[2][k]);
                sums[o] += vol.at(i, j, k);
                counts[o] += 1;
            }
        }
    }
    let data = sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s / c as f64)
        .collect();
    Ok(Volume3 { grid, data })
}
