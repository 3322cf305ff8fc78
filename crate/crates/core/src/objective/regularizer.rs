//! Sobolev-type velocity penalty:
//! `(1/n) Σ_i [ mean|v_i|² + γ · mean|∇v_i|² ]`,
//! with `∇` the forward difference on the field grid (zero on the last node
//! of each axis).

use crate::error::{Error, Result};
use crate::flow::VelocitySnapshots;
use crate::volume::{GridSpec, Vec3};

pub fn velocity_regularizer(snaps: &VelocitySnapshots, gamma: f64) -> Result<f64> {
    if snaps.is_empty() {
        return Err(Error::InvalidArgument("empty snapshot list".into()));
    }
    let grid = *snaps.grid();
    let total: f64 = snaps
        .fields()
        .iter()
        .map(|f| field_energy(&grid, f.data(), gamma))
        .sum();
    Ok(total / snaps.len() as f64)
}

fn field_energy(grid: &GridSpec, v: &[Vec3], gamma: f64) -> f64 {
    let n = v.len() as f64;
    let value: f64 = v.iter().map(norm2).sum();
    if gamma == 0.0 {
        return value / n;
    }
    let inv_h2 = grid.unit_step().map(|h| 1.0 / (h * h));
    let strides = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let mut grad = 0.0;
    for idx in 0..v.len() {
        let c = grid.coords(idx);
        for a in 0..3 {
            if c[a] + 1 < grid.dims[a] {
                grad += inv_h2[a] * norm2(&sub(v[idx + strides[a]], v[idx]));
            }
        }
    }
    (value + gamma * grad) / n
}

/// `∂R/∂v_i(node)` scaled by `weight`, one vector field per snapshot.
pub(crate) fn regularizer_gradient(snaps: &VelocitySnapshots, gamma: f64, weight: f64) -> Vec<Vec<Vec3>> {
    let grid = *snaps.grid();
    let n_nodes = grid.len() as f64;
    let scale = weight / (snaps.len() as f64 * n_nodes);
    let inv_h2 = grid.unit_step().map(|h| 1.0 / (h * h));
    let strides = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    snaps
        .fields()
        .iter()
        .map(|f| {
            let v = f.data();
            let mut g: Vec<Vec3> = v.iter().map(|x| x.map(|c| 2.0 * c * scale)).collect();
            if gamma != 0.0 {
                for idx in 0..v.len() {
                    let c = grid.coords(idx);
                    for a in 0..3 {
                        if c[a] + 1 < grid.dims[a] {
                            let up = idx + strides[a];
                            let k = 2.0 * gamma * inv_h2[a] * scale;
                            for comp in 0..3 {
                                let diff = k * (v[up][comp] - v[idx][comp]);
                                g[up][comp] += diff;
                                g[idx][comp] -= diff;
                            }
                        }
                    }
                }
            }
            g
        })
        .collect()
}

#[inline]
fn norm2(v: &Vec3) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

#[inline]
fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
