//! Lagrangian integration of grid nodes through a time-varying velocity.
//!
//! Particles start on the nodes of the field grid at `t = 1` and take `n`
//! explicit Euler steps toward `t = 0`, querying the velocity at their current
//! position. The accumulated offset of each particle is the pull-back
//! displacement used to warp the moving image.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::MlpParams;
use crate::volume::{warp_volume, GridSpec, VectorField3, Vec3, Volume3};

/// Anything that yields a velocity at a point and time.
pub trait VelocityField: Sync {
    fn velocity(&self, p: Vec3, t: f64) -> Vec3;
}

impl VelocityField for MlpParams {
    fn velocity(&self, p: Vec3, t: f64) -> Vec3 {
        self.forward(p, t)
    }
}

/// Adapts a closure into a [`VelocityField`].
pub struct FnVelocity<F>(pub F);

impl<F: Fn(Vec3, f64) -> Vec3 + Sync> VelocityField for FnVelocity<F> {
    fn velocity(&self, p: Vec3, t: f64) -> Vec3 {
        (self.0)(p, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    pub field_dims: [usize; 3],
    pub n_steps: usize,
    pub dt: f64,
}

impl FlowConfig {
    pub fn new(field_dims: [usize; 3], n_steps: usize) -> Result<Self> {
        let cfg = Self {
            field_dims,
            n_steps,
            dt: 1.0 / n_steps.max(1) as f64,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
        }
        if (self.dt * self.n_steps as f64 - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "dt * n_steps must equal 1 (dt = {}, n = {})",
                self.dt, self.n_steps
            )));
        }
        GridSpec::with_dims(self.field_dims)?;
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::with_dims(self.field_dims).expect("validated field dims")
    }

    /// Time at which step `k` (0-based) queries the velocity.
    pub fn time_at(&self, k: usize) -> f64 {
        1.0 - k as f64 * self.dt
    }
}

/// Velocity fields recorded at each step, keyed by the particle's origin node.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocitySnapshots {
    fields: Vec<VectorField3>,
}

impl VelocitySnapshots {
    pub fn new(fields: Vec<VectorField3>) -> Result<Self> {
        let Some(first) = fields.first() else {
            return Err(Error::InvalidArgument("no velocity snapshots".into()));
        };
        let dims = first.dims();
        if fields.iter().any(|f| f.dims() != dims) {
            return Err(Error::GridMismatch("snapshots on differing grids".into()));
        }
        Ok(Self { fields })
    }

    pub fn fields(&self) -> &[VectorField3] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn grid(&self) -> &GridSpec {
        self.fields[0].grid()
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub displacement: VectorField3,
    pub snapshots: VelocitySnapshots,
    pub final_positions: Vec<Vec3>,
    dt: f64,
}

impl Rollout {
    /// Offset accumulated over the first `k` steps; `k = n` is `displacement`.
    pub fn partial_displacement(&self, k: usize) -> Result<VectorField3> {
        let n = self.snapshots.len();
        if k > n {
            return Err(Error::InvalidArgument(format!("step {k} outside 0..={n}")));
        }
        let grid = *self.displacement.grid();
        let mut acc = vec![[0.0; 3]; grid.len()];
        for field in &self.snapshots.fields[..k] {
            for (d, v) in acc.iter_mut().zip(field.data()) {
                for a in 0..3 {
                    d[a] += v[a] * self.dt;
                }
            }
        }
        VectorField3::new(grid, acc)
    }
}

/// One explicit Euler step for a batch of positions. Returns the new
/// positions, the velocities used, and the time for the next step.
pub fn euler_step(
    model: &impl VelocityField,
    positions: &[Vec3],
    t: f64,
    dt: f64,
) -> Result<(Vec<Vec3>, Vec<Vec3>, f64)> {
    if let Some(i) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::NonFinite(format!("position of node {i} at t = {t}")));
    }
    let velocities: Vec<Vec3> = positions.par_iter().map(|&p| model.velocity(p, t)).collect();
    if let Some(i) = velocities.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
        return Err(Error::NonFinite(format!(
            "velocity at node {i} (t = {t}): {:?}",
            velocities[i]
        )));
    }
    let moved = positions
        .iter()
        .zip(&velocities)
        .map(|(p, v)| [p[0] + v[0] * dt, p[1] + v[1] * dt, p[2] + v[2] * dt])
        .collect();
    Ok((moved, velocities, t - dt))
}

pub(crate) const NODE_CHUNK: usize = 256;

/// Integrates every node of the field grid and records the per-step
/// velocities. The displacement of a node is the in-order sum of its
/// `v_i · dt`; positions are `start + displacement-so-far`.
pub fn rollout(model: &impl VelocityField, flow: &FlowConfig) -> Result<Rollout> {
    flow.validate()?;
    let grid = flow.grid();
    let n = flow.n_steps;
    let dt = flow.dt;
    let nodes = grid.len();

    // node-major: vel[node * n + k]
    let per_chunk: Vec<Result<(Vec<Vec3>, Vec<Vec3>)>> = (0..nodes)
        .collect::<Vec<_>>()
        .par_chunks(NODE_CHUNK)
        .map(|chunk| {
            let mut vels = Vec::with_capacity(chunk.len() * n);
            let mut disps = Vec::with_capacity(chunk.len());
            for &node in chunk {
                let start = grid.node_unit(node);
                let mut d = [0.0; 3];
                for k in 0..n {
                    let t = flow.time_at(k);
                    let p = [start[0] + d[0], start[1] + d[1], start[2] + d[2]];
                    let v = model.velocity(p, t);
                    if v.iter().any(|c| !c.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "velocity at node {node}, step {k}: {v:?}"
                        )));
                    }
                    for a in 0..3 {
                        d[a] += v[a] * dt;
                    }
                    vels.push(v);
                }
                disps.push(d);
            }
            Ok((vels, disps))
        })
        .collect();

    let mut snaps = vec![vec![[0.0; 3]; nodes]; n];
    let mut disp = Vec::with_capacity(nodes);
    let mut node = 0;
    for chunk in per_chunk {
        let (vels, disps) = chunk?;
        for (local, d) in disps.into_iter().enumerate() {
            for (k, snap) in snaps.iter_mut().enumerate() {
                snap[node] = vels[local * n + k];
            }
            disp.push(d);
            node += 1;
        }
    }
    let final_positions = disp
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let s = grid.node_unit(i);
            [s[0] + d[0], s[1] + d[1], s[2] + d[2]]
        })
        .collect();
    let fields = snaps
        .into_iter()
        .map(|data| VectorField3::new(grid, data))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rollout {
        displacement: VectorField3::new(grid, disp)?,
        snapshots: VelocitySnapshots::new(fields)?,
        final_positions,
        dt,
    })
}

/// The moving image after the first `k` of `n` steps.
pub fn intermediate_warp(
    vol: &Volume3,
    model: &impl VelocityField,
    flow: &FlowConfig,
    k: usize,
) -> Result<Volume3> {
    if k > flow.n_steps {
        return Err(Error::InvalidArgument(format!(
            "snapshot step {k} outside 0..={}",
            flow.n_steps
        )));
    }
    let partial = rollout(model, flow)?.partial_displacement(k)?;
    Ok(warp_volume(vol, &partial, vol.grid()))
}

/// All `n + 1` intermediate images from a single rollout.
pub fn intermediate_warps(vol: &Volume3, model: &impl VelocityField, flow: &FlowConfig) -> Result<Vec<Volume3>> {
    let r = rollout(model, flow)?;
    (0..=flow.n_steps)
        .map(|k| Ok(warp_volume(vol, &r.partial_displacement(k)?, vol.grid())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, NetConfig};
    use crate::volume::sample_trilinear;

    fn linear(k: f64) -> FnVelocity<impl Fn(Vec3, f64) -> Vec3 + Sync> {
        FnVelocity(move |p: Vec3, _t: f64| [k * p[0], 0.0, 0.0])
    }

    #[test]
    fn flow_config_validation() {
        assert!(FlowConfig::new([4, 4, 4], 0).is_err());
        assert!(FlowConfig::new([1, 4, 4], 2).is_err());
        let f = FlowConfig::new([4, 4, 4], 3).unwrap();
        assert!((f.dt * 3.0 - 1.0).abs() <= 1e-12);
        assert!(FlowConfig { dt: 0.3, ..f }.validate().is_err());
        assert_eq!(f.time_at(0), 1.0);
    }

    #[test]
    fn euler_step_examples() {
        let params = init_params(&NetConfig { hidden_width: 4, ..NetConfig::default() }).unwrap();
        let pts = vec![[0.1, 0.2, 0.3], [-1.0, 0.5, 0.9]];
        let (moved, vels, t) = euler_step(&params, &pts, 1.0, 0.25).unwrap();
        assert_eq!(moved, pts);
        assert!(vels.iter().all(|v| *v == [0.0; 3]));
        assert_eq!(t, 0.75);

        let c = [0.2, -0.4, 0.1];
        let (moved, _, _) = euler_step(&FnVelocity(|_: Vec3, _: f64| c), &pts, 1.0, 0.5).unwrap();
        for (m, p) in moved.iter().zip(&pts) {
            for a in 0..3 {
                assert!((m[a] - (p[a] + 0.5 * c[a])).abs() < 1e-15);
            }
        }

        let (moved, _, _) = euler_step(&linear(2.0), &pts, 1.0, 0.1).unwrap();
        assert!((moved[0][0] - 0.1 * 1.2).abs() < 1e-15);

        let bad = FnVelocity(|p: Vec3, _: f64| if p[0] < 0.0 { [f64::NAN; 3] } else { [0.0; 3] });
        let err = euler_step(&bad, &pts, 1.0, 0.1).unwrap_err();
        assert!(err.to_string().contains("node 1"));
    }

    #[test]
    fn zero_network_rollout_is_exactly_zero() {
        let params = init_params(&NetConfig { hidden_width: 8, ..NetConfig::default() }).unwrap();
        let flow = FlowConfig::new([5, 4, 3], 3).unwrap();
        let r = rollout(&params, &flow).unwrap();
        assert!(r.displacement.data().iter().all(|d| *d == [0.0; 3]));
        assert_eq!(r.snapshots.len(), 3);
        assert!(r.snapshots.fields().iter().all(|f| f.data().iter().all(|v| *v == [0.0; 3])));
    }

    #[test]
    fn constant_flow_displaces_by_c() {
        let c = [0.3, -0.1, 0.05];
        for n in [1, 3, 7] {
            let flow = FlowConfig::new([3, 3, 3], n).unwrap();
            let r = rollout(&FnVelocity(|_: Vec3, _: f64| c), &flow).unwrap();
            for d in r.displacement.data() {
                for a in 0..3 {
                    assert!((d[a] - c[a]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn linear_flow_recurrence() {
        let flow = FlowConfig::new([5, 3, 3], 4).unwrap();
        let r = rollout(&linear(1.0), &flow).unwrap();
        let g = flow.grid();
        for (i, d) in r.displacement.data().iter().enumerate() {
            let x = g.node_unit(i)[0];
            assert!((d[0] - 1.44140625 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_bookkeeping() {
        let v = FnVelocity(|p: Vec3, t: f64| [0.3 * (2.0 * p[1]).sin() * t, -0.2 * p[0] * p[2], 0.1 * t * t]);
        let flow = FlowConfig::new([4, 5, 3], 5).unwrap();
        let r = rollout(&v, &flow).unwrap();
        let g = flow.grid();
        let full = r.partial_displacement(5).unwrap();
        assert_eq!(full.data(), r.displacement.data());
        for (i, d) in r.displacement.data().iter().enumerate() {
            let s = g.node_unit(i);
            for a in 0..3 {
                assert!((r.final_positions[i][a] - s[a] - d[a]).abs() <= 1e-12);
            }
        }
        assert!(r.partial_displacement(0).unwrap().data().iter().all(|d| *d == [0.0; 3]));
        assert!(r.partial_displacement(6).is_err());
    }

    #[test]
    fn time_reversal_first_order() {
        let k = 1.0;
        for n in [1usize, 4, 16] {
            let flow = FlowConfig::new([5, 2, 2], n).unwrap();
            let fwd = rollout(&linear(k), &flow).unwrap();
            let bwd = rollout(&linear(-k), &flow).unwrap();
            let bound = k * k * flow.dt * (1.0 + k).powi(n as i32);
            for (a, b) in fwd.displacement.data().iter().zip(bwd.displacement.data()) {
                assert!((a[0] + b[0]).abs() <= bound);
            }
        }
    }

    #[test]
    fn intermediate_warps_examples() {
        let g = GridSpec::with_dims([9, 6, 5]).unwrap();
        let vol = Volume3::from_fn(g, |[i, j, k]| ((i * 3 + j * 5 + k * 7) % 11) as f64);
        let flow = FlowConfig::new([4, 4, 4], 4).unwrap();
        let zero = init_params(&NetConfig { hidden_width: 4, ..NetConfig::default() }).unwrap();
        for k in 0..=4 {
            assert_eq!(intermediate_warp(&vol, &zero, &flow, k).unwrap(), vol);
        }
        assert!(intermediate_warp(&vol, &zero, &flow, 5).is_err());

        let c = [0.5, 0.0, 0.0];
        let konst = FnVelocity(|_: Vec3, _: f64| c);
        assert_eq!(intermediate_warp(&vol, &konst, &flow, 0).unwrap(), vol);
        let half = intermediate_warp(&vol, &konst, &flow, 2).unwrap();
        for idx in 0..g.len() {
            let x = g.node_unit(idx);
            let expect = sample_trilinear(&vol, [x[0] + 0.25, x[1], x[2]]);
            assert!((half.data()[idx] - expect).abs() < 1e-5);
        }
        let all = intermediate_warps(&vol, &konst, &flow).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(all[2], half);
    }
}
