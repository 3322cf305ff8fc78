//! Registration and distillation objectives with exact reverse-mode gradients.
//!
//! The gradient is propagated backwards through every stage of the forward
//! model: the similarity term, the trilinear warp (via the analytic image
//! gradient), the trilinear sampling of the displacement field, and the
//! unrolled Euler integration, where each velocity query depends on the
//! position reached in all earlier steps. Activations are recomputed during
//! the backward sweep from the stored per-step velocities instead of being
//! kept for every node.

mod regularizer;
mod similarity;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use regularizer::velocity_regularizer;
pub use similarity::{mse, ncc, SimMetric, NCC_MIN_VARIANCE};

use crate::error::{Error, Result};
use crate::flow::{rollout, FlowConfig, Rollout, NODE_CHUNK};
use crate::net::{MlpParams, ParamGradient, Workspace};
use crate::volume::{cell, half_extent, interp, interp_with_gradient, index_ratio, AxisTables, VectorField3, Vec3, Volume3};
use regularizer::regularizer_gradient;
use similarity::{check_grids, similarity, similarity_with_gradient};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub similarity: f64,
    pub regularizer: f64,
    pub distill: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(similarity: f64, regularizer: f64, distill: f64, lambda: f64) -> Self {
        Self {
            total: similarity + lambda * regularizer + distill,
            similarity,
            regularizer,
            distill,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.similarity.is_finite() && self.regularizer.is_finite() && self.distill.is_finite()
    }
}

/// A scalar loss over network parameters.
pub trait Objective: Sync {
    fn evaluate(&self, params: &MlpParams) -> Result<LossBreakdown>;
}

pub trait DifferentiableObjective: Objective {
    fn evaluate_with_gradient(&self, params: &MlpParams) -> Result<(LossBreakdown, ParamGradient)>;
}

/// `Sim(I1 ∘ S, I2) + λ·R(v)` with `S` from a rollout of the network.
#[derive(Clone, Debug)]
pub struct RegistrationObjective<'a> {
    moving: &'a Volume3,
    fixed: &'a Volume3,
    flow: FlowConfig,
    metric: SimMetric,
    lambda: f64,
    gamma: f64,
    tables: AxisTables,
}

impl<'a> RegistrationObjective<'a> {
    pub fn new(
        moving: &'a Volume3,
        fixed: &'a Volume3,
        flow: FlowConfig,
        metric: SimMetric,
        lambda: f64,
        gamma: f64,
    ) -> Result<Self> {
        check_grids(moving, fixed)?;
        flow.validate()?;
        check_weights(lambda, gamma)?;
        Ok(Self {
            moving,
            fixed,
            flow,
            metric,
            lambda,
            gamma,
            tables: AxisTables::new(flow.field_dims, fixed.dims()),
        })
    }

    pub fn flow(&self) -> &FlowConfig {
        &self.flow
    }

    /// Warped moving image on the fixed grid, and optionally the moving
    /// image's unit-coordinate gradient at each sampled point.
    fn warp(&self, s: &VectorField3, with_gradient: bool) -> (Vec<f64>, Vec<Vec3>) {
        let md = self.moving.dims();
        let sd = s.dims();
        let fixed_grid = *self.fixed.grid();
        let ratio = index_ratio(md, fixed_grid.dims);
        let half = half_extent(md);
        let results: Vec<(f64, Vec3)> = (0..fixed_grid.len())
            .into_par_iter()
            .map(|idx| {
                let ijk = fixed_grid.coords(idx);
                let [cx, cy, cz] = self.tables.get(ijk);
                let d = interp(s.data(), sd, cx, cy, cz);
                let c: Vec3 = std::array::from_fn(|a| ijk[a] as f64 * ratio[a] + d[a] * half[a]);
                if with_gradient {
                    let (v, g) = interp_with_gradient(self.moving.data(), md, c);
                    (v, [g[0] * half[0], g[1] * half[1], g[2] * half[2]])
                } else {
                    let v = interp(self.moving.data(), md, cell(c[0], md[0]), cell(c[1], md[1]), cell(c[2], md[2]));
                    (v, [0.0; 3])
                }
            })
            .collect();
        results.into_iter().unzip()
    }

    /// Pulls per-voxel `∂L/∂S(x)` back onto the field nodes.
    fn scatter_to_field(&self, per_voxel: &[Vec3]) -> Vec<Vec3> {
        let fg = self.flow.grid();
        let sd = fg.dims;
        let fixed_grid = self.fixed.grid();
        let mut out = vec![[0.0; 3]; fg.len()];
        for (idx, g) in per_voxel.iter().enumerate() {
            if *g == [0.0; 3] {
                continue;
            }
            let [cx, cy, cz] = self.tables.get(fixed_grid.coords(idx));
            let wx = [1.0 - cx.1, cx.1];
            let wy = [1.0 - cy.1, cy.1];
            let wz = [1.0 - cz.1, cz.1];
            for (dz, wz) in wz.iter().enumerate() {
                for (dy, wy) in wy.iter().enumerate() {
                    for (dx, wx) in wx.iter().enumerate() {
                        let w = wx * wy * wz;
                        if w == 0.0 {
                            continue;
                        }
                        let node = (cx.0 + dx) + sd[0] * ((cy.0 + dy) + sd[1] * (cz.0 + dz));
                        for a in 0..3 {
                            out[node][a] += w * g[a];
                        }
                    }
                }
            }
        }
        out
    }
}

impl Objective for RegistrationObjective<'_> {
    fn evaluate(&self, params: &MlpParams) -> Result<LossBreakdown> {
        let r = rollout(params, &self.flow)?;
        let reg = velocity_regularizer(&r.snapshots, self.gamma)?;
        let (warped, _) = self.warp(&r.displacement, false);
        let sim = similarity(self.metric, &warped, self.fixed.data());
        finite(LossBreakdown::new(sim, reg, 0.0, self.lambda))
    }
}

impl DifferentiableObjective for RegistrationObjective<'_> {
    fn evaluate_with_gradient(&self, params: &MlpParams) -> Result<(LossBreakdown, ParamGradient)> {
        let r = rollout(params, &self.flow)?;
        let reg = velocity_regularizer(&r.snapshots, self.gamma)?;
        let (warped, img_grad) = self.warp(&r.displacement, true);
        let (sim, d_warped) = similarity_with_gradient(self.metric, &warped, self.fixed.data());
        let loss = finite(LossBreakdown::new(sim, reg, 0.0, self.lambda))?;

        let per_voxel: Vec<Vec3> = d_warped
            .iter()
            .zip(&img_grad)
            .map(|(dw, g)| [dw * g[0], dw * g[1], dw * g[2]])
            .collect();
        let g_disp = self.scatter_to_field(&per_voxel);
        let g_snap = regularizer_gradient(&r.snapshots, self.gamma, self.lambda);
        let grad = backprop_rollout(params, &self.flow, &r, &g_disp, &g_snap)?;
        Ok((loss, grad))
    }
}

/// `mean|S − S₁'|² + λ·R(v)`: fits a network's rollout to a target field.
#[derive(Clone, Debug)]
pub struct DistillationObjective<'a> {
    target: &'a VectorField3,
    flow: FlowConfig,
    lambda: f64,
    gamma: f64,
}

impl<'a> DistillationObjective<'a> {
    pub fn new(target: &'a VectorField3, flow: FlowConfig, lambda: f64, gamma: f64) -> Result<Self> {
        flow.validate()?;
        check_weights(lambda, gamma)?;
        if target.dims() != flow.field_dims {
            return Err(Error::GridMismatch(format!(
                "distillation target {:?} vs field dims {:?}",
                target.dims(),
                flow.field_dims
            )));
        }
        Ok(Self {
            target,
            flow,
            lambda,
            gamma,
        })
    }

    pub fn flow(&self) -> &FlowConfig {
        &self.flow
    }

    pub fn target(&self) -> &VectorField3 {
        self.target
    }

    fn residual(&self, r: &Rollout) -> f64 {
        let sum: f64 = r
            .displacement
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(s, t)| (0..3).map(|a| (s[a] - t[a]).powi(2)).sum::<f64>())
            .sum();
        sum / self.target.data().len() as f64
    }
}

impl Objective for DistillationObjective<'_> {
    fn evaluate(&self, params: &MlpParams) -> Result<LossBreakdown> {
        let r = rollout(params, &self.flow)?;
        let reg = velocity_regularizer(&r.snapshots, self.gamma)?;
        finite(LossBreakdown::new(0.0, reg, self.residual(&r), self.lambda))
    }
}

impl DifferentiableObjective for DistillationObjective<'_> {
    fn evaluate_with_gradient(&self, params: &MlpParams) -> Result<(LossBreakdown, ParamGradient)> {
        let r = rollout(params, &self.flow)?;
        let reg = velocity_regularizer(&r.snapshots, self.gamma)?;
        let loss = finite(LossBreakdown::new(0.0, reg, self.residual(&r), self.lambda))?;
        let n = self.target.data().len() as f64;
        let g_disp: Vec<Vec3> = r
            .displacement
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(s, t)| std::array::from_fn(|a| 2.0 * (s[a] - t[a]) / n))
            .collect();
        let g_snap = regularizer_gradient(&r.snapshots, self.gamma, self.lambda);
        let grad = backprop_rollout(params, &self.flow, &r, &g_disp, &g_snap)?;
        Ok((loss, grad))
    }
}

fn check_weights(lambda: f64, gamma: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(())
}

fn finite(loss: LossBreakdown) -> Result<LossBreakdown> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("loss {loss:?}")))
    }
}

/// Backpropagation through time over the Euler rollout.
///
/// `g_disp[node]` is `∂L/∂S(node)`; `g_snap[k][node]` is the direct
/// dependence of the loss on the velocity recorded at step `k`. With
/// `D_{k+1} = D_k + f(x₀ + D_k, t_k)·δt`, the adjoint `a_k = ∂L/∂D_k`
/// satisfies `a_k = a_{k+1} + J_pᵀ (a_{k+1}·δt + g_snap[k])`.
fn backprop_rollout(
    params: &MlpParams,
    flow: &FlowConfig,
    r: &Rollout,
    g_disp: &[Vec3],
    g_snap: &[Vec<Vec3>],
) -> Result<ParamGradient> {
    let grid = flow.grid();
    let n = flow.n_steps;
    let dt = flow.dt;
    let h = params.config().hidden_width;
    let snaps = r.snapshots.fields();
    let n_params = params.len();

    let partials: Vec<Result<Vec<f64>>> = (0..grid.len())
        .collect::<Vec<_>>()
        .par_chunks(NODE_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; n_params];
            let mut ws = Workspace::new(h);
            let mut pos = vec![[0.0; 3]; n];
            for &node in chunk {
                let start = grid.node_unit(node);
                let mut d = [0.0; 3];
                for (k, p) in pos.iter_mut().enumerate() {
                    *p = [start[0] + d[0], start[1] + d[1], start[2] + d[2]];
                    let v = snaps[k].data()[node];
                    for a in 0..3 {
                        d[a] += v[a] * dt;
                    }
                }
                let mut adj = g_disp[node];
                for k in (0..n).rev() {
                    let t = flow.time_at(k);
                    let gs = g_snap[k][node];
                    let gv = [adj[0] * dt + gs[0], adj[1] * dt + gs[1], adj[2] * dt + gs[2]];
                    params.forward_into(pos[k], t, &mut ws, true);
                    let gp = params.backward(pos[k], t, &mut ws, gv, &mut grad);
                    for a in 0..3 {
                        adj[a] += gp[a];
                    }
                    if adj.iter().any(|c| !c.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "adjoint at step {k}, node {node}"
                        )));
                    }
                }
            }
            Ok(grad)
        })
        .collect();

    let mut total = vec![0.0; n_params];
    for part in partials {
        for (t, g) in total.iter_mut().zip(part?) {
            *t += g;
        }
    }
    if let Some(j) = total.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient component {j}")));
    }
    Ok(ParamGradient::from_values(total))
}

pub fn registration_loss(
    params: &MlpParams,
    moving: &Volume3,
    fixed: &Volume3,
    flow: &FlowConfig,
    metric: SimMetric,
    lambda: f64,
    gamma: f64,
) -> Result<LossBreakdown> {
    RegistrationObjective::new(moving, fixed, *flow, metric, lambda, gamma)?.evaluate(params)
}

pub fn distillation_loss(
    params: &MlpParams,
    target: &VectorField3,
    flow: &FlowConfig,
    lambda: f64,
    gamma: f64,
) -> Result<LossBreakdown> {
    DistillationObjective::new(target, *flow, lambda, gamma)?.evaluate(params)
}

pub fn loss_gradient(objective: &dyn DifferentiableObjective, params: &MlpParams) -> Result<ParamGradient> {
    objective.evaluate_with_gradient(params).map(|(_, g)| g)
}

/// Central differences of `objective.total`, one parameter at a time.
pub fn finite_diff_gradient(objective: &dyn Objective, params: &MlpParams, eps: f64) -> Result<ParamGradient> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for j in 0..params.len() {
        let orig = params.values()[j];
        probe.values_mut()[j] = orig + eps;
        let hi = objective.evaluate(&probe)?.total;
        probe.values_mut()[j] = orig - eps;
        let lo = objective.evaluate(&probe)?.total;
        probe.values_mut()[j] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(ParamGradient::from_values(out))
}
