//! Optimization drivers: a single INR-LDDMM stage and the coarse-to-fine
//! pipeline (coarse stage, upsampling, distillation into a fresh network,
//! warm-started fine stage).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{rollout, FlowConfig};
use crate::net::{init_params, MlpParams, NetConfig, ParamGradient};
use crate::objective::{DifferentiableObjective, DistillationObjective, LossBreakdown, RegistrationObjective, SimMetric};
use crate::volume::{downsample_volume, resample_field, warp_volume, GridSpec, VectorField3, Volume3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub plateau_tol: f64,
    pub plateau_window: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 300,
            plateau_tol: 1e-6,
            plateau_window: 50,
        }
    }
}

impl OptimConfig {
    pub fn with_iters(max_iters: usize) -> Self {
        Self {
            max_iters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("{what} out of range: {v}")));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", self.learning_rate);
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return bad("beta1", self.beta1);
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta2", self.beta2);
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", self.epsilon);
        }
        if !(self.plateau_tol >= 0.0) {
            return bad("plateau_tol", self.plateau_tol);
        }
        if self.plateau_window == 0 {
            return bad("plateau_window", 0.0);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub params: MlpParams,
    pub first_moment: ParamGradient,
    pub second_moment: ParamGradient,
    pub step_count: u64,
}

impl OptimState {
    pub fn new(params: MlpParams) -> Self {
        Self {
            first_moment: ParamGradient::zeros_like(&params),
            second_moment: ParamGradient::zeros_like(&params),
            params,
            step_count: 0,
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(state: &OptimState, grad: &ParamGradient, cfg: &OptimConfig) -> Result<OptimState> {
    if grad.len() != state.params.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            state.params.len()
        )));
    }
    if let Some(j) = grad.values().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient component {j} = {} at step {}",
            grad.values()[j],
            state.step_count + 1
        )));
    }
    let t = state.step_count + 1;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let mut m = state.first_moment.clone();
    let mut v = state.second_moment.clone();
    let mut theta = state.params.values().to_vec();
    for (((th, mi), vi), g) in theta
        .iter_mut()
        .zip(m.values_mut())
        .zip(v.values_mut())
        .zip(grad.values())
    {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *th -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(OptimState {
        params: state.params.with_values(theta),
        first_moment: m,
        second_moment: v,
        step_count: t,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum Termination {
    MaxIters,
    Plateau,
    /// The gradient vanished identically; further steps cannot move.
    Stationary,
    TargetReached,
    Diverged(String),
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub displacement: VectorField3,
    pub params: MlpParams,
    pub loss_history: Vec<LossBreakdown>,
    pub iterations_run: usize,
    pub termination: Termination,
}

impl StageResult {
    pub fn diverged(&self) -> bool {
        matches!(self.termination, Termination::Diverged(_))
    }

    pub fn initial_loss(&self) -> Option<&LossBreakdown> {
        self.loss_history.first()
    }

    pub fn final_loss(&self) -> Option<&LossBreakdown> {
        self.loss_history.last()
    }
}

/// Extra early-exit rule on top of the budget and plateau checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopTarget {
    None,
    /// Stop once the distillation term is at most this fraction of its
    /// first recorded value.
    DistillFraction(f64),
}

/// Objectives whose parameters drive a rollout on a known field grid.
pub trait FlowObjective: DifferentiableObjective {
    fn flow_config(&self) -> &FlowConfig;
}

impl FlowObjective for RegistrationObjective<'_> {
    fn flow_config(&self) -> &FlowConfig {
        self.flow()
    }
}

impl FlowObjective for DistillationObjective<'_> {
    fn flow_config(&self) -> &FlowConfig {
        self.flow()
    }
}

pub type LossSink<'a> = &'a mut dyn FnMut(usize, &LossBreakdown);

/// Gradient + Adam iterations until the budget, a plateau, a stationary
/// point, or the stop target. Each iteration records the loss at the current
/// parameters before updating them. Non-finite losses end the stage with
/// [`Termination::Diverged`], keeping the history and the last finite
/// parameters.
pub fn optimize_stage(
    objective: &dyn FlowObjective,
    params0: &MlpParams,
    cfg: &OptimConfig,
    target: StopTarget,
    sink: LossSink<'_>,
) -> Result<StageResult> {
    cfg.validate()?;
    let mut state = OptimState::new(params0.clone());
    let mut history: Vec<LossBreakdown> = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut termination = Termination::MaxIters;

    for iter in 0..cfg.max_iters {
        let (loss, grad) = match objective.evaluate_with_gradient(&state.params) {
            Ok(v) => v,
            Err(Error::NonFinite(detail)) => {
                termination = Termination::Diverged(format!("iteration {iter}: {detail}"));
                break;
            }
            Err(e) => return Err(e),
        };
        history.push(loss);
        sink(iter, &loss);

        if loss.total < best - cfg.plateau_tol {
            best = loss.total;
            stale = 0;
        } else {
            best = best.min(loss.total);
            stale += 1;
        }
        if let StopTarget::DistillFraction(frac) = target {
            if loss.distill <= frac * history[0].distill {
                termination = Termination::TargetReached;
                break;
            }
        }
        if grad.values().iter().all(|&g| g == 0.0) {
            termination = Termination::Stationary;
            break;
        }
        if stale >= cfg.plateau_window {
            termination = Termination::Plateau;
            break;
        }
        state = match adam_step(&state, &grad, cfg) {
            Ok(s) => s,
            Err(Error::NonFinite(detail)) => {
                termination = Termination::Diverged(detail);
                break;
            }
            Err(e) => return Err(e),
        };
    }

    let displacement = match rollout(&state.params, objective.flow_config()) {
        Ok(r) => r.displacement,
        Err(Error::NonFinite(detail)) => {
            termination = Termination::Diverged(detail);
            VectorField3::zeros(objective.flow_config().grid())
        }
        Err(e) => return Err(e),
    };
    Ok(StageResult {
        displacement,
        params: state.params,
        iterations_run: history.len(),
        loss_history: history,
        termination,
    })
}

/// Settings for one INR-LDDMM optimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSettings {
    pub field_dims: [usize; 3],
    pub n_steps: usize,
    pub metric: SimMetric,
    pub lambda: f64,
    pub gamma: f64,
    pub optim: OptimConfig,
}

/// Optimizes the registration loss at one field density starting from
/// `params0` and returns the final rollout displacement.
pub fn inr_lddmm(
    moving: &Volume3,
    fixed: &Volume3,
    params0: &MlpParams,
    settings: &StageSettings,
    sink: LossSink<'_>,
) -> Result<StageResult> {
    let flow = FlowConfig::new(settings.field_dims, settings.n_steps)?;
    let objective = RegistrationObjective::new(moving, fixed, flow, settings.metric, settings.lambda, settings.gamma)?;
    optimize_stage(&objective, params0, &settings.optim, StopTarget::None, sink)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Distill,
    Fine,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Distill => "distill",
            Stage::Fine => "fine",
        }
    }
}

/// Distillation stops once the residual is at most this fraction of its
/// starting value.
pub const DISTILL_TARGET_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub coarse_dims: [usize; 3],
    pub fine_dims: [usize; 3],
    pub n_steps: usize,
    pub metric: SimMetric,
    pub lambda: f64,
    pub gamma: f64,
    pub net: NetConfig,
    pub coarse_optim: OptimConfig,
    pub distill_optim: OptimConfig,
    pub fine_optim: OptimConfig,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            coarse_dims: [8, 8, 8],
            fine_dims: [16, 16, 16],
            n_steps: 4,
            metric: SimMetric::Ncc,
            lambda: 0.1,
            gamma: 1.0,
            net: NetConfig::default(),
            coarse_optim: OptimConfig::with_iters(300),
            distill_optim: OptimConfig::with_iters(300),
            fine_optim: OptimConfig::with_iters(500),
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        GridSpec::with_dims(self.coarse_dims)?;
        GridSpec::with_dims(self.fine_dims)?;
        if (0..3).any(|a| self.coarse_dims[a] > self.fine_dims[a]) {
            return Err(Error::InvalidArgument(format!(
                "coarse_dims {:?} exceed fine_dims {:?}",
                self.coarse_dims, self.fine_dims
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument("lambda and gamma must be >= 0".into()));
        }
        self.net.validate()?;
        self.coarse_optim.validate()?;
        self.distill_optim.validate()?;
        self.fine_optim.validate()
    }

    /// Network configuration with the run seed applied.
    pub fn seeded_net(&self) -> NetConfig {
        NetConfig {
            seed: self.seed,
            ..self.net
        }
    }

    pub fn stage_settings(&self, stage: Stage) -> StageSettings {
        let (field_dims, optim) = match stage {
            Stage::Coarse => (self.coarse_dims, self.coarse_optim),
            Stage::Distill => (self.fine_dims, self.distill_optim),
            Stage::Fine => (self.fine_dims, self.fine_optim),
        };
        StageSettings {
            field_dims,
            n_steps: self.n_steps,
            metric: self.metric,
            lambda: self.lambda,
            gamma: self.gamma,
            optim,
        }
    }

    /// Image resolution used by the coarse stage: per axis, the smaller of
    /// the image dims and twice the coarse field dims.
    pub fn coarse_image_dims(&self, image_dims: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| image_dims[a].min(2 * self.coarse_dims[a]))
    }

    pub fn total_iterations(&self) -> usize {
        self.coarse_optim.max_iters + self.distill_optim.max_iters + self.fine_optim.max_iters
    }
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub coarse: StageResult,
    /// Coarse displacement resampled to the fine density.
    pub upsampled: Option<VectorField3>,
    pub distill: Option<StageResult>,
    pub fine: Option<StageResult>,
}

impl PipelineResult {
    pub fn diverged(&self) -> bool {
        self.stages().iter().any(|(_, s)| s.diverged())
    }

    pub fn stages(&self) -> Vec<(Stage, &StageResult)> {
        let mut out = vec![(Stage::Coarse, &self.coarse)];
        if let Some(d) = &self.distill {
            out.push((Stage::Distill, d));
        }
        if let Some(f) = &self.fine {
            out.push((Stage::Fine, f));
        }
        out
    }

    /// `S_f`, present when every stage completed.
    pub fn final_displacement(&self) -> Option<&VectorField3> {
        self.fine.as_ref().filter(|f| !f.diverged()).map(|f| &f.displacement)
    }
}

pub type StageSink<'a> = &'a mut dyn FnMut(Stage, usize, &LossBreakdown);

/// Coarse stage on downsampled images, upsampling of its displacement,
/// distillation into a fresh network at the fine density, then a fine stage
/// warm-started from the distilled parameters.
pub fn coarse_to_fine(
    cfg: &RegistrationConfig,
    moving: &Volume3,
    fixed: &Volume3,
    sink: StageSink<'_>,
) -> Result<PipelineResult> {
    cfg.validate()?;
    if moving.dims() != fixed.dims() {
        return Err(Error::GridMismatch(format!(
            "moving {:?} vs fixed {:?}",
            moving.dims(),
            fixed.dims()
        )));
    }
    let net = cfg.seeded_net();

    let coarse_dims = cfg.coarse_image_dims(fixed.dims());
    let (coarse_moving, coarse_fixed) = if coarse_dims == fixed.dims() {
        (moving.clone(), fixed.clone())
    } else {
        (downsample_volume(moving, coarse_dims)?, downsample_volume(fixed, coarse_dims)?)
    };
    let coarse = inr_lddmm(
        &coarse_moving,
        &coarse_fixed,
        &init_params(&net)?,
        &cfg.stage_settings(Stage::Coarse),
        &mut |i, l| sink(Stage::Coarse, i, l),
    )?;
    if coarse.diverged() {
        return Ok(PipelineResult {
            coarse,
            upsampled: None,
            distill: None,
            fine: None,
        });
    }

    let upsampled = resample_field(&coarse.displacement, cfg.fine_dims)?;
    let fine_flow = FlowConfig::new(cfg.fine_dims, cfg.n_steps)?;
    let distill_objective = DistillationObjective::new(&upsampled, fine_flow, cfg.lambda, cfg.gamma)?;
    let distill = optimize_stage(
        &distill_objective,
        &init_params(&net)?,
        &cfg.distill_optim,
        StopTarget::DistillFraction(DISTILL_TARGET_FRACTION),
        &mut |i, l| sink(Stage::Distill, i, l),
    )?;
    if distill.diverged() {
        return Ok(PipelineResult {
            coarse,
            upsampled: Some(upsampled),
            distill: Some(distill),
            fine: None,
        });
    }

    let fine = inr_lddmm(
        moving,
        fixed,
        &distill.params,
        &cfg.stage_settings(Stage::Fine),
        &mut |i, l| sink(Stage::Fine, i, l),
    )?;
    Ok(PipelineResult {
        coarse,
        upsampled: Some(upsampled),
        distill: Some(distill),
        fine: Some(fine),
    })
}

/// `I1 ∘ S_f` on the moving image's own grid.
pub fn apply_final(moving: &Volume3, s_final: &VectorField3) -> Volume3 {
    warp_volume(moving, s_final, moving.grid())
}
