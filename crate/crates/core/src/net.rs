//! Three-layer coordinate MLP mapping `(x, y, z, t)` to a velocity.
//!
//! Parameters live in one flat buffer so the optimizer, the finite-difference
//! checker and the checkpoint format can treat them uniformly. Layer order is
//! `w1 (H×4), b1 (H), w2 (H×H), b2 (H), w3 (3×H), b3 (3)`, matrices row-major.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Vec3;

pub const INPUT_DIM: usize = 4;
pub const OUTPUT_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sine,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sine" => Ok(Activation::Sine),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation `{other}` (expected sine or tanh)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden_width: usize,
    pub activation: Activation,
    /// Frequency applied inside the first-layer sine.
    pub sine_frequency: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            activation: Activation::Sine,
            sine_frequency: 30.0,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::InvalidArgument("hidden_width must be >= 1".into()));
        }
        if !(self.sine_frequency > 0.0) || !self.sine_frequency.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sine_frequency must be positive, got {}",
                self.sine_frequency
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        param_count(self.hidden_width)
    }

    /// Effective frequency of the first activation (1 for tanh).
    fn first_frequency(&self) -> f64 {
        match self.activation {
            Activation::Sine => self.sine_frequency,
            Activation::Tanh => 1.0,
        }
    }
}

pub fn param_count(hidden: usize) -> usize {
    hidden * INPUT_DIM + hidden + hidden * hidden + hidden + OUTPUT_DIM * hidden + OUTPUT_DIM
}

/// Offsets of each block inside the flat parameter buffer.
#[derive(Clone, Copy, Debug)]
struct Layout {
    h: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

impl Layout {
    fn new(h: usize) -> Self {
        let b1 = h * INPUT_DIM;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + OUTPUT_DIM * h;
        Self {
            h,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    config: NetConfig,
    values: Vec<f64>,
}

/// Gradient with respect to every entry of an [`MlpParams`], same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient {
    values: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            values: vec![0.0; params.values.len()],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl MlpParams {
    pub fn from_values(config: NetConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters for hidden width {}, got {}",
                config.param_count(),
                config.hidden_width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        Ok(Self { config, values })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn layout(&self) -> Layout {
        Layout::new(self.config.hidden_width)
    }

    pub fn w1(&self) -> &[f64] {
        let l = self.layout();
        &self.values[..l.b1]
    }

    pub fn b1(&self) -> &[f64] {
        let l = self.layout();
        &self.values[l.b1..l.w2]
    }

    pub fn w2(&self) -> &[f64] {
        let l = self.layout();
        &self.values[l.w2..l.b2]
    }

    pub fn b2(&self) -> &[f64] {
        let l = self.layout();
        &self.values[l.b2..l.w3]
    }

    pub fn w3(&self) -> &[f64] {
        let l = self.layout();
        &self.values[l.w3..l.b3]
    }

    pub fn b3(&self) -> &[f64] {
        let l = self.layout();
        &self.values[l.b3..]
    }

    pub fn w3_mut(&mut self) -> &mut [f64] {
        let l = self.layout();
        &mut self.values[l.w3..l.b3]
    }

    pub fn b3_mut(&mut self) -> &mut [f64] {
        let l = self.layout();
        &mut self.values[l.b3..]
    }

    /// A copy with every parameter replaced.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            config: self.config,
            values,
        }
    }
}

/// Uniform fan-in initialization; the output layer starts at exactly zero so
/// the initial flow is the identity.
pub fn init_params(cfg: &NetConfig) -> Result<MlpParams> {
    cfg.validate()?;
    let h = cfg.hidden_width;
    let l = Layout::new(h);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = vec![0.0; param_count(h)];

    let mut bound1 = 1.0 / (INPUT_DIM as f64).sqrt();
    if cfg.activation == Activation::Sine {
        bound1 /= (INPUT_DIM as f64).sqrt();
    }
    for v in &mut values[..l.w2] {
        *v = rng.gen_range(-bound1..bound1);
    }
    let bound2 = 1.0 / (h as f64).sqrt();
    for v in &mut values[l.w2..l.w3] {
        *v = rng.gen_range(-bound2..bound2);
    }
    Ok(MlpParams {
        config: *cfg,
        values,
    })
}

/// Scratch buffers for one forward/backward evaluation.
#[derive(Clone, Debug)]
pub(crate) struct Workspace {
    // first layer: activation and its derivative w.r.t. the pre-activation
    a1: Vec<f64>,
    da1: Vec<f64>,
    a2: Vec<f64>,
    da2: Vec<f64>,
    g2: Vec<f64>,
    g1: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(hidden: usize) -> Self {
        Self {
            a1: vec![0.0; hidden],
            da1: vec![0.0; hidden],
            a2: vec![0.0; hidden],
            da2: vec![0.0; hidden],
            g2: vec![0.0; hidden],
            g1: vec![0.0; hidden],
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<Workspace> = RefCell::new(Workspace::new(0));
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl MlpParams {
    /// Velocity at `(p, t)`.
    pub fn forward(&self, p: Vec3, t: f64) -> Vec3 {
        let h = self.config.hidden_width;
        SCRATCH.with(|ws| {
            let mut ws = ws.borrow_mut();
            if ws.a1.len() != h {
                *ws = Workspace::new(h);
            }
            self.forward_into(p, t, &mut ws, false)
        })
    }

    /// Forward pass writing activations into `ws`. With `keep_derivatives`
    /// the activation slopes needed by [`MlpParams::backward`] are stored too.
    pub(crate) fn forward_into(&self, p: Vec3, t: f64, ws: &mut Workspace, keep_derivatives: bool) -> Vec3 {
        let l = self.layout();
        let h = l.h;
        let v = &self.values;
        let x = [p[0], p[1], p[2], t];
        let omega = self.config.first_frequency();
        let act = self.config.activation;

        for r in 0..h {
            let w = &v[r * INPUT_DIM..(r + 1) * INPUT_DIM];
            let z = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + w[3] * x[3] + v[l.b1 + r];
            match act {
                Activation::Sine => {
                    if keep_derivatives {
                        let (s, c) = (omega * z).sin_cos();
                        ws.a1[r] = s;
                        ws.da1[r] = omega * c;
                    } else {
                        ws.a1[r] = (omega * z).sin();
                    }
                }
                Activation::Tanh => {
                    let a = z.tanh();
                    ws.a1[r] = a;
                    if keep_derivatives {
                        ws.da1[r] = 1.0 - a * a;
                    }
                }
            }
        }
        for r in 0..h {
            let z = dot(&v[l.w2 + r * h..l.w2 + (r + 1) * h], &ws.a1) + v[l.b2 + r];
            match act {
                Activation::Sine => {
                    if keep_derivatives {
                        let (s, c) = z.sin_cos();
                        ws.a2[r] = s;
                        ws.da2[r] = c;
                    } else {
                        ws.a2[r] = z.sin();
                    }
                }
                Activation::Tanh => {
                    let a = z.tanh();
                    ws.a2[r] = a;
                    if keep_derivatives {
                        ws.da2[r] = 1.0 - a * a;
                    }
                }
            }
        }
        std::array::from_fn(|o| dot(&v[l.w3 + o * h..l.w3 + (o + 1) * h], &ws.a2) + v[l.b3 + o])
    }

    /// Vector-Jacobian product of the last `forward_into(.., true)` call.
    /// Accumulates `∂(gv·f)/∂θ` into `grad` and returns `∂(gv·f)/∂p`.
    pub(crate) fn backward(&self, p: Vec3, t: f64, ws: &mut Workspace, gv: Vec3, grad: &mut [f64]) -> Vec3 {
        let l = self.layout();
        let h = l.h;
        let v = &self.values;
        let x = [p[0], p[1], p[2], t];

        for o in 0..OUTPUT_DIM {
            grad[l.b3 + o] += gv[o];
            let row = &mut grad[l.w3 + o * h..l.w3 + (o + 1) * h];
            for (g, a) in row.iter_mut().zip(&ws.a2) {
                *g += gv[o] * a;
            }
        }
        for r in 0..h {
            let back = gv[0] * v[l.w3 + r] + gv[1] * v[l.w3 + h + r] + gv[2] * v[l.w3 + 2 * h + r];
            ws.g2[r] = back * ws.da2[r];
        }
        ws.g1.iter_mut().for_each(|g| *g = 0.0);
        for r in 0..h {
            let g = ws.g2[r];
            grad[l.b2 + r] += g;
            if g == 0.0 {
                continue;
            }
            let wrow = &v[l.w2 + r * h..l.w2 + (r + 1) * h];
            let grow = &mut grad[l.w2 + r * h..l.w2 + (r + 1) * h];
            for c in 0..h {
                grow[c] += g * ws.a1[c];
                ws.g1[c] += g * wrow[c];
            }
        }
        let mut gp = [0.0; 3];
        for r in 0..h {
            let g = ws.g1[r] * ws.da1[r];
            grad[l.b1 + r] += g;
            let base = r * INPUT_DIM;
            for c in 0..INPUT_DIM {
                grad[base + c] += g * x[c];
            }
            for (a, gpa) in gp.iter_mut().enumerate() {
                *gpa += g * v[base + a];
            }
        }
        gp
    }
}

/// Evaluates `forward` at every point for a shared time.
pub fn forward_batch(params: &MlpParams, points: &[Vec3], t: f64) -> Vec<Vec3> {
    let mut ws = Workspace::new(params.config.hidden_width);
    points
        .iter()
        .map(|&p| params.forward_into(p, t, &mut ws, false))
        .collect()
}
