//! Gated linear student network: forward pass, losses, analytic gradients and
//! the explicit Euler integrator for the gradient flow.
//!
//! The student computes `y = Σ_p c_p W_p x` with one scalar gate per path, or
//! `y_i = Σ_p c_{p,i} (W_p x)_i` when every output neuron has its own gates.
//! Gates are stored as a `P × G` matrix where `G = 1` for per-path gating and
//! `G = d_out` for per-neuron gating; output row `i` reads gate column `0` or
//! `i` respectively.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Standard deviation scale of the weight initialisation (`W ~ N(0, σ²/d_in)`).
pub const DEFAULT_INIT_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    #[default]
    PerPath,
    PerNeuron,
}

/// Grouping of gates under the norm regulariser in per-neuron mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormGroup {
    /// One norm per output row, taken over the `P` gates of that row.
    #[default]
    PerRow,
    /// A single norm over every gate.
    Global,
}

/// How the weight gradient is turned into a weight velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightFlow {
    /// `τ_w dW/dt = -d_out ∇_W L`: the weight time constant applies per
    /// output row, so each row relaxes like the two-dimensional reduced model.
    #[default]
    RowScaled,
    /// `τ_w dW/dt = -∇_W L`.
    Plain,
}

impl WeightFlow {
    pub fn factor(self, d_out: usize) -> f64 {
        match self {
            WeightFlow::RowScaled => d_out as f64,
            WeightFlow::Plain => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RegularizerConfig {
    pub lambda_nonneg: f64,
    pub lambda_norm_l1: f64,
    pub lambda_norm_l2: f64,
    /// Weight decay strength, `λ_W / (2 P d_in) Σ W²`.
    pub lambda_w: f64,
    #[serde(default)]
    pub norm_group: NormGroup,
}

impl RegularizerConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let vals = [
            ("lambda_nonneg", self.lambda_nonneg),
            ("lambda_norm_l1", self.lambda_norm_l1),
            ("lambda_norm_l2", self.lambda_norm_l2),
            ("lambda_w", self.lambda_w),
        ];
        for (name, v) in vals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Penalty on one group of gates: nonnegativity plus the norm terms.
pub fn gate_penalty(c: &[f64], reg: &RegularizerConfig) -> f64 {
    let mut out = 0.0;
    if reg.lambda_nonneg != 0.0 {
        out += reg.lambda_nonneg * c.iter().map(|&v| (-v).max(0.0)).sum::<f64>();
    }
    if reg.lambda_norm_l1 != 0.0 {
        let n1: f64 = c.iter().map(|v| v.abs()).sum();
        out += reg.lambda_norm_l1 * 0.5 * (n1 - 1.0).powi(2);
    }
    if reg.lambda_norm_l2 != 0.0 {
        let n2 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        out += reg.lambda_norm_l2 * 0.5 * (n2 - 1.0).powi(2);
    }
    out
}

/// Subgradient of [`gate_penalty`], added into `out`.
///
/// Conventions at the kinks: the nonnegativity term contributes `-λ` only
/// for strictly negative gates, `sign(0) = 0` in the L1 term, and the L2 term
/// contributes zero when the group norm is zero.
pub fn gate_penalty_grad(c: &[f64], reg: &RegularizerConfig, out: &mut [f64]) {
    debug_assert_eq!(c.len(), out.len());
    if reg.lambda_nonneg != 0.0 {
        for (o, &v) in out.iter_mut().zip(c) {
            if v < 0.0 {
                *o -= reg.lambda_nonneg;
            }
        }
    }
    if reg.lambda_norm_l1 != 0.0 {
        let n1: f64 = c.iter().map(|v| v.abs()).sum();
        let k = reg.lambda_norm_l1 * (n1 - 1.0);
        for (o, &v) in out.iter_mut().zip(c) {
            *o += k * sign(v);
        }
    }
    if reg.lambda_norm_l2 != 0.0 {
        let n2 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n2 > 0.0 {
            let k = reg.lambda_norm_l2 * (n2 - 1.0) / n2;
            for (o, &v) in out.iter_mut().zip(c) {
                *o += k * v;
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Inputs for one gradient evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// Inputs `x` (`d_in × B`) and teacher outputs `y` (`d_out × B`).
    Sampled { x: Array2<f64>, y: Array2<f64> },
    /// Population limit for white Gaussian inputs: only the target map is needed.
    Expectation { target: Array2<f64> },
}

impl Batch {
    pub fn d_out(&self) -> usize {
        match self {
            Batch::Sampled { y, .. } => y.nrows(),
            Batch::Expectation { target } => target.nrows(),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Batch::Sampled { x, .. } => x.nrows(),
            Batch::Expectation { target } => target.ncols(),
        }
    }
}

/// Loss value and the matrix `G = E Xᵀ / (B d_out)` (or `(W* - W_eff)/d_out`
/// in expectation mode), from which every gradient is assembled.
#[derive(Debug, Clone)]
pub struct Residual {
    pub loss: f64,
    pub g: Array2<f64>,
}

/// Task loss of an effective linear map against a batch.
pub fn map_residual(w_eff: &Array2<f64>, batch: &Batch) -> Residual {
    let d_out = w_eff.nrows() as f64;
    match batch {
        Batch::Sampled { x, y } => {
            let b = x.ncols() as f64;
            let e = y - &w_eff.dot(x);
            let loss = e.iter().map(|v| v * v).sum::<f64>() / (2.0 * b * d_out);
            let g = e.dot(&x.t()) / (b * d_out);
            Residual { loss, g }
        }
        Batch::Expectation { target } => {
            let e = target - w_eff;
            let loss = e.iter().map(|v| v * v).sum::<f64>() / (2.0 * d_out);
            Residual { loss, g: e / d_out }
        }
    }
}

/// Expected task loss of `w_eff` under white unit-variance inputs.
pub fn population_loss(w_eff: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let d_out = w_eff.nrows() as f64;
    let mut s = 0.0;
    for (a, b) in target.iter().zip(w_eff.iter()) {
        s += (a - b) * (a - b);
    }
    s / (2.0 * d_out)
}

/// Statistics of one integrator step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Task loss on the batch before the update.
    pub loss_task: f64,
    /// Regularisation loss before the update.
    pub loss_reg: f64,
    /// Frobenius norm of each path's weight update.
    pub weight_update_norms: Vec<f64>,
    /// Norm of the gate update.
    pub gate_update_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedStudent {
    weights: Vec<Array2<f64>>,
    gates: Array2<f64>,
    mode: GateMode,
    pub tau_w: f64,
    pub tau_c: f64,
    pub weight_flow: WeightFlow,
}

impl GatedStudent {
    /// Builds a student from explicit parameters.
    ///
    /// `gates` must be `P × 1` in per-path mode and `P × d_out` in per-neuron mode.
    pub fn from_parts(
        weights: Vec<Array2<f64>>,
        gates: Array2<f64>,
        mode: GateMode,
        tau_w: f64,
        tau_c: f64,
    ) -> Result<Self, ModelError> {
        if weights.is_empty() {
            return Err(ModelError::InvalidConfig("need at least one path".into()));
        }
        let (d_out, d_in) = weights[0].dim();
        for (p, w) in weights.iter().enumerate() {
            if w.dim() != (d_out, d_in) {
                return Err(ModelError::Dimension(format!(
                    "path {p} weights are {:?}, expected {:?}",
                    w.dim(),
                    (d_out, d_in)
                )));
            }
        }
        let groups = match mode {
            GateMode::PerPath => 1,
            GateMode::PerNeuron => d_out,
        };
        if gates.dim() != (weights.len(), groups) {
            return Err(ModelError::Dimension(format!(
                "gates are {:?}, expected {:?}",
                gates.dim(),
                (weights.len(), groups)
            )));
        }
        if !(tau_w > 0.0 && tau_c > 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "time constants must be positive (tau_w={tau_w}, tau_c={tau_c})"
            )));
        }
        Ok(Self {
            weights,
            gates,
            mode,
            tau_w,
            tau_c,
            weight_flow: WeightFlow::default(),
        })
    }

    /// Per-path student from a gate vector.
    pub fn per_path(
        weights: Vec<Array2<f64>>,
        gates: &[f64],
        tau_w: f64,
        tau_c: f64,
    ) -> Result<Self, ModelError> {
        let g = Array2::from_shape_vec((gates.len(), 1), gates.to_vec())
            .map_err(|e| ModelError::Dimension(e.to_string()))?;
        Self::from_parts(weights, g, GateMode::PerPath, tau_w, tau_c)
    }

    /// Random initialisation: weights i.i.d. `N(0, σ²/d_in)`, every gate `1/2`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        paths: usize,
        d_in: usize,
        d_out: usize,
        mode: GateMode,
        sigma: f64,
        tau_w: f64,
        tau_c: f64,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if paths == 0 || d_in == 0 || d_out == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "dimensions must be positive (P={paths}, d_in={d_in}, d_out={d_out})"
            )));
        }
        let normal = Normal::new(0.0, sigma / (d_in as f64).sqrt())
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let weights = (0..paths)
            .map(|_| Array2::from_shape_simple_fn((d_out, d_in), || normal.sample(rng)))
            .collect();
        let groups = match mode {
            GateMode::PerPath => 1,
            GateMode::PerNeuron => d_out,
        };
        Self::from_parts(
            weights,
            Array2::from_elem((paths, groups), 0.5),
            mode,
            tau_w,
            tau_c,
        )
    }

    pub fn with_weight_flow(mut self, flow: WeightFlow) -> Self {
        self.weight_flow = flow;
        self
    }

    pub fn paths(&self) -> usize {
        self.weights.len()
    }

    pub fn d_in(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    /// Gate matrix, `P × 1` or `P × d_out`.
    pub fn gates(&self) -> &Array2<f64> {
        &self.gates
    }

    pub fn gates_mut(&mut self) -> &mut Array2<f64> {
        &mut self.gates
    }

    /// Gate of path `p` as seen by output row `i`.
    pub fn gate(&self, p: usize, i: usize) -> f64 {
        match self.mode {
            GateMode::PerPath => self.gates[[p, 0]],
            GateMode::PerNeuron => self.gates[[p, i]],
        }
    }

    /// Mean gate of every path (the gate itself in per-path mode).
    pub fn mean_gates(&self) -> Vec<f64> {
        self.gates
            .mean_axis(Axis(1))
            .expect("gate matrix has at least one column")
            .to_vec()
    }

    /// The single linear map `Σ_p c_p ⊙ W_p` the student implements.
    pub fn effective_map(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.d_out(), self.d_in()));
        for (p, w) in self.weights.iter().enumerate() {
            for (i, (mut orow, wrow)) in out
                .axis_iter_mut(Axis(0))
                .zip(w.axis_iter(Axis(0)))
                .enumerate()
            {
                let c = self.gate(p, i);
                orow.scaled_add(c, &wrow);
            }
        }
        out
    }

    /// Student output for inputs `x` (`d_in × B`).
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        if x.nrows() != self.d_in() {
            return Err(ModelError::Dimension(format!(
                "input has {} rows, student expects d_in={}",
                x.nrows(),
                self.d_in()
            )));
        }
        Ok(self.effective_map().dot(x))
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.d_in() != self.d_in() || batch.d_out() != self.d_out() {
            return Err(ModelError::Dimension(format!(
                "batch is d_in={} d_out={}, student is d_in={} d_out={}",
                batch.d_in(),
                batch.d_out(),
                self.d_in(),
                self.d_out()
            )));
        }
        if let Batch::Sampled { x, y } = batch {
            if x.ncols() != y.ncols() || x.ncols() == 0 {
                return Err(ModelError::Dimension(format!(
                    "batch has {} inputs and {} targets",
                    x.ncols(),
                    y.ncols()
                )));
            }
        }
        Ok(())
    }

    pub fn residual(&self, batch: &Batch) -> Result<Residual, ModelError> {
        self.check_batch(batch)?;
        Ok(map_residual(&self.effective_map(), batch))
    }

    pub fn task_loss(&self, batch: &Batch) -> Result<f64, ModelError> {
        Ok(self.residual(batch)?.loss)
    }

    /// Expected task loss for white inputs and target map `target`.
    pub fn population_loss(&self, target: &Array2<f64>) -> f64 {
        population_loss(&self.effective_map(), target)
    }

    fn gate_groups(&self, reg: &RegularizerConfig) -> Vec<Vec<(usize, usize)>> {
        let p = self.paths();
        match (self.mode, reg.norm_group) {
            (GateMode::PerPath, _) => vec![(0..p).map(|q| (q, 0)).collect()],
            (GateMode::PerNeuron, NormGroup::PerRow) => (0..self.d_out())
                .map(|i| (0..p).map(|q| (q, i)).collect())
                .collect(),
            (GateMode::PerNeuron, NormGroup::Global) => vec![(0..p)
                .flat_map(|q| (0..self.d_out()).map(move |i| (q, i)))
                .collect()],
        }
    }

    pub fn reg_loss(&self, reg: &RegularizerConfig) -> f64 {
        let mut out = 0.0;
        for group in self.gate_groups(reg) {
            let c: Vec<f64> = group.iter().map(|&ix| self.gates[ix]).collect();
            out += gate_penalty(&c, reg);
        }
        if reg.lambda_w != 0.0 {
            let sq: f64 = self
                .weights
                .iter()
                .map(|w| w.iter().map(|v| v * v).sum::<f64>())
                .sum();
            out += reg.lambda_w / (2.0 * self.paths() as f64 * self.d_in() as f64) * sq;
        }
        out
    }

    pub fn total_loss(&self, batch: &Batch, reg: &RegularizerConfig) -> Result<f64, ModelError> {
        Ok(self.task_loss(batch)? + self.reg_loss(reg))
    }

    fn weight_grads_from(&self, g: &Array2<f64>, reg: &RegularizerConfig) -> Vec<Array2<f64>> {
        let decay = reg.lambda_w / (self.paths() as f64 * self.d_in() as f64);
        self.weights
            .iter()
            .enumerate()
            .map(|(p, w)| {
                let mut out = Array2::zeros(w.dim());
                for (i, (mut orow, grow)) in out
                    .axis_iter_mut(Axis(0))
                    .zip(g.axis_iter(Axis(0)))
                    .enumerate()
                {
                    orow.scaled_add(-self.gate(p, i), &grow);
                }
                if decay != 0.0 {
                    out.scaled_add(decay, w);
                }
                out
            })
            .collect()
    }

    fn gate_grads_from(&self, g: &Array2<f64>, reg: &RegularizerConfig) -> Array2<f64> {
        let mut out = Array2::zeros(self.gates.dim());
        for (p, w) in self.weights.iter().enumerate() {
            for (i, (wrow, grow)) in w.axis_iter(Axis(0)).zip(g.axis_iter(Axis(0))).enumerate() {
                let col = match self.mode {
                    GateMode::PerPath => 0,
                    GateMode::PerNeuron => i,
                };
                out[[p, col]] -= wrow.dot(&grow);
            }
        }
        for group in self.gate_groups(reg) {
            let c: Vec<f64> = group.iter().map(|&ix| self.gates[ix]).collect();
            let mut gr = vec![0.0; c.len()];
            gate_penalty_grad(&c, reg, &mut gr);
            for (&ix, v) in group.iter().zip(gr) {
                out[ix] += v;
            }
        }
        out
    }

    /// Gradient of the total loss with respect to every path's weights.
    pub fn grad_weights(
        &self,
        batch: &Batch,
        reg: &RegularizerConfig,
    ) -> Result<Vec<Array2<f64>>, ModelError> {
        let r = self.residual(batch)?;
        Ok(self.weight_grads_from(&r.g, reg))
    }

    /// (Sub)gradient of the total loss with respect to the gates.
    pub fn grad_gates(
        &self,
        batch: &Batch,
        reg: &RegularizerConfig,
    ) -> Result<Array2<f64>, ModelError> {
        let r = self.residual(batch)?;
        Ok(self.gate_grads_from(&r.g, reg))
    }

    /// One explicit Euler step of the coupled flow
    /// `τ_w dW/dt = -k ∇_W L`, `τ_c dc/dt = -∇_c L` (`k` from [`WeightFlow`]).
    ///
    /// Both gradients are evaluated at the current state before either
    /// parameter moves. On a non-finite result the student is left unchanged.
    pub fn euler_step(
        &mut self,
        batch: &Batch,
        reg: &RegularizerConfig,
        dt: f64,
    ) -> Result<StepStats, ModelError> {
        let r = self.residual(batch)?;
        let loss_reg = self.reg_loss(reg);
        let gw = self.weight_grads_from(&r.g, reg);
        let gc = self.gate_grads_from(&r.g, reg);
        let kw = dt * self.weight_flow.factor(self.d_out()) / self.tau_w;
        let kc = dt / self.tau_c;

        let mut new_weights = self.weights.clone();
        let mut weight_update_norms = Vec::with_capacity(self.paths());
        for (p, (w, g)) in new_weights.iter_mut().zip(&gw).enumerate() {
            w.scaled_add(-kw, g);
            if w.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(format!("W[{}]", p + 1)));
            }
            weight_update_norms.push(kw * frobenius(g));
        }
        let mut new_gates = self.gates.clone();
        new_gates.scaled_add(-kc, &gc);
        if new_gates.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("c".into()));
        }
        self.weights = new_weights;
        self.gates = new_gates;
        Ok(StepStats {
            loss_task: r.loss,
            loss_reg,
            weight_update_norms,
            gate_update_norm: kc * frobenius(&gc),
        })
    }
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Row-wise cosine helper shared by the metrics; zero-norm vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Convenience: a gate vector as a `P × 1` column.
pub fn gate_column(c: &[f64]) -> Array2<f64> {
    Array1::from(c.to_vec()).insert_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn teacher() -> Array2<f64> {
        array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    }

    #[test]
    fn specialised_student_reproduces_teacher_exactly() {
        let t = teacher();
        let s = GatedStudent::per_path(vec![t.clone(), t.mapv(|v| 3.0 * v)], &[1.0, 0.0], 1.0, 1.0)
            .unwrap();
        let x = array![[0.3, -1.0], [2.0, 0.5], [-0.7, 0.1]];
        assert_eq!(s.forward(&x).unwrap(), t.dot(&x));
        let batch = Batch::Sampled { y: t.dot(&x), x };
        assert_eq!(s.task_loss(&batch).unwrap(), 0.0);
    }

    #[test]
    fn half_gates_on_identical_paths_are_exact() {
        let t = teacher();
        let s = GatedStudent::per_path(vec![t.clone(), t.clone()], &[0.5, 0.5], 1.0, 1.0).unwrap();
        assert_eq!(s.effective_map(), t);
    }

    #[test]
    fn gate_penalty_examples() {
        let reg = RegularizerConfig {
            lambda_nonneg: 1.0,
            ..Default::default()
        };
        assert_eq!(gate_penalty(&[-0.5, 1.0], &reg), 0.5);
        let l1 = RegularizerConfig {
            lambda_norm_l1: 1.0,
            ..Default::default()
        };
        assert_eq!(gate_penalty(&[0.5, 0.5], &l1), 0.0);
        let mut g = vec![0.0; 2];
        gate_penalty_grad(&[0.5, 0.5], &l1, &mut g);
        assert_eq!(g, vec![0.0, 0.0]);
        let l2 = RegularizerConfig {
            lambda_norm_l2: 2.0,
            ..Default::default()
        };
        let mut g = vec![0.0; 2];
        gate_penalty_grad(&[0.0, 0.0], &l2, &mut g);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_mismatched_batch() {
        let s = GatedStudent::per_path(vec![teacher()], &[1.0], 1.0, 1.0).unwrap();
        let batch = Batch::Expectation {
            target: Array2::zeros((2, 4)),
        };
        assert!(matches!(s.task_loss(&batch), Err(ModelError::Dimension(_))));
    }

    #[test]
    fn non_finite_step_reports_parameter_and_keeps_state() {
        let mut s = GatedStudent::per_path(vec![teacher()], &[1.0], 1.0, 1.0).unwrap();
        let before = s.clone();
        let batch = Batch::Expectation {
            target: array![[f64::INFINITY, 0.0, 0.0], [0.0, 0.0, 0.0]],
        };
        let err = s
            .euler_step(&batch, &RegularizerConfig::none(), 0.1)
            .unwrap_err();
        assert!(matches!(err, ModelError::NonFinite(ref p) if p == "W[1]"));
        assert_eq!(s, before);
    }

    #[test]
    fn per_neuron_gates_read_their_row() {
        let t = teacher();
        let gates = array![[1.0, 0.0], [0.0, 1.0]];
        let s = GatedStudent::from_parts(
            vec![t.clone(), t.mapv(|v| 2.0 * v)],
            gates,
            GateMode::PerNeuron,
            1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(s.effective_map(), array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
    }
}
