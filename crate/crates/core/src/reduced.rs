//! Two-path, two-teacher reduced model and its analytic companions.
//!
//! Each student `w^p` is a 2-vector holding its components along the two
//! teacher directions and `c^p` is its gate. The flow is
//! `τ_w dw^p/dt = c^p ε` and `τ_c dc^p/dt = w^pᵀ ε - ∂R/∂c^p` with
//! `ε = y* - Σ_p c^p w^p` and task loss `½‖ε‖²`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::curriculum::TeacherSet;
use crate::error::{NumericalAbort, ReducedError};
use crate::model::{gate_penalty, gate_penalty_grad, GateMode, GatedStudent, RegularizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    /// `w[p][m]`: component of student `p` along teacher `m`.
    pub w: [[f64; 2]; 2],
    pub c: [f64; 2],
    pub tau_w: f64,
    pub tau_c: f64,
    /// Current target in teacher coordinates: `(1, 0)` or `(0, 1)` for single tasks.
    pub target: [f64; 2],
}

/// Teacher `m` in reduced coordinates.
pub fn teacher_target(m: usize) -> [f64; 2] {
    let mut t = [0.0; 2];
    t[m] = 1.0;
    t
}

/// Specialisation coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecCoords {
    /// `w[1]_1 - w[2]_1`
    pub wbar1: f64,
    /// `w[2]_2 - w[1]_2`
    pub wbar2: f64,
    /// `½(wbar1 + wbar2)`
    pub wbar: f64,
    /// `c_1 - c_2`
    pub cbar: f64,
    /// `½((w[1]_1 - w[1]_2) + (w[2]_1 - w[2]_2))`
    pub wbarbar: f64,
}

impl ReducedState {
    /// Student 1 on teacher 1 with its gate fully open, student 2 on teacher 2
    /// with its gate closed, facing `target`.
    pub fn specialized(tau_w: f64, tau_c: f64, target: [f64; 2]) -> Self {
        Self {
            w: [[1.0, 0.0], [0.0, 1.0]],
            c: [1.0, 0.0],
            tau_w,
            tau_c,
            target,
        }
    }

    pub fn output(&self) -> [f64; 2] {
        let mut y = [0.0; 2];
        for p in 0..2 {
            for m in 0..2 {
                y[m] += self.c[p] * self.w[p][m];
            }
        }
        y
    }

    pub fn error(&self) -> [f64; 2] {
        let y = self.output();
        [self.target[0] - y[0], self.target[1] - y[1]]
    }

    pub fn task_loss(&self) -> f64 {
        let e = self.error();
        0.5 * (e[0] * e[0] + e[1] * e[1])
    }

    pub fn reg_loss(&self, reg: &RegularizerConfig) -> f64 {
        gate_penalty(&self.c, reg)
    }

    pub fn coords(&self) -> SpecCoords {
        let w = &self.w;
        let wbar1 = w[0][0] - w[1][0];
        let wbar2 = w[1][1] - w[0][1];
        SpecCoords {
            wbar1,
            wbar2,
            wbar: 0.5 * (wbar1 + wbar2),
            cbar: self.c[0] - self.c[1],
            wbarbar: 0.5 * ((w[0][0] - w[0][1]) + (w[1][0] - w[1][1])),
        }
    }

    fn advance(&self, eps: [f64; 2], dt: f64, reg: &RegularizerConfig) -> Result<Self, ReducedError> {
        let mut gr = [0.0; 2];
        gate_penalty_grad(&self.c, reg, &mut gr);
        let mut next = *self;
        for p in 0..2 {
            let proj = self.w[p][0] * eps[0] + self.w[p][1] * eps[1];
            for m in 0..2 {
                next.w[p][m] += dt / self.tau_w * self.c[p] * eps[m];
            }
            next.c[p] += dt / self.tau_c * (proj - gr[p]);
        }
        for p in 0..2 {
            if !next.w[p].iter().all(|v| v.is_finite()) {
                return Err(ReducedError::NonFinite(format!("w[{}]", p + 1)));
            }
        }
        if !next.c.iter().all(|v| v.is_finite()) {
            return Err(ReducedError::NonFinite("c".into()));
        }
        Ok(next)
    }
}

/// One explicit Euler step of the reduced flow.
pub fn reduced_step(
    state: &ReducedState,
    dt: f64,
    reg: &RegularizerConfig,
) -> Result<ReducedState, ReducedError> {
    state.advance(state.error(), dt, reg)
}

/// Euler step with the error projected onto its antisymmetric part,
/// `ε ← (ε_a, -ε_a)` with `ε_a = (ε_1 - ε_2)/2`.
///
/// Starting from `wbar1 = wbar2` this keeps the dynamics on the symmetric
/// manifold assumed by [`exact_wbar`] and [`conserved_quantity`].
pub fn symmetric_step(
    state: &ReducedState,
    dt: f64,
    reg: &RegularizerConfig,
) -> Result<ReducedState, ReducedError> {
    let e = state.error();
    let ea = 0.5 * (e[0] - e[1]);
    state.advance([ea, -ea], dt, reg)
}

/// Heun (explicit trapezoidal) version of [`symmetric_step`].
///
/// Euler steps change the conserved quantity by `O(dt)` per unit time; this
/// second-order step reduces that to `O(dt²)`.
pub fn symmetric_heun_step(
    state: &ReducedState,
    dt: f64,
    reg: &RegularizerConfig,
) -> Result<ReducedState, ReducedError> {
    let mid = symmetric_step(state, dt, reg)?;
    let end = symmetric_step(&mid, dt, reg)?;
    let mut next = *state;
    for p in 0..2 {
        for m in 0..2 {
            next.w[p][m] = 0.5 * (state.w[p][m] + end.w[p][m]);
        }
        next.c[p] = 0.5 * (state.c[p] + end.c[p]);
    }
    Ok(next)
}

/// `wbar` on the conserved orbit through the fully specialised point,
/// `√(1 - ½(τ_c/τ_w)(1 - cbar²))`.
pub fn exact_wbar(cbar: f64, tau_c: f64, tau_w: f64) -> Result<f64, ReducedError> {
    let radicand = 1.0 - 0.5 * (tau_c / tau_w) * (1.0 - cbar * cbar);
    if radicand < 0.0 {
        return Err(ReducedError::Domain { cbar, radicand });
    }
    Ok(radicand.sqrt())
}

/// `τ_c cbar² - 2 τ_w wbar²`, constant along symmetric trajectories.
pub fn conserved_quantity(cbar: f64, wbar: f64, tau_c: f64, tau_w: f64) -> f64 {
    tau_c * cbar * cbar - 2.0 * tau_w * wbar * wbar
}

/// Instantaneous task-loss descent rate `-dL/dt` without regularisation,
/// `Σ_p ‖ε‖² (c^p)²/τ_w + (w^pᵀε)²/τ_c`.
///
/// With unit time constants this is `εᵀ K ε` for the tangent kernel of the
/// reduced model.
pub fn ntk_descent_rate(state: &ReducedState) -> f64 {
    let e = state.error();
    let e2 = e[0] * e[0] + e[1] * e[1];
    (0..2)
        .map(|p| {
            let proj = state.w[p][0] * e[0] + state.w[p][1] * e[1];
            e2 * state.c[p] * state.c[p] / state.tau_w + proj * proj / state.tau_c
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetryResidual {
    /// `ε_1 + ε_2`
    pub eps_sum: f64,
    /// `wbar1 - wbar2`
    pub wbar_gap: f64,
}

pub fn symmetry_residuals(states: &[ReducedState]) -> Vec<SymmetryResidual> {
    states
        .iter()
        .map(|s| {
            let e = s.error();
            let c = s.coords();
            SymmetryResidual {
                eps_sum: e[0] + e[1],
                wbar_gap: c.wbar1 - c.wbar2,
            }
        })
        .collect()
}

/// Specialisation gained over `total_time` of alternating blocks of length
/// `tau_b` in the short-block limit: `total_time · ‖w̄‖ ‖ε‖² τ_B`.
///
/// Over one two-period window (`total_time = 4 τ_B`) this is
/// `2 (2 ‖w̄‖ ‖ε‖) ‖ε‖ τ_B²`.
pub fn predicted_growth(wbar0: f64, eps_norm: f64, tau_b: f64, total_time: f64) -> f64 {
    total_time * wbar0.abs() * eps_norm * eps_norm * tau_b
}

/// Growth over one two-period window of blocks of length `tau_b`.
pub fn blocklength_prediction(wbar0: f64, eps_norm: f64, tau_b: f64) -> f64 {
    predicted_growth(wbar0, eps_norm, tau_b, 4.0 * tau_b)
}

/// A recorded point of a reduced trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedSample {
    pub t: f64,
    pub block: usize,
    pub state: ReducedState,
    pub loss: f64,
    pub ntk_rate: f64,
}

impl ReducedSample {
    fn of(t: f64, block: usize, state: ReducedState) -> Self {
        Self {
            t,
            block,
            state,
            loss: state.task_loss(),
            ntk_rate: ntk_descent_rate(&state),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReducedIntegrator {
    #[default]
    Free,
    /// Error antisymmetrised every step, see [`symmetric_step`].
    Symmetric,
    /// As `Symmetric` with second-order steps, see [`symmetric_heun_step`].
    SymmetricHeun,
}

impl ReducedIntegrator {
    pub fn step(self, state: &ReducedState, dt: f64, reg: &RegularizerConfig) -> Result<ReducedState, ReducedError> {
        match self {
            ReducedIntegrator::Free => reduced_step(state, dt, reg),
            ReducedIntegrator::Symmetric => symmetric_step(state, dt, reg),
            ReducedIntegrator::SymmetricHeun => symmetric_heun_step(state, dt, reg),
        }
    }
}

/// Block-alternating simulation settings for the reduced model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedSchedule {
    pub tau_b: f64,
    pub n_blocks: usize,
    pub dt: f64,
    /// Teacher index of the first block; blocks alternate from there.
    pub first_teacher: usize,
    /// Record every `stride` steps (plus the final state).
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedRun {
    pub samples: Vec<ReducedSample>,
    pub final_state: ReducedState,
    pub abort: Option<NumericalAbort>,
}

/// Integrates the reduced model through alternating single-teacher blocks.
pub fn simulate_reduced(
    initial: ReducedState,
    schedule: &ReducedSchedule,
    reg: &RegularizerConfig,
    integrator: ReducedIntegrator,
) -> ReducedRun {
    let steps_per_block = (schedule.tau_b / schedule.dt).round().max(1.0) as usize;
    let stride = schedule.stride.max(1);
    let mut state = initial;
    let mut samples = Vec::new();
    let mut abort = None;
    let total = steps_per_block * schedule.n_blocks;
    'outer: for block in 0..schedule.n_blocks {
        state.target = teacher_target((schedule.first_teacher + block) % 2);
        for k in 0..steps_per_block {
            let step = block * steps_per_block + k;
            let t = step as f64 * schedule.dt;
            if step % stride == 0 {
                samples.push(ReducedSample::of(t, block, state));
            }
            match integrator.step(&state, schedule.dt, reg) {
                Ok(s) => state = s,
                Err(e) => {
                    let param = match e {
                        ReducedError::NonFinite(p) => p,
                        other => other.to_string(),
                    };
                    abort = Some(NumericalAbort { t, block, param });
                    break 'outer;
                }
            }
        }
    }
    if abort.is_none() && schedule.n_blocks > 0 {
        let t = total as f64 * schedule.dt;
        samples.push(ReducedSample::of(t, schedule.n_blocks - 1, state));
    }
    ReducedRun {
        samples,
        final_state: state,
        abort,
    }
}

/// Projection of a full two-path student onto the row-wise teacher basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FullProjection {
    /// Reduced weights for every output row.
    pub rows: Vec<[[f64; 2]; 2]>,
    /// Row average of `rows`.
    pub mean: [[f64; 2]; 2],
    /// Frobenius norm of the weights outside the teacher rows' span.
    pub residual_norm: f64,
    /// Frobenius norm of all student weights.
    pub student_norm: f64,
    pub gates: [f64; 2],
}

impl FullProjection {
    pub fn to_state(&self, tau_w: f64, tau_c: f64, target: [f64; 2]) -> ReducedState {
        ReducedState {
            w: self.mean,
            c: self.gates,
            tau_w,
            tau_c,
            target,
        }
    }
}

/// Per-row Gram matrix of the teachers with the largest off-diagonal entry.
fn worst_row_gram(teachers: &TeacherSet) -> (f64, [[f64; 2]; 2]) {
    let (a, b) = (teachers.get(0), teachers.get(1));
    let mut worst = (0.0, [[1.0, 0.0], [0.0, 1.0]]);
    for i in 0..teachers.d_out() {
        let (ra, rb) = (a.row(i), b.row(i));
        let g = [[ra.dot(&ra), ra.dot(&rb)], [rb.dot(&ra), rb.dot(&rb)]];
        let cos = g[0][1].abs() / (g[0][0] * g[1][1]).sqrt();
        if cos > worst.0 {
            worst = (cos, g);
        }
    }
    worst
}

/// Tolerance on row cosines below which the teacher basis counts as orthogonal.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

/// Projects a per-path, two-path student onto the two teachers' rows:
/// `w[p][m]` for row `i` is `W_p[i] · W*_m[i]`.
///
/// Refuses non-orthogonal teacher rows unless `force` is set.
pub fn project_full(
    student: &GatedStudent,
    teachers: &TeacherSet,
    force: bool,
) -> Result<FullProjection, ReducedError> {
    if student.paths() != 2 || teachers.len() != 2 {
        return Err(ReducedError::Invalid(format!(
            "projection needs two paths and two teachers, got {} and {}",
            student.paths(),
            teachers.len()
        )));
    }
    if student.mode() != GateMode::PerPath {
        return Err(ReducedError::Invalid("projection needs per-path gates".into()));
    }
    if student.d_in() != teachers.d_in() || student.d_out() != teachers.d_out() {
        return Err(ReducedError::Invalid("student and teacher shapes differ".into()));
    }
    let (max_cos, gram) = worst_row_gram(teachers);
    if max_cos > ORTHOGONALITY_TOL && !force {
        return Err(ReducedError::NonOrthogonal { max_cos, gram });
    }
    let d_out = student.d_out();
    let mut rows = Vec::with_capacity(d_out);
    let mut mean = [[0.0; 2]; 2];
    let mut residual2 = 0.0;
    let mut norm2 = 0.0;
    for i in 0..d_out {
        let mut r = [[0.0; 2]; 2];
        for p in 0..2 {
            let wrow = student.weights()[p].row(i);
            let mut rem = wrow.to_owned();
            for m in 0..2 {
                let trow = teachers.get(m).row(i);
                r[p][m] = wrow.dot(&trow);
                mean[p][m] += r[p][m] / d_out as f64;
                rem.scaled_add(-r[p][m], &trow);
            }
            residual2 += rem.dot(&rem);
            norm2 += wrow.dot(&wrow);
        }
        rows.push(r);
    }
    Ok(FullProjection {
        rows,
        mean,
        residual_norm: residual2.sqrt(),
        student_norm: norm2.sqrt(),
        gates: [student.gate(0, 0), student.gate(1, 0)],
    })
}

/// Singular-mode projection: for teacher `m`'s mode `α` (descending singular
/// values), `s[α][p][m] = u_αᵀ W_p v_α`.
///
/// Mode `α` of both teachers is paired into one reduced weight. This is a
/// diagnostic; the modes of different teachers are in general not orthogonal
/// to each other.
pub fn project_svd_modes(
    student: &GatedStudent,
    teachers: &TeacherSet,
) -> Result<Vec<[[f64; 2]; 2]>, ReducedError> {
    if student.paths() != 2 || teachers.len() != 2 {
        return Err(ReducedError::Invalid("projection needs two paths and two teachers".into()));
    }
    let to_na = |a: &ndarray::Array2<f64>| DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let students: Vec<DMatrix<f64>> = student.weights().iter().map(to_na).collect();
    let mut modes: Vec<(DMatrix<f64>, DMatrix<f64>, Vec<usize>)> = Vec::new();
    for m in 0..2 {
        let svd = to_na(teachers.get(m)).svd(true, true);
        let u = svd.u.ok_or_else(|| ReducedError::Invalid("svd failed".into()))?;
        let v_t = svd.v_t.ok_or_else(|| ReducedError::Invalid("svd failed".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        modes.push((u, v_t, order));
    }
    let n = modes[0].2.len().min(modes[1].2.len());
    let mut out = Vec::with_capacity(n);
    for alpha in 0..n {
        let mut r = [[0.0; 2]; 2];
        for (m, (u, v_t, order)) in modes.iter().enumerate() {
            let k = order[alpha];
            let uk = u.column(k);
            let vk = v_t.row(k).transpose();
            for (p, w) in students.iter().enumerate() {
                r[p][m] = (uk.transpose() * w * &vk)[(0, 0)];
            }
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinates_of_specialised_state() {
        let s = ReducedState::specialized(1.0, 1.0, teacher_target(1));
        let c = s.coords();
        assert_eq!((c.wbar1, c.wbar2, c.wbar, c.cbar), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(c.wbarbar, 0.0);
    }

    #[test]
    fn exact_solution_examples() {
        assert_eq!(exact_wbar(1.0, 0.3, 5.0).unwrap(), 1.0);
        assert!((exact_wbar(0.0, 1.0, 1.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(exact_wbar(0.0, 4.0, 1.0), Err(ReducedError::Domain { .. })));
    }

    #[test]
    fn ntk_rate_examples() {
        let s = ReducedState {
            w: [[1.0, 0.0], [0.0, 1.0]],
            c: [1.0, 0.0],
            tau_w: 1.0,
            tau_c: 1.0,
            target: [0.0, 1.0],
        };
        assert_eq!(s.error(), [-1.0, 1.0]);
        assert_eq!(ntk_descent_rate(&s), 4.0);
        let u = ReducedState {
            w: [[0.5, 0.5], [0.5, 0.5]],
            c: [0.5, 0.5],
            ..s
        };
        assert_eq!(u.error(), [-0.5, 0.5]);
        // with ε = (-1, 1) the same unspecialised state has rate 1
        let u1 = ReducedState {
            target: [-0.5, 1.5],
            ..u
        };
        assert_eq!(u1.error(), [-1.0, 1.0]);
        assert_eq!(ntk_descent_rate(&u1), 1.0);
    }

    #[test]
    fn blocklength_examples() {
        assert_eq!(blocklength_prediction(0.0, 1.0, 0.1), 0.0);
        let t = 0.8;
        let a = predicted_growth(0.2, 1.0, 0.05, t);
        let b = predicted_growth(0.2, 1.0, 0.1, t);
        assert!((b / a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_step_keeps_wbar_gap() {
        let mut s = ReducedState::specialized(5.0, 0.3, teacher_target(1));
        let reg = RegularizerConfig::none();
        for _ in 0..500 {
            s = symmetric_step(&s, 1e-3, &reg).unwrap();
        }
        let r = symmetry_residuals(&[s])[0];
        assert!(r.wbar_gap.abs() < 1e-12);
    }
}
