//! Two-layer fully connected linear network with regularised second layer,
//! and the row sorting that exposes its emergent gates.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::curriculum::TeacherSet;
use crate::error::ModelError;
use crate::model::{cosine, gate_penalty, gate_penalty_grad, map_residual, Batch, RegularizerConfig, WeightFlow};

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    /// `d_hid × d_in`
    pub w1: Array2<f64>,
    /// `d_out × d_hid`
    pub w2: Array2<f64>,
    pub tau_w1: f64,
    pub tau_w2: f64,
    /// Scaling of the first-layer flow, as for the gated students' weights.
    pub weight_flow: WeightFlow,
}

/// Gradients of the total loss for both layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepGrads {
    pub loss_task: f64,
    pub loss_reg: f64,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepStepStats {
    pub loss_task: f64,
    pub loss_reg: f64,
    pub grad_norm_w1: f64,
    pub grad_norm_w2: f64,
    pub update_norm_w1: f64,
    pub update_norm_w2: f64,
}

impl TwoLayerNet {
    /// Both layers i.i.d. `N(0, σ²/fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_hid: usize,
        d_out: usize,
        sigma: f64,
        tau_w1: f64,
        tau_w2: f64,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if d_in == 0 || d_hid == 0 || d_out == 0 {
            return Err(ModelError::InvalidConfig("dimensions must be positive".into()));
        }
        if !(tau_w1 > 0.0 && tau_w2 > 0.0) {
            return Err(ModelError::InvalidConfig("time constants must be positive".into()));
        }
        let n1 = Normal::new(0.0, sigma / (d_in as f64).sqrt())
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let n2 = Normal::new(0.0, sigma / (d_hid as f64).sqrt())
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let w1 = Array2::from_shape_simple_fn((d_hid, d_in), || n1.sample(rng));
        let w2 = Array2::from_shape_simple_fn((d_out, d_hid), || n2.sample(rng));
        Ok(Self {
            w1,
            w2,
            tau_w1,
            tau_w2,
            weight_flow: WeightFlow::default(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_hid(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w2.nrows()
    }

    pub fn effective_map(&self) -> Array2<f64> {
        self.w2.dot(&self.w1)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.w2.dot(&self.w1.dot(x))
    }

    /// Gate-style penalty on `W2`: nonnegativity on every entry and a norm
    /// term per output row.
    pub fn reg_loss(&self, reg: &RegularizerConfig) -> f64 {
        self.w2
            .axis_iter(Axis(0))
            .map(|row| gate_penalty(&row.to_vec(), reg))
            .sum()
    }

    fn check(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.d_in() != self.d_in() || batch.d_out() != self.d_out() {
            return Err(ModelError::Dimension(format!(
                "batch is d_in={} d_out={}, network is d_in={} d_out={}",
                batch.d_in(),
                batch.d_out(),
                self.d_in(),
                self.d_out()
            )));
        }
        Ok(())
    }

    pub fn task_loss(&self, batch: &Batch) -> Result<f64, ModelError> {
        self.check(batch)?;
        Ok(map_residual(&self.effective_map(), batch).loss)
    }

    pub fn total_loss(&self, batch: &Batch, reg: &RegularizerConfig) -> Result<f64, ModelError> {
        Ok(self.task_loss(batch)? + self.reg_loss(reg))
    }

    pub fn grads(&self, batch: &Batch, reg: &RegularizerConfig) -> Result<DeepGrads, ModelError> {
        self.check(batch)?;
        let r = map_residual(&self.effective_map(), batch);
        let w1 = -self.w2.t().dot(&r.g);
        let mut w2 = -r.g.dot(&self.w1.t());
        for (mut grow, row) in w2.axis_iter_mut(Axis(0)).zip(self.w2.axis_iter(Axis(0))) {
            let c = row.to_vec();
            let mut gr = vec![0.0; c.len()];
            gate_penalty_grad(&c, reg, &mut gr);
            for (g, v) in grow.iter_mut().zip(gr) {
                *g += v;
            }
        }
        Ok(DeepGrads {
            loss_task: r.loss,
            loss_reg: self.reg_loss(reg),
            w1,
            w2,
        })
    }

    /// Simultaneous Euler step of both layers.
    pub fn euler_step(
        &mut self,
        batch: &Batch,
        reg: &RegularizerConfig,
        dt: f64,
    ) -> Result<DeepStepStats, ModelError> {
        let g = self.grads(batch, reg)?;
        let k1 = dt * self.weight_flow.factor(self.d_out()) / self.tau_w1;
        let k2 = dt / self.tau_w2;
        let w1 = &self.w1 - &(&g.w1 * k1);
        let w2 = &self.w2 - &(&g.w2 * k2);
        if w1.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("W1".into()));
        }
        if w2.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("W2".into()));
        }
        self.w1 = w1;
        self.w2 = w2;
        let n1 = crate::model::frobenius(&g.w1);
        let n2 = crate::model::frobenius(&g.w2);
        Ok(DeepStepStats {
            loss_task: g.loss_task,
            loss_reg: g.loss_reg,
            grad_norm_w1: n1,
            grad_norm_w2: n2,
            update_norm_w1: k1 * n1,
            update_norm_w2: k2 * n2,
        })
    }
}

/// Hidden units reordered so that sorted position `m·d_out + i` holds the
/// unit best matching row `i` of teacher `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedNet {
    /// `perm[k]` is the original hidden index placed at sorted position `k`.
    pub perm: Vec<usize>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    /// Cosine between each sorted hidden row and its teacher row.
    pub row_cosines: Vec<f64>,
    pub teachers: usize,
    pub d_out: usize,
}

/// Matches hidden rows to teacher rows by descending cosine similarity.
///
/// Pairs are taken greedily from the globally most similar downwards, each
/// hidden row and each teacher row used once. A teacher whose rows are all
/// taken passes further candidates to their next-best teacher, so every
/// student ends up with exactly `d_out` rows. Requires `d_hid = M·d_out`.
pub fn sort_students(net: &TwoLayerNet, teachers: &TeacherSet) -> Result<SortedNet, ModelError> {
    let m = teachers.len();
    let d_out = teachers.d_out();
    if net.d_hid() != m * d_out || net.d_in() != teachers.d_in() || net.d_out() != d_out {
        return Err(ModelError::Dimension(format!(
            "sorting needs d_hid = M·d_out = {}, got d_hid={}",
            m * d_out,
            net.d_hid()
        )));
    }
    let h = net.d_hid();
    let rows: Vec<Vec<f64>> = net.w1.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(h * h);
    for (k, row) in rows.iter().enumerate() {
        for t in 0..m {
            for i in 0..d_out {
                let trow = teachers.get(t).row(i).to_vec();
                cands.push((cosine(row, &trow), k, t * d_out + i));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut perm = vec![usize::MAX; h];
    let mut used = vec![false; h];
    let mut row_cosines = vec![0.0; h];
    let mut filled = 0;
    for (cos, k, slot) in cands {
        if used[k] || perm[slot] != usize::MAX {
            continue;
        }
        used[k] = true;
        perm[slot] = k;
        row_cosines[slot] = cos;
        filled += 1;
        if filled == h {
            break;
        }
    }
    let w1 = net.w1.select(Axis(0), &perm);
    let w2 = net.w2.select(Axis(1), &perm);
    Ok(SortedNet {
        perm,
        w1,
        w2,
        row_cosines,
        teachers: m,
        d_out,
    })
}

impl SortedNet {
    /// First-layer rows of student `p` (`d_out × d_in`).
    pub fn student(&self, p: usize) -> Array2<f64> {
        self.w1
            .slice(ndarray::s![p * self.d_out..(p + 1) * self.d_out, ..])
            .to_owned()
    }

    pub fn students(&self) -> Vec<Array2<f64>> {
        (0..self.teachers).map(|p| self.student(p)).collect()
    }

    /// Mean of the `d_out × d_out` block of sorted `W2` feeding from student `p`.
    pub fn emergent_gates(&self) -> Vec<f64> {
        (0..self.teachers)
            .map(|p| {
                self.w2
                    .slice(ndarray::s![.., p * self.d_out..(p + 1) * self.d_out])
                    .mean()
                    .unwrap_or(0.0)
            })
            .collect()
    }

    pub fn effective_map(&self) -> Array2<f64> {
        self.w2.dot(&self.w1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::SeedStreams;

    #[test]
    fn sorting_recovers_planted_permutation() {
        let mut rng = SeedStreams::new(5).teachers();
        let teachers = TeacherSet::generate(2, 8, 3, 0.0, &mut rng).unwrap();
        let mut w1 = Array2::zeros((6, 8));
        let planted = [4, 0, 5, 2, 1, 3];
        for (slot, &k) in planted.iter().enumerate() {
            let (t, i) = (slot / 3, slot % 3);
            w1.row_mut(k).assign(&teachers.get(t).row(i));
        }
        let net = TwoLayerNet {
            w1,
            w2: Array2::from_shape_fn((3, 6), |(i, j)| (i * 6 + j) as f64),
            tau_w1: 1.0,
            tau_w2: 1.0,
            weight_flow: WeightFlow::default(),
        };
        let sorted = sort_students(&net, &teachers).unwrap();
        assert_eq!(sorted.perm, planted.to_vec());
        assert!(sorted.row_cosines.iter().all(|&c| (c - 1.0).abs() < 1e-12));
        let diff = &sorted.effective_map() - &net.effective_map();
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn oversubscribed_teacher_spills() {
        let mut rng = SeedStreams::new(6).teachers();
        let teachers = TeacherSet::generate(2, 6, 2, 0.0, &mut rng).unwrap();
        // every hidden row resembles teacher A
        let mut w1 = Array2::zeros((4, 6));
        for k in 0..4 {
            let mut r = teachers.get(0).row(k % 2).to_owned();
            r.scaled_add(0.1 * k as f64, &teachers.get(1).row(k % 2));
            w1.row_mut(k).assign(&r);
        }
        let net = TwoLayerNet {
            w1,
            w2: Array2::zeros((2, 4)),
            tau_w1: 1.0,
            tau_w2: 1.0,
            weight_flow: WeightFlow::default(),
        };
        let sorted = sort_students(&net, &teachers).unwrap();
        let mut p = sorted.perm.clone();
        p.sort_unstable();
        assert_eq!(p, vec![0, 1, 2, 3]);
    }
}
