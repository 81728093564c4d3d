//! Alignment, timing and speed measurements.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::model::{cosine, Batch, GatedStudent, RegularizerConfig};
use crate::record::RunRecord;

/// Mean row-wise cosine between every student (`P`) and teacher (`M`).
pub fn pair_alignment(students: &[Array2<f64>], teachers: &[Array2<f64>]) -> Array2<f64> {
    let mut out = Array2::zeros((students.len(), teachers.len()));
    for (p, s) in students.iter().enumerate() {
        for (m, t) in teachers.iter().enumerate() {
            let n = s.nrows().min(t.nrows());
            let sum: f64 = s
                .axis_iter(Axis(0))
                .zip(t.axis_iter(Axis(0)))
                .map(|(a, b)| cosine(&a.to_vec(), &b.to_vec()))
                .sum();
            out[[p, m]] = if n == 0 { 0.0 } else { sum / n as f64 };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentRule {
    /// Exhaustive search for the matching with the largest summed alignment.
    #[default]
    Optimal,
    /// Repeatedly take the largest remaining entry.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalAlignment {
    pub value: f64,
    /// `(student, teacher)` pairs, sorted by teacher.
    pub pairs: Vec<(usize, usize)>,
    pub unassigned_students: Vec<usize>,
    pub unassigned_teachers: Vec<usize>,
}

/// Matching between rows and columns of `score` maximising the sum.
pub fn assign(score: &Array2<f64>, rule: AssignmentRule) -> Vec<(usize, usize)> {
    let (p, m) = score.dim();
    let mut pairs = match rule {
        AssignmentRule::Greedy => {
            let mut used_p = vec![false; p];
            let mut used_m = vec![false; m];
            let mut entries: Vec<(f64, usize, usize)> = score
                .indexed_iter()
                .map(|((i, j), &v)| (v, i, j))
                .collect();
            entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut out = Vec::new();
            for (_, i, j) in entries {
                if !used_p[i] && !used_m[j] {
                    used_p[i] = true;
                    used_m[j] = true;
                    out.push((i, j));
                }
            }
            out
        }
        AssignmentRule::Optimal => {
            // Enumerate injections of the smaller side into the larger one.
            let transpose = p < m;
            let (small, large) = if transpose { (p, m) } else { (m, p) };
            let at = |s: usize, l: usize| {
                if transpose {
                    score[[s, l]]
                } else {
                    score[[l, s]]
                }
            };
            let mut best = (f64::NEG_INFINITY, Vec::new());
            let mut cur = Vec::with_capacity(small);
            let mut used = vec![false; large];
            search(small, large, &at, &mut cur, &mut used, 0.0, &mut best);
            best.1
                .into_iter()
                .enumerate()
                .map(|(s, l)| if transpose { (s, l) } else { (l, s) })
                .collect()
        }
    };
    pairs.sort_by_key(|&(i, j)| (j, i));
    pairs
}

fn search(
    small: usize,
    large: usize,
    at: &dyn Fn(usize, usize) -> f64,
    cur: &mut Vec<usize>,
    used: &mut [bool],
    acc: f64,
    best: &mut (f64, Vec<usize>),
) {
    let s = cur.len();
    if s == small {
        if acc > best.0 {
            *best = (acc, cur.clone());
        }
        return;
    }
    for l in 0..large {
        if !used[l] {
            used[l] = true;
            cur.push(l);
            search(small, large, at, cur, used, acc + at(s, l), best);
            cur.pop();
            used[l] = false;
        }
    }
}

/// Cosine between the concatenated assigned students and their teachers.
pub fn total_alignment(
    students: &[Array2<f64>],
    teachers: &[Array2<f64>],
    rule: AssignmentRule,
) -> TotalAlignment {
    let pa = pair_alignment(students, teachers);
    let pairs = assign(&pa, rule);
    let mut s_flat = Vec::new();
    let mut t_flat = Vec::new();
    for &(p, m) in &pairs {
        s_flat.extend(students[p].iter().copied());
        t_flat.extend(teachers[m].iter().copied());
    }
    let unassigned_students = (0..students.len())
        .filter(|p| !pairs.iter().any(|&(q, _)| q == *p))
        .collect();
    let unassigned_teachers = (0..teachers.len())
        .filter(|m| !pairs.iter().any(|&(_, n)| n == *m))
        .collect();
    TotalAlignment {
        value: cosine(&s_flat, &t_flat),
        pairs,
        unassigned_students,
        unassigned_teachers,
    }
}

/// Specialisation that does not depend on how similar the teachers are.
///
/// Students are matched to teachers as in [`total_alignment`]; for every
/// teacher pair `(m, n)` the cosine between `S_σ(m) - S_σ(n)` and
/// `T_m - T_n` is taken, and the mean over pairs returned. Identical
/// students score 0, students equal to their teachers score 1.
pub fn difference_specialization(students: &[Array2<f64>], teachers: &[Array2<f64>], rule: AssignmentRule) -> f64 {
    let pairs = assign(&pair_alignment(students, teachers), rule);
    let mut sum = 0.0;
    let mut count = 0;
    for (i, &(p, m)) in pairs.iter().enumerate() {
        for &(q, n) in &pairs[i + 1..] {
            let ds: Vec<f64> = (&students[p] - &students[q]).iter().copied().collect();
            let dt: Vec<f64> = (&teachers[m] - &teachers[n]).iter().copied().collect();
            sum += cosine(&ds, &dt);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockTiming {
    pub block: usize,
    /// Time from block start to the first logged loss below threshold, or the
    /// block length when censored.
    pub time: f64,
    pub censored: bool,
}

/// Per-block time until the logged task loss first drops below `threshold`.
pub fn time_to_threshold(record: &RunRecord, threshold: f64) -> Vec<BlockTiming> {
    record
        .blocks
        .iter()
        .map(|b| {
            let hit = record
                .block_rows(b.index)
                .find(|r| r.loss_task < threshold)
                .map(|r| r.t - b.start);
            match hit {
                Some(time) => BlockTiming {
                    block: b.index,
                    time,
                    censored: false,
                },
                None => BlockTiming {
                    block: b.index,
                    time: b.end - b.start,
                    censored: true,
                },
            }
        })
        .collect()
}

/// Gate speed `τ_c dc/dt` of a single-path probe facing a rank-`r` teacher
/// with unit singular values, with the student aligned to the teacher
/// (`W = W*`) and the gate at ½.
pub fn rank_gate_speed(d: usize, ranks: &[usize]) -> Vec<(usize, f64)> {
    ranks
        .iter()
        .map(|&r| {
            let target = Array2::from_shape_fn((d, d), |(i, j)| if i == j && i < r { 1.0 } else { 0.0 });
            let student = GatedStudent::per_path(vec![target.clone()], &[0.5], 1.0, 1.0)
                .expect("valid probe");
            let g = student
                .grad_gates(&Batch::Expectation { target }, &RegularizerConfig::none())
                .expect("matching shapes");
            (r, -g[[0, 0]])
        })
        .collect()
}

/// Least-squares line through `(x, y)`: slope, intercept and R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Default total-alignment cut separating the two regimes.
pub const REGIME_CUT: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Flexible,
    Forgetful,
}

pub fn regime_label(total_alignment: f64, cut: f64) -> Regime {
    if total_alignment > cut {
        Regime::Flexible
    } else {
        Regime::Forgetful
    }
}

/// Mean and standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
