//! Teachers, task definitions, block schedules and batch sampling.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::CurriculumError;
use crate::model::Batch;

/// A set of `M` teacher maps `d_out × d_in`.
///
/// For each output row index the `M` teacher rows are unit vectors with
/// pairwise cosine `similarity` (orthonormal when it is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSet {
    pub similarity: f64,
    matrices: Vec<Array2<f64>>,
}

impl TeacherSet {
    pub fn generate<R: Rng + ?Sized>(
        m: usize,
        d_in: usize,
        d_out: usize,
        similarity: f64,
        rng: &mut R,
    ) -> Result<Self, CurriculumError> {
        if m == 0 || d_out == 0 {
            return Err(CurriculumError::Invalid("need at least one teacher and one output".into()));
        }
        if m > d_in {
            return Err(CurriculumError::TooManyTeachers { teachers: m, d_in });
        }
        if !(0.0..1.0).contains(&similarity) {
            return Err(CurriculumError::Similarity(similarity));
        }
        let mix = similarity_factor(m, similarity);
        let mut matrices = vec![Array2::zeros((d_out, d_in)); m];
        for i in 0..d_out {
            let basis = orthonormal_rows(m, d_in, rng);
            for (t, teacher) in matrices.iter_mut().enumerate() {
                let mut row = teacher.row_mut(i);
                for k in 0..=t {
                    row.scaled_add(mix[[t, k]], &basis.row(k));
                }
                let n = row.dot(&row).sqrt();
                row.mapv_inplace(|v| v / n);
            }
        }
        Ok(Self {
            similarity,
            matrices,
        })
    }

    /// Wraps given matrices; they must share one shape.
    pub fn from_matrices(matrices: Vec<Array2<f64>>) -> Result<Self, CurriculumError> {
        let Some(first) = matrices.first() else {
            return Err(CurriculumError::Invalid("empty teacher set".into()));
        };
        let dim = first.dim();
        if matrices.iter().any(|m| m.dim() != dim) {
            return Err(CurriculumError::Invalid("teachers differ in shape".into()));
        }
        let similarity = if matrices.len() > 1 {
            mean_row_cosine(&matrices[0], &matrices[1])
        } else {
            0.0
        };
        Ok(Self {
            similarity,
            matrices,
        })
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.matrices[0].ncols()
    }

    pub fn d_out(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn get(&self, m: usize) -> &Array2<f64> {
        &self.matrices[m]
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.matrices
    }
}

fn mean_row_cosine(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.axis_iter(Axis(0)).zip(b.axis_iter(Axis(0))) {
        let n = (x.dot(&x) * y.dot(&y)).sqrt();
        if n > 0.0 {
            s += x.dot(&y) / n;
        }
    }
    s / a.nrows() as f64
}

/// Lower Cholesky factor of `(1 - s) I + s 1 1ᵀ`.
fn similarity_factor(m: usize, s: f64) -> Array2<f64> {
    let gram = Array2::from_shape_fn((m, m), |(i, j)| if i == j { 1.0 } else { s });
    let mut l = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..=i {
            let mut acc = gram[[i, j]];
            for k in 0..j {
                acc -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = if i == j { acc.sqrt() } else { acc / l[[j, j]] };
        }
    }
    l
}

/// `m` orthonormal Gaussian directions in `R^d` (modified Gram-Schmidt,
/// resampling any draw that is numerically dependent on the previous ones).
fn orthonormal_rows<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((m, d));
    let mut k = 0;
    while k < m {
        let mut v: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let raw = v.dot(&v).sqrt();
        for j in 0..k {
            let q = out.row(j);
            let proj = q.dot(&v);
            v.scaled_add(-proj, &q);
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-8 * raw {
            out.row_mut(k).assign(&(v / n));
            k += 1;
        }
    }
    out
}

/// How a task's target map is built from the teachers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Single(usize),
    /// Sum of the listed teachers.
    Sum(Vec<usize>),
    /// Output row `i` is taken from teacher `rows[i]`.
    RowInterleave(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub target: Array2<f64>,
}

const LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";

fn letter(m: usize) -> String {
    LETTERS
        .get(m)
        .map(|&c| (c as char).to_string())
        .unwrap_or_else(|| format!("T{m}"))
}

impl TaskSpec {
    pub fn single(teachers: &TeacherSet, m: usize) -> Result<Self, CurriculumError> {
        check_index(teachers, m)?;
        Ok(Self {
            kind: TaskKind::Single(m),
            target: teachers.get(m).clone(),
        })
    }

    pub fn sum(teachers: &TeacherSet, members: &[usize]) -> Result<Self, CurriculumError> {
        if members.is_empty() {
            return Err(CurriculumError::Invalid("sum task needs members".into()));
        }
        let mut target = Array2::zeros((teachers.d_out(), teachers.d_in()));
        for &m in members {
            check_index(teachers, m)?;
            target += teachers.get(m);
        }
        Ok(Self {
            kind: TaskKind::Sum(members.to_vec()),
            target,
        })
    }

    pub fn interleave(teachers: &TeacherSet, rows: &[usize]) -> Result<Self, CurriculumError> {
        if rows.len() != teachers.d_out() {
            return Err(CurriculumError::Invalid(format!(
                "row assignment has {} entries, teachers have {} rows",
                rows.len(),
                teachers.d_out()
            )));
        }
        let mut target = Array2::zeros((teachers.d_out(), teachers.d_in()));
        for (i, &m) in rows.iter().enumerate() {
            check_index(teachers, m)?;
            target.row_mut(i).assign(&teachers.get(m).row(i));
        }
        Ok(Self {
            kind: TaskKind::RowInterleave(rows.to_vec()),
            target,
        })
    }

    /// Short label: `A`, `A+B`, or `A|B` for an interleaved pair.
    pub fn label(&self) -> String {
        match &self.kind {
            TaskKind::Single(m) => letter(*m),
            TaskKind::Sum(ms) => ms.iter().map(|&m| letter(m)).collect::<Vec<_>>().join("+"),
            TaskKind::RowInterleave(rows) => {
                let mut seen: Vec<usize> = Vec::new();
                for &m in rows {
                    if !seen.contains(&m) {
                        seen.push(m);
                    }
                }
                seen.iter().map(|&m| letter(m)).collect::<Vec<_>>().join("|")
            }
        }
    }

    /// Teachers that contribute to the target.
    pub fn members(&self) -> Vec<usize> {
        match &self.kind {
            TaskKind::Single(m) => vec![*m],
            TaskKind::Sum(ms) => ms.clone(),
            TaskKind::RowInterleave(rows) => {
                let mut v = rows.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }
}

fn check_index(teachers: &TeacherSet, m: usize) -> Result<(), CurriculumError> {
    if m >= teachers.len() {
        return Err(CurriculumError::Invalid(format!(
            "teacher index {m} out of range for {} teachers",
            teachers.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionMode {
    /// Sums of teacher pairs.
    Task,
    /// Even output rows from one teacher of the pair, odd rows from the other.
    Subtask,
}

/// One task per unordered teacher pair, in lexicographic order.
pub fn make_composite_tasks(
    teachers: &TeacherSet,
    mode: CompositionMode,
) -> Result<Vec<TaskSpec>, CurriculumError> {
    let m = teachers.len();
    if m < 2 {
        return Err(CurriculumError::Invalid("composition needs at least two teachers".into()));
    }
    let mut out = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            out.push(match mode {
                CompositionMode::Task => TaskSpec::sum(teachers, &[a, b])?,
                CompositionMode::Subtask => {
                    let rows: Vec<usize> = (0..teachers.d_out())
                        .map(|i| if i % 2 == 0 { a } else { b })
                        .collect();
                    TaskSpec::interleave(teachers, &rows)?
                }
            });
        }
    }
    Ok(out)
}

/// A stretch of the curriculum cycling through `tasks`, one per block.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub name: String,
    pub tasks: Vec<TaskSpec>,
    pub n_blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSchedule {
    pub tau_b: f64,
    pub phases: Vec<Phase>,
}

/// The block active at some time.
#[derive(Debug, Clone, Copy)]
pub struct ActiveBlock<'a> {
    /// Global block index, starting at 0.
    pub block: usize,
    pub phase: usize,
    /// Index of the task within its phase's task list.
    pub task_index: usize,
    pub task: &'a TaskSpec,
    pub start: f64,
}

impl BlockSchedule {
    /// Single phase cycling through `tasks` for `n_blocks` blocks of length `tau_b`.
    pub fn cycling(
        tasks: Vec<TaskSpec>,
        n_blocks: usize,
        tau_b: f64,
    ) -> Result<Self, CurriculumError> {
        if !(tau_b > 0.0) {
            return Err(CurriculumError::Invalid(format!("block length must be positive, got {tau_b}")));
        }
        let s = Self {
            tau_b,
            phases: Vec::new(),
        };
        s.then("train", tasks, n_blocks)
    }

    /// Appends a phase.
    pub fn then(
        mut self,
        name: &str,
        tasks: Vec<TaskSpec>,
        n_blocks: usize,
    ) -> Result<Self, CurriculumError> {
        if tasks.is_empty() {
            return Err(CurriculumError::Invalid(format!("phase '{name}' has no tasks")));
        }
        self.phases.push(Phase {
            name: name.to_string(),
            tasks,
            n_blocks,
        });
        Ok(self)
    }

    pub fn n_blocks(&self) -> usize {
        self.phases.iter().map(|p| p.n_blocks).sum()
    }

    pub fn total_time(&self) -> f64 {
        self.n_blocks() as f64 * self.tau_b
    }

    /// Block by global index.
    pub fn block(&self, block: usize) -> Option<ActiveBlock<'_>> {
        let mut offset = 0;
        for (phase, p) in self.phases.iter().enumerate() {
            if block < offset + p.n_blocks {
                let local = block - offset;
                let task_index = local % p.tasks.len();
                return Some(ActiveBlock {
                    block,
                    phase,
                    task_index,
                    task: &p.tasks[task_index],
                    start: block as f64 * self.tau_b,
                });
            }
            offset += p.n_blocks;
        }
        None
    }

    /// Block active at time `t`; errors outside `[0, total_time)`.
    pub fn active_task(&self, t: f64) -> Result<ActiveBlock<'_>, CurriculumError> {
        let end = self.total_time();
        if !(t >= 0.0 && t < end) {
            return Err(CurriculumError::OutOfRange { t, end });
        }
        let k = (t / self.tau_b).floor() as usize;
        self.block(k.min(self.n_blocks() - 1))
            .ok_or(CurriculumError::OutOfRange { t, end })
    }

    /// First global block index of a phase.
    pub fn phase_start(&self, phase: usize) -> usize {
        self.phases[..phase].iter().map(|p| p.n_blocks).sum()
    }
}

/// Batch size or population limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchSpec {
    Sampled(usize),
    Expectation,
}

/// White Gaussian inputs and the task's noiseless outputs.
pub fn sample_batch<R: Rng + ?Sized>(task: &TaskSpec, spec: BatchSpec, rng: &mut R) -> Batch {
    match spec {
        BatchSpec::Sampled(b) => {
            let d_in = task.target.ncols();
            let x = Array2::from_shape_simple_fn((d_in, b), || rng.sample::<f64, _>(StandardNormal));
            let y = task.target.dot(&x);
            Batch::Sampled { x, y }
        }
        BatchSpec::Expectation => Batch::Expectation {
            target: task.target.clone(),
        },
    }
}

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    pub master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(id);
        rng
    }

    pub fn teachers(&self) -> ChaCha8Rng {
        self.stream(1)
    }

    pub fn init(&self) -> ChaCha8Rng {
        self.stream(2)
    }

    pub fn batches(&self) -> ChaCha8Rng {
        self.stream(3)
    }

    /// Extra stream for experiment-specific draws.
    pub fn aux(&self, id: u64) -> ChaCha8Rng {
        self.stream(16 + id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_rows_are_unit_and_orthogonal() {
        let mut rng = SeedStreams::new(3).teachers();
        let t = TeacherSet::generate(3, 20, 6, 0.0, &mut rng).unwrap();
        for i in 0..6 {
            for a in 0..3 {
                let ra = t.get(a).row(i);
                assert!((ra.dot(&ra) - 1.0).abs() < 1e-12);
                for b in a + 1..3 {
                    assert!(ra.dot(&t.get(b).row(i)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn similarity_sets_row_cosine() {
        let mut rng = SeedStreams::new(4).teachers();
        for s in [0.3, 0.9] {
            let t = TeacherSet::generate(2, 20, 10, s, &mut rng).unwrap();
            for i in 0..10 {
                let c = t.get(0).row(i).dot(&t.get(1).row(i));
                assert!((c - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_many_teachers_rejected() {
        let mut rng = SeedStreams::new(0).teachers();
        assert_eq!(
            TeacherSet::generate(3, 2, 4, 0.0, &mut rng),
            Err(CurriculumError::TooManyTeachers { teachers: 3, d_in: 2 })
        );
        assert!(matches!(
            TeacherSet::generate(2, 4, 4, 1.0, &mut rng),
            Err(CurriculumError::Similarity(_))
        ));
    }

    #[test]
    fn cycling_schedule_examples() {
        let mut rng = SeedStreams::new(0).teachers();
        let t = TeacherSet::generate(2, 4, 2, 0.0, &mut rng).unwrap();
        let tasks = vec![TaskSpec::single(&t, 0).unwrap(), TaskSpec::single(&t, 1).unwrap()];
        let s = BlockSchedule::cycling(tasks, 4, 1.0).unwrap();
        assert_eq!(s.active_task(1.5).unwrap().task.label(), "B");
        assert_eq!(s.active_task(2.0).unwrap().task.label(), "A");
        assert!(matches!(s.active_task(4.0), Err(CurriculumError::OutOfRange { .. })));
        assert!(s.active_task(-0.1).is_err());
    }

    #[test]
    fn composite_tasks_cover_pairs() {
        let mut rng = SeedStreams::new(0).teachers();
        let t = TeacherSet::generate(3, 20, 6, 0.0, &mut rng).unwrap();
        let sums = make_composite_tasks(&t, CompositionMode::Task).unwrap();
        let labels: Vec<_> = sums.iter().map(|s| s.label()).collect();
        assert_eq!(labels, ["A+B", "A+C", "B+C"]);
        assert_eq!(sums[0].target, t.get(0) + t.get(1));
        let inter = make_composite_tasks(&t, CompositionMode::Subtask).unwrap();
        assert_eq!(inter[1].label(), "A|C");
        assert_eq!(inter[1].target.row(0), t.get(0).row(0));
        assert_eq!(inter[1].target.row(1), t.get(2).row(1));
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = SeedStreams::new(11);
        let a: f64 = s.batches().sample(StandardNormal);
        let b: f64 = s.batches().sample(StandardNormal);
        let c: f64 = s.init().sample(StandardNormal);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
