//! Synthetic tasks with a tunable temporal dependency `d`.
//!
//! Time is indexed from 0 and targets exist for `t >= d`:
//!
//! | task | inputs | target |
//! |---|---|---|
//! | delayed copy | `Unif(0,1)` | `x[t-d]` |
//! | continuous temporal XOR | `Unif(0,1)` | `|x[t-d/2] - x[t-d]|` |
//! | binary temporal XOR | Bernoulli | `x[t-d/2] ⊕ x[t-d]` |
//! | spatial XOR | 3 Bernoulli channels | `x¹[t-d] ⊕ x²[t-d] ⊕ x³[t-d]` |
//!
//! Continuous tasks use mean squared error; binary tasks use cross-entropy
//! on the logistic of the readout.

use crate::linalg::DenseMatrix;
use crate::rng::{derive_seed, seeded, stream, InputDistribution};
use crate::table::Table;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    DelayedCopy,
    TemporalXorContinuous,
    TemporalXorBinary,
    SpatialXor,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::DelayedCopy => "delayed_copy",
            TaskKind::TemporalXorContinuous => "temporal_xor_continuous",
            TaskKind::TemporalXorBinary => "temporal_xor_binary",
            TaskKind::SpatialXor => "spatial_xor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            TaskKind::DelayedCopy,
            TaskKind::TemporalXorContinuous,
            TaskKind::TemporalXorBinary,
            TaskKind::SpatialXor,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    pub fn input_dim(self) -> usize {
        match self {
            TaskKind::SpatialXor => 3,
            _ => 1,
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, TaskKind::TemporalXorBinary | TaskKind::SpatialXor)
    }

    pub fn input_distribution(self) -> InputDistribution {
        if self.is_binary() {
            InputDistribution::Bernoulli
        } else {
            InputDistribution::Uniform
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub delay: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, delay: usize, seq_len: usize) -> Self {
        Self {
            kind,
            delay,
            seq_len,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// All problems with the spec, empty when valid.
    pub fn findings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.delay == 0 {
            out.push("delay must be at least 1".to_string());
        }
        if matches!(self.kind, TaskKind::TemporalXorContinuous | TaskKind::TemporalXorBinary) && !self.delay.is_multiple_of(2) {
            out.push(format!("temporal XOR needs an even delay, got {}", self.delay));
        }
        if self.seq_len <= self.delay {
            out.push(format!("sequence shorter than delay (T = {} <= d = {})", self.seq_len, self.delay));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.findings().first() {
            Some(f) => Err(Error::Config(f.clone())),
            None => Ok(()),
        }
    }
}

/// Time-major batch: element `t` of each vector is a `dim x b` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<DenseMatrix>,
    pub targets: Vec<DenseMatrix>,
    pub valid: Vec<bool>,
}

impl Batch {
    pub fn seq_len(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, DenseMatrix::cols)
    }

    pub fn valid_steps(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Columns `(b_index, t, x_1.., y_1.., valid)`.
    pub fn to_table(&self) -> Table {
        let in_dim = self.inputs.first().map_or(0, DenseMatrix::rows);
        let out_dim = self.targets.first().map_or(0, DenseMatrix::rows);
        let mut header = vec!["b_index".to_string(), "t".to_string()];
        header.extend((1..=in_dim).map(|i| format!("x_{i}")));
        header.extend((1..=out_dim).map(|i| format!("y_{i}")));
        header.push("valid".into());
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut t = Table::new(&refs);
        for b in 0..self.batch_size() {
            for (step, (x, y)) in self.inputs.iter().zip(&self.targets).enumerate() {
                let mut row = vec![b.into(), step.into()];
                row.extend((0..in_dim).map(|i| x[(i, b)].into()));
                row.extend((0..out_dim).map(|i| y[(i, b)].into()));
                row.push((self.valid[step] as usize).into());
                t.push(row);
            }
        }
        t
    }
}

fn xor(a: f64, b: f64) -> f64 {
    ((a != 0.0) ^ (b != 0.0)) as u8 as f64
}

/// Targets and validity implied by the defining equation of `kind`.
/// Entries with `valid[t] == false` are zero.
pub fn compute_targets(kind: TaskKind, delay: usize, inputs: &[DenseMatrix]) -> (Vec<DenseMatrix>, Vec<bool>) {
    let b = inputs.first().map_or(0, DenseMatrix::cols);
    let mut targets = Vec::with_capacity(inputs.len());
    let mut valid = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut y = DenseMatrix::zeros(1, b);
        let ok = t >= delay;
        if ok {
            let far = &inputs[t - delay];
            for s in 0..b {
                y[(0, s)] = match kind {
                    TaskKind::DelayedCopy => far[(0, s)],
                    TaskKind::TemporalXorContinuous => (inputs[t - delay / 2][(0, s)] - far[(0, s)]).abs(),
                    TaskKind::TemporalXorBinary => xor(inputs[t - delay / 2][(0, s)], far[(0, s)]),
                    TaskKind::SpatialXor => xor(xor(far[(0, s)], far[(1, s)]), far[(2, s)]),
                };
            }
        }
        targets.push(y);
        valid.push(ok);
    }
    (targets, valid)
}

/// Batch of `b` sequences drawn from `task.seed`.
pub fn generate(task: &TaskSpec, b: usize) -> Result<Batch> {
    task.validate()?;
    let dist = task.kind.input_distribution();
    let dim = task.kind.input_dim();
    let mut rng = seeded(derive_seed(task.seed, stream::TRAIN_BATCH, 0));
    let mut inputs: Vec<DenseMatrix> = (0..task.seq_len).map(|_| DenseMatrix::zeros(dim, b)).collect();
    for s in 0..b {
        for x in inputs.iter_mut() {
            for i in 0..dim {
                x[(i, s)] = dist.sample(&mut rng);
            }
        }
    }
    let (targets, valid) = compute_targets(task.kind, task.delay, &inputs);
    Ok(Batch { inputs, targets, valid })
}

fn check_predictions(predictions: &[DenseMatrix], batch: &Batch) -> Result<()> {
    if predictions.len() != batch.seq_len() {
        return Err(Error::Dimension(format!(
            "{} prediction steps for a sequence of {}",
            predictions.len(),
            batch.seq_len()
        )));
    }
    for (t, (p, y)) in predictions.iter().zip(&batch.targets).enumerate() {
        if p.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "prediction {t} is {:?}, target is {:?}",
                p.shape(),
                y.shape()
            )));
        }
        if batch.valid[t] && !p.is_finite() {
            return Err(Error::NonFinite("predictions"));
        }
    }
    Ok(())
}

/// `log(1 + e^z) − y z`, computed without overflow.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss averaged over valid steps, outputs and batch, plus its gradient
/// with respect to every prediction (zero on invalid steps).
pub fn task_loss_grad(kind: TaskKind, predictions: &[DenseMatrix], batch: &Batch) -> Result<(f64, Vec<DenseMatrix>)> {
    check_predictions(predictions, batch)?;
    let mut grads: Vec<DenseMatrix> = predictions.iter().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect();
    let per_step = batch.targets.first().map_or(0, |y| y.rows() * y.cols());
    let count = batch.valid_steps() * per_step;
    if count == 0 {
        return Ok((0.0, grads));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for t in (0..predictions.len()).filter(|&t| batch.valid[t]) {
        let (p, y, g) = (&predictions[t], &batch.targets[t], &mut grads[t]);
        for ((pz, yz), gz) in p.data().iter().zip(y.data()).zip(g.data_mut()) {
            if kind.is_binary() {
                loss += bce_with_logit(*pz, *yz);
                *gz = (logistic(*pz) - yz) * inv;
            } else {
                let e = pz - yz;
                loss += e * e;
                *gz = 2.0 * e * inv;
            }
        }
    }
    Ok((loss * inv, grads))
}

pub fn task_loss(kind: TaskKind, predictions: &[DenseMatrix], batch: &Batch) -> Result<f64> {
    Ok(task_loss_grad(kind, predictions, batch)?.0)
}

/// Fraction of valid outputs whose thresholded logit (`> 0` is class 1,
/// ties go to class 0) matches the target.
pub fn accuracy(kind: TaskKind, predictions: &[DenseMatrix], batch: &Batch) -> Result<f64> {
    if !kind.is_binary() {
        return Err(Error::Unsupported("accuracy on a continuous task"));
    }
    check_predictions(predictions, batch)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for t in (0..predictions.len()).filter(|&t| batch.valid[t]) {
        for (p, y) in predictions[t].data().iter().zip(batch.targets[t].data()) {
            let class = if *p > 0.0 { 1.0 } else { 0.0 };
            hits += (class == *y) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(v: &[f64]) -> Vec<DenseMatrix> {
        v.iter().map(|&x| DenseMatrix::from_rows(&[&[x]])).collect()
    }

    #[test]
    fn copy_example() {
        let (y, valid) = compute_targets(TaskKind::DelayedCopy, 1, &series(&[0.2, 0.7, 0.4]));
        assert_eq!(valid, vec![false, true, true]);
        assert_eq!(y[1][(0, 0)], 0.2);
        assert_eq!(y[2][(0, 0)], 0.7);
    }

    #[test]
    fn binary_xor_truth_table() {
        for (a, b, expect) in [(0.0, 0.0, 0.0), (0.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 1.0, 0.0)] {
            // d = 2: target at t = 2 uses x[1] and x[0].
            let (y, _) = compute_targets(TaskKind::TemporalXorBinary, 2, &series(&[a, b, 0.0]));
            assert_eq!(y[2][(0, 0)], expect);
        }
    }

    #[test]
    fn spatial_parity() {
        let x = vec![DenseMatrix::column_vector(&[1.0, 1.0, 0.0]), DenseMatrix::zeros(3, 1)];
        let (y, valid) = compute_targets(TaskKind::SpatialXor, 1, &x);
        assert!(valid[1]);
        assert_eq!(y[1][(0, 0)], 0.0);
    }

    #[test]
    fn task_findings() {
        assert!(TaskSpec::new(TaskKind::DelayedCopy, 5, 5).findings()[0].contains("sequence shorter than delay"));
        assert!(!TaskSpec::new(TaskKind::TemporalXorBinary, 3, 10).findings().is_empty());
        assert!(TaskSpec::new(TaskKind::SpatialXor, 3, 10).findings().is_empty());
    }

    #[test]
    fn zero_logits_give_ln2_and_chance() {
        let task = TaskSpec::new(TaskKind::TemporalXorBinary, 2, 40).with_seed(3);
        let batch = generate(&task, 200).unwrap();
        let preds: Vec<DenseMatrix> = batch.targets.iter().map(|y| DenseMatrix::zeros(y.rows(), y.cols())).collect();
        assert!((task_loss(task.kind, &preds, &batch).unwrap() - 2f64.ln()).abs() < 1e-12);
        let acc = accuracy(task.kind, &preds, &batch).unwrap();
        assert!((acc - 0.5).abs() < 0.03);
    }

    #[test]
    fn accuracy_rejects_continuous_tasks() {
        let task = TaskSpec::new(TaskKind::DelayedCopy, 2, 5);
        let batch = generate(&task, 2).unwrap();
        assert!(accuracy(task.kind, &batch.targets, &batch).is_err());
        assert_eq!(task_loss(task.kind, &batch.targets, &batch).unwrap(), 0.0);
    }
}
