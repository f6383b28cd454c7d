//! BPTT training with interleaved flossing episodes, and gradient
//! diagnostics.

use std::fmt::Write as _;

use crate::flossing::{floss, FlossRecord, FlossingConfig};
use crate::linalg::{gemm, singular_values, DenseMatrix, Op};
use crate::lyapunov::{lyapunov_spectrum, LyapunovConfig};
use crate::models::{readout, step_backward, step_batch, ArchitectureSpec, CellKind, ModelParams, StepCache};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, stream};
use crate::table::{format_float, Table};
use crate::tasks::{accuracy, generate, task_loss_grad, Batch, TaskKind, TaskSpec};
use crate::{Error, Result};

/// Output of one exact backward pass through the unrolled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct BpttGrad {
    pub loss: f64,
    pub grads: ModelParams,
    /// `∂L/∂h₀` for the shared zero initial state (summed over the batch).
    pub grad_h0: Vec<f64>,
    pub predictions: Vec<DenseMatrix>,
}

/// Loss and gradient of the task loss for `h₀ = 0`, through every step.
pub fn bptt_grad(spec: &ArchitectureSpec, params: &ModelParams, kind: TaskKind, batch: &Batch) -> Result<BpttGrad> {
    params.validate(spec)?;
    let b = batch.batch_size();
    let n = spec.n_units;
    let mut state = DenseMatrix::zeros(spec.state_dim(), b);
    let mut caches: Vec<StepCache> = Vec::with_capacity(batch.seq_len());
    let mut hidden: Vec<DenseMatrix> = Vec::with_capacity(batch.seq_len());
    let mut predictions = Vec::with_capacity(batch.seq_len());
    for (t, x) in batch.inputs.iter().enumerate() {
        let (next, cache) = step_batch(spec, params, &state, x)?;
        if !next.is_finite() {
            return Err(Error::Diverged { step: t + 1 });
        }
        predictions.push(readout(spec, params, &next)?);
        hidden.push(if spec.kind == CellKind::Lstm {
            next.row_block(0, n)
        } else {
            next.clone()
        });
        caches.push(cache);
        state = next;
    }
    let (loss, pred_bar) = task_loss_grad(kind, &predictions, batch)?;

    let mut grads = params.zeros_like();
    let mut state_bar = DenseMatrix::zeros(spec.state_dim(), b);
    for t in (0..caches.len()).rev() {
        let pb = &pred_bar[t];
        if batch.valid[t] {
            gemm(1.0, pb, Op::N, &hidden[t], Op::T, 1.0, &mut grads.w_out)?;
            for r in 0..pb.rows() {
                grads.b_out[r] += pb.row(r).iter().sum::<f64>();
            }
            let mut h_bar = DenseMatrix::zeros(n, b);
            gemm(1.0, &params.w_out, Op::T, pb, Op::N, 0.0, &mut h_bar)?;
            for (s, h) in state_bar.data_mut()[..n * b].iter_mut().zip(h_bar.data()) {
                *s += h;
            }
        }
        state_bar = step_backward(spec, params, &caches[t], &state_bar, &mut grads)?;
        if !state_bar.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteGradient { step: t + 1 });
        }
    }
    let grad_h0 = (0..state_bar.rows()).map(|i| state_bar.row(i).iter().sum()).collect();
    Ok(BpttGrad {
        loss,
        grads,
        grad_h0,
        predictions,
    })
}

/// Euclidean norm of `∂L/∂h₀`.
pub fn grad_h0_norm(spec: &ArchitectureSpec, params: &ModelParams, kind: TaskKind, batch: &Batch) -> Result<f64> {
    let g = bptt_grad(spec, params, kind, batch)?;
    Ok(crate::linalg::norm2(&g.grad_h0))
}

/// Selected singular values (1-based `indices`) of `∂L/∂W_rec`.
pub fn dldw_svd_diag(spec: &ArchitectureSpec, params: &ModelParams, kind: TaskKind, batch: &Batch, indices: &[usize]) -> Result<Vec<f64>> {
    let g = bptt_grad(spec, params, kind, batch)?;
    let sv = singular_values(&g.grads.w_rec)?;
    indices
        .iter()
        .map(|&i| {
            if i == 0 || i > sv.len() {
                Err(Error::Config(format!("singular value index {i} outside 1..={}", sv.len())))
            } else {
                Ok(sv[i - 1])
            }
        })
        .collect()
}

/// Optional per-evaluation measurements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub grad_h0_norm: bool,
    /// 1-based singular value indices of `∂L/∂W_rec` to record.
    pub dldw_svd: Vec<usize>,
    /// Lyapunov exponents measured at each evaluation.
    pub lambda_probe: Option<LyapunovConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub epochs: usize,
    pub batch: usize,
    pub test_batch: usize,
    pub adam: AdamConfig,
    /// `(epoch, config)` pairs; an episode at epoch `e` runs before the
    /// training step of epoch `e`.
    pub schedule: Vec<(usize, FlossingConfig)>,
    pub eval_every: usize,
    pub diagnostics: Diagnostics,
}

impl TrainConfig {
    pub fn new(task: TaskSpec, epochs: usize, batch: usize) -> Self {
        Self {
            task,
            epochs,
            batch,
            test_batch: 256,
            adam: AdamConfig::default(),
            schedule: Vec::new(),
            eval_every: 10,
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn findings(&self, spec: &ArchitectureSpec) -> Vec<String> {
        let mut out = self.task.findings();
        if spec.input_dim != self.task.kind.input_dim() {
            out.push(format!(
                "network input_dim {} does not match task input dimension {}",
                spec.input_dim,
                self.task.kind.input_dim()
            ));
        }
        if self.batch == 0 || self.test_batch == 0 {
            out.push("batch sizes must be at least 1".into());
        }
        if self.eval_every == 0 {
            out.push("eval_every must be at least 1".into());
        }
        if let Err(e) = self.adam.validate() {
            out.push(e.to_string());
        }
        for (e, cfg) in &self.schedule {
            if *e > self.epochs {
                out.push(format!("flossing epoch {e} lies beyond the {} training epochs", self.epochs));
            }
            if let Err(err) = cfg.validate(spec) {
                out.push(err.to_string());
            }
        }
        out
    }

    pub fn validate(&self, spec: &ArchitectureSpec) -> Result<()> {
        match self.findings(spec).into_iter().next() {
            Some(f) => Err(Error::Config(f)),
            None => Ok(()),
        }
    }

    fn is_eval_epoch(&self, e: usize) -> bool {
        e.is_multiple_of(self.eval_every)
            || e == self.epochs
            || self
                .schedule
                .iter()
                .any(|(s, cfg)| cfg.epochs > 0 && (*s == e || *s == e + 1 || *s + 1 == e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub epoch: usize,
    /// Training-batch loss at the evaluated parameters; absent after the
    /// final epoch.
    pub train_loss: Option<f64>,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    pub lambdas: Option<Vec<f64>>,
    pub grad_h0_norm: Option<f64>,
    pub sigmas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<EvalRow>,
    /// Flossing episodes as `(training epoch, record)`.
    pub flossing: Vec<(usize, FlossRecord)>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), format_float)
}

impl RunRecord {
    pub fn final_row(&self) -> Option<&EvalRow> {
        self.rows.last()
    }

    pub fn row_at(&self, epoch: usize) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.epoch == epoch)
    }

    /// Columns `(epoch, train_loss, test_loss, test_accuracy,
    /// grad_h0_norm, sigma_<i>.., lambda_<i>..)`; missing values are `nan`.
    pub fn to_table(&self, diag: &Diagnostics) -> Table {
        let mut header: Vec<String> = ["epoch", "train_loss", "test_loss", "test_accuracy", "grad_h0_norm"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(diag.dldw_svd.iter().map(|i| format!("sigma_{i}")));
        let k = diag.lambda_probe.as_ref().map_or(0, |c| c.k);
        header.extend((1..=k).map(|i| format!("lambda_{i}")));
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut t = Table::new(&refs);
        for r in &self.rows {
            let mut row = vec![
                r.epoch.into(),
                r.train_loss.unwrap_or(f64::NAN).into(),
                r.test_loss.into(),
                r.test_accuracy.unwrap_or(f64::NAN).into(),
                r.grad_h0_norm.unwrap_or(f64::NAN).into(),
            ];
            for i in 0..diag.dldw_svd.len() {
                row.push(r.sigmas.as_ref().map_or(f64::NAN, |s| s[i]).into());
            }
            for i in 0..k {
                row.push(r.lambdas.as_ref().map_or(f64::NAN, |l| l[i]).into());
            }
            t.push(row);
        }
        t
    }
}

/// Training state that can be saved and resumed bit for bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub next_epoch: usize,
    pub params: ModelParams,
    pub adam: Adam,
    pub record: RunRecord,
}

impl TrainState {
    pub fn new(params: ModelParams, adam: AdamConfig) -> Self {
        Self {
            next_epoch: 0,
            adam: Adam::new(adam, &params),
            params,
            record: RunRecord::default(),
        }
    }

    /// Text checkpoint: parameters and Adam moments in the model format,
    /// evaluation rows as `row` lines with 17-digit floats.
    pub fn to_text(&self, spec: &ArchitectureSpec) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "next_epoch = {}", self.next_epoch);
        let _ = writeln!(s, "adam_steps = {}", self.adam.steps());
        let (m, v) = self.adam.moments();
        for (name, p) in [("params", &self.params), ("adam_m", m), ("adam_v", v)] {
            let _ = writeln!(s, "begin {name}");
            s.push_str(&p.to_text(spec));
            let _ = writeln!(s, "end {name}");
        }
        for r in &self.record.rows {
            let mut fields = vec![
                r.epoch.to_string(),
                opt(r.train_loss),
                format_float(r.test_loss),
                opt(r.test_accuracy),
                opt(r.grad_h0_norm),
            ];
            let list = |v: &Option<Vec<f64>>| match v {
                None => "-".to_string(),
                Some(v) => v.iter().map(|x| format_float(*x)).collect::<Vec<_>>().join(";"),
            };
            fields.push(list(&r.sigmas));
            fields.push(list(&r.lambdas));
            let _ = writeln!(s, "row {}", fields.join(" "));
        }
        for (epoch, rec) in &self.record.flossing {
            for e in &rec.epochs {
                let l: Vec<String> = e.exponents.iter().map(|x| format_float(*x)).collect();
                let _ = writeln!(s, "floss {epoch} {} {} {}", e.epoch, format_float(e.loss), l.join(";"));
            }
        }
        s
    }

    pub fn from_text(text: &str, adam: AdamConfig) -> Result<(ArchitectureSpec, TrainState)> {
        let err = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut next_epoch = None;
        let mut steps = None;
        let mut blocks: std::collections::BTreeMap<String, String> = Default::default();
        let mut current: Option<(String, String)> = None;
        let mut record = RunRecord::default();
        let num = |s: &str, line: usize| -> Result<f64> { s.parse::<f64>().map_err(|_| err(line, "bad number")) };
        let maybe = |s: &str, line: usize| -> Result<Option<f64>> {
            let v = num(s, line)?;
            Ok(if v.is_nan() { None } else { Some(v) })
        };
        let list = |s: &str, line: usize| -> Result<Option<Vec<f64>>> {
            if s == "-" {
                return Ok(None);
            }
            if s.is_empty() {
                return Ok(Some(Vec::new()));
            }
            s.split(';').map(|x| num(x, line)).collect::<Result<Vec<_>>>().map(Some)
        };
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            if let Some((name, body)) = current.as_mut() {
                if line == format!("end {name}") {
                    let (name, body) = current.take().expect("inside a block");
                    blocks.insert(name, body);
                } else {
                    body.push_str(line);
                    body.push('\n');
                }
                continue;
            }
            if let Some(name) = line.strip_prefix("begin ") {
                current = Some((name.to_string(), String::new()));
            } else if let Some(v) = line.strip_prefix("next_epoch = ") {
                next_epoch = Some(v.parse::<usize>().map_err(|_| err(ln, "bad next_epoch"))?);
            } else if let Some(v) = line.strip_prefix("adam_steps = ") {
                steps = Some(v.parse::<u64>().map_err(|_| err(ln, "bad adam_steps"))?);
            } else if let Some(rest) = line.strip_prefix("row ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 7 {
                    return Err(err(ln, "row needs 7 fields"));
                }
                record.rows.push(EvalRow {
                    epoch: f[0].parse().map_err(|_| err(ln, "bad epoch"))?,
                    train_loss: maybe(f[1], ln)?,
                    test_loss: num(f[2], ln)?,
                    test_accuracy: maybe(f[3], ln)?,
                    grad_h0_norm: maybe(f[4], ln)?,
                    sigmas: list(f[5], ln)?,
                    lambdas: list(f[6], ln)?,
                });
            } else if let Some(rest) = line.strip_prefix("floss ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(err(ln, "floss line needs 4 fields"));
                }
                let at: usize = f[0].parse().map_err(|_| err(ln, "bad epoch"))?;
                let entry = crate::flossing::FlossEpoch {
                    epoch: f[1].parse().map_err(|_| err(ln, "bad epoch"))?,
                    loss: num(f[2], ln)?,
                    exponents: list(f[3], ln)?.unwrap_or_default(),
                };
                match record.flossing.last_mut() {
                    Some((e, rec)) if *e == at => rec.epochs.push(entry),
                    _ => record.flossing.push((at, FlossRecord { epochs: vec![entry] })),
                }
            } else if !line.trim().is_empty() {
                return Err(err(ln, "unrecognized checkpoint line"));
            }
        }
        let block = |name: &str| -> Result<(ArchitectureSpec, ModelParams)> {
            let body = blocks.get(name).ok_or_else(|| err(0, "missing checkpoint block"))?;
            ModelParams::from_text(body)
        };
        let (spec, params) = block("params")?;
        let (_, m) = block("adam_m")?;
        let (_, v) = block("adam_v")?;
        let adam = Adam::from_moments(adam, m, v, steps.ok_or_else(|| err(0, "missing adam_steps"))?);
        let state = TrainState {
            next_epoch: next_epoch.ok_or_else(|| err(0, "missing next_epoch"))?,
            params,
            adam,
            record,
        };
        Ok((spec, state))
    }
}

/// Fixed held-out batch, drawn from a stream disjoint from training.
pub fn test_batch(cfg: &TrainConfig, seed: u64) -> Result<Batch> {
    generate(&cfg.task.with_seed(derive_seed(seed, stream::TEST_BATCH, 0)), cfg.test_batch)
}

fn train_batch(cfg: &TrainConfig, seed: u64, epoch: usize) -> Result<Batch> {
    generate(&cfg.task.with_seed(derive_seed(seed, stream::TRAIN_BATCH, epoch as u64)), cfg.batch)
}

fn evaluate(spec: &ArchitectureSpec, params: &ModelParams, cfg: &TrainConfig, test: &Batch, seed: u64, epoch: usize) -> Result<EvalRow> {
    let kind = cfg.task.kind;
    let g = bptt_grad(spec, params, kind, test)?;
    let test_accuracy = if kind.is_binary() {
        Some(accuracy(kind, &g.predictions, test)?)
    } else {
        None
    };
    let d = &cfg.diagnostics;
    let sigmas = if d.dldw_svd.is_empty() {
        None
    } else {
        let sv = singular_values(&g.grads.w_rec)?;
        Some(
            d.dldw_svd
                .iter()
                .map(|&i| sv.get(i.wrapping_sub(1)).copied().unwrap_or(f64::NAN))
                .collect(),
        )
    };
    let lambdas = match &d.lambda_probe {
        Some(lc) => Some(lyapunov_spectrum(spec, params, lc, derive_seed(seed, stream::INPUT, epoch as u64))?.exponents),
        None => None,
    };
    Ok(EvalRow {
        epoch,
        train_loss: None,
        test_loss: g.loss,
        test_accuracy,
        lambdas,
        grad_h0_norm: d.grad_h0_norm.then(|| crate::linalg::norm2(&g.grad_h0)),
        sigmas,
    })
}

/// Runs epochs `state.next_epoch..cfg.epochs` (plus the final evaluation),
/// calling `checkpoint` after every epoch with the current state.
pub fn train_from(
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
    seed: u64,
    mut state: TrainState,
    mut checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate(spec)?;
    state.params.validate(spec)?;
    let test = test_batch(cfg, seed)?;
    let kind = cfg.task.kind;
    while state.next_epoch <= cfg.epochs {
        let e = state.next_epoch;
        for (at, fcfg) in cfg.schedule.iter().filter(|(at, _)| *at == e) {
            if fcfg.epochs == 0 {
                continue;
            }
            let (p, rec) = floss(spec, &state.params, fcfg, derive_seed(seed, stream::FLOSS, *at as u64))?;
            state.params = p;
            state.record.flossing.push((*at, rec));
        }
        if cfg.is_eval_epoch(e) {
            let row = evaluate(spec, &state.params, cfg, &test, seed, e)?;
            state.record.rows.push(row);
        }
        if e < cfg.epochs {
            let batch = train_batch(cfg, seed, e)?;
            let g = bptt_grad(spec, &state.params, kind, &batch)?;
            if let Some(row) = state.record.rows.last_mut().filter(|r| r.epoch == e) {
                row.train_loss = Some(g.loss);
            }
            state.adam.step(&mut state.params, &g.grads);
            if !state.params.is_finite() {
                return Err(Error::NonFinite("parameters after training update"));
            }
        }
        state.next_epoch += 1;
        checkpoint(&state)?;
    }
    Ok(state)
}

/// Full training run from `params`.
pub fn train(spec: &ArchitectureSpec, params: &ModelParams, cfg: &TrainConfig, seed: u64) -> Result<(ModelParams, RunRecord)> {
    let state = train_from(spec, cfg, seed, TrainState::new(params.clone(), cfg.adam), |_| Ok(()))?;
    Ok((state.params, state.record))
}
