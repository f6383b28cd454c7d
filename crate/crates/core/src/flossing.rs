//! Differentiable Lyapunov exponents and the flossing optimizer.
//!
//! The forward pass runs the Benettin procedure on a driven trajectory and
//! records a tape. The backward pass differentiates
//! `L = Σ (λ_i − target_i)²` with `λ = γ / T_f` through every `log R_ii`,
//! every QR factorization, every tangent product `Q̃ = D Q`, and the state
//! dependence of each one-step Jacobian `D`.

use rayon::prelude::*;

use crate::linalg::{qr_pullback, DenseMatrix, QrAdjoints, QrFactors};
use crate::models::{jacobian_backward, jacobian_from_cache, step_backward, step_batch, ArchitectureSpec, ModelParams, StepCache};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, random_orthonormal, seeded, standard_normal, stream, InputDistribution, InputStream};
use crate::table::Table;
use crate::{Error, Result};

/// How the tangent basis and state are initialized across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisInit {
    /// Fresh random `h₀` and `Q₀` every epoch.
    PerEpoch,
    /// `h` and `Q` carry over from the end of the previous epoch.
    Persistent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlossingConfig {
    pub k: usize,
    /// Target exponents in nats per step, length `k`.
    pub targets: Vec<f64>,
    pub t_floss: usize,
    pub t_ons: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Independent input streams averaged per gradient.
    pub batch: usize,
    /// Steps run before taping starts; not differentiated.
    pub t_transient: usize,
    pub input: InputDistribution,
    pub basis_init: BasisInit,
}

impl FlossingConfig {
    /// Zero targets, Gaussian inputs, batch 1, no transient.
    pub fn new(k: usize, t_floss: usize, t_ons: usize, epochs: usize) -> Self {
        Self {
            k,
            targets: vec![0.0; k],
            t_floss,
            t_ons,
            epochs,
            adam: AdamConfig::default(),
            batch: 1,
            t_transient: 0,
            input: InputDistribution::Gaussian,
            basis_init: BasisInit::PerEpoch,
        }
    }

    pub fn with_targets(mut self, targets: Vec<f64>) -> Self {
        self.targets = targets;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.adam.eta = eta;
        self
    }

    pub fn with_input(mut self, input: InputDistribution) -> Self {
        self.input = input;
        self
    }

    pub fn with_transient(mut self, t_transient: usize) -> Self {
        self.t_transient = t_transient;
        self
    }

    pub fn with_basis_init(mut self, basis_init: BasisInit) -> Self {
        self.basis_init = basis_init;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn validate(&self, spec: &ArchitectureSpec) -> Result<()> {
        if self.k == 0 || self.k > spec.state_dim() {
            return Err(Error::Config(format!(
                "k = {} exceeds state dimension {} (or is zero)",
                self.k,
                spec.state_dim()
            )));
        }
        if self.targets.len() != self.k {
            return Err(Error::Config(format!("{} targets given for k = {}", self.targets.len(), self.k)));
        }
        if self.t_ons == 0 || self.t_floss == 0 || self.batch == 0 {
            return Err(Error::Config("t_ons, t_floss and batch must be at least 1".into()));
        }
        self.adam.validate()
    }

    /// Approximate tape size in bytes for one input stream.
    pub fn tape_bytes(&self, spec: &ArchitectureSpec) -> usize {
        let n = spec.state_dim();
        let per_step = 2 * n * self.k + n * n + 8 * spec.n_units + spec.input_dim;
        let per_qr = n * self.k + self.k * self.k;
        8 * (self.t_floss * per_step + self.t_floss.div_ceil(self.t_ons) * per_qr)
    }
}

/// `Σ (λ_i − target_i)²`
pub fn flossing_loss(exponents: &[f64], targets: &[f64]) -> Result<f64> {
    if exponents.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} exponents vs {} targets",
            exponents.len(),
            targets.len()
        )));
    }
    Ok(exponents.iter().zip(targets).map(|(l, t)| (l - t) * (l - t)).sum())
}

/// Loss, exponents and parameter gradient of one flossing evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FlossGrad {
    pub loss: f64,
    pub exponents: Vec<f64>,
    /// Readout entries are always zero.
    pub grads: ModelParams,
}

struct TapeEntry {
    cache: StepCache,
    q_prev: DenseMatrix,
    d: DenseMatrix,
    qr: Option<QrFactors>,
}

/// Where one input stream starts.
#[derive(Debug, Clone)]
struct StreamStart {
    state: DenseMatrix,
    q: DenseMatrix,
}

impl StreamStart {
    fn fresh(spec: &ArchitectureSpec, k: usize, seed: u64) -> Result<Self> {
        let n = spec.state_dim();
        let mut srng = seeded(derive_seed(seed, stream::STATE, 0));
        let state = DenseMatrix::from_fn(n, 1, |_, _| standard_normal(&mut srng));
        let q = random_orthonormal(n, k, &mut seeded(derive_seed(seed, stream::BASIS, 0)))?;
        Ok(Self { state, q })
    }
}

fn stream_grad(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    cfg: &FlossingConfig,
    start: StreamStart,
    seed: u64,
) -> Result<(FlossGrad, StreamStart)> {
    let mut inputs = InputStream::new(cfg.input, spec.input_dim, derive_seed(seed, stream::INPUT, 0));
    let mut state = start.state;
    let mut q = start.q;

    for t in 1..=cfg.t_transient {
        let x = inputs.next_batch(1);
        let (next, cache) = step_batch(spec, params, &state, &x)?;
        if !next.is_finite() {
            return Err(Error::Diverged { step: t });
        }
        q = jacobian_from_cache(spec, params, &cache, 0).matmul(&q)?;
        if t % cfg.t_ons == 0 || t == cfg.t_transient {
            q = crate::linalg::qr_positive(&q)?.q;
        }
        state = next;
    }

    let tf = cfg.t_floss;
    let mut tape = Vec::with_capacity(tf);
    let mut gamma = vec![0.0; cfg.k];
    for t in 1..=tf {
        let x = inputs.next_batch(1);
        let (next, cache) = step_batch(spec, params, &state, &x)?;
        if !next.is_finite() {
            return Err(Error::Diverged { step: cfg.t_transient + t });
        }
        let d = jacobian_from_cache(spec, params, &cache, 0);
        let q_tilde = d.matmul(&q)?;
        let q_prev = std::mem::replace(&mut q, q_tilde);
        let qr = if t % cfg.t_ons == 0 || t == tf {
            let f = crate::linalg::qr_positive(&q)?;
            for (g, r) in gamma.iter_mut().zip(f.r.diag()) {
                *g += r.ln();
            }
            q = f.q.clone();
            Some(f)
        } else {
            None
        };
        tape.push(TapeEntry { cache, q_prev, d, qr });
        state = next;
    }

    let tf_f = tf as f64;
    let exponents: Vec<f64> = gamma.iter().map(|g| g / tf_f).collect();
    let loss = flossing_loss(&exponents, &cfg.targets)?;
    let gamma_bar: Vec<f64> = exponents.iter().zip(&cfg.targets).map(|(l, t)| 2.0 * (l - t) / tf_f).collect();

    let n = spec.state_dim();
    let mut grads = params.zeros_like();
    let mut q_bar = DenseMatrix::zeros(n, cfg.k);
    let mut state_bar = DenseMatrix::zeros(n, 1);
    for (idx, entry) in tape.iter().enumerate().rev() {
        let q_tilde_bar = match &entry.qr {
            Some(f) => {
                let mut adj = QrAdjoints {
                    q_bar,
                    r_bar: DenseMatrix::zeros(cfg.k, cfg.k),
                };
                for (i, r) in f.r.diag().into_iter().enumerate() {
                    adj.r_bar[(i, i)] = gamma_bar[i] / r;
                }
                qr_pullback(f, &adj)?
            }
            None => q_bar,
        };
        let d_bar = q_tilde_bar.matmul_t(&entry.q_prev)?;
        q_bar = entry.d.t_matmul(&q_tilde_bar)?;
        let mut prev_bar = step_backward(spec, params, &entry.cache, &state_bar, &mut grads)?;
        prev_bar.axpy(1.0, &jacobian_backward(spec, params, &entry.cache, 0, &d_bar, &mut grads)?)?;
        state_bar = prev_bar;
        if !state_bar.is_finite() || !q_bar.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteGradient {
                step: cfg.t_transient + idx + 1,
            });
        }
    }
    grads.zero_readout();

    let end = StreamStart { state, q };
    Ok((FlossGrad { loss, exponents, grads }, end))
}

fn member_seed(seed: u64, b: usize) -> u64 {
    derive_seed(seed, stream::FLOSS, b as u64)
}

fn batch_grad(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    cfg: &FlossingConfig,
    starts: Vec<StreamStart>,
    seed: u64,
) -> Result<(FlossGrad, Vec<StreamStart>)> {
    let results: Vec<Result<(FlossGrad, StreamStart)>> = starts
        .into_par_iter()
        .enumerate()
        .map(|(b, start)| stream_grad(spec, params, cfg, start, member_seed(seed, b)))
        .collect();
    let scale = 1.0 / cfg.batch as f64;
    let mut total = FlossGrad {
        loss: 0.0,
        exponents: vec![0.0; cfg.k],
        grads: params.zeros_like(),
    };
    let mut ends = Vec::with_capacity(cfg.batch);
    for r in results {
        let (g, end) = r?;
        total.loss += scale * g.loss;
        for (a, e) in total.exponents.iter_mut().zip(&g.exponents) {
            *a += scale * e;
        }
        total.grads.axpy(scale, &g.grads);
        ends.push(end);
    }
    Ok((total, ends))
}

fn fresh_starts(spec: &ArchitectureSpec, cfg: &FlossingConfig, seed: u64) -> Result<Vec<StreamStart>> {
    (0..cfg.batch)
        .map(|b| StreamStart::fresh(spec, cfg.k, member_seed(seed, b)))
        .collect()
}

/// Loss and exact gradient of the flossing objective, averaged over
/// `cfg.batch` independent input streams derived from `seed`.
///
/// With `batch = 1` the loss is exactly `Σ (λ_i − target_i)²` of that
/// stream; with more streams, losses, exponents and gradients are averaged.
pub fn flossing_grad(spec: &ArchitectureSpec, params: &ModelParams, cfg: &FlossingConfig, seed: u64) -> Result<FlossGrad> {
    cfg.validate(spec)?;
    params.validate(spec)?;
    let starts = fresh_starts(spec, cfg, seed)?;
    Ok(batch_grad(spec, params, cfg, starts, seed)?.0)
}

/// Flossing objective only (the forward pass of [`flossing_grad`]).
pub fn flossing_objective(spec: &ArchitectureSpec, params: &ModelParams, cfg: &FlossingConfig, seed: u64) -> Result<f64> {
    Ok(flossing_grad(spec, params, cfg, seed)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlossEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Exponents measured in this epoch's forward pass, before the update.
    pub exponents: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlossRecord {
    pub epochs: Vec<FlossEpoch>,
}

impl FlossRecord {
    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last_exponents(&self) -> Option<&[f64]> {
        self.epochs.last().map(|e| e.exponents.as_slice())
    }

    /// Columns `(epoch, loss, lambda_1 .. lambda_k)`.
    pub fn to_table(&self, k: usize) -> Table {
        let mut header = vec!["epoch".to_string(), "loss".to_string()];
        header.extend((1..=k).map(|i| format!("lambda_{i}")));
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut t = Table::new(&refs);
        for e in &self.epochs {
            let mut row = vec![e.epoch.into(), e.loss.into()];
            row.extend(e.exponents.iter().map(|&l| l.into()));
            t.push(row);
        }
        t
    }
}

/// Seed for flossing epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, stream::FLOSS ^ 0xF1, epoch as u64)
}

/// `cfg.epochs` Adam steps on the flossing gradient with a fresh input
/// seed per epoch. The readout is left untouched.
pub fn floss(spec: &ArchitectureSpec, params: &ModelParams, cfg: &FlossingConfig, seed: u64) -> Result<(ModelParams, FlossRecord)> {
    cfg.validate(spec)?;
    params.validate(spec)?;
    let mut p = params.clone();
    let mut record = FlossRecord::default();
    if cfg.epochs == 0 {
        return Ok((p, record));
    }
    let mut adam = Adam::new(cfg.adam, &p);
    let mut carried: Option<Vec<StreamStart>> = None;
    for epoch in 0..cfg.epochs {
        let es = epoch_seed(seed, epoch);
        let starts = match (cfg.basis_init, carried.take()) {
            (BasisInit::Persistent, Some(s)) => s,
            _ => fresh_starts(spec, cfg, es)?,
        };
        let (g, ends) = batch_grad(spec, &p, cfg, starts, es)?;
        record.epochs.push(FlossEpoch {
            epoch,
            loss: g.loss,
            exponents: g.exponents,
        });
        adam.step(&mut p, &g.grads);
        if !p.is_finite() {
            return Err(Error::NonFinite("parameters after flossing update"));
        }
        carried = Some(ends);
    }
    Ok((p, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_gaussian, CellKind};

    #[test]
    fn loss_arithmetic() {
        assert_eq!(flossing_loss(&[0.2, -0.1], &[0.2, -0.1]).unwrap(), 0.0);
        assert!((flossing_loss(&[0.3], &[0.0]).unwrap() - 0.09).abs() < 1e-15);
        assert_eq!(flossing_loss(&[-1.0, -0.5], &[0.0, 0.0]).unwrap(), 1.25);
        assert!(flossing_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn scalar_linear_gradient_is_closed_form() {
        let spec = ArchitectureSpec::new(CellKind::Linear, 3, 1);
        let a = 0.7_f64;
        let mut params = ModelParams::zeros(&spec);
        params.w_rec = DenseMatrix::identity(3).scaled(a);
        let cfg = FlossingConfig::new(1, 25, 5, 0);
        let g = flossing_grad(&spec, &params, &cfg, 4).unwrap();
        assert!((g.loss - a.ln().powi(2)).abs() < 1e-12);
        // dL/da is the trace of dL/dW for W = a I.
        let trace: f64 = g.grads.w_rec.diag().iter().sum();
        assert!((trace - 2.0 * a.ln() / a).abs() < 1e-8);
        assert!(g.grads.v_in.max_abs() == 0.0);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let spec = ArchitectureSpec::new(CellKind::VanillaTanh, 4, 1);
        let params = init_gaussian(&spec, 1.0, 1).unwrap();
        let (p, rec) = floss(&spec, &params, &FlossingConfig::new(2, 10, 1, 0), 9).unwrap();
        assert_eq!(p, params);
        assert!(rec.is_empty());
    }

    #[test]
    fn config_validation() {
        let spec = ArchitectureSpec::new(CellKind::Lstm, 3, 1);
        assert!(FlossingConfig::new(6, 10, 1, 1).validate(&spec).is_ok());
        assert!(FlossingConfig::new(7, 10, 1, 1).validate(&spec).is_err());
        assert!(FlossingConfig::new(2, 10, 1, 1).with_targets(vec![0.0]).validate(&spec).is_err());
        assert!(FlossingConfig::new(2, 10, 0, 1).validate(&spec).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_small_tanh() {
        let spec = ArchitectureSpec::new(CellKind::VanillaTanh, 4, 1);
        let params = init_gaussian(&spec, 1.5, 3).unwrap();
        let cfg = FlossingConfig::new(2, 12, 3, 0).with_targets(vec![0.1, -0.2]);
        let g = flossing_grad(&spec, &params, &cfg, 5).unwrap();
        let h = 1e-6;
        for idx in [0usize, 5, 10, 15] {
            let mut p = params.clone();
            p.w_rec.data_mut()[idx] += h;
            let mut m = params.clone();
            m.w_rec.data_mut()[idx] -= h;
            let fd = (flossing_objective(&spec, &p, &cfg, 5).unwrap() - flossing_objective(&spec, &m, &cfg, 5).unwrap()) / (2.0 * h);
            let an = g.grads.w_rec.data()[idx];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "entry {idx}: {an} vs {fd}");
        }
    }
}
