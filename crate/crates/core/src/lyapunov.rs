//! Benettin estimator for the leading Lyapunov exponents of a driven network.

use crate::linalg::{qr_positive, DenseMatrix, QrFactors};
use crate::models::{jacobian_from_cache, step_batch, ArchitectureSpec, ModelParams};
use crate::rng::{derive_seed, random_orthonormal, seeded, stream, InputDistribution, InputStream};
use crate::table::Table;
use crate::{Error, Result};

/// Largest tolerated `R₁₁ / R_kk` after a reorthonormalization.
pub const CONDITION_LIMIT: f64 = 1e12;

pub const DEFAULT_TRANSIENT: usize = 500;

/// Orthonormal tangent system and its accumulated log growth.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentBasis {
    pub q: DenseMatrix,
    /// Running `Σ log R_ii`, in nats.
    pub gamma: Vec<f64>,
    pub steps_accumulated: usize,
}

impl TangentBasis {
    pub fn new(q: DenseMatrix) -> Self {
        let k = q.cols();
        Self {
            q,
            gamma: vec![0.0; k],
            steps_accumulated: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.q.cols()
    }
}

/// `q ← jac · q` without normalization.
pub fn propagate_tangent(basis: &TangentBasis, jac: &DenseMatrix) -> Result<TangentBasis> {
    Ok(TangentBasis {
        q: jac.matmul(&basis.q)?,
        gamma: basis.gamma.clone(),
        steps_accumulated: basis.steps_accumulated,
    })
}

/// Replaces `q` by its Q factor and adds `log R_ii` to `gamma`.
pub fn reorthonormalize(basis: &TangentBasis) -> Result<TangentBasis> {
    Ok(reorthonormalize_with_factors(basis)?.0)
}

/// As [`reorthonormalize`], also returning the factors.
pub fn reorthonormalize_with_factors(basis: &TangentBasis) -> Result<(TangentBasis, QrFactors)> {
    let f = qr_positive(&basis.q)?;
    let gamma = basis.gamma.iter().zip(f.r.diag()).map(|(g, r)| g + r.ln()).collect();
    Ok((
        TangentBasis {
            q: f.q.clone(),
            gamma,
            steps_accumulated: basis.steps_accumulated,
        },
        f,
    ))
}

/// `R₁₁ / R_kk` of a triangular factor.
pub fn diagonal_condition(r: &DenseMatrix) -> f64 {
    let d = r.diag();
    match (d.first(), d.last()) {
        (Some(a), Some(b)) => a / b,
        _ => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovConfig {
    pub k: usize,
    pub t_sim: usize,
    pub t_ons: usize,
    pub t_transient: usize,
    pub input: InputDistribution,
}

impl LyapunovConfig {
    pub fn new(k: usize, t_sim: usize, t_ons: usize) -> Self {
        Self {
            k,
            t_sim,
            t_ons,
            t_transient: DEFAULT_TRANSIENT,
            input: InputDistribution::Gaussian,
        }
    }

    pub fn with_transient(mut self, t_transient: usize) -> Self {
        self.t_transient = t_transient;
        self
    }

    pub fn with_input(mut self, input: InputDistribution) -> Self {
        self.input = input;
        self
    }

    pub fn validate(&self, spec: &ArchitectureSpec) -> Result<()> {
        if self.k == 0 || self.k > spec.state_dim() {
            return Err(Error::Config(format!(
                "k = {} must lie in 1..={} (state dimension)",
                self.k,
                spec.state_dim()
            )));
        }
        if self.t_ons == 0 {
            return Err(Error::Config("t_ons must be at least 1".into()));
        }
        if self.t_sim == 0 {
            return Err(Error::Config("t_sim must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovEstimate {
    /// `γ_i / t_sim` in Benettin order, nats per step.
    pub exponents: Vec<f64>,
    pub t_sim: usize,
    pub t_ons: usize,
}

impl LyapunovEstimate {
    /// Indices `i` with `λ_i < λ_{i+1}`. Benettin ordering is only
    /// asymptotic, so short runs may show a few.
    pub fn inversions(&self) -> Vec<usize> {
        self.exponents
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] < w[1])
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sum(&self) -> f64 {
        self.exponents.iter().sum()
    }
}

/// Running estimate `γ / t` at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub t: usize,
    pub exponents: Vec<f64>,
}

/// Driven trajectory with a tangent basis, advanced one step at a time.
pub struct Trajectory<'a> {
    spec: &'a ArchitectureSpec,
    params: &'a ModelParams,
    state: DenseMatrix,
    inputs: InputStream,
    basis: TangentBasis,
    t_ons: usize,
    since_qr: usize,
    step_index: usize,
}

impl<'a> Trajectory<'a> {
    /// `h₀ ~ N(0, 1)` and a random orthonormal `Q₀`, both from `seed`.
    pub fn new(
        spec: &'a ArchitectureSpec,
        params: &'a ModelParams,
        k: usize,
        t_ons: usize,
        input: InputDistribution,
        seed: u64,
    ) -> Result<Self> {
        params.validate(spec)?;
        let n = spec.state_dim();
        let mut srng = seeded(derive_seed(seed, stream::STATE, 0));
        let state = DenseMatrix::from_fn(n, 1, |_, _| crate::rng::standard_normal(&mut srng));
        let q = random_orthonormal(n, k, &mut seeded(derive_seed(seed, stream::BASIS, 0)))?;
        Ok(Self {
            spec,
            params,
            state,
            inputs: InputStream::new(input, spec.input_dim, derive_seed(seed, stream::INPUT, 0)),
            basis: TangentBasis::new(q),
            t_ons,
            since_qr: 0,
            step_index: 0,
        })
    }

    pub fn basis(&self) -> &TangentBasis {
        &self.basis
    }

    pub fn state(&self) -> &DenseMatrix {
        &self.state
    }

    /// Advances state and basis one step; returns the one-step Jacobian.
    pub fn advance(&mut self) -> Result<DenseMatrix> {
        let x = self.inputs.next_batch(1);
        let (next, cache) = step_batch(self.spec, self.params, &self.state, &x)?;
        self.step_index += 1;
        if !next.is_finite() {
            return Err(Error::Diverged { step: self.step_index });
        }
        let d = jacobian_from_cache(self.spec, self.params, &cache, 0);
        self.basis.q = d.matmul(&self.basis.q)?;
        self.state = next;
        self.since_qr += 1;
        Ok(d)
    }

    /// Reorthonormalizes, optionally accumulating `log R_ii`.
    pub fn reorthonormalize(&mut self, accumulate: bool) -> Result<QrFactors> {
        let (mut next, f) = reorthonormalize_with_factors(&self.basis)?;
        let ratio = diagonal_condition(&f.r);
        if !(ratio <= CONDITION_LIMIT) {
            return Err(Error::IllConditioned {
                step: self.step_index,
                ratio,
                limit: CONDITION_LIMIT,
            });
        }
        if accumulate {
            next.steps_accumulated = self.basis.steps_accumulated + self.since_qr;
        } else {
            next.gamma = self.basis.gamma.clone();
            next.steps_accumulated = self.basis.steps_accumulated;
        }
        self.basis = next;
        self.since_qr = 0;
        Ok(f)
    }

    /// Runs `steps` steps with QR every `t_ons` steps and after the last.
    /// `on_qr` sees the accumulated basis after each accumulating QR.
    pub fn run(&mut self, steps: usize, accumulate: bool, mut on_qr: impl FnMut(&TangentBasis)) -> Result<()> {
        for t in 1..=steps {
            self.advance()?;
            if t % self.t_ons == 0 || t == steps {
                self.reorthonormalize(accumulate)?;
                if accumulate {
                    on_qr(&self.basis);
                }
            }
        }
        Ok(())
    }
}

fn run_spectrum(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    cfg: &LyapunovConfig,
    seed: u64,
    checkpoints: &[usize],
) -> Result<(LyapunovEstimate, Vec<TracePoint>)> {
    cfg.validate(spec)?;
    let mut traj = Trajectory::new(spec, params, cfg.k, cfg.t_ons, cfg.input, seed)?;
    traj.run(cfg.t_transient, false, |_| {})?;
    let mut trace = Vec::with_capacity(checkpoints.len());
    let mut next_cp = 0;
    traj.run(cfg.t_sim, true, |b| {
        while next_cp < checkpoints.len() && checkpoints[next_cp] < b.steps_accumulated {
            next_cp += 1;
        }
        if next_cp < checkpoints.len() && checkpoints[next_cp] == b.steps_accumulated {
            let t = b.steps_accumulated as f64;
            trace.push(TracePoint {
                t: b.steps_accumulated,
                exponents: b.gamma.iter().map(|g| g / t).collect(),
            });
            next_cp += 1;
        }
    })?;
    let t = cfg.t_sim as f64;
    let estimate = LyapunovEstimate {
        exponents: traj.basis().gamma.iter().map(|g| g / t).collect(),
        t_sim: cfg.t_sim,
        t_ons: cfg.t_ons,
    };
    Ok((estimate, trace))
}

/// First `k` Lyapunov exponents: `t_transient` steps without accumulation,
/// then `t_sim` accumulating steps; `λ_i = γ_i / t_sim`.
pub fn lyapunov_spectrum(spec: &ArchitectureSpec, params: &ModelParams, cfg: &LyapunovConfig, seed: u64) -> Result<LyapunovEstimate> {
    Ok(run_spectrum(spec, params, cfg, seed, &[])?.0)
}

/// About `points` log-spaced times in `[t_ons, t_sim]`, each a multiple of
/// `t_ons` (so it falls on a reorthonormalization), ending at `t_sim`.
pub fn log_checkpoints(t_sim: usize, t_ons: usize, points: usize) -> Vec<usize> {
    let mut out = Vec::new();
    if t_sim == 0 || t_ons == 0 {
        return out;
    }
    let lo = (t_ons.min(t_sim) as f64).ln();
    let hi = (t_sim as f64).ln();
    for p in 0..points.max(1) {
        let frac = if points > 1 { p as f64 / (points - 1) as f64 } else { 1.0 };
        let raw = (lo + frac * (hi - lo)).exp().round() as usize;
        let t = ((raw / t_ons).max(1) * t_ons).min(t_sim);
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    if out.last() != Some(&t_sim) {
        out.push(t_sim);
    }
    out.dedup();
    out
}

/// Running estimates at log-spaced checkpoints; the last point equals
/// [`lyapunov_spectrum`] for the same arguments.
pub fn convergence_trace(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    cfg: &LyapunovConfig,
    seed: u64,
    points: usize,
) -> Result<Vec<TracePoint>> {
    let cps = log_checkpoints(cfg.t_sim, cfg.t_ons, points);
    Ok(run_spectrum(spec, params, cfg, seed, &cps)?.1)
}

/// Columns `(realization, i, lambda_i)`, `i` counted from 1.
pub fn spectrum_table(runs: &[(u64, LyapunovEstimate)]) -> Table {
    let mut t = Table::new(&["realization", "i", "lambda_i"]);
    for (r, est) in runs {
        for (i, l) in est.exponents.iter().enumerate() {
            t.push(vec![(*r).into(), (i + 1).into(), (*l).into()]);
        }
    }
    t
}

/// Columns `(realization, t, i, lambda_i_running)`.
pub fn trace_table(runs: &[(u64, Vec<TracePoint>)]) -> Table {
    let mut t = Table::new(&["realization", "t", "i", "lambda_i_running"]);
    for (r, points) in runs {
        for p in points {
            for (i, l) in p.exponents.iter().enumerate() {
                t.push(vec![(*r).into(), p.t.into(), (i + 1).into(), (*l).into()]);
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CellKind;

    #[test]
    fn identity_propagation_keeps_basis() {
        let b = TangentBasis::new(DenseMatrix::eye(4, 2));
        assert_eq!(propagate_tangent(&b, &DenseMatrix::identity(4)).unwrap(), b);
        let doubled = propagate_tangent(&b, &DenseMatrix::identity(4).scaled(2.0)).unwrap();
        for j in 0..2 {
            assert_eq!(crate::linalg::norm2(&doubled.q.column(j)), 2.0);
        }
    }

    #[test]
    fn reorthonormalize_accumulates_logs() {
        let b = TangentBasis::new(DenseMatrix::eye(3, 2));
        let same = reorthonormalize(&b).unwrap();
        assert!(same.q.max_abs_diff(&b.q) < 1e-15);
        assert!(same.gamma.iter().all(|g| g.abs() < 1e-15));

        let scaled = TangentBasis::new(DenseMatrix::eye(3, 2).scaled(std::f64::consts::E));
        let s = reorthonormalize(&scaled).unwrap();
        assert!(s.gamma.iter().all(|g| (g - 1.0).abs() < 1e-12));

        let d = DenseMatrix::from_diag(&[3.0, 2.0]);
        let r = reorthonormalize(&TangentBasis::new(d)).unwrap();
        assert!((r.gamma[0] - 3f64.ln()).abs() < 1e-15);
        assert!((r.gamma[1] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn scalar_contraction_has_constant_running_estimates() {
        let spec = ArchitectureSpec::new(CellKind::Linear, 5, 1);
        let mut params = ModelParams::zeros(&spec);
        params.w_rec = DenseMatrix::identity(5).scaled(0.5);
        let cfg = LyapunovConfig::new(3, 200, 4).with_transient(10);
        let trace = convergence_trace(&spec, &params, &cfg, 1, 12).unwrap();
        for p in &trace {
            for l in &p.exponents {
                assert!((l - 0.5f64.ln()).abs() < 1e-12);
            }
        }
        let est = lyapunov_spectrum(&spec, &params, &cfg, 1).unwrap();
        assert_eq!(trace.last().unwrap().exponents, est.exponents);
        assert_eq!(trace.last().unwrap().t, 200);
    }

    #[test]
    fn checkpoints_fall_on_qr_boundaries() {
        let cps = log_checkpoints(1000, 7, 10);
        assert_eq!(*cps.last().unwrap(), 1000);
        assert!(cps[..cps.len() - 1].iter().all(|t| t % 7 == 0));
        assert!(cps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let spec = ArchitectureSpec::new(CellKind::VanillaTanh, 4, 1);
        assert!(LyapunovConfig::new(5, 10, 1).validate(&spec).is_err());
        assert!(LyapunovConfig::new(2, 10, 0).validate(&spec).is_err());
        assert!(LyapunovConfig::new(0, 10, 1).validate(&spec).is_err());
    }

    #[test]
    fn explosive_linear_map_trips_condition_guard() {
        let spec = ArchitectureSpec::new(CellKind::Linear, 2, 1);
        let mut params = ModelParams::zeros(&spec);
        params.w_rec = DenseMatrix::from_diag(&[100.0, 0.01]);
        let cfg = LyapunovConfig::new(2, 50, 10).with_transient(0);
        match lyapunov_spectrum(&spec, &params, &cfg, 3) {
            Err(Error::IllConditioned { .. }) | Err(Error::Linalg(_)) => {}
            other => panic!("expected conditioning failure, got {other:?}"),
        }
    }
}
