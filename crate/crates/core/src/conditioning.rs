//! Condition numbers of long-term Jacobians.
//!
//! The direct route multiplies one-step Jacobians in software floating
//! point (default 256-bit mantissa) and takes singular values with an
//! extended-precision one-sided Jacobi sweep. The estimate route uses
//! Lyapunov exponents: `log κ ≈ (λ₁ − λ_m) · horizon`.

use astro_float::{BigFloat, RoundingMode, Sign};

use crate::linalg::DenseMatrix;
use crate::lyapunov::LyapunovEstimate;
use crate::models::{jacobian_from_cache, step_batch, ArchitectureSpec, ModelParams};
use crate::rng::{derive_seed, seeded, standard_normal, stream, InputDistribution, InputStream};
use crate::table::Table;
use crate::{Error, Result};

pub const DEFAULT_PRECISION: usize = 256;
pub const MIN_PRECISION: usize = 200;
const RM: RoundingMode = RoundingMode::ToEven;
const EXT_SVD_MAX_SWEEPS: usize = 100;

/// Dense matrix of software floats, row-major.
#[derive(Debug, Clone)]
pub struct ExtPrecMatrix {
    rows: usize,
    cols: usize,
    precision: usize,
    data: Vec<BigFloat>,
}

/// Natural log of `|x|` to double accuracy, valid far outside the `f64`
/// exponent range.
fn ln_abs(x: &BigFloat) -> Option<f64> {
    let (words, _, _, exp, _) = x.as_raw_parts()?;
    let top = *words.last()?;
    if top == 0 {
        return None;
    }
    let frac = top as f64 / 18446744073709551616.0;
    Some(exp as f64 * std::f64::consts::LN_2 + frac.ln())
}

/// Nearest `f64` (saturating to `±inf` / `0`).
pub fn to_f64(x: &BigFloat) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x.is_inf_pos() {
        return f64::INFINITY;
    }
    if x.is_inf_neg() {
        return f64::NEG_INFINITY;
    }
    if x.is_zero() {
        return 0.0;
    }
    let Some((words, _, sign, exp, _)) = x.as_raw_parts() else {
        return f64::NAN;
    };
    let n = words.len();
    let hi = words[n - 1] as f64;
    let lo = if n > 1 { words[n - 2] as f64 / 18446744073709551616.0 } else { 0.0 };
    let frac = (hi + lo) / 18446744073709551616.0;
    let v = frac * 2f64.powi(exp.clamp(-1100, 1100));
    if sign == Sign::Neg {
        -v
    } else {
        v
    }
}

impl ExtPrecMatrix {
    pub fn zeros(rows: usize, cols: usize, precision: usize) -> Self {
        Self {
            rows,
            cols,
            precision,
            data: vec![BigFloat::from_f64(0.0, precision); rows * cols],
        }
    }

    pub fn identity(n: usize, precision: usize) -> Self {
        let mut m = Self::zeros(n, n, precision);
        for i in 0..n {
            m.data[i * n + i] = BigFloat::from_f64(1.0, precision);
        }
        m
    }

    /// Exact conversion (every `f64` is representable).
    pub fn from_dense(m: &DenseMatrix, precision: usize) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            precision,
            data: m.data().iter().map(|&x| BigFloat::from_f64(x, precision)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn precision(&self) -> usize {
        self.precision
    }

    pub fn get(&self, i: usize, j: usize) -> &BigFloat {
        &self.data[i * self.cols + j]
    }

    /// Rounded copy in standard precision.
    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::new(self.rows, self.cols, self.data.iter().map(to_f64).collect()).expect("shape is consistent")
    }

    pub fn matmul(&self, other: &ExtPrecMatrix) -> Result<ExtPrecMatrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "extended product of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let p = self.precision.max(other.precision);
        let mut out = ExtPrecMatrix::zeros(self.rows, other.cols, p);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = BigFloat::from_f64(0.0, p);
                for k in 0..self.cols {
                    let a = &self.data[i * self.cols + k];
                    if a.is_zero() {
                        continue;
                    }
                    acc = acc.add(&a.mul(&other.data[k * other.cols + j], p, RM), p, RM);
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        out.check_finite()?;
        Ok(out)
    }

    pub fn leading_columns(&self, m: usize) -> ExtPrecMatrix {
        let m = m.min(self.cols);
        let mut data = Vec::with_capacity(self.rows * m);
        for i in 0..self.rows {
            data.extend_from_slice(&self.data[i * self.cols..i * self.cols + m]);
        }
        ExtPrecMatrix {
            rows: self.rows,
            cols: m,
            precision: self.precision,
            data,
        }
    }

    /// `D · self` for a standard-precision `D`.
    pub fn left_mul_dense(&self, d: &DenseMatrix) -> Result<ExtPrecMatrix> {
        ExtPrecMatrix::from_dense(d, self.precision).matmul(self)
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().any(|x| x.is_nan() || x.is_inf()) {
            return Err(Error::Precision("product left the representable range; shorten the horizon".into()));
        }
        Ok(())
    }

    /// `‖self − other‖_F / ‖self‖_F`, evaluated in extended precision.
    pub fn relative_difference(&self, other: &ExtPrecMatrix) -> Result<f64> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Dimension("relative difference of mismatched matrices".into()));
        }
        let p = self.precision;
        let mut num = BigFloat::from_f64(0.0, p);
        let mut den = BigFloat::from_f64(0.0, p);
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = a.sub(b, p, RM);
            num = num.add(&d.mul(&d, p, RM), p, RM);
            den = den.add(&a.mul(a, p, RM), p, RM);
        }
        if den.is_zero() {
            return Ok(if num.is_zero() { 0.0 } else { f64::INFINITY });
        }
        if num.is_zero() {
            return Ok(0.0);
        }
        let ln_ratio = 0.5 * (ln_abs(&num).unwrap_or(f64::NEG_INFINITY) - ln_abs(&den).unwrap_or(0.0));
        Ok(ln_ratio.exp())
    }
}

/// Deterministic driven trajectory yielding one-step Jacobians:
/// `h₀ ~ N(0, 1)` and inputs from `seed`.
pub struct JacobianStream<'a> {
    spec: &'a ArchitectureSpec,
    params: &'a ModelParams,
    state: DenseMatrix,
    inputs: InputStream,
    steps: usize,
}

impl<'a> JacobianStream<'a> {
    pub fn new(spec: &'a ArchitectureSpec, params: &'a ModelParams, input: InputDistribution, seed: u64) -> Result<Self> {
        params.validate(spec)?;
        let mut srng = seeded(derive_seed(seed, stream::STATE, 0));
        let state = DenseMatrix::from_fn(spec.state_dim(), 1, |_, _| standard_normal(&mut srng));
        Ok(Self {
            spec,
            params,
            state,
            inputs: InputStream::new(input, spec.input_dim, derive_seed(seed, stream::INPUT, 0)),
            steps: 0,
        })
    }

    /// Jacobian `D_s` at the current state, then advances the state.
    pub fn next_jacobian(&mut self) -> Result<DenseMatrix> {
        let x = self.inputs.next_batch(1);
        let (next, cache) = step_batch(self.spec, self.params, &self.state, &x)?;
        self.steps += 1;
        if !next.is_finite() {
            return Err(Error::Diverged { step: self.steps });
        }
        self.state = next;
        Ok(jacobian_from_cache(self.spec, self.params, &cache, 0))
    }

    pub fn skip(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.next_jacobian()?;
        }
        Ok(())
    }
}

/// `T = D_{t−1} ⋯ D_τ` along the trajectory from `seed`, accumulated in
/// extended precision.
pub fn long_term_jacobian_ext(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    input: InputDistribution,
    tau: usize,
    t: usize,
    seed: u64,
    precision: usize,
) -> Result<ExtPrecMatrix> {
    if t <= tau {
        return Err(Error::Config(format!("horizon end t = {t} must exceed tau = {tau}")));
    }
    check_precision(precision)?;
    let mut js = JacobianStream::new(spec, params, input, seed)?;
    js.skip(tau)?;
    let mut prod = ExtPrecMatrix::identity(spec.state_dim(), precision);
    for _ in tau..t {
        prod = prod.left_mul_dense(&js.next_jacobian()?)?;
    }
    Ok(prod)
}

fn check_precision(precision: usize) -> Result<()> {
    if precision < MIN_PRECISION {
        return Err(Error::Precision(format!(
            "{precision} mantissa bits requested, at least {MIN_PRECISION} required"
        )));
    }
    Ok(())
}

/// Singular values of an extended matrix, as natural logs, descending.
/// One-sided Jacobi with off-diagonal threshold `2^(−precision/2)`.
pub fn ln_singular_values_ext(a: &ExtPrecMatrix) -> Result<Vec<f64>> {
    let p = a.precision;
    let (rows, cols) = (a.rows, a.cols);
    // Work on the columns of the tall orientation, stored as rows.
    let (n, len, mut w) = if rows >= cols {
        let mut w = vec![BigFloat::from_f64(0.0, p); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                w[j * rows + i] = a.data[i * cols + j].clone();
            }
        }
        (cols, rows, w)
    } else {
        (rows, cols, a.data.clone())
    };
    let dot = |w: &[BigFloat], x: usize, y: usize| {
        let mut acc = BigFloat::from_f64(0.0, p);
        for i in 0..len {
            acc = acc.add(&w[x * len + i].mul(&w[y * len + i], p, RM), p, RM);
        }
        acc
    };
    let tol = BigFloat::from_f64(2f64.powi(-(p as i32) / 2), p);
    let two = BigFloat::from_f64(2.0, p);
    let one = BigFloat::from_f64(1.0, p);
    let mut norms: Vec<BigFloat> = (0..n).map(|i| dot(&w, i, i)).collect();
    let mut converged = false;
    for _ in 0..EXT_SVD_MAX_SWEEPS {
        let mut rotated = false;
        for x in 0..n {
            for y in x + 1..n {
                let gamma = dot(&w, x, y);
                if gamma.is_zero() {
                    continue;
                }
                let scale = norms[x].mul(&norms[y], p, RM).sqrt(p, RM).mul(&tol, p, RM);
                if gamma.abs().cmp(&scale).is_some_and(|c| c <= 0) {
                    continue;
                }
                rotated = true;
                let zeta = norms[y].sub(&norms[x], p, RM).div(&gamma.mul(&two, p, RM), p, RM);
                let root = one.add(&zeta.mul(&zeta, p, RM), p, RM).sqrt(p, RM);
                let mut t = one.div(&zeta.abs().add(&root, p, RM), p, RM);
                if zeta.is_negative() {
                    t.inv_sign();
                }
                let c = one.div(&one.add(&t.mul(&t, p, RM), p, RM).sqrt(p, RM), p, RM);
                let s = c.mul(&t, p, RM);
                for i in 0..len {
                    let xp = w[x * len + i].clone();
                    let yq = w[y * len + i].clone();
                    w[x * len + i] = c.mul(&xp, p, RM).sub(&s.mul(&yq, p, RM), p, RM);
                    w[y * len + i] = s.mul(&xp, p, RM).add(&c.mul(&yq, p, RM), p, RM);
                }
                norms[x] = dot(&w, x, x);
                norms[y] = dot(&w, y, y);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Precision("extended Jacobi SVD did not converge".into()));
    }
    let mut out = Vec::with_capacity(n);
    for nrm in &norms {
        if nrm.is_zero() {
            out.push(f64::NEG_INFINITY);
        } else {
            out.push(0.5 * ln_abs(nrm).ok_or_else(|| Error::Precision("non-finite singular value".into()))?);
        }
    }
    out.sort_by(|a, b| b.total_cmp(a));
    Ok(out)
}

/// `ln(σ₁ / σ_m)` of `T · Q` where `q` is `N x m` orthonormal.
pub fn condition_direct(m_dims: usize, t: &ExtPrecMatrix, q: &DenseMatrix) -> Result<f64> {
    if m_dims == 0 || m_dims > q.cols() {
        return Err(Error::Config(format!("m = {m_dims} outside 1..={}", q.cols())));
    }
    let tq = t.matmul(&ExtPrecMatrix::from_dense(&q.leading_columns(m_dims), t.precision))?;
    log_condition(&tq)
}

/// `ln(σ₁ / σ_min)` of an extended matrix with at least as many rows as
/// columns.
pub fn log_condition(a: &ExtPrecMatrix) -> Result<f64> {
    let ls = ln_singular_values_ext(a)?;
    let last = *ls.last().ok_or_else(|| Error::Config("empty matrix".into()))?;
    if !last.is_finite() {
        return Err(Error::Precision("smallest singular value underflowed at this precision".into()));
    }
    Ok(ls[0] - last)
}

/// `(λ₁ − λ_m) · horizon`
pub fn condition_estimate(lambda: &LyapunovEstimate, m: usize, horizon: usize) -> Result<f64> {
    let k = lambda.exponents.len();
    if m == 0 || m > k {
        return Err(Error::Config(format!("m = {m} outside 1..={k}")));
    }
    Ok((lambda.exponents[0] - lambda.exponents[m - 1]) * horizon as f64)
}

/// Largest `m` such that every `j <= m` has `(λ₁ − λ_j) · horizon <= budget`.
pub fn usable_dimensions(lambda: &LyapunovEstimate, horizon: usize, log_kappa_budget: f64) -> usize {
    let l1 = match lambda.exponents.first() {
        Some(v) => *v,
        None => return 0,
    };
    lambda
        .exponents
        .iter()
        .take_while(|l| (l1 - **l) * horizon as f64 <= log_kappa_budget)
        .count()
        .max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub horizon: usize,
    pub m: usize,
    pub kappa_direct: f64,
    pub kappa_estimate: f64,
    /// Change of `kappa_direct` when the mantissa is doubled.
    pub precision_drift: Option<f64>,
}

impl ConditionReport {
    pub fn reliable(&self) -> bool {
        self.precision_drift.is_none_or(|d| d < 1e-6)
    }
}

/// `ln κ(T_h · Q_m)` at each horizon `h` and each `m` in `ms`, with
/// `T_h` the product of the `h` Jacobians following `tau` warm-up steps
/// and `Q_m` the first `m` columns of `q`. The product `T_h · Q` is grown
/// incrementally, one Jacobian at a time.
#[allow(clippy::too_many_arguments)]
pub fn condition_sweep(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    input: InputDistribution,
    tau: usize,
    horizons: &[usize],
    q: &DenseMatrix,
    ms: &[usize],
    seed: u64,
    precision: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    check_precision(precision)?;
    if horizons.windows(2).any(|w| w[0] >= w[1]) || horizons.first() == Some(&0) {
        return Err(Error::Config("horizons must be positive and strictly increasing".into()));
    }
    if let Some(bad) = ms.iter().find(|&&m| m == 0 || m > q.cols()) {
        return Err(Error::Config(format!("m = {bad} outside 1..={}", q.cols())));
    }
    let mut js = JacobianStream::new(spec, params, input, seed)?;
    js.skip(tau)?;
    let mut y = ExtPrecMatrix::from_dense(q, precision);
    let mut out = Vec::with_capacity(horizons.len());
    let mut h = 0;
    for &target in horizons {
        while h < target {
            y = y.left_mul_dense(&js.next_jacobian()?)?;
            h += 1;
        }
        let kappas = ms
            .iter()
            .map(|&m| log_condition(&y.leading_columns(m)))
            .collect::<Result<Vec<_>>>()?;
        out.push((target, kappas));
    }
    Ok(out)
}

/// Columns `(seed, horizon, m, log_kappa_direct, log_kappa_estimate, reliable)`.
pub fn report_table(rows: &[(u64, ConditionReport)]) -> Table {
    let mut t = Table::new(&["seed", "horizon", "m", "log_kappa_direct", "log_kappa_estimate", "reliable"]);
    for (seed, r) in rows {
        t.push(vec![
            (*seed).into(),
            r.horizon.into(),
            r.m.into(),
            r.kappa_direct.into(),
            r.kappa_estimate.into(),
            (r.reliable() as usize).into(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CellKind;

    fn estimate(exps: &[f64]) -> LyapunovEstimate {
        LyapunovEstimate {
            exponents: exps.to_vec(),
            t_sim: 1,
            t_ons: 1,
        }
    }

    #[test]
    fn conversions_are_exact_for_doubles() {
        for v in [1.0, -0.375, 1e-300, 6.02e23, -7.0 / 3.0] {
            assert_eq!(to_f64(&BigFloat::from_f64(v, 256)), v);
            assert!((ln_abs(&BigFloat::from_f64(v, 256)).unwrap() - v.abs().ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_contraction_product_is_exact() {
        let spec = ArchitectureSpec::new(CellKind::Linear, 3, 1);
        let mut params = ModelParams::zeros(&spec);
        params.w_rec = DenseMatrix::identity(3).scaled(0.5);
        let t = long_term_jacobian_ext(&spec, &params, InputDistribution::Gaussian, 2, 12, 1, 256).unwrap();
        let d = t.to_dense();
        assert_eq!(d, DenseMatrix::identity(3).scaled(0.5f64.powi(10)));
    }

    #[test]
    fn identity_and_diagonal_conditions() {
        let id = ExtPrecMatrix::identity(3, 256);
        assert_eq!(condition_direct(3, &id, &DenseMatrix::identity(3)).unwrap(), 0.0);
        let t = ExtPrecMatrix::from_dense(&DenseMatrix::from_diag(&[4.0, 1.0]), 256);
        let k = condition_direct(2, &t, &DenseMatrix::identity(2)).unwrap();
        assert!((k - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn estimate_and_budget_arithmetic() {
        assert_eq!(condition_estimate(&estimate(&[0.2, 0.2]), 2, 500).unwrap(), 0.0);
        let e = condition_estimate(&estimate(&[0.0, -0.1]), 2, 100).unwrap();
        assert!((e - 10.0).abs() < 1e-12);
        assert!(condition_estimate(&estimate(&[0.0]), 2, 100).is_err());
        assert_eq!(usable_dimensions(&estimate(&[-0.1; 4]), 100, 1.0), 4);
        assert_eq!(usable_dimensions(&estimate(&[0.0, -0.1, -0.2]), 100, 0.0), 1);
        assert_eq!(usable_dimensions(&estimate(&[0.0, -0.01, -0.2]), 100, 1.0), 2);
    }

    #[test]
    fn low_precision_is_rejected() {
        let spec = ArchitectureSpec::new(CellKind::Linear, 2, 1);
        let params = ModelParams::zeros(&spec);
        assert!(matches!(
            long_term_jacobian_ext(&spec, &params, InputDistribution::Gaussian, 0, 3, 1, 64),
            Err(Error::Precision(_))
        ));
        assert!(long_term_jacobian_ext(&spec, &params, InputDistribution::Gaussian, 3, 3, 1, 256).is_err());
    }

    #[test]
    fn ext_svd_matches_double_svd_on_moderate_matrix() {
        let mut rng = seeded(11);
        let a = DenseMatrix::from_fn(6, 4, |_, _| standard_normal(&mut rng));
        let sv = crate::linalg::singular_values(&a).unwrap();
        let ls = ln_singular_values_ext(&ExtPrecMatrix::from_dense(&a, 256)).unwrap();
        for (s, l) in sv.iter().zip(&ls) {
            assert!((s.ln() - l).abs() < 1e-10);
        }
    }
}
