//! Recurrent cells: forward step, one-step Jacobian, and their adjoints.
//!
//! States are carried as `state_dim x b` matrices, one column per sample.
//! For the LSTM the first `N` rows hold `h` and the last `N` rows hold `c`.
//!
//! Vanilla cells follow `h' = W φ(h) + V x`. The LSTM uses gate order
//! `f, o, i, c` for the stacked blocks of `w_rec` (`4N x N`) and `v_in`
//! (`4N x input_dim`), with one scalar bias per gate:
//!
//! ```text
//! f = σ(U_f h + W_f x + b_f)      c' = f c + i g
//! o = σ(U_o h + W_o x + b_o)      h' = o tanh(c')
//! i = σ(U_i h + W_i x + b_i)
//! g = tanh(U_c h + W_c x + b_c)
//! ```

use std::fmt::Write as _;

use rand::Rng;

use crate::linalg::{gemm, DenseMatrix, Op};
use crate::rng::{derive_seed, gaussian_matrix, random_orthonormal, seeded, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    VanillaTanh,
    VanillaRelu,
    Linear,
    Lstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::VanillaTanh => "vanilla_tanh",
            CellKind::VanillaRelu => "vanilla_relu",
            CellKind::Linear => "linear",
            CellKind::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla_tanh" => Some(CellKind::VanillaTanh),
            "vanilla_relu" => Some(CellKind::VanillaRelu),
            "linear" => Some(CellKind::Linear),
            "lstm" => Some(CellKind::Lstm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub kind: CellKind,
    pub n_units: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ArchitectureSpec {
    pub fn new(kind: CellKind, n_units: usize, input_dim: usize) -> Self {
        Self {
            kind,
            n_units,
            input_dim,
            output_dim: 1,
        }
    }

    pub fn with_output_dim(mut self, output_dim: usize) -> Self {
        self.output_dim = output_dim;
        self
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            CellKind::Lstm => 2 * self.n_units,
            _ => self.n_units,
        }
    }

    fn gate_rows(&self) -> usize {
        match self.kind {
            CellKind::Lstm => 4 * self.n_units,
            _ => self.n_units,
        }
    }
}

/// Parameter bundle. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_rec: DenseMatrix,
    pub v_in: DenseMatrix,
    /// Empty for vanilla cells, `[b_f, b_o, b_i, b_c]` for the LSTM.
    pub biases: Vec<f64>,
    pub w_out: DenseMatrix,
    pub b_out: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(spec: &ArchitectureSpec) -> Self {
        let n = spec.n_units;
        Self {
            w_rec: DenseMatrix::zeros(spec.gate_rows(), n),
            v_in: DenseMatrix::zeros(spec.gate_rows(), spec.input_dim),
            biases: if spec.kind == CellKind::Lstm { vec![0.0; 4] } else { Vec::new() },
            w_out: DenseMatrix::zeros(spec.output_dim, n),
            b_out: vec![0.0; spec.output_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_rec: DenseMatrix::zeros(self.w_rec.rows(), self.w_rec.cols()),
            v_in: DenseMatrix::zeros(self.v_in.rows(), self.v_in.cols()),
            biases: vec![0.0; self.biases.len()],
            w_out: DenseMatrix::zeros(self.w_out.rows(), self.w_out.cols()),
            b_out: vec![0.0; self.b_out.len()],
        }
    }

    pub fn validate(&self, spec: &ArchitectureSpec) -> Result<()> {
        let z = ModelParams::zeros(spec);
        let shapes_ok = self.w_rec.shape() == z.w_rec.shape()
            && self.v_in.shape() == z.v_in.shape()
            && self.biases.len() == z.biases.len()
            && self.w_out.shape() == z.w_out.shape()
            && self.b_out.len() == z.b_out.len();
        if !shapes_ok {
            return Err(Error::Dimension(format!(
                "parameters do not match a {} cell with N = {}, input_dim = {}, output_dim = {}",
                spec.kind.name(),
                spec.n_units,
                spec.input_dim,
                spec.output_dim
            )));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Flat views in a fixed order: `w_rec, v_in, biases, w_out, b_out`.
    pub fn tensors(&self) -> [&[f64]; 5] {
        [self.w_rec.data(), self.v_in.data(), &self.biases, self.w_out.data(), &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w_rec.data_mut(),
            self.v_in.data_mut(),
            &mut self.biases,
            self.w_out.data_mut(),
            &mut self.b_out,
        ]
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn zero_readout(&mut self) {
        self.w_out.fill(0.0);
        self.b_out.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Text serialization: a header of `key = value` lines followed by one
    /// `[name rows cols]` section per tensor with row-major values.
    pub fn to_text(&self, spec: &ArchitectureSpec) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind = {}", spec.kind.name());
        let _ = writeln!(s, "n_units = {}", spec.n_units);
        let _ = writeln!(s, "input_dim = {}", spec.input_dim);
        let _ = writeln!(s, "output_dim = {}", spec.output_dim);
        let section = |s: &mut String, name: &str, rows: usize, cols: usize, data: &[f64]| {
            let _ = writeln!(s, "[{name} {rows} {cols}]");
            for r in 0..rows {
                let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|x| format!("{x:?}")).collect();
                let _ = writeln!(s, "{}", line.join(" "));
            }
        };
        section(&mut s, "w_rec", self.w_rec.rows(), self.w_rec.cols(), self.w_rec.data());
        section(&mut s, "v_in", self.v_in.rows(), self.v_in.cols(), self.v_in.data());
        section(&mut s, "biases", 1, self.biases.len(), &self.biases);
        section(&mut s, "w_out", self.w_out.rows(), self.w_out.cols(), self.w_out.data());
        section(&mut s, "b_out", 1, self.b_out.len(), &self.b_out);
        s
    }

    pub fn from_text(text: &str) -> Result<(ArchitectureSpec, ModelParams)> {
        let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
        let mut header = std::collections::BTreeMap::new();
        let mut sections: Vec<(String, usize, usize, Vec<f64>, usize)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let parts: Vec<&str> = inner.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(parse_err(line_no, format!("bad section header `{line}`")));
                }
                let rows = parts[1]
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad row count `{}`", parts[1])))?;
                let cols = parts[2]
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad column count `{}`", parts[2])))?;
                sections.push((parts[0].to_string(), rows, cols, Vec::new(), line_no));
            } else if let Some(sec) = sections.last_mut() {
                for tok in line.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|_| parse_err(line_no, format!("bad number `{tok}`")))?;
                    sec.3.push(v);
                }
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| parse_err(line_no, format!("expected `key = value`, got `{line}`")))?;
                header.insert(k.trim().to_string(), (v.trim().to_string(), line_no));
            }
        }
        let get = |key: &str| -> Result<(String, usize)> {
            header
                .get(key)
                .cloned()
                .ok_or_else(|| parse_err(0, format!("missing header key `{key}`")))
        };
        let (kind_s, kl) = get("kind")?;
        let kind = CellKind::parse(&kind_s).ok_or_else(|| parse_err(kl, format!("unknown kind `{kind_s}`")))?;
        let count = |key: &str| -> Result<usize> {
            let (v, l) = get(key)?;
            v.parse().map_err(|_| parse_err(l, format!("bad value for `{key}`")))
        };
        let spec = ArchitectureSpec {
            kind,
            n_units: count("n_units")?,
            input_dim: count("input_dim")?,
            output_dim: count("output_dim")?,
        };
        let mut params = ModelParams::zeros(&spec);
        let mut seen = [false; 5];
        for (name, rows, cols, data, l) in sections {
            if data.len() != rows * cols {
                return Err(parse_err(
                    l,
                    format!("section `{name}` holds {} values, expected {}", data.len(), rows * cols),
                ));
            }
            let slot = match name.as_str() {
                "w_rec" => 0,
                "v_in" => 1,
                "biases" => 2,
                "w_out" => 3,
                "b_out" => 4,
                _ => return Err(parse_err(l, format!("unknown section `{name}`"))),
            };
            let target = params.tensors_mut();
            let expected = target[slot].len();
            if data.len() != expected {
                return Err(parse_err(
                    l,
                    format!("section `{name}` has {} values, architecture needs {expected}", data.len()),
                ));
            }
            match slot {
                0 => params.w_rec = DenseMatrix::new(rows, cols, data)?,
                1 => params.v_in = DenseMatrix::new(rows, cols, data)?,
                2 => params.biases = data,
                3 => params.w_out = DenseMatrix::new(rows, cols, data)?,
                _ => params.b_out = data,
            }
            seen[slot] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(parse_err(0, "missing parameter section".into()));
        }
        params.validate(&spec)?;
        Ok((spec, params))
    }
}

/// Single-sample state.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub h: Vec<f64>,
    /// Cell state, LSTM only.
    pub c: Option<Vec<f64>>,
}

impl NetworkState {
    pub fn zeros(spec: &ArchitectureSpec) -> Self {
        Self {
            h: vec![0.0; spec.n_units],
            c: (spec.kind == CellKind::Lstm).then(|| vec![0.0; spec.n_units]),
        }
    }

    pub fn from_column(spec: &ArchitectureSpec, state: &DenseMatrix, col: usize) -> Self {
        let n = spec.n_units;
        let v = state.column(col);
        Self {
            h: v[..n].to_vec(),
            c: (spec.kind == CellKind::Lstm).then(|| v[n..2 * n].to_vec()),
        }
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        let mut v = self.h.clone();
        if let Some(c) = &self.c {
            v.extend_from_slice(c);
        }
        DenseMatrix::column_vector(&v)
    }
}

/// Values recorded by [`step_batch`] for the backward passes.
#[derive(Debug, Clone)]
pub struct StepCache {
    /// `h` part of the incoming state, `N x b`.
    pub h_prev: DenseMatrix,
    pub x: DenseMatrix,
    pub inner: CacheInner,
}

#[derive(Debug, Clone)]
pub enum CacheInner {
    Vanilla {
        act: DenseMatrix,
        dact: DenseMatrix,
    },
    Lstm {
        c_prev: DenseMatrix,
        f: DenseMatrix,
        o: DenseMatrix,
        i: DenseMatrix,
        g: DenseMatrix,
        tau: DenseMatrix,
    },
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_step_shapes(spec: &ArchitectureSpec, params: &ModelParams, state: &DenseMatrix, x: &DenseMatrix) -> Result<()> {
    if state.rows() != spec.state_dim() || x.rows() != spec.input_dim || state.cols() != x.cols() {
        return Err(Error::Dimension(format!(
            "step expects state {}xb and input {}xb, got {:?} and {:?}",
            spec.state_dim(),
            spec.input_dim,
            state.shape(),
            x.shape()
        )));
    }
    if params.w_rec.rows() != spec.gate_rows() || params.w_rec.cols() != spec.n_units {
        return Err(Error::Dimension(format!(
            "recurrent weights are {:?}, expected {}x{}",
            params.w_rec.shape(),
            spec.gate_rows(),
            spec.n_units
        )));
    }
    Ok(())
}

/// One step for a batch of states. Returns the next state and the cache.
pub fn step_batch(spec: &ArchitectureSpec, params: &ModelParams, state: &DenseMatrix, x: &DenseMatrix) -> Result<(DenseMatrix, StepCache)> {
    check_step_shapes(spec, params, state, x)?;
    let n = spec.n_units;
    let b = state.cols();
    match spec.kind {
        CellKind::VanillaTanh | CellKind::VanillaRelu | CellKind::Linear => {
            let mut act = state.clone();
            let mut dact = DenseMatrix::zeros(n, b);
            for (a, d) in act.data_mut().iter_mut().zip(dact.data_mut()) {
                let (y, dy) = match spec.kind {
                    CellKind::VanillaTanh => {
                        let t = a.tanh();
                        (t, 1.0 - t * t)
                    }
                    CellKind::VanillaRelu => {
                        if *a > 0.0 {
                            (*a, 1.0)
                        } else {
                            (0.0, 0.0)
                        }
                    }
                    _ => (*a, 1.0),
                };
                *a = y;
                *d = dy;
            }
            let mut next = DenseMatrix::zeros(n, b);
            gemm(1.0, &params.w_rec, Op::N, &act, Op::N, 0.0, &mut next)?;
            gemm(1.0, &params.v_in, Op::N, x, Op::N, 1.0, &mut next)?;
            let cache = StepCache {
                h_prev: state.clone(),
                x: x.clone(),
                inner: CacheInner::Vanilla { act, dact },
            };
            Ok((next, cache))
        }
        CellKind::Lstm => {
            let h = state.row_block(0, n);
            let c = state.row_block(n, 2 * n);
            let mut z = DenseMatrix::zeros(4 * n, b);
            gemm(1.0, &params.w_rec, Op::N, &h, Op::N, 0.0, &mut z)?;
            gemm(1.0, &params.v_in, Op::N, x, Op::N, 1.0, &mut z)?;
            let mut f = DenseMatrix::zeros(n, b);
            let mut o = DenseMatrix::zeros(n, b);
            let mut ig = DenseMatrix::zeros(n, b);
            let mut g = DenseMatrix::zeros(n, b);
            let mut tau = DenseMatrix::zeros(n, b);
            let mut next = DenseMatrix::zeros(2 * n, b);
            for r in 0..n {
                for s in 0..b {
                    let fv = sigmoid(z[(r, s)] + params.biases[0]);
                    let ov = sigmoid(z[(n + r, s)] + params.biases[1]);
                    let iv = sigmoid(z[(2 * n + r, s)] + params.biases[2]);
                    let gv = (z[(3 * n + r, s)] + params.biases[3]).tanh();
                    let cn = fv * c[(r, s)] + iv * gv;
                    let tv = cn.tanh();
                    f[(r, s)] = fv;
                    o[(r, s)] = ov;
                    ig[(r, s)] = iv;
                    g[(r, s)] = gv;
                    tau[(r, s)] = tv;
                    next[(r, s)] = ov * tv;
                    next[(n + r, s)] = cn;
                }
            }
            let cache = StepCache {
                h_prev: h,
                x: x.clone(),
                inner: CacheInner::Lstm {
                    c_prev: c,
                    f,
                    o,
                    i: ig,
                    g,
                    tau,
                },
            };
            Ok((next, cache))
        }
    }
}

/// Readout `ŷ = w_out h + b_out` for a batch of states (`h` rows only).
pub fn readout(spec: &ArchitectureSpec, params: &ModelParams, state: &DenseMatrix) -> Result<DenseMatrix> {
    let h = if spec.kind == CellKind::Lstm {
        state.row_block(0, spec.n_units)
    } else {
        state.clone()
    };
    let mut y = params.w_out.matmul(&h)?;
    for r in 0..y.rows() {
        let bias = params.b_out[r];
        y.row_mut(r).iter_mut().for_each(|v| *v += bias);
    }
    Ok(y)
}

/// Reverse step: accumulates parameter gradients into `grads` and returns
/// the adjoint of the incoming state, given the adjoint of the outgoing one.
pub fn step_backward(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    cache: &StepCache,
    next_bar: &DenseMatrix,
    grads: &mut ModelParams,
) -> Result<DenseMatrix> {
    let n = spec.n_units;
    let b = cache.x.cols();
    match &cache.inner {
        CacheInner::Vanilla { act, dact } => {
            gemm(1.0, next_bar, Op::N, act, Op::T, 1.0, &mut grads.w_rec)?;
            gemm(1.0, next_bar, Op::N, &cache.x, Op::T, 1.0, &mut grads.v_in)?;
            let mut h_bar = DenseMatrix::zeros(n, b);
            gemm(1.0, &params.w_rec, Op::T, next_bar, Op::N, 0.0, &mut h_bar)?;
            for (hb, d) in h_bar.data_mut().iter_mut().zip(dact.data()) {
                *hb *= d;
            }
            Ok(h_bar)
        }
        CacheInner::Lstm { c_prev, f, o, i, g, tau } => {
            let mut gate_bar = DenseMatrix::zeros(4 * n, b);
            let mut c_bar = DenseMatrix::zeros(n, b);
            for r in 0..n {
                for s in 0..b {
                    let (fv, ov, iv, gv, tv, cv) = (f[(r, s)], o[(r, s)], i[(r, s)], g[(r, s)], tau[(r, s)], c_prev[(r, s)]);
                    let hb = next_bar[(r, s)];
                    let o_bar = hb * tv;
                    let cn_bar = next_bar[(n + r, s)] + hb * ov * (1.0 - tv * tv);
                    let f_bar = cn_bar * cv;
                    let i_bar = cn_bar * gv;
                    let g_bar = cn_bar * iv;
                    c_bar[(r, s)] = cn_bar * fv;
                    gate_bar[(r, s)] = f_bar * fv * (1.0 - fv);
                    gate_bar[(n + r, s)] = o_bar * ov * (1.0 - ov);
                    gate_bar[(2 * n + r, s)] = i_bar * iv * (1.0 - iv);
                    gate_bar[(3 * n + r, s)] = g_bar * (1.0 - gv * gv);
                }
            }
            let h_bar = lstm_gate_tail(params, cache, &gate_bar, grads)?;
            let mut prev_bar = DenseMatrix::zeros(2 * n, b);
            prev_bar.data_mut()[..n * b].copy_from_slice(h_bar.data());
            prev_bar.data_mut()[n * b..].copy_from_slice(c_bar.data());
            Ok(prev_bar)
        }
    }
}

/// Shared LSTM tail: from gate pre-activation adjoints (`4N x b`) to
/// gradients of `U`, `W_x`, the biases, and the adjoint of `h`.
fn lstm_gate_tail(params: &ModelParams, cache: &StepCache, gate_bar: &DenseMatrix, grads: &mut ModelParams) -> Result<DenseMatrix> {
    let n = params.w_rec.cols();
    gemm(1.0, gate_bar, Op::N, &cache.h_prev, Op::T, 1.0, &mut grads.w_rec)?;
    gemm(1.0, gate_bar, Op::N, &cache.x, Op::T, 1.0, &mut grads.v_in)?;
    for gate in 0..4 {
        let s: f64 = gate_bar.data()[gate * n * gate_bar.cols()..(gate + 1) * n * gate_bar.cols()]
            .iter()
            .sum();
        grads.biases[gate] += s;
    }
    let mut h_bar = DenseMatrix::zeros(n, gate_bar.cols());
    gemm(1.0, &params.w_rec, Op::T, gate_bar, Op::N, 0.0, &mut h_bar)?;
    Ok(h_bar)
}

/// One-step Jacobian `∂state'/∂state` for sample `col` of a cached step.
pub fn jacobian_from_cache(spec: &ArchitectureSpec, params: &ModelParams, cache: &StepCache, col: usize) -> DenseMatrix {
    let n = spec.n_units;
    match &cache.inner {
        CacheInner::Vanilla { dact, .. } => {
            let mut d = params.w_rec.clone();
            for r in 0..n {
                let row = d.row_mut(r);
                for (j, v) in row.iter_mut().enumerate() {
                    *v *= dact[(j, col)];
                }
            }
            d
        }
        CacheInner::Lstm { .. } => {
            let co = LstmCoefficients::new(cache, col, n);
            let mut d = DenseMatrix::zeros(2 * n, 2 * n);
            let uf = params.w_rec.row_block(0, n);
            let uo = params.w_rec.row_block(n, 2 * n);
            let ui = params.w_rec.row_block(2 * n, 3 * n);
            let uc = params.w_rec.row_block(3 * n, 4 * n);
            for r in 0..n {
                for j in 0..n {
                    let jch = co.alpha_f[r] * uf[(r, j)] + co.alpha_i[r] * ui[(r, j)] + co.alpha_g[r] * uc[(r, j)];
                    d[(n + r, j)] = jch;
                    d[(r, j)] = co.beta_o[r] * uo[(r, j)] + co.kappa[r] * jch;
                }
                d[(r, n + r)] = co.kappa[r] * co.f[r];
                d[(n + r, n + r)] = co.f[r];
            }
            d
        }
    }
}

/// Per-unit coefficients of the LSTM Jacobian for one sample.
struct LstmCoefficients {
    f: Vec<f64>,
    o: Vec<f64>,
    i: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
    tau: Vec<f64>,
    alpha_f: Vec<f64>,
    alpha_i: Vec<f64>,
    alpha_g: Vec<f64>,
    beta_o: Vec<f64>,
    kappa: Vec<f64>,
}

impl LstmCoefficients {
    fn new(cache: &StepCache, col: usize, n: usize) -> Self {
        let CacheInner::Lstm { c_prev, f, o, i, g, tau } = &cache.inner else {
            unreachable!("LSTM coefficients requested for a vanilla cache")
        };
        let pick = |m: &DenseMatrix| (0..n).map(|r| m[(r, col)]).collect::<Vec<_>>();
        let (f, o, i, g, c, tau) = (pick(f), pick(o), pick(i), pick(g), pick(c_prev), pick(tau));
        let alpha_f = (0..n).map(|r| c[r] * f[r] * (1.0 - f[r])).collect();
        let alpha_i = (0..n).map(|r| g[r] * i[r] * (1.0 - i[r])).collect();
        let alpha_g = (0..n).map(|r| i[r] * (1.0 - g[r] * g[r])).collect();
        let beta_o = (0..n).map(|r| tau[r] * o[r] * (1.0 - o[r])).collect();
        let kappa = (0..n).map(|r| o[r] * (1.0 - tau[r] * tau[r])).collect();
        Self {
            f,
            o,
            i,
            g,
            c,
            tau,
            alpha_f,
            alpha_i,
            alpha_g,
            beta_o,
            kappa,
        }
    }
}

/// Reverse rule for [`jacobian_from_cache`]: given `D̄`, accumulates the
/// parameter gradients and returns the adjoint of the incoming state of
/// sample `col` (as a `state_dim x 1` column).
pub fn jacobian_backward(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    cache: &StepCache,
    col: usize,
    d_bar: &DenseMatrix,
    grads: &mut ModelParams,
) -> Result<DenseMatrix> {
    let n = spec.n_units;
    match &cache.inner {
        CacheInner::Vanilla { act, dact } => {
            let mut h_bar = DenseMatrix::zeros(n, 1);
            for r in 0..n {
                let db = d_bar.row(r);
                let w = params.w_rec.row(r);
                let gw = grads.w_rec.row_mut(r);
                for j in 0..n {
                    gw[j] += db[j] * dact[(j, col)];
                    h_bar[(j, 0)] += db[j] * w[j];
                }
            }
            for j in 0..n {
                let second = match spec.kind {
                    CellKind::VanillaTanh => -2.0 * act[(j, col)] * dact[(j, col)],
                    _ => 0.0,
                };
                h_bar[(j, 0)] *= second;
            }
            Ok(h_bar)
        }
        CacheInner::Lstm { .. } => {
            let co = LstmCoefficients::new(cache, col, n);
            let uf = params.w_rec.row_block(0, n);
            let uo = params.w_rec.row_block(n, 2 * n);
            let ui = params.w_rec.row_block(2 * n, 3 * n);
            let uc = params.w_rec.row_block(3 * n, 4 * n);
            let mut gate_bar = DenseMatrix::zeros(4 * n, 1);
            let mut c_bar = DenseMatrix::zeros(n, 1);
            for r in 0..n {
                let mut beta_o_bar = 0.0;
                let mut kappa_bar = d_bar[(r, n + r)] * co.f[r];
                let (mut af_bar, mut ai_bar, mut ag_bar) = (0.0, 0.0, 0.0);
                for j in 0..n {
                    let a_hh = d_bar[(r, j)];
                    let jch = co.alpha_f[r] * uf[(r, j)] + co.alpha_i[r] * ui[(r, j)] + co.alpha_g[r] * uc[(r, j)];
                    beta_o_bar += a_hh * uo[(r, j)];
                    kappa_bar += a_hh * jch;
                    let a_ch = d_bar[(n + r, j)] + co.kappa[r] * a_hh;
                    af_bar += a_ch * uf[(r, j)];
                    ai_bar += a_ch * ui[(r, j)];
                    ag_bar += a_ch * uc[(r, j)];
                    grads.w_rec[(n + r, j)] += co.beta_o[r] * a_hh;
                    grads.w_rec[(r, j)] += co.alpha_f[r] * a_ch;
                    grads.w_rec[(2 * n + r, j)] += co.alpha_i[r] * a_ch;
                    grads.w_rec[(3 * n + r, j)] += co.alpha_g[r] * a_ch;
                }
                let (f, o, i, g, c, tau) = (co.f[r], co.o[r], co.i[r], co.g[r], co.c[r], co.tau[r]);
                let mut f_bar = d_bar[(n + r, n + r)] + d_bar[(r, n + r)] * co.kappa[r] + af_bar * c * (1.0 - 2.0 * f);
                let mut cp_bar = af_bar * f * (1.0 - f);
                let mut i_bar = ai_bar * g * (1.0 - 2.0 * i) + ag_bar * (1.0 - g * g);
                let mut g_bar = ai_bar * i * (1.0 - i) - 2.0 * ag_bar * i * g;
                let o_bar = beta_o_bar * tau * (1.0 - 2.0 * o) + kappa_bar * (1.0 - tau * tau);
                let tau_bar = beta_o_bar * o * (1.0 - o) - 2.0 * kappa_bar * o * tau;
                // tau = tanh(c'), c' = f c + i g
                let cn_bar = tau_bar * (1.0 - tau * tau);
                f_bar += cn_bar * c;
                cp_bar += cn_bar * f;
                i_bar += cn_bar * g;
                g_bar += cn_bar * i;
                c_bar[(r, 0)] = cp_bar;
                gate_bar[(r, 0)] = f_bar * f * (1.0 - f);
                gate_bar[(n + r, 0)] = o_bar * o * (1.0 - o);
                gate_bar[(2 * n + r, 0)] = i_bar * i * (1.0 - i);
                gate_bar[(3 * n + r, 0)] = g_bar * (1.0 - g * g);
            }
            let col_cache = single_column(cache, col);
            let h_bar = lstm_gate_tail(params, &col_cache, &gate_bar, grads)?;
            let mut out = DenseMatrix::zeros(2 * n, 1);
            out.data_mut()[..n].copy_from_slice(h_bar.data());
            out.data_mut()[n..].copy_from_slice(c_bar.data());
            Ok(out)
        }
    }
}

fn single_column(cache: &StepCache, col: usize) -> StepCache {
    if cache.x.cols() == 1 {
        return cache.clone();
    }
    let pick = |m: &DenseMatrix| DenseMatrix::column_vector(&m.column(col));
    StepCache {
        h_prev: pick(&cache.h_prev),
        x: pick(&cache.x),
        inner: match &cache.inner {
            CacheInner::Vanilla { act, dact } => CacheInner::Vanilla {
                act: pick(act),
                dact: pick(dact),
            },
            CacheInner::Lstm { c_prev, f, o, i, g, tau } => CacheInner::Lstm {
                c_prev: pick(c_prev),
                f: pick(f),
                o: pick(o),
                i: pick(i),
                g: pick(g),
                tau: pick(tau),
            },
        },
    }
}

/// Single-sample step.
pub fn step(spec: &ArchitectureSpec, params: &ModelParams, state: &NetworkState, input: &[f64]) -> Result<NetworkState> {
    let (next, _) = step_batch(spec, params, &state.to_matrix(), &DenseMatrix::column_vector(input))?;
    Ok(NetworkState::from_column(spec, &next, 0))
}

/// Single-sample one-step Jacobian at `(state, input)`.
pub fn jacobian(spec: &ArchitectureSpec, params: &ModelParams, state: &NetworkState, input: &[f64]) -> Result<DenseMatrix> {
    let (_, cache) = step_batch(spec, params, &state.to_matrix(), &DenseMatrix::column_vector(input))?;
    Ok(jacobian_from_cache(spec, params, &cache, 0))
}

/// Gaussian initialization.
///
/// Vanilla cells: `W ~ N(0, g²/N)` (mean `-0.1` for ReLU), `V ~ N(0, 1)`.
/// LSTM: `U_x ~ N(0, g_xh²/N)` with `g_fh = 0` and the other recurrent
/// gains `g · Unif(0, 1)`; input blocks `W_x ~ N(0, g_xx²/input_dim)` with
/// `g_xx ~ Unif(0, 1)`; `b_f ~ Unif(0, 1)` and the other biases zero.
/// The readout starts at zero.
pub fn init_gaussian(spec: &ArchitectureSpec, gain: f64, seed: u64) -> Result<ModelParams> {
    init_gaussian_with_relu_mean(spec, gain, RELU_MEAN, seed)
}

/// Default mean of the ReLU recurrent weights.
pub const RELU_MEAN: f64 = -0.1;

/// [`init_gaussian`] with an explicit mean for the ReLU recurrent weights.
/// Other cell kinds ignore `relu_mean`.
pub fn init_gaussian_with_relu_mean(spec: &ArchitectureSpec, gain: f64, relu_mean: f64, seed: u64) -> Result<ModelParams> {
    if !relu_mean.is_finite() {
        return Err(Error::Config(format!("relu mean must be finite, got {relu_mean}")));
    }
    if !(gain >= 0.0) || !gain.is_finite() {
        return Err(Error::Config(format!("gain must be finite and non-negative, got {gain}")));
    }
    let n = spec.n_units;
    let mut rng = seeded(derive_seed(seed, stream::INIT, 0));
    let mut params = ModelParams::zeros(spec);
    let sd = gain / (n as f64).sqrt();
    match spec.kind {
        CellKind::VanillaTanh | CellKind::Linear => {
            params.w_rec = gaussian_matrix(n, n, 0.0, sd, &mut rng);
            params.v_in = gaussian_matrix(n, spec.input_dim, 0.0, 1.0, &mut rng);
        }
        CellKind::VanillaRelu => {
            params.w_rec = gaussian_matrix(n, n, relu_mean, sd, &mut rng);
            params.v_in = gaussian_matrix(n, spec.input_dim, 0.0, 1.0, &mut rng);
        }
        CellKind::Lstm => {
            let mut gains_rng = seeded(derive_seed(seed, stream::GAIN, 0));
            // gate order f, o, i, c
            let rec_gain = [
                0.0,
                gain * gains_rng.random::<f64>(),
                gain * gains_rng.random::<f64>(),
                gain * gains_rng.random::<f64>(),
            ];
            let in_gain: Vec<f64> = (0..4).map(|_| gains_rng.random::<f64>()).collect();
            let b_f = gains_rng.random::<f64>();
            let in_sd = 1.0 / (spec.input_dim.max(1) as f64).sqrt();
            for gate in 0..4 {
                let u = gaussian_matrix(n, n, 0.0, rec_gain[gate] / (n as f64).sqrt(), &mut rng);
                let w = gaussian_matrix(n, spec.input_dim, 0.0, in_gain[gate] * in_sd, &mut rng);
                for r in 0..n {
                    params.w_rec.row_mut(gate * n + r).copy_from_slice(u.row(r));
                    params.v_in.row_mut(gate * n + r).copy_from_slice(w.row(r));
                }
            }
            params.biases = vec![b_f, 0.0, 0.0, 0.0];
        }
    }
    Ok(params)
}

/// Orthogonal recurrent weights (positive-diagonal Q of a Gaussian matrix),
/// `V ~ N(0, 1)`, zero readout. Vanilla and linear cells only.
pub fn init_orthogonal(spec: &ArchitectureSpec, seed: u64) -> Result<ModelParams> {
    if spec.kind == CellKind::Lstm {
        return Err(Error::Unsupported("orthogonal initialization"));
    }
    let n = spec.n_units;
    let mut rng = seeded(derive_seed(seed, stream::INIT, 1));
    let mut params = ModelParams::zeros(spec);
    params.w_rec = random_orthonormal(n, n, &mut rng)?;
    params.v_in = gaussian_matrix(n, spec.input_dim, 0.0, 1.0, &mut rng);
    Ok(params)
}
