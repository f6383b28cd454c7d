//! Named experiment presets shared by the command line and the test suites.
//!
//! A preset is a parameter map with typed defaults plus a per-seed runner
//! producing named tables. Every table starts with a `seed` column so
//! per-seed outputs concatenate into one file per table name.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use crate::conditioning::{condition_sweep, usable_dimensions, DEFAULT_PRECISION};
use crate::flossing::{floss, BasisInit, FlossRecord, FlossingConfig};
use crate::lyapunov::{convergence_trace, lyapunov_spectrum, LyapunovConfig, LyapunovEstimate};
use crate::models::{init_gaussian, init_gaussian_with_relu_mean, init_orthogonal, ArchitectureSpec, CellKind, ModelParams};
use crate::rng::{derive_seed, random_orthonormal, seeded, InputDistribution};
use crate::table::{Cell, Table};
use crate::tasks::{TaskKind, TaskSpec};
use crate::train::{train_from, Diagnostics, TrainConfig, TrainState};
use crate::{Error, Result};

/// Seed-stream tags private to the presets.
mod tag {
    pub const GAIN_DRAW: u64 = 101;
    pub const MEASURE: u64 = 102;
    pub const FLOSS_RUN: u64 = 103;
    pub const PROBE_BASIS: u64 = 104;
}

/// A typed parameter value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    IntList(Vec<i64>),
    FloatList(Vec<f64>),
    TextList(Vec<String>),
}

fn render_float(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E', 'n', 'i']) {
        s
    } else {
        format!("{s}.0")
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn list<T>(f: &mut fmt::Formatter<'_>, items: &[T], one: impl Fn(&T) -> String) -> fmt::Result {
            let parts: Vec<String> = items.iter().map(one).collect();
            write!(f, "[{}]", parts.join(", "))
        }
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{}", render_float(*x)),
            Value::Text(s) => write!(f, "{s:?}"),
            Value::IntList(v) => list(f, v, |i| i.to_string()),
            Value::FloatList(v) => list(f, v, |x| render_float(*x)),
            Value::TextList(v) => list(f, v, |s| format!("{s:?}")),
        }
    }
}

impl Value {
    fn type_name(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Float(_) => "float",
            Value::Text(_) => "string",
            Value::IntList(_) => "integer list",
            Value::FloatList(_) => "float list",
            Value::TextList(_) => "string list",
        }
    }

    /// Converts `self` to the type of `like`, widening integers to floats.
    fn coerce_to(self, like: &Value) -> Option<Value> {
        use Value::*;
        Some(match (like, self) {
            (Bool(_), v @ Bool(_)) | (Int(_), v @ Int(_)) | (Float(_), v @ Float(_)) | (Text(_), v @ Text(_)) => v,
            (Float(_), Int(i)) => Float(i as f64),
            (IntList(_), v @ IntList(_)) | (FloatList(_), v @ FloatList(_)) | (TextList(_), v @ TextList(_)) => v,
            (FloatList(_), IntList(v)) => FloatList(v.into_iter().map(|i| i as f64).collect()),
            (IntList(_), FloatList(v)) if v.is_empty() => IntList(Vec::new()),
            (TextList(_), IntList(v)) if v.is_empty() => TextList(Vec::new()),
            (FloatList(_), TextList(v)) if v.is_empty() => FloatList(Vec::new()),
            _ => return None,
        })
    }
}

/// Ordered parameter map; only keys present in a preset's defaults can be
/// set.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: BTreeMap<String, Value>,
}

impl Params {
    fn from_pairs(pairs: Vec<(&str, Value)>) -> Self {
        Self {
            entries: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    /// Replaces an existing entry. Unknown keys and incompatible types are
    /// errors.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let slot = self
            .entries
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let given = value.type_name();
        *slot = value
            .coerce_to(slot)
            .ok_or_else(|| Error::Config(format!("key `{key}` expects a {}, got a {given}", slot.type_name())))?;
        Ok(())
    }

    /// One `key = value` line per entry in key order.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn missing(key: &str) -> Error {
        Error::Config(format!("missing key `{key}`"))
    }

    fn wrong(key: &str, want: &str) -> Error {
        Error::Config(format!("key `{key}` is not a {want}"))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        match self.get(key).ok_or_else(|| Self::missing(key))? {
            Value::Float(x) => Ok(*x),
            Value::Int(i) => Ok(*i as f64),
            _ => Err(Self::wrong(key, "number")),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        match self.get(key).ok_or_else(|| Self::missing(key))? {
            Value::Int(i) if *i >= 0 => Ok(*i as usize),
            _ => Err(Self::wrong(key, "non-negative integer")),
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key).ok_or_else(|| Self::missing(key))? {
            Value::Bool(b) => Ok(*b),
            _ => Err(Self::wrong(key, "boolean")),
        }
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        match self.get(key).ok_or_else(|| Self::missing(key))? {
            Value::Text(s) => Ok(s),
            _ => Err(Self::wrong(key, "string")),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        match self.get(key).ok_or_else(|| Self::missing(key))? {
            Value::FloatList(v) => Ok(v.clone()),
            Value::IntList(v) => Ok(v.iter().map(|&i| i as f64).collect()),
            _ => Err(Self::wrong(key, "float list")),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        match self.get(key).ok_or_else(|| Self::missing(key))? {
            Value::IntList(v) if v.iter().all(|&i| i >= 0) => Ok(v.iter().map(|&i| i as usize).collect()),
            _ => Err(Self::wrong(key, "list of non-negative integers")),
        }
    }

    pub fn text_list(&self, key: &str) -> Result<Vec<String>> {
        match self.get(key).ok_or_else(|| Self::missing(key))? {
            Value::TextList(v) => Ok(v.clone()),
            _ => Err(Self::wrong(key, "string list")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    Fig1Targets,
    Fig1Spectrum,
    Fig2Condition,
    Fig3Prefloss,
    Fig4During,
    Fig5Ksweep,
    FigS1LstmRelu,
    FigSOrthogonal,
    ConvergenceTrace,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::Fig1Targets,
        Preset::Fig1Spectrum,
        Preset::Fig2Condition,
        Preset::Fig3Prefloss,
        Preset::Fig4During,
        Preset::Fig5Ksweep,
        Preset::FigS1LstmRelu,
        Preset::FigSOrthogonal,
        Preset::ConvergenceTrace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig1Targets => "fig1_targets",
            Preset::Fig1Spectrum => "fig1_spectrum",
            Preset::Fig2Condition => "fig2_condition",
            Preset::Fig3Prefloss => "fig3_prefloss",
            Preset::Fig4During => "fig4_during",
            Preset::Fig5Ksweep => "fig5_ksweep",
            Preset::FigS1LstmRelu => "figS1_lstm_relu",
            Preset::FigSOrthogonal => "figS_orthogonal",
            Preset::ConvergenceTrace => "convergence_trace",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn summary(self) -> &'static str {
        match self {
            Preset::Fig1Targets => "drive the first exponent of random tanh networks to fixed targets",
            Preset::Fig1Spectrum => "full spectra after flossing k exponents to zero",
            Preset::Fig2Condition => "long-term Jacobian condition numbers: extended-precision products vs exponent estimate",
            Preset::Fig3Prefloss => "delayed copy training with and without flossing before training",
            Preset::Fig4During => "binary temporal XOR training with flossing before and during training",
            Preset::Fig5Ksweep => "final accuracy as a function of delay and number of flossed exponents",
            Preset::FigS1LstmRelu => "first-exponent flossing for LSTM and ReLU networks",
            Preset::FigSOrthogonal => "the temporal XOR comparison with orthogonal initialization",
            Preset::ConvergenceTrace => "running exponent estimates at log-spaced times",
        }
    }

    pub fn default_seeds(self) -> Vec<u64> {
        match self {
            Preset::Fig1Targets | Preset::Fig1Spectrum | Preset::FigS1LstmRelu | Preset::ConvergenceTrace => (0..10).collect(),
            Preset::Fig4During | Preset::FigSOrthogonal => (0..10).collect(),
            _ => (0..5).collect(),
        }
    }

    /// Table names written by [`run_seed`].
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Preset::Fig1Targets => &["fig1_targets", "fig1_targets_final"],
            Preset::Fig1Spectrum => &["fig1_spectrum", "fig1_spectrum_loss"],
            Preset::Fig2Condition => &["fig2_condition", "fig2_usable", "fig2_spectrum"],
            Preset::Fig3Prefloss => &["fig3_prefloss_curves", "fig3_prefloss_floss", "fig3_prefloss_final"],
            Preset::Fig4During => &["fig4_during_curves", "fig4_during_floss", "fig4_during_final"],
            Preset::Fig5Ksweep => &["fig5_ksweep_final"],
            Preset::FigS1LstmRelu => &["figS1_lstm_relu", "figS1_lstm_relu_final"],
            Preset::FigSOrthogonal => &["figS_orthogonal_curves", "figS_orthogonal_floss", "figS_orthogonal_final"],
            Preset::ConvergenceTrace => &["convergence_trace"],
        }
    }

    pub fn defaults(self) -> Params {
        use Value::*;
        let floss_common = |t_floss: i64, eta: f64, transient: i64| {
            vec![
                ("t_floss", Int(t_floss)),
                ("t_ons", Int(1)),
                ("floss_eta", Float(eta)),
                ("floss_transient", Int(transient)),
                ("floss_basis", Text("per_epoch".into())),
            ]
        };
        let training = |task: &str, delay: i64, conditions: &[&str], diagnostics: bool| {
            let mut v = vec![
                ("task", Text(task.into())),
                ("n_units", Int(80)),
                ("gain", Float(1.0)),
                ("delay", Int(delay)),
                ("seq_len", Int(300)),
                ("batch", Int(16)),
                ("epochs", Int(10_000)),
                ("eta", Float(1e-3)),
                ("eval_every", Int(100)),
                ("test_batch", Int(256)),
                ("conditions", TextList(conditions.iter().map(|s| s.to_string()).collect())),
                ("floss_k", Int(75)),
                ("prefloss_epochs", Int(500)),
                ("init", Text("gaussian".into())),
                ("diagnostics", Bool(diagnostics)),
                ("checkpoint_every", Int(500)),
            ];
            v.extend(floss_common(100, 1e-3, 0));
            v
        };
        let pairs = match self {
            Preset::Fig1Targets => {
                let mut v = vec![
                    ("n_units", Int(32)),
                    ("gain_min", Float(0.0)),
                    ("gain_max", Float(1.0)),
                    ("targets", FloatList(vec![-1.0, -0.5, 0.0])),
                    ("floss_epochs", Int(100)),
                    ("measure_t_sim", Int(2000)),
                    ("measure_transient", Int(500)),
                ];
                v.extend(floss_common(100, 5e-3, 0));
                v
            }
            Preset::Fig1Spectrum => {
                let mut v = vec![
                    ("n_units", Int(32)),
                    ("gain_min", Float(0.0)),
                    ("gain_max", Float(1.0)),
                    ("ks", IntList(vec![1, 16, 32])),
                    ("floss_epochs", Int(3000)),
                    ("measure_t_sim", Int(2000)),
                    ("measure_transient", Int(500)),
                ];
                v.extend(floss_common(100, 2e-3, 100));
                v
            }
            Preset::Fig2Condition => {
                let mut v = vec![
                    ("n_units", Int(40)),
                    ("gain", Float(1.0)),
                    ("input", Text("bernoulli".into())),
                    ("ks", IntList(vec![15])),
                    ("floss_epochs", Int(500)),
                    ("horizons", IntList(vec![100, 200, 300, 400, 500])),
                    ("m_dims", IntList((1..=20).collect())),
                    ("m_check", Int(4)),
                    ("tau", Int(500)),
                    ("lyap_t_sim", Int(10_000)),
                    ("precision", Int(DEFAULT_PRECISION as i64)),
                    ("precision_check", Bool(true)),
                    ("log_kappa_budget", Float(1e5f64.ln())),
                ];
                v.extend(floss_common(100, 5e-3, 0));
                v
            }
            Preset::Fig3Prefloss => training("delayed_copy", 40, &["none", "prefloss"], false),
            Preset::Fig4During | Preset::FigSOrthogonal => {
                let mut v = training("temporal_xor_binary", 70, &["none", "prefloss", "during"], true);
                v.push(("protocol", Text("five_point".into())));
                v.push(("episode_epochs", Int(100)));
                if self == Preset::FigSOrthogonal {
                    v.retain(|(k, _)| *k != "init" && *k != "gain");
                    v.push(("init", Text("orthogonal".into())));
                    v.push(("gain", Float(1.0)));
                }
                v
            }
            Preset::Fig5Ksweep => {
                let mut v = training("temporal_xor_binary", 0, &["during"], false);
                v.retain(|(k, _)| !matches!(*k, "delay" | "floss_k" | "conditions" | "diagnostics"));
                v.push(("delays", IntList(vec![20, 40, 60, 70])));
                v.push(("ks", IntList(vec![0, 1, 5, 15, 40, 75])));
                v.push(("mode", Text("during".into())));
                v.push(("protocol", Text("five_point".into())));
                v.push(("episode_epochs", Int(100)));
                v
            }
            Preset::FigS1LstmRelu => {
                let mut v = vec![
                    ("kinds", TextList(vec!["lstm".into(), "vanilla_relu".into()])),
                    ("n_units", Int(32)),
                    ("relu_mean", Float(0.0)),
                    ("gain_min", Float(0.0)),
                    ("gain_max", Float(1.0)),
                    ("target", Float(0.0)),
                    ("floss_epochs", Int(100)),
                    ("measure_t_sim", Int(2000)),
                    ("measure_transient", Int(500)),
                ];
                v.extend(floss_common(100, 5e-3, 0));
                v
            }
            Preset::ConvergenceTrace => vec![
                ("kind", Text("vanilla_tanh".into())),
                ("n_units", Int(80)),
                ("gain", Float(1.0)),
                ("input", Text("gaussian".into())),
                ("k", Int(10)),
                ("t_sim", Int(10_000)),
                ("t_ons", Int(1)),
                ("t_transient", Int(500)),
                ("points", Int(30)),
            ],
        };
        Params::from_pairs(pairs)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where long training runs keep resumable checkpoints.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub checkpoint_dir: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<CellKind> {
    CellKind::parse(s).ok_or_else(|| Error::Config(format!("unknown cell kind `{s}`")))
}

fn parse_input(s: &str) -> Result<InputDistribution> {
    InputDistribution::parse(s).ok_or_else(|| Error::Config(format!("unknown input distribution `{s}`")))
}

fn parse_task(s: &str) -> Result<TaskKind> {
    TaskKind::parse(s).ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
}

/// Gain drawn uniformly from `[lo, hi)` for realization `seed`.
pub fn realization_gain(seed: u64, lo: f64, hi: f64) -> f64 {
    use rand::Rng;
    let u: f64 = seeded(derive_seed(seed, tag::GAIN_DRAW, 0)).random();
    lo + (hi - lo) * u
}

fn floss_config(p: &Params, k: usize, epochs: usize, input: InputDistribution) -> Result<FlossingConfig> {
    Ok(FlossingConfig::new(k, p.usize("t_floss")?, p.usize("t_ons")?, epochs)
        .with_eta(p.f64("floss_eta")?)
        .with_input(input)
        .with_transient(p.usize("floss_transient")?)
        .with_basis_init(parse_basis(p.text("floss_basis")?)?))
}

fn parse_basis(s: &str) -> Result<BasisInit> {
    match s {
        "per_epoch" => Ok(BasisInit::PerEpoch),
        "persistent" => Ok(BasisInit::Persistent),
        _ => Err(Error::Config(format!(
            "unknown flossing basis `{s}` (expected per_epoch or persistent)"
        ))),
    }
}

fn measure(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    p: &Params,
    k: usize,
    input: InputDistribution,
    seed: u64,
) -> Result<LyapunovEstimate> {
    let cfg = LyapunovConfig::new(k, p.usize("measure_t_sim")?, p.usize("t_ons")?)
        .with_transient(p.usize("measure_transient")?)
        .with_input(input);
    lyapunov_spectrum(spec, params, &cfg, derive_seed(seed, tag::MEASURE, 0))
}

fn with_prefix(prefix: &[(&str, Cell)], t: Table) -> Table {
    let mut header: Vec<&str> = prefix.iter().map(|(h, _)| *h).collect();
    header.extend(t.header.iter().map(String::as_str));
    let mut out = Table::new(&header);
    for row in t.rows {
        let mut r: Vec<Cell> = prefix.iter().map(|(_, c)| c.clone()).collect();
        r.extend(row);
        out.push(r);
    }
    out
}

/// Validation findings; never runs model code.
pub fn findings(preset: Preset, p: &Params) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |r: Result<()>| {
        if let Err(e) = r {
            out.push(e.to_string());
        }
    };
    match preset {
        Preset::Fig1Targets | Preset::Fig1Spectrum | Preset::FigS1LstmRelu => check(check_flossing_preset(preset, p)),
        Preset::Fig2Condition => check(check_condition_preset(p)),
        Preset::Fig3Prefloss | Preset::Fig4During | Preset::FigSOrthogonal => {
            let conditions = p.text_list("conditions").unwrap_or_default();
            for c in &conditions {
                match training_setup(preset, p, c, p.usize("delay").unwrap_or(0), p.usize("floss_k").unwrap_or(0)) {
                    Ok((spec, cfg)) => out.extend(cfg.findings(&spec)),
                    Err(e) => out.push(e.to_string()),
                }
            }
        }
        Preset::Fig5Ksweep => {
            let delays = p.usize_list("delays");
            let ks = p.usize_list("ks");
            let mode = p.text("mode").map(str::to_string);
            match (delays, ks, mode) {
                (Ok(delays), Ok(ks), Ok(mode)) => {
                    for &d in &delays {
                        for &k in &ks {
                            let cond = if k == 0 { "none" } else { mode.as_str() };
                            match training_setup(preset, p, cond, d, k.max(1)) {
                                Ok((spec, cfg)) => out.extend(cfg.findings(&spec)),
                                Err(e) => out.push(e.to_string()),
                            }
                        }
                    }
                }
                (d, k, m) => {
                    for e in [d.err(), k.err(), m.err()].into_iter().flatten() {
                        out.push(e.to_string());
                    }
                }
            }
        }
        Preset::ConvergenceTrace => check(trace_config(p).and_then(|(spec, cfg)| cfg.validate(&spec))),
    }
    out.sort();
    out.dedup();
    out
}

fn check_flossing_preset(preset: Preset, p: &Params) -> Result<()> {
    let n = p.usize("n_units")?;
    let (lo, hi) = (p.f64("gain_min")?, p.f64("gain_max")?);
    if !(0.0 <= lo && lo <= hi) {
        return Err(Error::Config("gains need 0 <= gain_min <= gain_max".into()));
    }
    p.usize("measure_t_sim")?;
    p.usize("measure_transient")?;
    let epochs = p.usize("floss_epochs")?;
    let kinds: Vec<CellKind> = match preset {
        Preset::FigS1LstmRelu => p.text_list("kinds")?.iter().map(|s| parse_kind(s)).collect::<Result<_>>()?,
        _ => vec![CellKind::VanillaTanh],
    };
    let ks = match preset {
        Preset::Fig1Spectrum => p.usize_list("ks")?,
        _ => vec![1],
    };
    match preset {
        Preset::Fig1Targets => {
            p.f64_list("targets")?;
        }
        Preset::FigS1LstmRelu => {
            p.f64("target")?;
        }
        _ => {}
    }
    for kind in kinds {
        let spec = ArchitectureSpec::new(kind, n, 1);
        for &k in &ks {
            if k > spec.state_dim() {
                return Err(Error::Config(format!("k = {k} exceeds state dimension {}", spec.state_dim())));
            }
            floss_config(p, k, epochs, InputDistribution::Gaussian)?.validate(&spec)?;
        }
    }
    Ok(())
}

fn check_condition_preset(p: &Params) -> Result<()> {
    let n = p.usize("n_units")?;
    let spec = ArchitectureSpec::new(CellKind::VanillaTanh, n, 1);
    parse_input(p.text("input")?)?;
    for k in p.usize_list("ks")? {
        if k > n {
            return Err(Error::Config(format!("k = {k} exceeds state dimension {n}")));
        }
        floss_config(p, k, p.usize("floss_epochs")?, InputDistribution::Gaussian)?.validate(&spec)?;
    }
    let ms = p.usize_list("m_dims")?;
    let m_max = ms.iter().copied().max().unwrap_or(0);
    if ms.is_empty() || ms.contains(&0) || m_max > n {
        return Err(Error::Config(format!("m_dims must lie in 1..={n}")));
    }
    if !ms.contains(&p.usize("m_check")?) {
        return Err(Error::Config("m_check must be one of m_dims".into()));
    }
    let hs = p.usize_list("horizons")?;
    if hs.is_empty() || hs[0] == 0 || hs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("horizons must be positive and strictly increasing".into()));
    }
    if p.usize("precision")? < crate::conditioning::MIN_PRECISION {
        return Err(Error::Config(format!(
            "precision must be at least {} bits",
            crate::conditioning::MIN_PRECISION
        )));
    }
    if p.f64("log_kappa_budget")? <= 0.0 {
        return Err(Error::Config("log_kappa_budget must be positive".into()));
    }
    p.usize("tau")?;
    p.usize("lyap_t_sim")?;
    p.bool("precision_check")?;
    Ok(())
}

fn trace_config(p: &Params) -> Result<(ArchitectureSpec, LyapunovConfig)> {
    let spec = ArchitectureSpec::new(parse_kind(p.text("kind")?)?, p.usize("n_units")?, 1);
    let cfg = LyapunovConfig::new(p.usize("k")?, p.usize("t_sim")?, p.usize("t_ons")?)
        .with_transient(p.usize("t_transient")?)
        .with_input(parse_input(p.text("input")?)?);
    p.usize("points")?;
    p.f64("gain")?;
    Ok((spec, cfg))
}

/// Runs one realization of `preset`; returns `(table name, table)` pairs in
/// the order of [`Preset::outputs`].
pub fn run_seed(preset: Preset, p: &Params, seed: u64, ctx: &RunContext) -> Result<Vec<(String, Table)>> {
    let issues = findings(preset, p);
    if let Some(first) = issues.into_iter().next() {
        return Err(Error::Config(first));
    }
    let tables = match preset {
        Preset::Fig1Targets => run_fig1_targets(p, seed)?,
        Preset::Fig1Spectrum => run_fig1_spectrum(p, seed)?,
        Preset::Fig2Condition => run_fig2(p, seed)?,
        Preset::Fig3Prefloss | Preset::Fig4During | Preset::FigSOrthogonal => run_training(preset, p, seed, ctx)?,
        Preset::Fig5Ksweep => run_ksweep(p, seed, ctx)?,
        Preset::FigS1LstmRelu => run_lstm_relu(p, seed)?,
        Preset::ConvergenceTrace => run_trace(p, seed)?,
    };
    Ok(preset.outputs().iter().map(|s| s.to_string()).zip(tables).collect())
}

fn run_fig1_targets(p: &Params, seed: u64) -> Result<Vec<Table>> {
    let spec = ArchitectureSpec::new(CellKind::VanillaTanh, p.usize("n_units")?, 1);
    let gain = realization_gain(seed, p.f64("gain_min")?, p.f64("gain_max")?);
    let params = init_gaussian(&spec, gain, seed)?;
    let mut curves = Table::new(&["seed", "epoch", "lambda_1", "target", "loss"]);
    let mut finals = Table::new(&["seed", "target", "gain", "lambda_1_initial", "lambda_1_final"]);
    let input = InputDistribution::Gaussian;
    let initial = measure(&spec, &params, p, 1, input, seed)?.exponents[0];
    for (ti, &target) in p.f64_list("targets")?.iter().enumerate() {
        let cfg = floss_config(p, 1, p.usize("floss_epochs")?, input)?.with_targets(vec![target]);
        let (flossed, rec) = floss(&spec, &params, &cfg, derive_seed(seed, tag::FLOSS_RUN, ti as u64))?;
        for e in &rec.epochs {
            curves.push(vec![
                seed.into(),
                e.epoch.into(),
                e.exponents[0].into(),
                target.into(),
                e.loss.into(),
            ]);
        }
        let fin = measure(&spec, &flossed, p, 1, input, seed)?.exponents[0];
        finals.push(vec![seed.into(), target.into(), gain.into(), initial.into(), fin.into()]);
    }
    Ok(vec![curves, finals])
}

fn run_fig1_spectrum(p: &Params, seed: u64) -> Result<Vec<Table>> {
    let n = p.usize("n_units")?;
    let spec = ArchitectureSpec::new(CellKind::VanillaTanh, n, 1);
    let gain = realization_gain(seed, p.f64("gain_min")?, p.f64("gain_max")?);
    let params = init_gaussian(&spec, gain, seed)?;
    let input = InputDistribution::Gaussian;
    let mut spectra = Table::new(&["seed", "k", "stage", "i", "lambda_i"]);
    let mut losses = Table::new(&["seed", "k", "epoch", "loss"]);
    let push = |t: &mut Table, k: usize, stage: &str, est: &LyapunovEstimate| {
        for (i, l) in est.exponents.iter().enumerate() {
            t.push(vec![seed.into(), k.into(), stage.into(), (i + 1).into(), (*l).into()]);
        }
    };
    let initial = measure(&spec, &params, p, n, input, seed)?;
    push(&mut spectra, 0, "initial", &initial);
    for k in p.usize_list("ks")? {
        let cfg = floss_config(p, k, p.usize("floss_epochs")?, input)?;
        let (flossed, rec) = floss(&spec, &params, &cfg, derive_seed(seed, tag::FLOSS_RUN, k as u64))?;
        for e in &rec.epochs {
            losses.push(vec![seed.into(), k.into(), e.epoch.into(), e.loss.into()]);
        }
        push(&mut spectra, k, "flossed", &measure(&spec, &flossed, p, n, input, seed)?);
    }
    Ok(vec![spectra, losses])
}

fn run_fig2(p: &Params, seed: u64) -> Result<Vec<Table>> {
    let n = p.usize("n_units")?;
    let spec = ArchitectureSpec::new(CellKind::VanillaTanh, n, 1);
    let input = parse_input(p.text("input")?)?;
    let params = init_gaussian(&spec, p.f64("gain")?, seed)?;
    let mut stages = vec![(0usize, params.clone())];
    for k in p.usize_list("ks")? {
        let cfg = floss_config(p, k, p.usize("floss_epochs")?, input)?;
        stages.push((k, floss(&spec, &params, &cfg, derive_seed(seed, tag::FLOSS_RUN, k as u64))?.0));
    }
    let ms = p.usize_list("m_dims")?;
    let m_max = ms.iter().copied().max().unwrap_or(1);
    let horizons = p.usize_list("horizons")?;
    let tau = p.usize("tau")?;
    let precision = p.usize("precision")?;
    let budget = p.f64("log_kappa_budget")?;
    let mseed = derive_seed(seed, tag::MEASURE, 0);
    let q = random_orthonormal(spec.state_dim(), m_max, &mut seeded(derive_seed(seed, tag::PROBE_BASIS, 0)))?;

    let mut cond = Table::new(&[
        "seed",
        "k",
        "horizon",
        "m",
        "log_kappa_direct",
        "log_kappa_estimate",
        "precision_drift",
        "reliable",
    ]);
    let mut usable = Table::new(&["seed", "k", "horizon", "log_kappa_budget", "usable_m"]);
    let mut spectrum = Table::new(&["seed", "k", "i", "lambda_i"]);
    for (k, sp) in &stages {
        let lcfg = LyapunovConfig::new(m_max, p.usize("lyap_t_sim")?, p.usize("t_ons")?)
            .with_transient(tau)
            .with_input(input);
        let est = lyapunov_spectrum(&spec, sp, &lcfg, mseed)?;
        for (i, l) in est.exponents.iter().enumerate() {
            spectrum.push(vec![seed.into(), (*k).into(), (i + 1).into(), (*l).into()]);
        }
        let direct = condition_sweep(&spec, sp, input, tau, &horizons, &q, &ms, mseed, precision)?;
        let check = if p.bool("precision_check")? {
            Some(condition_sweep(&spec, sp, input, tau, &horizons, &q, &ms, mseed, 2 * precision)?)
        } else {
            None
        };
        for (hi, (h, kappas)) in direct.iter().enumerate() {
            for (mi, &m) in ms.iter().enumerate() {
                let estimate = crate::conditioning::condition_estimate(&est, m, *h)?;
                let drift = check.as_ref().map_or(f64::NAN, |c| (c[hi].1[mi] - kappas[mi]).abs());
                let reliable = drift.is_nan() || drift < 1e-6;
                cond.push(vec![
                    seed.into(),
                    (*k).into(),
                    (*h).into(),
                    m.into(),
                    kappas[mi].into(),
                    estimate.into(),
                    drift.into(),
                    (reliable as usize).into(),
                ]);
            }
            usable.push(vec![
                seed.into(),
                (*k).into(),
                (*h).into(),
                budget.into(),
                usable_dimensions(&est, *h, budget).into(),
            ]);
        }
    }
    Ok(vec![cond, usable, spectrum])
}

/// Architecture and training configuration for one condition of a
/// training preset.
pub fn training_setup(
    preset: Preset,
    p: &Params,
    condition: &str,
    delay: usize,
    floss_k: usize,
) -> Result<(ArchitectureSpec, TrainConfig)> {
    let kind = parse_task(p.text("task")?)?;
    let spec = ArchitectureSpec::new(CellKind::VanillaTanh, p.usize("n_units")?, kind.input_dim());
    let task = TaskSpec::new(kind, delay, p.usize("seq_len")?);
    let epochs = p.usize("epochs")?;
    let mut cfg = TrainConfig::new(task, epochs, p.usize("batch")?);
    cfg.adam.eta = p.f64("eta")?;
    cfg.eval_every = p.usize("eval_every")?;
    cfg.test_batch = p.usize("test_batch")?;
    p.f64("gain")?;
    p.usize("checkpoint_every")?;
    match p.text("init")? {
        "gaussian" | "orthogonal" => {}
        other => return Err(Error::Config(format!("unknown init `{other}`"))),
    }
    let input = kind.input_distribution();
    let prefloss = p.usize("prefloss_epochs")?;
    cfg.schedule = match condition {
        "none" => Vec::new(),
        "prefloss" => vec![(0, floss_config(p, floss_k, prefloss, input)?)],
        "during" => {
            let len = match p.text("protocol")? {
                "two_point" => prefloss,
                _ => p.usize("episode_epochs")?,
            };
            during_episodes(p)?
                .into_iter()
                .map(|e| Ok((e, floss_config(p, floss_k, len, input)?)))
                .collect::<Result<_>>()?
        }
        other => return Err(Error::Config(format!("unknown condition `{other}`"))),
    };
    let diagnostics = preset != Preset::Fig5Ksweep && p.bool("diagnostics")?;
    if diagnostics {
        cfg.diagnostics = Diagnostics {
            grad_h0_norm: true,
            dldw_svd: [1, 20, 40].into_iter().filter(|&i| i <= spec.n_units).collect(),
            lambda_probe: None,
        };
    }
    Ok((spec, cfg))
}

/// Training epochs at which the `during` condition flosses.
pub fn during_episodes(p: &Params) -> Result<Vec<usize>> {
    match p.text("protocol")? {
        "five_point" => Ok(vec![0, 100, 200, 300, 400]),
        "two_point" => Ok(vec![0, 500]),
        other => Err(Error::Config(format!("unknown protocol `{other}`"))),
    }
}

fn initial_params(p: &Params, spec: &ArchitectureSpec, seed: u64) -> Result<ModelParams> {
    match p.text("init")? {
        "orthogonal" => {
            let mut params = init_orthogonal(spec, seed)?;
            params.w_rec.scale(p.f64("gain")?);
            Ok(params)
        }
        _ => init_gaussian(spec, p.f64("gain")?, seed),
    }
}

fn checkpoint_path(ctx: &RunContext, name: &str) -> Option<PathBuf> {
    ctx.checkpoint_dir.as_ref().map(|d| d.join(format!("{name}.ckpt")))
}

fn write_atomic(path: &std::path::Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::Config(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::Config(format!("renaming {}: {e}", tmp.display())))
}

/// One training run, resuming from and saving to a checkpoint when the
/// context provides a directory.
fn train_resumable(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    cfg: &TrainConfig,
    seed: u64,
    ckpt: Option<PathBuf>,
    every: usize,
) -> Result<TrainState> {
    let mut state = TrainState::new(params.clone(), cfg.adam);
    if let Some(path) = ckpt.as_ref().filter(|p| p.exists()) {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        let (saved_spec, saved) = TrainState::from_text(&text, cfg.adam)?;
        if saved_spec != *spec {
            return Err(Error::Config(format!(
                "checkpoint {} belongs to a different architecture",
                path.display()
            )));
        }
        state = saved;
    }
    let every = every.max(1);
    let total = cfg.epochs + 1;
    train_from(spec, cfg, seed, state, |s| match &ckpt {
        Some(path) if s.next_epoch % every == 0 || s.next_epoch == total => write_atomic(path, &s.to_text(spec)),
        _ => Ok(()),
    })
}

fn floss_rows(t: &mut Table, seed: u64, condition: &str, flossing: &[(usize, FlossRecord)]) {
    for (at, rec) in flossing {
        for e in &rec.epochs {
            let k = e.exponents.len();
            t.push(vec![
                seed.into(),
                condition.into(),
                (*at).into(),
                e.epoch.into(),
                e.loss.into(),
                e.exponents[0].into(),
                e.exponents[k - 1].into(),
            ]);
        }
    }
}

fn run_training(preset: Preset, p: &Params, seed: u64, ctx: &RunContext) -> Result<Vec<Table>> {
    let mut curves: Option<Table> = None;
    let mut flosses = Table::new(&["seed", "condition", "at_epoch", "epoch", "loss", "lambda_1", "lambda_k"]);
    let mut finals = Table::new(&["seed", "condition", "test_loss", "test_accuracy"]);
    for condition in p.text_list("conditions")? {
        let (spec, cfg) = training_setup(preset, p, &condition, p.usize("delay")?, p.usize("floss_k")?)?;
        let params = initial_params(p, &spec, seed)?;
        let ckpt = checkpoint_path(ctx, &format!("{}_seed{seed}_{condition}", preset.name()));
        let state = train_resumable(&spec, &params, &cfg, seed, ckpt, p.usize("checkpoint_every")?)?;
        let t = with_prefix(
            &[("seed", seed.into()), ("condition", condition.as_str().into())],
            state.record.to_table(&cfg.diagnostics),
        );
        match curves.as_mut() {
            Some(c) => c.extend(t),
            None => curves = Some(t),
        }
        floss_rows(&mut flosses, seed, &condition, &state.record.flossing);
        let last = state.record.final_row().ok_or(Error::NonFinite("empty training record"))?;
        finals.push(vec![
            seed.into(),
            condition.as_str().into(),
            last.test_loss.into(),
            last.test_accuracy.unwrap_or(f64::NAN).into(),
        ]);
    }
    let curves = curves.unwrap_or_else(|| Table::new(&["seed", "condition", "epoch"]));
    Ok(vec![curves, flosses, finals])
}

fn run_ksweep(p: &Params, seed: u64, ctx: &RunContext) -> Result<Vec<Table>> {
    let mut finals = Table::new(&["seed", "delay", "k", "condition", "test_loss", "test_accuracy"]);
    let mode = p.text("mode")?.to_string();
    for d in p.usize_list("delays")? {
        for k in p.usize_list("ks")? {
            let condition = if k == 0 { "none" } else { mode.as_str() };
            let (spec, cfg) = training_setup(Preset::Fig5Ksweep, p, condition, d, k.max(1))?;
            let params = initial_params(p, &spec, seed)?;
            let ckpt = checkpoint_path(ctx, &format!("fig5_ksweep_seed{seed}_d{d}_k{k}"));
            let state = train_resumable(&spec, &params, &cfg, seed, ckpt, p.usize("checkpoint_every")?)?;
            let last = state.record.final_row().ok_or(Error::NonFinite("empty training record"))?;
            finals.push(vec![
                seed.into(),
                d.into(),
                k.into(),
                condition.into(),
                last.test_loss.into(),
                last.test_accuracy.unwrap_or(f64::NAN).into(),
            ]);
        }
    }
    Ok(vec![finals])
}

fn run_lstm_relu(p: &Params, seed: u64) -> Result<Vec<Table>> {
    let mut curves = Table::new(&["seed", "kind", "epoch", "lambda_1", "target", "loss"]);
    let mut finals = Table::new(&["seed", "kind", "gain", "lambda_1_initial", "lambda_1_final", "status"]);
    let target = p.f64("target")?;
    let input = InputDistribution::Gaussian;
    for name in p.text_list("kinds")? {
        let kind = parse_kind(&name)?;
        let spec = ArchitectureSpec::new(kind, p.usize("n_units")?, 1);
        let gain = realization_gain(seed, p.f64("gain_min")?, p.f64("gain_max")?);
        let params = init_gaussian_with_relu_mean(&spec, gain, p.f64("relu_mean")?, seed)?;
        let cfg = floss_config(p, 1, p.usize("floss_epochs")?, input)?.with_targets(vec![target]);
        // A ReLU network can go fully silent for a step; the basis then
        // collapses and the run is recorded as failed instead of aborting.
        let outcome = measure(&spec, &params, p, 1, input, seed).and_then(|initial| {
            let (flossed, rec) = floss(&spec, &params, &cfg, derive_seed(seed, tag::FLOSS_RUN, 0))?;
            let fin = measure(&spec, &flossed, p, 1, input, seed)?;
            Ok((initial.exponents[0], rec, fin.exponents[0]))
        });
        match outcome {
            Ok((initial, rec, fin)) => {
                for e in &rec.epochs {
                    curves.push(vec![
                        seed.into(),
                        name.as_str().into(),
                        e.epoch.into(),
                        e.exponents[0].into(),
                        target.into(),
                        e.loss.into(),
                    ]);
                }
                finals.push(vec![
                    seed.into(),
                    name.as_str().into(),
                    gain.into(),
                    initial.into(),
                    fin.into(),
                    "ok".into(),
                ]);
            }
            Err(Error::Linalg(e)) => {
                let status = format!("collapsed: {e}");
                finals.push(vec![
                    seed.into(),
                    name.as_str().into(),
                    gain.into(),
                    f64::NAN.into(),
                    f64::NAN.into(),
                    status.as_str().into(),
                ]);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(vec![curves, finals])
}

fn run_trace(p: &Params, seed: u64) -> Result<Vec<Table>> {
    let (spec, cfg) = trace_config(p)?;
    let params = init_gaussian(&spec, p.f64("gain")?, seed)?;
    let trace = convergence_trace(&spec, &params, &cfg, derive_seed(seed, tag::MEASURE, 0), p.usize("points")?)?;
    let mut t = Table::new(&["seed", "t", "i", "lambda_i_running"]);
    for point in &trace {
        for (i, l) in point.exponents.iter().enumerate() {
            t.push(vec![seed.into(), point.t.into(), (i + 1).into(), (*l).into()]);
        }
    }
    Ok(vec![t])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_default_preset_validates() {
        for preset in Preset::ALL {
            assert!(
                findings(preset, &preset.defaults()).is_empty(),
                "{preset}: {:?}",
                findings(preset, &preset.defaults())
            );
            assert_eq!(Preset::parse(preset.name()), Some(preset));
        }
    }

    #[test]
    fn unknown_keys_and_type_mismatches_are_rejected() {
        let mut p = Preset::Fig1Targets.defaults();
        assert!(p.set("no_such_key", Value::Int(1)).is_err());
        assert!(p.set("n_units", Value::Text("x".into())).is_err());
        p.set("floss_eta", Value::Int(1)).unwrap();
        assert_eq!(p.f64("floss_eta").unwrap(), 1.0);
    }

    #[test]
    fn inconsistent_settings_are_findings() {
        let mut p = Preset::Fig3Prefloss.defaults();
        p.set("seq_len", Value::Int(30)).unwrap();
        assert!(findings(Preset::Fig3Prefloss, &p)
            .iter()
            .any(|f| f.contains("sequence shorter than delay")));
        let mut p = Preset::Fig3Prefloss.defaults();
        p.set("floss_k", Value::Int(100)).unwrap();
        assert!(findings(Preset::Fig3Prefloss, &p)
            .iter()
            .any(|f| f.contains("exceeds state dimension")));
    }

    #[test]
    fn canonical_text_is_stable() {
        let p = Preset::Fig2Condition.defaults();
        let text = p.to_text();
        assert!(text.contains("ks = [15]\n"));
        assert!(text.contains("gain = 1.0\n"));
        assert!(text.contains("input = \"bernoulli\"\n"));
    }

    #[test]
    fn tiny_targets_run_is_deterministic() {
        let mut p = Preset::Fig1Targets.defaults();
        p.set("n_units", Value::Int(6)).unwrap();
        p.set("floss_epochs", Value::Int(3)).unwrap();
        p.set("t_floss", Value::Int(10)).unwrap();
        p.set("measure_t_sim", Value::Int(50)).unwrap();
        p.set("measure_transient", Value::Int(10)).unwrap();
        let a = run_seed(Preset::Fig1Targets, &p, 3, &RunContext::default()).unwrap();
        let b = run_seed(Preset::Fig1Targets, &p, 3, &RunContext::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].1.len(), 9);
        assert_eq!(a[1].1.len(), 3);
    }
}
