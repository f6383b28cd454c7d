//! Acceptance suite. Every test prints one verdict line per criterion and
//! asserts it. Tests marked `#[ignore]` are the long-running extended suite:
//! `cargo test --release -p flosslab --test acceptance -- --ignored`.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use flosslab::criteria::{self, Verdict};
use flosslab::experiments::{run_seed, Params, Preset, RunContext, Value};
use flosslab::flossing::{flossing_grad, flossing_objective, FlossingConfig};
use flosslab::linalg::{qr_positive, qr_pullback, QrAdjoints};
use flosslab::lyapunov::{lyapunov_spectrum, LyapunovConfig};
use flosslab::models::{init_gaussian, init_gaussian_with_relu_mean, ModelParams};
use flosslab::rng::{gaussian_matrix, random_orthonormal, seeded};
use flosslab::table::Table;
use flosslab::{ArchitectureSpec, CellKind, DenseMatrix};
use rand::Rng;

/// Writes straight to stderr so the line shows even when output is captured.
fn show(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn report(v: &Verdict) {
    show(&v.line());
    assert!(v.pass, "{}", v.line());
}

fn run_preset(preset: Preset, params: &Params, seeds: &[u64]) -> BTreeMap<String, Table> {
    let mut out: BTreeMap<String, Table> = BTreeMap::new();
    for &seed in seeds {
        let tables =
            run_seed(preset, params, seed, &RunContext::default()).unwrap_or_else(|e| panic!("{} seed {seed}: {e}", preset.name()));
        for (name, table) in tables {
            match out.get_mut(&name) {
                Some(t) => t.extend(table),
                None => {
                    out.insert(name, table);
                }
            }
        }
    }
    out
}

fn with(preset: Preset, overrides: &[(&str, Value)]) -> Params {
    let mut p = preset.defaults();
    for (k, v) in overrides {
        p.set(k, v.clone()).unwrap();
    }
    p
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn within(elapsed: Duration, limit: Duration) -> String {
    format!("{:.1} s (limit {:.0} s)", elapsed.as_secs_f64(), limit.as_secs_f64())
}

#[test]
fn criterion_01_qr_pullback_matches_finite_differences() {
    let start = Instant::now();
    let mut rng = seeded(0x51);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(1..=10);
        let n = rng.random_range(k..=20);
        let a = gaussian_matrix(n, k, 0.0, 1.0, &mut rng);
        let c_q = gaussian_matrix(n, k, 0.0, 1.0, &mut rng);
        let c_r = gaussian_matrix(k, k, 0.0, 1.0, &mut rng);
        let loss = |m: &DenseMatrix| {
            let f = qr_positive(m).unwrap();
            let lq: f64 = f.q.data().iter().zip(c_q.data()).map(|(x, c)| x * c).sum();
            let lr: f64 = f.r.data().iter().zip(c_r.data()).map(|(x, c)| x * c).sum();
            lq + lr
        };
        let f = qr_positive(&a).unwrap();
        let adj = QrAdjoints {
            q_bar: c_q.clone(),
            r_bar: c_r.clone(),
        };
        let analytic = qr_pullback(&f, &adj).unwrap();
        let mut fd = vec![0.0; n * k];
        for (idx, slot) in fd.iter_mut().enumerate() {
            let mut p = a.clone();
            p.data_mut()[idx] += h;
            let mut m = a.clone();
            m.data_mut()[idx] -= h;
            *slot = (loss(&p) - loss(&m)) / (2.0 * h);
        }
        worst = worst.max(rel_err(analytic.data(), &fd));
    }
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(10);
    report(&Verdict::new(
        1,
        "QR pullback vs finite differences",
        format!("worst relative error {worst:.2e} over 50 matrices, {}", within(elapsed, limit)),
        "< 1e-6",
        worst < 1e-6 && elapsed < limit,
    ));
}

fn flossing_fd_error(spec: &ArchitectureSpec, params: &ModelParams, cfg: &FlossingConfig, seed: u64) -> f64 {
    let g = flossing_grad(spec, params, cfg, seed).unwrap();
    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    for t in 0..3 {
        let len = params.tensors()[t].len();
        for i in 0..len {
            let mut p = params.clone();
            p.tensors_mut()[t][i] += h;
            let mut m = params.clone();
            m.tensors_mut()[t][i] -= h;
            let d = (flossing_objective(spec, &p, cfg, seed).unwrap() - flossing_objective(spec, &m, cfg, seed).unwrap()) / (2.0 * h);
            fd.push(d);
            analytic.push(g.grads.tensors()[t][i]);
        }
    }
    rel_err(&analytic, &fd)
}

#[test]
fn criterion_02_flossing_gradient_matches_finite_differences() {
    let start = Instant::now();
    let tanh = ArchitectureSpec::new(CellKind::VanillaTanh, 8, 1);
    let tanh_p = init_gaussian(&tanh, 1.5, 2).unwrap();
    let e_tanh = flossing_fd_error(
        &tanh,
        &tanh_p,
        &FlossingConfig::new(3, 30, 1, 0).with_targets(vec![0.1, -0.2, -0.5]),
        11,
    );

    let relu = ArchitectureSpec::new(CellKind::VanillaRelu, 6, 1);
    let relu_p = init_gaussian_with_relu_mean(&relu, 1.2, 0.0, 3).unwrap();
    let e_relu = flossing_fd_error(&relu, &relu_p, &FlossingConfig::new(2, 20, 2, 0), 12);

    let lstm = ArchitectureSpec::new(CellKind::Lstm, 4, 1);
    let lstm_p = init_gaussian(&lstm, 1.0, 4).unwrap();
    let e_lstm = flossing_fd_error(&lstm, &lstm_p, &FlossingConfig::new(3, 20, 1, 0), 13);

    let worst = e_tanh.max(e_relu).max(e_lstm);
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(120);
    report(&Verdict::new(
        2,
        "flossing gradient vs finite differences",
        format!(
            "relative error tanh {e_tanh:.2e}, relu {e_relu:.2e}, lstm {e_lstm:.2e}; {}",
            within(elapsed, limit)
        ),
        "< 1e-5",
        worst < 1e-5 && elapsed < limit,
    ));
}

#[test]
fn criterion_03_first_exponent_reaches_targets() {
    let p = Preset::Fig1Targets.defaults();
    let out = run_preset(Preset::Fig1Targets, &p, &seeds(10));
    report(&criteria::first_exponent_targets(&out["fig1_targets_final"], 0.8).unwrap());
}

#[test]
fn criterion_04_flossing_half_the_spectrum() {
    let p = with(Preset::Fig1Spectrum, &[("ks", Value::IntList(vec![16]))]);
    let out = run_preset(Preset::Fig1Spectrum, &p, &seeds(10));
    report(&criteria::flossed_spectrum_selectivity(&out["fig1_spectrum"], 16).unwrap());
}

#[test]
fn criterion_05_lyapunov_oracles() {
    let n = 32;
    let mut rng = seeded(0x55);
    let lin = ArchitectureSpec::new(CellKind::Linear, n, 1);

    let mut orth = ModelParams::zeros(&lin);
    orth.w_rec = random_orthonormal(n, n, &mut rng).unwrap();
    orth.v_in = gaussian_matrix(n, 1, 0.0, 1.0, &mut rng);
    let cfg = LyapunovConfig::new(n, 1000, 1).with_transient(0);
    let e_orth = lyapunov_spectrum(&lin, &orth, &cfg, 1).unwrap();
    let dev_orth = e_orth.exponents.iter().fold(0.0_f64, |m, l| m.max(l.abs()));

    let mut half = ModelParams::zeros(&lin);
    half.w_rec = DenseMatrix::identity(n).scaled(0.5);
    half.v_in = gaussian_matrix(n, 1, 0.0, 1.0, &mut rng);
    let e_half = lyapunov_spectrum(&lin, &half, &cfg, 2).unwrap();
    let dev_half = e_half.exponents.iter().fold(0.0_f64, |m, l| m.max((l - 0.5_f64.ln()).abs()));

    let tanh = ArchitectureSpec::new(CellKind::VanillaTanh, n, 1);
    let tp = init_gaussian(&tanh, 2.0, 5).unwrap();
    let one = lyapunov_spectrum(&tanh, &tp, &LyapunovConfig::new(16, 2000, 1), 3).unwrap();
    let five = lyapunov_spectrum(&tanh, &tp, &LyapunovConfig::new(16, 2000, 5), 3).unwrap();
    let dev_ons = one
        .exponents
        .iter()
        .zip(&five.exponents)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));

    report(&Verdict::new(
        5,
        "Lyapunov oracles",
        format!("orthogonal max |lambda| {dev_orth:.1e}; 0.5 I max dev {dev_half:.1e}; t_ons 1 vs 5 max dev {dev_ons:.1e}"),
        "1e-8, 1e-10, 0.005",
        dev_orth < 1e-8 && dev_half < 1e-10 && dev_ons < 0.005,
    ));
}

#[test]
fn criteria_06_07_condition_number() {
    let p = Preset::Fig2Condition.defaults();
    let m = p.usize("m_check").unwrap();
    let out = run_preset(Preset::Fig2Condition, &p, &seeds(5));
    let (c6, _) = criteria::condition_estimate_accuracy(&out["fig2_condition"], m).unwrap();
    let c7 = criteria::usable_dimension_gain(&out["fig2_usable"], 15, 500).unwrap();
    show(&c6.line());
    show(&c7.line());
    assert!(c6.pass && c7.pass, "{}\n{}", c6.line(), c7.line());
}

fn copy_params(delay: i64, epochs: i64) -> Params {
    with(
        Preset::Fig3Prefloss,
        &[("delay", Value::Int(delay)), ("epochs", Value::Int(epochs))],
    )
}

#[test]
fn criterion_08_prefloss_copy_smoke() {
    let out = run_preset(Preset::Fig3Prefloss, &copy_params(20, 2000), &seeds(5));
    report(&criteria::prefloss_copy_smoke(&out["fig3_prefloss_final"]).unwrap());
}

#[test]
#[ignore = "extended suite, hours of CPU"]
fn criterion_08_prefloss_copy_full() {
    let out = run_preset(Preset::Fig3Prefloss, &copy_params(40, 10_000), &seeds(5));
    report(&criteria::prefloss_copy_full(&out["fig3_prefloss_final"]).unwrap());
}

fn xor_params(delay: i64, epochs: i64) -> Params {
    with(
        Preset::Fig4During,
        &[
            ("delay", Value::Int(delay)),
            ("epochs", Value::Int(epochs)),
            ("conditions", Value::TextList(vec!["none".into(), "during".into()])),
            ("diagnostics", Value::Bool(false)),
        ],
    )
}

#[test]
fn criterion_09_during_xor_smoke() {
    let out = run_preset(Preset::Fig4During, &xor_params(30, 3000), &seeds(5));
    report(&criteria::during_xor_smoke(&out["fig4_during_final"]).unwrap());
}

#[test]
#[ignore = "extended suite, hours of CPU"]
fn criterion_09_during_xor_full() {
    let out = run_preset(Preset::Fig4During, &xor_params(70, 10_000), &seeds(10));
    report(&criteria::during_xor_full(&out["fig4_during_final"]).unwrap());
}

/// Both diagnostics read the same five training runs.
fn diagnostics() -> &'static (Verdict, Verdict) {
    static CELL: OnceLock<(Verdict, Verdict)> = OnceLock::new();
    CELL.get_or_init(|| {
        let p = with(
            Preset::Fig4During,
            &[("epochs", Value::Int(600)), ("conditions", Value::TextList(vec!["during".into()]))],
        );
        let out = run_preset(Preset::Fig4During, &p, &seeds(5));
        criteria::flossing_diagnostics(&out["fig4_during_curves"], &[100, 200, 300, 400], "sigma_20").unwrap()
    })
}

#[test]
fn criterion_10_grad_h0_spikes() {
    report(&diagnostics().0);
}

#[test]
fn criterion_10_sigma_20_peaks() {
    report(&diagnostics().1);
}

#[test]
fn criterion_11_lstm_and_relu_flossing() {
    let p = Preset::FigS1LstmRelu.defaults();
    let out = run_preset(Preset::FigS1LstmRelu, &p, &seeds(10));
    let verdict = criteria::lstm_relu_flossing(&out["figS1_lstm_relu_final"], 0.7).unwrap();

    // Reported only: ReLU with the library's default recurrent mean.
    let literal = with(
        Preset::FigS1LstmRelu,
        &[
            ("kinds", Value::TextList(vec!["vanilla_relu".into()])),
            ("relu_mean", Value::Float(flosslab::models::RELU_MEAN)),
        ],
    );
    let lit = run_preset(Preset::FigS1LstmRelu, &literal, &seeds(10));
    let lit_verdict = criteria::lstm_relu_flossing(&lit["figS1_lstm_relu_final"], 0.7).unwrap();
    show(&format!("info: relu_mean = {} gives {}", flosslab::models::RELU_MEAN, lit_verdict.measured));

    report(&verdict);
}

#[test]
fn criterion_12_qr_cost_scales_quadratically_in_k() {
    let n = 128;
    let ks = [8usize, 16, 32];
    let mut rng = seeded(0x12);
    let inputs: Vec<DenseMatrix> = ks.iter().map(|&k| gaussian_matrix(n, k, 0.0, 1.0, &mut rng)).collect();
    let reps = 50;
    let mut best = [f64::INFINITY; 3];
    // Interleaved rounds with a per-k minimum keep the estimate robust to
    // other work sharing the machine.
    for _ in 0..30 {
        for (slot, a) in inputs.iter().enumerate() {
            let t0 = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(qr_positive(std::hint::black_box(a)).unwrap());
            }
            best[slot] = best[slot].min(t0.elapsed().as_secs_f64() / reps as f64);
        }
    }
    let normalized: Vec<f64> = best.iter().zip(&ks).map(|(t, &k)| t / (k * k) as f64).collect();
    let spread = normalized.iter().cloned().fold(f64::MIN, f64::max) / normalized.iter().cloned().fold(f64::MAX, f64::min);
    report(&Verdict::new(
        12,
        "QR cost scales as k^2 at N = 128",
        format!(
            "times {:.1} / {:.1} / {:.1} us for k = 8 / 16 / 32; spread of t/k^2 = {spread:.2}",
            best[0] * 1e6,
            best[1] * 1e6,
            best[2] * 1e6
        ),
        "spread <= 2",
        spread <= 2.0,
    ));
}
