//! Property tests for structural invariants of each module.

use flosslab::conditioning::{ln_singular_values_ext, log_condition, ExtPrecMatrix};
use flosslab::experiments::{Preset, Value};
use flosslab::linalg::{copyltu, qr_positive, singular_values};
use flosslab::lyapunov::{lyapunov_spectrum, LyapunovConfig};
use flosslab::rng::{derive_seed, gaussian_matrix, random_orthonormal, seeded};
use flosslab::table::{format_float, Cell, Table};
use flosslab::tasks::{compute_targets, generate, TaskKind, TaskSpec};
use flosslab::{ArchitectureSpec, CellKind, DenseMatrix, ModelParams};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    gaussian_matrix(rows, cols, 0.0, 1.0, &mut seeded(seed))
}

fn tall_shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..12).prop_flat_map(|k| (k..k + 10, Just(k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn qr_reconstructs_with_orthonormal_q_and_positive_diagonal((n, k) in tall_shape(), seed in any::<u64>()) {
        let a = matrix(n, k, seed);
        let f = qr_positive(&a).unwrap();
        let qtq = f.q.t_matmul(&f.q).unwrap();
        prop_assert!(qtq.max_abs_diff(&DenseMatrix::identity(k)) < 1e-12);
        prop_assert!(f.q.matmul(&f.r).unwrap().max_abs_diff(&a) < 1e-12 * (1.0 + a.max_abs()));
        for i in 0..k {
            prop_assert!(f.r.get(i, i) > 0.0);
            for j in 0..i {
                prop_assert_eq!(f.r.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn qr_is_unique_under_the_sign_convention((n, k) in tall_shape(), seed in any::<u64>()) {
        // Refactoring Q·R must give back the same factors.
        let f = qr_positive(&matrix(n, k, seed)).unwrap();
        let g = qr_positive(&f.q.matmul(&f.r).unwrap()).unwrap();
        prop_assert!(f.q.max_abs_diff(&g.q) < 1e-10);
        prop_assert!(f.r.max_abs_diff(&g.r) < 1e-10 * (1.0 + f.r.max_abs()));
    }

    #[test]
    fn copyltu_is_symmetric_and_keeps_lower_triangle(k in 1usize..10, seed in any::<u64>()) {
        let m = matrix(k, k, seed);
        let s = copyltu(&m).unwrap();
        prop_assert_eq!(&s, &s.transpose());
        for i in 0..k {
            for j in 0..=i {
                prop_assert_eq!(s.get(i, j), m.get(i, j));
            }
        }
    }

    #[test]
    fn singular_values_are_sorted_and_preserve_frobenius_norm(r in 1usize..10, c in 1usize..10, seed in any::<u64>()) {
        let a = matrix(r, c, seed);
        let s = singular_values(&a).unwrap();
        prop_assert_eq!(s.len(), r.min(c));
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.iter().all(|&x| x >= 0.0));
        let fro2: f64 = s.iter().map(|x| x * x).sum();
        prop_assert!((fro2 - a.frobenius_norm().powi(2)).abs() < 1e-10 * fro2.max(1.0));
    }

    #[test]
    fn extended_precision_singular_values_agree_with_f64(n in 1usize..7, seed in any::<u64>()) {
        let a = matrix(n, n, seed);
        let mut ext = ln_singular_values_ext(&ExtPrecMatrix::from_dense(&a, 256)).unwrap();
        ext.sort_by(|x, y| y.total_cmp(x));
        let f: Vec<f64> = singular_values(&a).unwrap().into_iter().map(f64::ln).collect();
        for (x, y) in ext.iter().zip(&f) {
            prop_assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn log_condition_of_a_diagonal_matrix(d in proptest::collection::vec(1e-3f64..1e3, 1..8)) {
        let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = d.iter().cloned().fold(0.0, f64::max);
        let got = log_condition(&ExtPrecMatrix::from_dense(&DenseMatrix::from_diag(&d), 256)).unwrap();
        prop_assert!((got - (hi / lo).ln()).abs() < 1e-10);
    }

    #[test]
    fn random_orthonormal_has_orthonormal_columns((n, k) in tall_shape(), seed in any::<u64>()) {
        let q = random_orthonormal(n, k, &mut seeded(seed)).unwrap();
        prop_assert!(q.t_matmul(&q).unwrap().max_abs_diff(&DenseMatrix::identity(k)) < 1e-12);
    }

    #[test]
    fn derived_seeds_are_deterministic_and_stream_separated(base in any::<u64>(), s in 0u64..16, i in 0u64..1000) {
        prop_assert_eq!(derive_seed(base, s, i), derive_seed(base, s, i));
        prop_assert_ne!(derive_seed(base, s, i), derive_seed(base, s + 1, i));
        prop_assert_ne!(derive_seed(base, s, i), derive_seed(base, s, i + 1));
    }

    #[test]
    fn float_cells_round_trip_exactly(v in any::<f64>()) {
        let back = Cell::parse(&format_float(v));
        match back {
            Cell::Float(x) if v.is_nan() => prop_assert!(x.is_nan()),
            Cell::Float(x) => prop_assert_eq!(x.to_bits(), v.to_bits()),
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn table_csv_round_trips(
        rows in proptest::collection::vec((any::<i64>(), -1e300f64..1e300, "[a-z][a-z ,\"]{0,8}"), 0..20)
    ) {
        let mut t = Table::new(&["i", "x", "label"]);
        for (i, x, s) in rows {
            t.push(vec![Cell::Int(i), Cell::Float(x), Cell::Text(s)]);
        }
        let back = Table::read_csv(t.to_csv_string().as_bytes()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn params_accept_their_own_values(idx in 0usize..Preset::ALL.len()) {
        let preset = Preset::ALL[idx];
        let defaults = preset.defaults();
        let mut p = preset.defaults();
        for (k, v) in defaults.iter() {
            p.set(k, v.clone()).unwrap();
        }
        prop_assert_eq!(p, defaults);
        prop_assert!(preset.defaults().set("not_a_key", Value::Int(1)).is_err());
    }

    #[test]
    fn task_targets_follow_their_definition(d in 1usize..12, extra in 1usize..12, seed in any::<u64>()) {
        let spec = TaskSpec::new(TaskKind::DelayedCopy, d, d + extra).with_seed(seed);
        let batch = generate(&spec, 3).unwrap();
        for t in 0..batch.seq_len() {
            prop_assert_eq!(batch.valid[t], t >= d);
            for s in 0..3 {
                let want = if t >= d { batch.inputs[t - d].get(0, s) } else { 0.0 };
                prop_assert_eq!(batch.targets[t].get(0, s), want);
            }
        }
        let (targets, valid) = compute_targets(TaskKind::DelayedCopy, d, &batch.inputs);
        prop_assert_eq!(targets, batch.targets);
        prop_assert_eq!(valid, batch.valid);
    }

    #[test]
    fn scaled_orthogonal_linear_network_has_flat_spectrum(n in 2usize..10, c in 0.5f64..2.0, seed in any::<u64>()) {
        let spec = ArchitectureSpec::new(CellKind::Linear, n, 1);
        let mut params = ModelParams::zeros(&spec);
        params.w_rec = random_orthonormal(n, n, &mut seeded(seed)).unwrap().scaled(c);
        let k = n.min(3);
        let est = lyapunov_spectrum(&spec, &params, &LyapunovConfig::new(k, 50, 1).with_transient(0), seed).unwrap();
        for l in est.exponents {
            prop_assert!((l - c.ln()).abs() < 1e-10, "{l} vs {}", c.ln());
        }
    }
}
