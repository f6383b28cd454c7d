use flosslab::experiments::{Preset, Value};
use flosslab_py::{floss_trace, preset_params, run_preset_csv, spectrum};

#[test]
fn spectrum_is_deterministic() {
    let a = spectrum("vanilla_tanh", 16, 1.5, 4, 500, 1, 100, 7).unwrap();
    let b = spectrum("vanilla_tanh", 16, 1.5, 4, 500, 1, 100, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert!(a.iter().all(|x| x.is_finite()));
}

#[test]
fn unknown_cell_kind_is_an_error() {
    assert!(spectrum("gru", 4, 1.0, 1, 10, 1, 0, 0).is_err());
}

#[test]
fn floss_trace_has_one_entry_per_epoch() {
    let t = floss_trace("vanilla_tanh", 8, 1.0, 2, 5, 20, 1e-3, vec![-0.5, -0.5], 1).unwrap();
    assert_eq!(t.loss.len(), 5);
    assert_eq!(t.exponents.len(), 5);
    assert!(t.exponents.iter().all(|e| e.len() == 2));
}

#[test]
fn overrides_are_checked() {
    let (preset, p) = preset_params("convergence_trace", vec![("n_units".into(), Value::Int(6))]).unwrap();
    assert_eq!(preset, Preset::ConvergenceTrace);
    assert_eq!(p.usize("n_units").unwrap(), 6);
    assert!(preset_params("convergence_trace", vec![("nope".into(), Value::Int(1))]).is_err());
    assert!(preset_params("nope", Vec::new()).is_err());
}

#[test]
fn run_preset_returns_csv_per_output() {
    let ov = vec![
        ("n_units".into(), Value::Int(6)),
        ("k".into(), Value::Int(2)),
        ("t_sim".into(), Value::Int(100)),
        ("t_transient".into(), Value::Int(10)),
        ("points".into(), Value::Int(3)),
    ];
    let tables = run_preset_csv("convergence_trace", 0, ov).unwrap();
    let names: Vec<&str> = tables.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, Preset::ConvergenceTrace.outputs());
    assert!(tables.iter().all(|(_, csv)| csv.lines().count() > 1));
}
