//! SVG plots and a markdown acceptance summary for a result bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use flosslab::criteria::{self, Verdict};
use flosslab::experiments::{Params, Preset};
use flosslab::table::Table;

use crate::bundle::{verify, write_atomic, Manifest};
use crate::plot::{LinePlot, Series};
use crate::{CliError, Result};

pub const REPORT: &str = "report.md";

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub markdown: PathBuf,
    pub plots: Vec<PathBuf>,
    pub verdicts: Vec<Verdict>,
}

fn missing(table: &str, column: &str) -> CliError {
    CliError::Runtime(format!("table `{table}` is missing column `{column}`"))
}

struct Loaded {
    tables: BTreeMap<String, Table>,
}

impl Loaded {
    fn get(&self, name: &str) -> Result<&Table> {
        self.tables
            .get(name)
            .ok_or_else(|| CliError::Runtime(format!("bundle has no table `{name}`")))
    }

    fn f64s(&self, name: &str, column: &str) -> Result<Vec<f64>> {
        self.get(name)?.column_f64(column).ok_or_else(|| missing(name, column))
    }

    fn texts(&self, name: &str, column: &str) -> Result<Vec<String>> {
        self.get(name)?.column_text(column).ok_or_else(|| missing(name, column))
    }
}

/// Renders a numeric key compactly (`-0.5` rather than `-5.0e-1`).
fn short(s: &str) -> String {
    s.parse::<f64>().map_or_else(|_| s.to_string(), |v| format!("{v}"))
}

/// Line series grouped by `(plot key, series key)`, x and y from columns.
fn grouped(
    data: &Loaded,
    table: &str,
    plot_key: Option<&str>,
    series_key: &[&str],
    x: &str,
    y: &str,
) -> Result<BTreeMap<String, Vec<Series>>> {
    let n = data.get(table)?.len();
    let pk = match plot_key {
        Some(c) => data.texts(table, c)?,
        None => vec![String::new(); n],
    };
    let sk: Vec<Vec<String>> = series_key.iter().map(|c| data.texts(table, c)).collect::<Result<_>>()?;
    let xs = data.f64s(table, x)?;
    let ys = data.f64s(table, y)?;
    let mut out: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for i in 0..n {
        let label: Vec<String> = series_key.iter().zip(&sk).map(|(c, v)| format!("{c} {}", short(&v[i]))).collect();
        out.entry(short(&pk[i]))
            .or_default()
            .entry(label.join(", "))
            .or_default()
            .push((xs[i], ys[i]));
    }
    Ok(out
        .into_iter()
        .map(|(k, series)| (k, series.into_iter().map(|(l, p)| Series::new(l, p)).collect()))
        .collect())
}

fn plots_for(preset: Preset, params: &Params, data: &Loaded) -> Result<Vec<(String, LinePlot)>> {
    let mut plots = Vec::new();
    let mut add = |file: String, title: String, x: &str, y: &str, log: bool, series: Vec<Series>| {
        let mut p = LinePlot::new(title, x, y);
        if log {
            p = p.log_y();
        }
        p.series = series;
        plots.push((file, p));
    };
    match preset {
        Preset::Fig1Targets => {
            for (t, s) in grouped(data, "fig1_targets", Some("target"), &["seed"], "epoch", "lambda_1")? {
                add(
                    format!("fig1_targets_target_{t}.svg"),
                    format!("lambda_1 during flossing, target {t}"),
                    "epoch",
                    "lambda_1",
                    false,
                    s,
                );
            }
        }
        Preset::Fig1Spectrum => {
            for (k, s) in grouped(data, "fig1_spectrum", Some("k"), &["seed"], "i", "lambda_i")? {
                let what = if k == "0" {
                    "before flossing".to_string()
                } else {
                    format!("after flossing k = {k}")
                };
                add(
                    format!("fig1_spectrum_k{k}.svg"),
                    format!("Lyapunov spectrum {what}"),
                    "i",
                    "lambda_i",
                    false,
                    s,
                );
            }
            for (_, s) in grouped(data, "fig1_spectrum_loss", None, &["k", "seed"], "epoch", "loss")? {
                add("fig1_spectrum_loss.svg".into(), "flossing loss".into(), "epoch", "loss", true, s);
            }
        }
        Preset::Fig2Condition => {
            let m = params.usize("m_check").map_err(|e| CliError::Runtime(e.to_string()))?;
            let t = data.get("fig2_condition")?.clone();
            let jm = t.column_index("m").ok_or_else(|| missing("fig2_condition", "m"))?;
            let only_m = t.filter(|r| r[jm].as_f64() == Some(m as f64));
            let sub = Loaded {
                tables: BTreeMap::from([("c".to_string(), only_m)]),
            };
            for (_, s) in grouped(&sub, "c", None, &["k", "seed"], "horizon", "log_kappa_direct")? {
                add(
                    format!("fig2_condition_m{m}.svg"),
                    format!("log condition number, m = {m}"),
                    "horizon",
                    "log kappa",
                    false,
                    s,
                );
            }
            for (_, s) in grouped(data, "fig2_usable", None, &["k", "seed"], "horizon", "usable_m")? {
                add(
                    "fig2_usable.svg".into(),
                    "usable tangent dimensions".into(),
                    "horizon",
                    "usable m",
                    false,
                    s,
                );
            }
        }
        Preset::Fig3Prefloss | Preset::Fig4During | Preset::FigSOrthogonal => {
            let name = format!("{}_curves", preset.name());
            let acc = data.f64s(&name, "test_accuracy")?;
            let (metric, log) = if acc.iter().any(|a| a.is_finite()) {
                ("test_accuracy", false)
            } else {
                ("test_loss", true)
            };
            for (c, s) in grouped(data, &name, Some("condition"), &["seed"], "epoch", metric)? {
                add(
                    format!("{}_{metric}_{c}.svg", preset.name()),
                    format!("{metric}, {c}"),
                    "epoch",
                    metric,
                    log,
                    s,
                );
            }
            if data.f64s(&name, "grad_h0_norm")?.iter().any(|g| g.is_finite()) {
                for (c, s) in grouped(data, &name, Some("condition"), &["seed"], "epoch", "grad_h0_norm")? {
                    add(
                        format!("{}_grad_h0_{c}.svg", preset.name()),
                        format!("|dL/dh0|, {c}"),
                        "epoch",
                        "grad_h0_norm",
                        true,
                        s,
                    );
                }
            }
        }
        Preset::Fig5Ksweep => {
            let name = "fig5_ksweep_final";
            let (ks, ds, acc) = (data.texts(name, "k")?, data.f64s(name, "delay")?, data.f64s(name, "test_accuracy")?);
            let mut by: BTreeMap<i64, BTreeMap<i64, Vec<f64>>> = BTreeMap::new();
            for i in 0..ks.len() {
                let k = ks[i].parse::<i64>().unwrap_or(-1);
                by.entry(k).or_default().entry(ds[i] as i64).or_default().push(acc[i]);
            }
            let series = by
                .into_iter()
                .map(|(k, per_d)| {
                    let pts = per_d.into_iter().map(|(d, v)| (d as f64, criteria::mean(&v))).collect();
                    Series::new(format!("k {k}"), pts)
                })
                .collect();
            add(
                "fig5_ksweep.svg".into(),
                "mean test accuracy vs delay".into(),
                "delay",
                "accuracy",
                false,
                series,
            );
        }
        Preset::FigS1LstmRelu => {
            for (kind, s) in grouped(data, "figS1_lstm_relu", Some("kind"), &["seed"], "epoch", "lambda_1")? {
                add(
                    format!("figS1_{kind}.svg"),
                    format!("lambda_1 during flossing, {kind}"),
                    "epoch",
                    "lambda_1",
                    false,
                    s,
                );
            }
        }
        Preset::ConvergenceTrace => {
            for (seed, s) in grouped(data, "convergence_trace", Some("seed"), &["i"], "t", "lambda_i_running")? {
                add(
                    format!("convergence_seed{seed}.svg"),
                    format!("running exponent estimates, seed {seed}"),
                    "t",
                    "lambda_i",
                    false,
                    s,
                );
            }
        }
    }
    Ok(plots)
}

fn flossing_episodes(params: &Params) -> Result<Vec<usize>> {
    let err = |e: flosslab::Error| CliError::Runtime(e.to_string());
    let epochs = params.usize("epochs").map_err(err)?;
    let all = flosslab::experiments::during_episodes(params).map_err(err)?;
    Ok(all.into_iter().filter(|&e| e >= 1 && e < epochs).collect())
}

/// Acceptance criteria that this bundle's preset and settings can speak to.
fn verdicts_for(preset: Preset, params: &Params, data: &Loaded) -> Result<Vec<Verdict>> {
    let crit = |r: flosslab::Result<Verdict>| r.map_err(|e| CliError::Runtime(e.to_string()));
    let get = |k: &str| params.usize(k).unwrap_or(0);
    let mut out = Vec::new();
    match preset {
        Preset::Fig1Targets => out.push(crit(criteria::first_exponent_targets(data.get("fig1_targets_final")?, 0.8))?),
        Preset::Fig1Spectrum => {
            if get("n_units") == 32 && params.usize_list("ks").unwrap_or_default().contains(&16) {
                out.push(crit(criteria::flossed_spectrum_selectivity(data.get("fig1_spectrum")?, 16))?);
            }
        }
        Preset::Fig2Condition => {
            let (v, _) = criteria::condition_estimate_accuracy(data.get("fig2_condition")?, get("m_check"))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            out.push(v);
            let horizon = params.usize_list("horizons").unwrap_or_default().into_iter().max().unwrap_or(0);
            if let Some(&k) = params.usize_list("ks").unwrap_or_default().first() {
                out.push(crit(criteria::usable_dimension_gain(data.get("fig2_usable")?, k, horizon))?);
            }
        }
        Preset::Fig3Prefloss => {
            let finals = data.get("fig3_prefloss_final")?;
            let full = get("delay") == 40 && get("epochs") >= 10_000;
            out.push(crit(if full {
                criteria::prefloss_copy_full(finals)
            } else {
                criteria::prefloss_copy_smoke(finals)
            })?);
        }
        Preset::Fig4During => {
            let conditions = params.text_list("conditions").unwrap_or_default();
            if conditions.iter().any(|c| c == "none") && conditions.iter().any(|c| c == "during") {
                let finals = data.get("fig4_during_final")?;
                let full = get("delay") == 70 && get("epochs") >= 10_000;
                out.push(crit(if full {
                    criteria::during_xor_full(finals)
                } else {
                    criteria::during_xor_smoke(finals)
                })?);
            }
            if params.bool("diagnostics").unwrap_or(false) && conditions.iter().any(|c| c == "during") {
                let episodes = flossing_episodes(params)?;
                if !episodes.is_empty() {
                    let (a, b) = criteria::flossing_diagnostics(data.get("fig4_during_curves")?, &episodes, "sigma_20")
                        .map_err(|e| CliError::Runtime(e.to_string()))?;
                    out.extend([a, b]);
                }
            }
        }
        Preset::FigS1LstmRelu => out.push(crit(criteria::lstm_relu_flossing(data.get("figS1_lstm_relu_final")?, 0.7))?),
        Preset::Fig5Ksweep | Preset::FigSOrthogonal | Preset::ConvergenceTrace => {}
    }
    Ok(out)
}

/// Checks bundle integrity, then writes `plots/*.svg` and `report.md`.
pub fn report(dir: &Path) -> Result<ReportSummary> {
    let problems = verify(dir)?;
    if !problems.is_empty() {
        return Err(CliError::Runtime(format!(
            "bundle integrity check failed:\n  {}",
            problems.join("\n  ")
        )));
    }
    let manifest = Manifest::read(dir)?;
    let cfg = manifest.experiment()?;
    let params = cfg.params();
    let mut tables = BTreeMap::new();
    for file in manifest.files.keys() {
        let path = dir.join(file);
        let f = fs::File::open(&path).map_err(CliError::io(&path))?;
        let t = Table::read_csv(f).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        tables.insert(file.trim_end_matches(".csv").to_string(), t);
    }
    let data = Loaded { tables };

    let mut md = format!(
        "# {}\n\nPreset `{}`, seeds {:?}, config hash `{}`.\n\n",
        manifest.name,
        manifest.preset,
        manifest.seeds,
        &manifest.config_hash[..16]
    );
    let mut written = Vec::new();
    let mut verdicts = Vec::new();
    if data.tables.is_empty() {
        md.push_str("Empty bundle: no seeds were run.\n");
    } else {
        verdicts = verdicts_for(cfg.preset, &params, &data)?;
        if !verdicts.is_empty() {
            md.push_str("## Acceptance\n\n");
            md.push_str(&criteria::markdown(&verdicts));
            md.push('\n');
        }
        md.push_str("## Plots\n\n");
        for (file, plot) in plots_for(cfg.preset, &params, &data)? {
            let path = dir.join("plots").join(&file);
            plot.write(&path)?;
            md.push_str(&format!("![{}](plots/{file})\n\n", plot.title));
            written.push(path);
        }
    }
    let markdown = dir.join(REPORT);
    write_atomic(&markdown, md.as_bytes())?;
    Ok(ReportSummary {
        markdown,
        plots: written,
        verdicts,
    })
}
