//! Acceptance criteria evaluated from experiment tables.
//!
//! Each evaluator reads the tables written by [`crate::experiments`] and
//! returns a [`Verdict`] with the measured quantity next to its threshold.

use std::collections::BTreeMap;

use crate::table::{Cell, Table};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub id: u32,
    pub title: String,
    pub measured: String,
    pub threshold: String,
    pub pass: bool,
}

impl Verdict {
    pub fn new(id: u32, title: &str, measured: impl Into<String>, threshold: impl Into<String>, pass: bool) -> Self {
        Self {
            id,
            title: title.to_string(),
            measured: measured.into(),
            threshold: threshold.into(),
            pass,
        }
    }

    /// `criterion <id> [PASS|FAIL] <title>: measured <m> (threshold <t>)`
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} [{}] {}: measured {} (threshold {})",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.title,
            self.measured,
            self.threshold
        )
    }
}

/// Markdown table of verdicts.
pub fn markdown(verdicts: &[Verdict]) -> String {
    let mut s = String::from("| criterion | title | measured | threshold | result |\n|---|---|---|---|---|\n");
    for v in verdicts {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            v.id,
            v.title,
            v.measured,
            v.threshold,
            if v.pass { "pass" } else { "fail" }
        ));
    }
    s
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn col(t: &Table, name: &str) -> Result<usize> {
    t.column_index(name).ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("missing column `{name}`"),
    })
}

fn num(row: &[Cell], j: usize) -> f64 {
    row[j].as_f64().unwrap_or(f64::NAN)
}

fn text(row: &[Cell], j: usize) -> String {
    row[j].render()
}

/// `|λ₁ − target| < 0.1` for at least `min_fraction` of the seeds, for every
/// target.
pub fn first_exponent_targets(finals: &Table, min_fraction: f64) -> Result<Verdict> {
    let (jt, jl) = (col(finals, "target")?, col(finals, "lambda_1_final")?);
    let mut by_target: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in &finals.rows {
        let e = by_target.entry(text(r, jt)).or_default();
        e.1 += 1;
        if (num(r, jl) - num(r, jt)).abs() < 0.1 {
            e.0 += 1;
        }
    }
    let pass = !by_target.is_empty() && by_target.values().all(|(h, n)| *h as f64 >= min_fraction * *n as f64);
    let measured: Vec<String> = by_target
        .iter()
        .map(|(t, (h, n))| format!("{h}/{n} at target {}", t.parse::<f64>().map_or(t.clone(), |x| x.to_string())))
        .collect();
    Ok(Verdict::new(
        3,
        "first exponent reaches targets -1, -0.5, 0",
        measured.join(", "),
        format!("|lambda_1 - target| < 0.1 in >= {:.0}% of seeds per target", 100.0 * min_fraction),
        pass,
    ))
}

/// Flossed exponents near zero while the rest stay dispersed across seeds.
pub fn flossed_spectrum_selectivity(spectra: &Table, k: usize) -> Result<Verdict> {
    let (jk, js, ji, jl) = (
        col(spectra, "k")?,
        col(spectra, "stage")?,
        col(spectra, "i")?,
        col(spectra, "lambda_i")?,
    );
    let mut per_i: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in spectra.rows.iter().filter(|r| num(r, jk) == k as f64 && text(r, js) == "flossed") {
        per_i.entry(num(r, ji) as usize).or_default().push(num(r, jl));
    }
    if per_i.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: format!("no flossed spectra with k = {k}"),
        });
    }
    let spread = |v: &Vec<f64>| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
    let worst_abs = per_i
        .iter()
        .filter(|(i, _)| **i <= k)
        .map(|(_, v)| median(&v.iter().map(|x| x.abs()).collect::<Vec<_>>()))
        .fold(0.0, f64::max);
    let flossed_spread = median(&per_i.iter().filter(|(i, _)| **i <= k).map(|(_, v)| spread(v)).collect::<Vec<_>>());
    let rest_spread = median(&per_i.iter().filter(|(i, _)| **i > k).map(|(_, v)| spread(v)).collect::<Vec<_>>());
    let ratio = rest_spread / flossed_spread;
    Ok(Verdict::new(
        4,
        "flossing half the spectrum leaves the rest dispersed",
        format!("max_i median|lambda_i| = {worst_abs:.4}, spread ratio = {ratio:.2}"),
        "median|lambda_i| < 0.05 for i <= k, spread ratio > 5",
        worst_abs < 0.05 && ratio > 5.0,
    ))
}

/// Relative error of the exponent-based estimate at the longest horizon for
/// the unflossed network, median over seeds.
pub fn condition_estimate_accuracy(cond: &Table, m: usize) -> Result<(Verdict, Vec<f64>)> {
    let (jk, jh, jm) = (col(cond, "k")?, col(cond, "horizon")?, col(cond, "m")?);
    let (jd, je, jr) = (
        col(cond, "log_kappa_direct")?,
        col(cond, "log_kappa_estimate")?,
        col(cond, "reliable")?,
    );
    let rows: Vec<&Vec<Cell>> = cond.rows.iter().filter(|r| num(r, jk) == 0.0 && num(r, jm) == m as f64).collect();
    let h_max = rows.iter().map(|r| num(r, jh)).fold(f64::MIN, f64::max);
    let last: Vec<&&Vec<Cell>> = rows.iter().filter(|r| num(r, jh) == h_max).collect();
    let errs: Vec<f64> = last.iter().map(|r| (num(r, je) - num(r, jd)).abs() / num(r, jd).abs()).collect();
    let reliable = last.iter().all(|r| num(r, jr) == 1.0);
    let med = median(&errs);
    Ok((
        Verdict::new(
            6,
            "exponent estimate of log condition vs extended precision",
            format!(
                "median relative error {med:.4} at horizon {h_max} (m = {m}, {} seeds, precision check {})",
                errs.len(),
                if reliable { "ok" } else { "flagged" }
            ),
            "< 0.10",
            !errs.is_empty() && med < 0.10 && reliable,
        ),
        errs,
    ))
}

/// Usable dimensions of flossed vs unflossed networks at one horizon.
pub fn usable_dimension_gain(usable: &Table, k: usize, horizon: usize) -> Result<Verdict> {
    let (js, jk, jh, ju) = (
        col(usable, "seed")?,
        col(usable, "k")?,
        col(usable, "horizon")?,
        col(usable, "usable_m")?,
    );
    let mut pairs: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for r in usable.rows.iter().filter(|r| num(r, jh) == horizon as f64) {
        let e = pairs.entry(text(r, js)).or_insert((f64::NAN, f64::NAN));
        if num(r, jk) == 0.0 {
            e.0 = num(r, ju);
        } else if num(r, jk) == k as f64 {
            e.1 = num(r, ju);
        }
    }
    let base: Vec<f64> = pairs.values().map(|p| p.0).collect();
    let flossed: Vec<f64> = pairs.values().map(|p| p.1).collect();
    let strict = pairs.values().filter(|(b, f)| f > b).count();
    let n = pairs.len();
    let (mb, mf) = (median(&base), median(&flossed));
    Ok(Verdict::new(
        7,
        "flossing increases usable tangent dimensions",
        format!("median usable m: flossed {mf}, unflossed {mb}; strict increase in {strict}/{n} seeds"),
        "flossed median >= unflossed median, strict increase in >= 60% of seeds",
        n > 0 && mf >= mb && strict as f64 >= 0.6 * n as f64,
    ))
}

fn finals_by_condition(finals: &Table, column: &str) -> Result<BTreeMap<String, Vec<f64>>> {
    let (jc, jv) = (col(finals, "condition")?, col(finals, column)?);
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &finals.rows {
        out.entry(text(r, jc)).or_default().push(num(r, jv));
    }
    Ok(out)
}

/// Preflossing on the delayed copy task, full protocol.
pub fn prefloss_copy_full(finals: &Table) -> Result<Verdict> {
    let by = finals_by_condition(finals, "test_loss")?;
    let pre = by.get("prefloss").cloned().unwrap_or_default();
    let none = by.get("none").cloned().unwrap_or_default();
    let good = pre.iter().filter(|x| **x < 0.05).count();
    let bad = none.iter().filter(|x| **x > 0.1).count();
    Ok(Verdict::new(
        8,
        "preflossing enables delayed copy at d = 40",
        format!(
            "preflossed MSE < 0.05 in {good}/{}; unflossed MSE > 0.1 in {bad}/{}",
            pre.len(),
            none.len()
        ),
        ">= 60% of seeds each",
        !pre.is_empty() && !none.is_empty() && good as f64 >= 0.6 * pre.len() as f64 && bad as f64 >= 0.6 * none.len() as f64,
    ))
}

/// Preflossing on the delayed copy task, short protocol.
pub fn prefloss_copy_smoke(finals: &Table) -> Result<Verdict> {
    let by = finals_by_condition(finals, "test_loss")?;
    let pre = median(by.get("prefloss").map_or(&[][..], |v| v));
    let none = median(by.get("none").map_or(&[][..], |v| v));
    Ok(Verdict::new(
        8,
        "preflossing helps delayed copy (smoke)",
        format!("median test MSE: preflossed {pre:.4}, unflossed {none:.4}"),
        "preflossed < unflossed",
        pre < none,
    ))
}

/// Flossing during training on binary temporal XOR, full protocol.
pub fn during_xor_full(finals: &Table) -> Result<Verdict> {
    let by = finals_by_condition(finals, "test_accuracy")?;
    let during = by.get("during").cloned().unwrap_or_default();
    let none = by.get("none").cloned().unwrap_or_default();
    let (md, mn) = (mean(&during), mean(&none));
    Ok(Verdict::new(
        9,
        "flossing during training solves temporal XOR at d = 70",
        format!(
            "mean accuracy: during {md:.3} ({} seeds), none {mn:.3} ({} seeds)",
            during.len(),
            none.len()
        ),
        "during > 0.8 and none <= 0.6, >= 10 seeds",
        during.len() >= 10 && none.len() >= 10 && md > 0.8 && mn <= 0.6,
    ))
}

/// Flossing during training on binary temporal XOR, short protocol.
pub fn during_xor_smoke(finals: &Table) -> Result<Verdict> {
    let by = finals_by_condition(finals, "test_accuracy")?;
    let md = median(by.get("during").map_or(&[][..], |v| v));
    let mn = median(by.get("none").map_or(&[][..], |v| v));
    Ok(Verdict::new(
        9,
        "flossing during training helps temporal XOR (smoke)",
        format!("median accuracy: during {md:.3}, none {mn:.3}, gap {:.3}", md - mn),
        "gap >= 0.2",
        md - mn >= 0.2,
    ))
}

/// Gradient diagnostics around flossing episodes of the `during` condition.
/// Returns the grad-h0 verdict and the σ₂₀ verdict.
pub fn flossing_diagnostics(curves: &Table, episodes: &[usize], sigma: &str) -> Result<(Verdict, Verdict)> {
    let (js, jc, je, jg, jsig) = (
        col(curves, "seed")?,
        col(curves, "condition")?,
        col(curves, "epoch")?,
        col(curves, "grad_h0_norm")?,
        col(curves, sigma)?,
    );
    let mut per_seed: BTreeMap<String, BTreeMap<usize, (f64, f64)>> = BTreeMap::new();
    for r in curves.rows.iter().filter(|r| text(r, jc) == "during") {
        per_seed
            .entry(text(r, js))
            .or_default()
            .insert(num(r, je) as usize, (num(r, jg), num(r, jsig)));
    }
    let mut spikes = Vec::new();
    let mut peaks = Vec::new();
    for rows in per_seed.values() {
        let mut s_ratio = Vec::new();
        let mut p_ratio = Vec::new();
        for &s in episodes.iter().filter(|&&s| s >= 1) {
            let (Some(before), Some(at)) = (rows.get(&(s - 1)), rows.get(&s)) else {
                continue;
            };
            s_ratio.push(at.0 / before.0);
            if let Some(after) = rows.get(&(s + 1)) {
                p_ratio.push((at.1 / before.1).min(at.1 / after.1));
            }
        }
        spikes.push(median(&s_ratio));
        peaks.push(median(&p_ratio));
    }
    let (ms, mp) = (median(&spikes), median(&peaks));
    Ok((
        Verdict::new(
            10,
            "grad-h0 norm spikes at flossing epochs",
            format!("median ratio to preceding epoch {ms:.3} over {} seeds", spikes.len()),
            "> 10",
            ms > 10.0,
        ),
        Verdict::new(
            10,
            &format!("{sigma} of dL/dW peaks at flossing epochs"),
            format!("median min ratio to neighbours {mp:.3} over {} seeds", peaks.len()),
            "> 1",
            mp > 1.0,
        ),
    ))
}

/// `|λ₁| < 0.1` after flossing for at least `min_fraction` of seeds, per
/// architecture.
pub fn lstm_relu_flossing(finals: &Table, min_fraction: f64) -> Result<Verdict> {
    let (jk, jl) = (col(finals, "kind")?, col(finals, "lambda_1_final")?);
    let mut by: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in &finals.rows {
        let e = by.entry(text(r, jk)).or_default();
        e.1 += 1;
        if num(r, jl).abs() < 0.1 {
            e.0 += 1;
        }
    }
    let pass = !by.is_empty() && by.values().all(|(h, n)| *h as f64 >= min_fraction * *n as f64);
    let measured: Vec<String> = by.iter().map(|(k, (h, n))| format!("{k} {h}/{n}")).collect();
    Ok(Verdict::new(
        11,
        "LSTM and ReLU first exponent flossed to zero",
        measured.join(", "),
        format!("|lambda_1| < 0.1 in >= {:.0}% of seeds per architecture", 100.0 * min_fraction),
        pass,
    ))
}
