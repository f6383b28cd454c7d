//! Experiment configuration files.
//!
//! A config is a TOML document:
//!
//! ```toml
//! name = "fig1-quick"
//! preset = "fig1_targets"
//! seeds = [0, 1, 2]            # optional, preset default otherwise
//! output_dir = "results/fig1"  # optional, results/<name> otherwise
//!
//! [overrides]                  # optional, keys of the preset's defaults
//! floss_epochs = 50
//! targets = [-1.0, 0.0]
//! ```
//!
//! Unknown keys at either level are errors.

use std::collections::BTreeMap;
use std::path::PathBuf;

use flosslab::experiments::{findings, Params, Preset, Value};
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

const TOP_LEVEL_KEYS: [&str; 5] = ["name", "preset", "seeds", "output_dir", "overrides"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub preset: Preset,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
    /// Overrides in canonical form: already coerced to the preset's types.
    pub overrides: BTreeMap<String, Value>,
}

fn convert(key: &str, v: &toml::Value) -> std::result::Result<Value, String> {
    use toml::Value as T;
    let bad = || format!("override `{key}` has an unsupported value {v}");
    Ok(match v {
        T::Boolean(b) => Value::Bool(*b),
        T::Integer(i) => Value::Int(*i),
        T::Float(f) => Value::Float(*f),
        T::String(s) => Value::Text(s.clone()),
        T::Array(items) => {
            if items.iter().all(|x| x.is_integer()) {
                Value::IntList(items.iter().filter_map(|x| x.as_integer()).collect())
            } else if items.iter().all(|x| x.is_integer() || x.is_float()) {
                Value::FloatList(
                    items
                        .iter()
                        .map(|x| x.as_float().unwrap_or_else(|| x.as_integer().unwrap_or(0) as f64))
                        .collect(),
                )
            } else if items.iter().all(|x| x.is_str()) {
                Value::TextList(items.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
            } else {
                return Err(bad());
            }
        }
        _ => return Err(bad()),
    })
}

impl ExperimentConfig {
    /// A config running `preset` with its defaults.
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            name: preset.name().to_string(),
            preset,
            seeds: None,
            output_dir: None,
            overrides: BTreeMap::new(),
        }
    }

    /// Parses and checks keys and value types. Every problem found is
    /// reported, not just the first.
    pub fn parse(text: &str) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Validation(vec![e.to_string()]))?;
        let mut issues = Vec::new();
        for key in doc.keys().filter(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
            issues.push(format!("unknown key `{key}`"));
        }
        let name = match doc.get("name") {
            Some(toml::Value::String(s)) if !s.is_empty() => Some(s.clone()),
            Some(_) => {
                issues.push("`name` must be a non-empty string".into());
                None
            }
            None => {
                issues.push("missing key `name`".into());
                None
            }
        };
        let preset = match doc.get("preset") {
            Some(toml::Value::String(s)) => {
                let p = Preset::parse(s);
                if p.is_none() {
                    let known: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                    issues.push(format!("unknown preset `{s}` (known: {})", known.join(", ")));
                }
                p
            }
            Some(_) => {
                issues.push("`preset` must be a string".into());
                None
            }
            None => {
                issues.push("missing key `preset`".into());
                None
            }
        };
        let seeds = match doc.get("seeds") {
            None => None,
            Some(toml::Value::Array(items)) => {
                let parsed: Option<Vec<u64>> = items.iter().map(|x| x.as_integer().and_then(|i| u64::try_from(i).ok())).collect();
                if parsed.is_none() {
                    issues.push("`seeds` must be a list of non-negative integers".into());
                }
                parsed
            }
            Some(_) => {
                issues.push("`seeds` must be a list of non-negative integers".into());
                None
            }
        };
        let output_dir = match doc.get("output_dir") {
            None => None,
            Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => {
                issues.push("`output_dir` must be a string".into());
                None
            }
        };
        let mut overrides = BTreeMap::new();
        let mut resolved = preset.map(Preset::defaults);
        match (doc.get("overrides"), preset) {
            (None, _) => {}
            (Some(toml::Value::Table(table)), Some(preset)) => {
                let mut params = preset.defaults();
                for (key, raw) in table {
                    let value = match convert(key, raw) {
                        Ok(v) => v,
                        Err(e) => {
                            issues.push(e);
                            continue;
                        }
                    };
                    match params.set(key, value) {
                        Ok(()) => {
                            overrides.insert(key.clone(), params.get(key).cloned().expect("key was just set"));
                        }
                        Err(e) => issues.push(format!("overrides: {}", strip_prefix(&e.to_string()))),
                    }
                }
                resolved = Some(params);
            }
            (Some(toml::Value::Table(_)), None) => {}
            (Some(_), _) => issues.push("`overrides` must be a table".into()),
        }
        if !issues.is_empty() {
            if let (Some(preset), Some(params)) = (preset, &resolved) {
                issues.extend(findings(preset, params).iter().map(|s| strip_prefix(s).to_string()));
            }
            return Err(CliError::Validation(issues));
        }
        Ok(Self {
            name: name.expect("checked"),
            preset: preset.expect("checked"),
            seeds,
            output_dir,
            overrides,
        })
    }

    /// Preset defaults with the overrides applied.
    pub fn params(&self) -> Params {
        let mut p = self.preset.defaults();
        for (k, v) in &self.overrides {
            p.set(k, v.clone()).expect("overrides are validated at parse time");
        }
        p
    }

    /// Seeds to run: explicit list, else the preset's default.
    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| self.preset.default_seeds())
    }

    /// Consistency findings of the resolved parameters; never runs models.
    pub fn findings(&self) -> Vec<String> {
        findings(self.preset, &self.params())
            .iter()
            .map(|s| strip_prefix(s).to_string())
            .collect()
    }

    /// Canonical text: fixed key order, overrides sorted and typed.
    /// `parse(c.to_canonical()) == c` for every parsed `c`.
    pub fn to_canonical(&self) -> String {
        let mut out = format!(
            "name = {}\npreset = {}\n",
            text_literal(&self.name),
            text_literal(self.preset.name())
        );
        if let Some(seeds) = &self.seeds {
            let s: Vec<String> = seeds.iter().map(u64::to_string).collect();
            out.push_str(&format!("seeds = [{}]\n", s.join(", ")));
        }
        if let Some(dir) = &self.output_dir {
            out.push_str(&format!("output_dir = {}\n", text_literal(&dir.to_string_lossy())));
        }
        if !self.overrides.is_empty() {
            out.push_str("\n[overrides]\n");
            for (k, v) in &self.overrides {
                out.push_str(&format!("{} = {}\n", key_literal(k), to_toml(v)));
            }
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical().as_bytes()))
    }
}

fn text_literal(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn key_literal(k: &str) -> String {
    if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        k.to_string()
    } else {
        text_literal(k)
    }
}

fn to_toml(v: &Value) -> toml::Value {
    use toml::Value as T;
    match v {
        Value::Bool(b) => T::Boolean(*b),
        Value::Int(i) => T::Integer(*i),
        Value::Float(x) => T::Float(*x),
        Value::Text(s) => T::String(s.clone()),
        Value::IntList(xs) => T::Array(xs.iter().map(|&x| T::Integer(x)).collect()),
        Value::FloatList(xs) => T::Array(xs.iter().map(|&x| T::Float(x)).collect()),
        Value::TextList(xs) => T::Array(xs.iter().map(|x| T::String(x.clone())).collect()),
    }
}

fn strip_prefix(s: &str) -> &str {
    s.strip_prefix("invalid configuration: ").unwrap_or(s)
}

/// All problems with a config text, parse errors and parameter findings
/// alike. Empty means valid.
pub fn validate_text(text: &str) -> Vec<String> {
    match ExperimentConfig::parse(text) {
        Ok(cfg) => cfg.findings(),
        Err(CliError::Validation(issues)) => issues,
        Err(e) => vec![e.to_string()],
    }
}
