//! Result bundles: seed shards, merged CSVs and a checksummed manifest.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.toml               config, seeds, version, wall clock, checksums
//! <table>.csv                 merged over seeds, in seed-list order
//! shards/seed_<s>/<table>.csv one realization
//! shards/seed_<s>/complete    config hash of the run that wrote the shard
//! checkpoints/<hash>/         resumable training state
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use flosslab::experiments::{run_seed, RunContext};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{CliError, Result};

pub const MANIFEST: &str = "manifest.toml";
const COMPLETE: &str = "complete";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub preset: String,
    /// SHA-256 of `config`.
    pub config_hash: String,
    /// Canonical config text.
    pub config: String,
    pub seeds: Vec<u64>,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub created_unix: u64,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        toml::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// The config recorded in the manifest.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the config's seed list.
    pub seeds: Option<Vec<u64>>,
    /// Replaces the config's output directory.
    pub output: Option<PathBuf>,
    /// Worker threads; `None` uses [`default_workers`].
    pub workers: Option<usize>,
    /// Keep finished seed shards and training checkpoints.
    pub resume: bool,
    /// Render the SVG report after the run.
    pub plots: bool,
}

/// Workers from the environment variable, else the available parallelism.
pub fn default_workers() -> usize {
    std::env::var(crate::WORKERS_ENV)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let tmp = path.with_extension(format!("{}.tmp", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(CliError::io(&tmp))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

fn output_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.output
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("results").join(&cfg.name))
}

fn shard_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("shards").join(format!("seed_{seed}"))
}

fn shard_complete(out: &Path, seed: u64, hash: &str) -> bool {
    fs::read_to_string(shard_dir(out, seed).join(COMPLETE)).is_ok_and(|s| s.trim() == hash)
}

fn run_one(cfg: &ExperimentConfig, params: &flosslab::experiments::Params, out: &Path, seed: u64, hash: &str) -> Result<()> {
    let ctx = RunContext {
        checkpoint_dir: Some(out.join("checkpoints").join(&hash[..16])),
    };
    let tables =
        run_seed(cfg.preset, params, seed, &ctx).map_err(|e| CliError::Runtime(format!("{} seed {seed}: {e}", cfg.preset.name())))?;
    let dir = shard_dir(out, seed);
    for (name, table) in tables {
        write_atomic(&dir.join(format!("{name}.csv")), table.to_csv_string().as_bytes())?;
    }
    write_atomic(&dir.join(COMPLETE), hash.as_bytes())
}

/// Concatenates the shards of `seeds` for one table, keeping one header.
fn merge(out: &Path, name: &str, seeds: &[u64]) -> Result<String> {
    let mut merged = String::new();
    let mut header: Option<String> = None;
    for &seed in seeds {
        let path = shard_dir(out, seed).join(format!("{name}.csv"));
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        let (head, body) = text.split_once('\n').unwrap_or((&text, ""));
        match &header {
            None => {
                merged.push_str(head);
                merged.push('\n');
                header = Some(head.to_string());
            }
            Some(h) if h != head => {
                return Err(CliError::Runtime(format!("{}: header differs from earlier seeds", path.display())));
            }
            Some(_) => {}
        }
        merged.push_str(body);
    }
    Ok(merged)
}

/// Runs the experiment across seeds and writes the bundle. Seeds run in
/// parallel on a bounded pool; CSV payloads depend only on config and seeds.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(PathBuf, Manifest)> {
    let issues = cfg.findings();
    if !issues.is_empty() {
        return Err(CliError::Validation(issues));
    }
    let mut cfg = cfg.clone();
    if let Some(seeds) = &opts.seeds {
        cfg.seeds = Some(seeds.clone());
    }
    let seeds = cfg.seed_list();
    let out = output_dir(&cfg, opts);
    fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    let hash = cfg.hash();
    let params = cfg.params();
    let started = Instant::now();

    if !opts.resume {
        let ckpt = out.join("checkpoints");
        if ckpt.exists() {
            fs::remove_dir_all(&ckpt).map_err(CliError::io(&ckpt))?;
        }
    }
    let todo: Vec<u64> = seeds
        .iter()
        .copied()
        .filter(|&s| !(opts.resume && shard_complete(&out, s, &hash)))
        .collect();
    let workers = opts.workers.unwrap_or_else(default_workers).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    let results: Vec<Result<()>> = pool.install(|| todo.par_iter().map(|&s| run_one(&cfg, &params, &out, s, &hash)).collect());
    let failures: Vec<String> = results.into_iter().filter_map(|r| r.err()).map(|e| e.to_string()).collect();
    if !failures.is_empty() {
        return Err(CliError::Runtime(failures.join("\n")));
    }

    let mut files = BTreeMap::new();
    if !seeds.is_empty() {
        for name in cfg.preset.outputs() {
            let file = format!("{name}.csv");
            let text = merge(&out, name, &seeds)?;
            write_atomic(&out.join(&file), text.as_bytes())?;
            files.insert(file, hex::encode(Sha256::digest(text.as_bytes())));
        }
    }
    let manifest = Manifest {
        name: cfg.name.clone(),
        preset: cfg.preset.name().to_string(),
        config_hash: hash,
        config: cfg.to_canonical(),
        seeds,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        files,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
    write_atomic(&out.join(MANIFEST), text.as_bytes())?;
    if opts.plots {
        crate::report::report(&out)?;
    }
    Ok((out, manifest))
}

/// Integrity problems of a bundle: config hash mismatch, missing or
/// modified files. Empty means intact.
pub fn verify(dir: &Path) -> Result<Vec<String>> {
    let manifest = Manifest::read(dir)?;
    let mut problems = Vec::new();
    let recomputed = hex::encode(Sha256::digest(manifest.config.as_bytes()));
    if recomputed != manifest.config_hash {
        problems.push("config hash does not match the recorded config".to_string());
    }
    for (file, expected) in &manifest.files {
        let path = dir.join(file);
        if !path.exists() {
            problems.push(format!("{file}: missing"));
            continue;
        }
        if &sha256_file(&path)? != expected {
            problems.push(format!("{file}: checksum mismatch"));
        }
    }
    Ok(problems)
}
