//! Experiment orchestration: configs, run manifests with content digests,
//! and the implementations behind the CLI verbs.
//!
//! Every command seeds all randomness from one root seed through named
//! substreams, validates its config before touching the filesystem, and
//! finishes by writing a `manifest.json` listing each emitted artifact
//! with its SHA-256 digest. Re-running a command with the same config
//! reproduces the digests byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{evaluate_pairs, MetricsRecord};
use crate::rng::{streams, Rng, RNG_ALGORITHM};
use crate::segnet::{predict, NetError, NetParams};
use crate::stacklab::{
    bayes_update, bound_check, stacking_law_mc, FeatureStack, GaussianPrior,
};
use crate::synthgen::{
    gen_dataset, load_dataset, write_dataset, Dataset, DatasetConfig, SynthError,
};
use crate::trainer::{train, Mode, TrainConfig, TrainError};

/// Command outcome mapped to a process exit code.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("verification failed: {0}")]
    VerifyFailed(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::VerifyFailed(_) => 1,
            HarnessError::Config(_) => 2,
            HarnessError::Io(_) => 3,
            HarnessError::Corrupt(_) => 4,
            HarnessError::Run(_) => 5,
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<SynthError> for HarnessError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { .. } => HarnessError::Io(e.to_string()),
            SynthError::Corrupt(_) => HarnessError::Corrupt(e.to_string()),
            SynthError::Invalid(_) => HarnessError::Config(e.to_string()),
        }
    }
}

impl From<NetError> for HarnessError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io(_) => HarnessError::Io(e.to_string()),
            NetError::Corrupt(_) => HarnessError::Corrupt(e.to_string()),
            _ => HarnessError::Run(e.to_string()),
        }
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Invalid(_) => HarnessError::Config(e.to_string()),
            _ => HarnessError::Run(e.to_string()),
        }
    }
}

pub type HarnessResult<V> = Result<V, HarnessError>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    let mut s = String::with_capacity(64);
    for b in d {
        let _ = write!(s, "{:02x}", b);
    }
    s
}

fn sha256_file(path: &Path) -> HarnessResult<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub rng_algorithm: String,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// "complete" or "aborted: <reason>".
    pub status: String,
    /// Relative artifact path -> SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    fn begin(command: &str, config: serde_json::Value, seed: u64) -> Self {
        let cfg_bytes = serde_json::to_vec(&config).unwrap_or_default();
        let run_id = format!("{}-{}", command, &sha256_hex(&cfg_bytes)[..12]);
        let mut seeds = BTreeMap::new();
        seeds.insert("root".into(), seed);
        seeds.insert("init".into(), streams::INIT);
        seeds.insert("data".into(), streams::DATA);
        seeds.insert("sampling".into(), streams::SAMPLING);
        seeds.insert("shuffle".into(), streams::SHUFFLE);
        seeds.insert("verify".into(), streams::VERIFY);
        RunManifest {
            run_id,
            command: command.into(),
            config,
            seeds,
            rng_algorithm: RNG_ALGORITHM.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: unix_now(),
            finished_unix: 0,
            status: "running".into(),
            outputs: BTreeMap::new(),
        }
    }

    fn register(&mut self, dir: &Path, rel: &str) -> HarnessResult<()> {
        let digest = sha256_file(&dir.join(rel))?;
        self.outputs.insert(rel.to_string(), digest);
        Ok(())
    }

    fn finish(mut self, dir: &Path, status: &str) -> HarnessResult<()> {
        self.finished_unix = unix_now();
        self.status = status.into();
        let bytes = serde_json::to_vec_pretty(&self)
            .map_err(|e| HarnessError::Run(format!("manifest encode: {}", e)))?;
        fs::write(dir.join("manifest.json"), bytes)?;
        Ok(())
    }
}

fn read_config<C: serde::de::DeserializeOwned>(path: &Path) -> HarnessResult<C> {
    let bytes = fs::read(path)
        .map_err(|e| HarnessError::Io(format!("{}: {}", path.display(), e)))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| HarnessError::Config(format!("{}: {}", path.display(), e)))
}

fn ensure_dir(dir: &Path) -> HarnessResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| HarnessError::Io(format!("{}: {}", dir.display(), e)))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{}", x),
        None => "undefined".into(),
    }
}

// ---------------------------------------------------------------- verify

const STACKING_N: [usize; 4] = [1, 4, 16, 64];
const STACKING_TRIALS: usize = 10_000;
const STACKING_TOL: f64 = 0.05;
const BAYES_INSTANCES: usize = 100;
const BAYES_TOL: f64 = 1e-9;
const BOUND_INSTANCES: usize = 1000;

/// Monte Carlo and algebraic checks of the stacking/posterior theory.
/// `inject_fault` drops the sqrt(n) division in the predicted std, which
/// must make the run fail (negative control for the checker itself).
pub fn cmd_verify(out: &Path, seed: u64, inject_fault: bool) -> HarnessResult<()> {
    ensure_dir(out)?;
    let config = serde_json::json!({
        "seed": seed,
        "sigma": 1.0,
        "n_values": STACKING_N,
        "trials": STACKING_TRIALS,
        "tolerance": STACKING_TOL,
        "bayes_instances": BAYES_INSTANCES,
        "bound_instances": BOUND_INSTANCES,
        "inject_fault": inject_fault,
    });
    let mut manifest = RunManifest::begin("verify", config, seed);
    let rng = Rng::new(seed, streams::VERIFY);

    let mut csv = String::from("check,n,trials,observed,expected,ratio,pass\n");
    let mut failures: Vec<String> = Vec::new();

    let rows = stacking_law_mc(1.0, &STACKING_N, STACKING_TRIALS, &rng.child(1))
        .map_err(|e| HarnessError::Run(e.to_string()))?;
    for row in &rows {
        let predicted = if inject_fault { row.sigma } else { row.predicted_std };
        let ratio = row.empirical_std / predicted;
        let pass = (ratio - 1.0).abs() <= STACKING_TOL;
        if !pass {
            failures.push(format!("stacking n={} ratio={}", row.n, ratio));
        }
        let _ = writeln!(
            csv,
            "stacking,{},{},{},{},{},{}",
            row.n, row.trials, row.empirical_std, predicted, ratio, pass
        );
    }

    let mut bayes_rng = rng.child(2);
    let mut max_rel = 0.0f64;
    for _ in 0..BAYES_INSTANCES {
        let dim = 1 + bayes_rng.uniform_usize(4);
        let n = 2 + bayes_rng.uniform_usize(6);
        let sigma0 = bayes_rng.uniform(0.2, 2.0);
        let sigma = bayes_rng.uniform(0.2, 2.0);
        let t0: Vec<f64> = (0..dim).map(|_| bayes_rng.uniform(-1.0, 1.0)).collect();
        let obs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| bayes_rng.uniform(-2.0, 2.0)).collect())
            .collect();
        let prior = GaussianPrior::new(t0, sigma0, sigma)
            .map_err(|e| HarnessError::Run(e.to_string()))?;
        let (batch_mean, batch_var) =
            bayes_update(&prior, &obs).map_err(|e| HarnessError::Run(e.to_string()))?;
        let mut p = prior.clone();
        for o in &obs {
            let (m, v) = bayes_update(&p, std::slice::from_ref(o))
                .map_err(|e| HarnessError::Run(e.to_string()))?;
            p = GaussianPrior::new(m, v.sqrt(), p.sigma)
                .map_err(|e| HarnessError::Run(e.to_string()))?;
        }
        let seq_var = p.sigma0 * p.sigma0;
        for (a, b) in batch_mean.iter().zip(&p.t0) {
            let rel = (a - b).abs() / a.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
        max_rel = max_rel.max((batch_var - seq_var).abs() / batch_var.abs().max(1.0));
    }
    let bayes_pass = max_rel <= BAYES_TOL;
    if !bayes_pass {
        failures.push(format!("bayes max_rel_err={}", max_rel));
    }
    let _ = writeln!(
        csv,
        "bayes,,{},{},{},,{}",
        BAYES_INSTANCES, max_rel, BAYES_TOL, bayes_pass
    );

    let mut bound_rng = rng.child(3);
    let mut violations = 0usize;
    for _ in 0..BOUND_INSTANCES {
        let n = [2usize, 4, 8][bound_rng.uniform_usize(3)];
        let dim = 1 + bound_rng.uniform_usize(6);
        let sigma0 = bound_rng.uniform(0.2, 2.0);
        let sigma = bound_rng.uniform(0.2, 2.0);
        let t0: Vec<f64> = (0..dim).map(|_| bound_rng.uniform(-1.0, 1.0)).collect();
        let items: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|j| t0[j] + bound_rng.normal(0.0, sigma))
                    .collect()
            })
            .collect();
        let stack = FeatureStack::new(items).map_err(|e| HarnessError::Run(e.to_string()))?;
        let prior = GaussianPrior::new(t0, sigma0, sigma)
            .map_err(|e| HarnessError::Run(e.to_string()))?;
        let i = bound_rng.uniform_usize(n);
        let chk = bound_check(&stack, &prior, i).map_err(|e| HarnessError::Run(e.to_string()))?;
        if !chk.holds {
            violations += 1;
        }
    }
    let bound_pass = violations == 0;
    if !bound_pass {
        failures.push(format!("bound violations={}", violations));
    }
    let _ = writeln!(
        csv,
        "bound,,{},{},0,,{}",
        BOUND_INSTANCES, violations, bound_pass
    );

    fs::write(out.join("verify.csv"), &csv)?;
    manifest.register(out, "verify.csv")?;
    if failures.is_empty() {
        manifest.finish(out, "complete")?;
        Ok(())
    } else {
        let msg = failures.join("; ");
        manifest.finish(out, &format!("aborted: {}", msg))?;
        Err(HarnessError::VerifyFailed(msg))
    }
}

// ------------------------------------------------------------------- gen

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub dataset: DatasetConfig,
    pub seed: u64,
}

pub fn cmd_gen(config_path: &Path, out: &Path, seed_override: Option<u64>) -> HarnessResult<()> {
    let mut cfg: GenConfig = read_config(config_path)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    cfg.dataset
        .validate()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let config = serde_json::to_value(&cfg)
        .map_err(|e| HarnessError::Run(e.to_string()))?;
    let mut manifest = RunManifest::begin("gen", config, cfg.seed);
    ensure_dir(out)?;
    let ds = gen_dataset(&cfg.dataset, cfg.seed)?;
    write_dataset(&ds, out)?;
    manifest.register(out, "meta.json")?;
    manifest.finish(out, "complete")?;
    Ok(())
}

// ----------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJobConfig {
    pub train: TrainConfig,
    pub dataset_dir: PathBuf,
    pub seed: u64,
}

fn loss_csv(records: &[crate::trainer::LossRecord]) -> String {
    let mut csv = String::from("step,epoch,seg,sc_enc,sc_dec,total\n");
    for r in records {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.step, r.epoch, r.seg, r.sc_enc, r.sc_dec, r.total
        );
    }
    csv
}

pub fn cmd_train(config_path: &Path, out: &Path, seed_override: Option<u64>) -> HarnessResult<()> {
    let mut cfg: TrainJobConfig = read_config(config_path)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    cfg.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let config = serde_json::to_value(&cfg).map_err(|e| HarnessError::Run(e.to_string()))?;
    let mut manifest = RunManifest::begin("train", config, cfg.seed);
    ensure_dir(out)?;
    let ds = load_dataset(&cfg.dataset_dir)?;
    let outcome = match train(&cfg.train, &ds.train, cfg.seed) {
        Ok(o) => o,
        Err(e) => {
            let reason = e.to_string();
            manifest.finish(out, &format!("aborted: {}", reason))?;
            return Err(e.into());
        }
    };
    outcome.params.save(&out.join("checkpoint.ckpt"))?;
    fs::write(out.join("loss.csv"), loss_csv(&outcome.records))?;
    manifest.register(out, "checkpoint.ckpt")?;
    manifest.register(out, "loss.csv")?;
    manifest.finish(out, "complete")?;
    Ok(())
}

// ------------------------------------------------------------------ eval

fn eval_split(
    params: &NetParams,
    split: &[(Vec<f32>, crate::synthgen::SegmentationMask)],
    oracle: bool,
) -> HarnessResult<MetricsRecord> {
    let pairs: Vec<_> = split
        .iter()
        .map(|(img, gt)| {
            let pred = if oracle {
                Ok(gt.clone())
            } else {
                predict(params, img, gt.height, gt.width)
            };
            pred.map(|p| (p, gt.clone()))
        })
        .collect::<Result<_, _>>()?;
    evaluate_pairs(&pairs).map_err(|e| HarnessError::Run(e.to_string()))
}

fn metrics_csv(rec: &MetricsRecord, run_id: &str, split: &str) -> String {
    let mut csv = String::from("run_id,split,class,dice,iou,precision,recall,hausdorff\n");
    for (c, a) in &rec.per_class {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            run_id,
            split,
            c,
            fmt_opt(a.dice),
            fmt_opt(a.iou),
            fmt_opt(a.precision),
            fmt_opt(a.recall),
            fmt_opt(a.hausdorff)
        );
    }
    let nan_opt = |v: f64| if v.is_nan() { None } else { Some(v) };
    let _ = writeln!(
        csv,
        "{},{},mean,{},{},{},{},{}",
        run_id,
        split,
        fmt_opt(nan_opt(rec.mean_dice)),
        fmt_opt(nan_opt(rec.mean_iou)),
        fmt_opt(nan_opt(rec.mean_precision)),
        fmt_opt(nan_opt(rec.mean_recall)),
        fmt_opt(nan_opt(rec.mean_hausdorff))
    );
    csv
}

pub fn cmd_eval(
    checkpoint: &Path,
    dataset_dir: &Path,
    split: &str,
    out: &Path,
    oracle: bool,
) -> HarnessResult<()> {
    if split != "test_source" && split != "test_target" {
        return Err(HarnessError::Config(format!(
            "unknown split '{}', expected test_source or test_target",
            split
        )));
    }
    let params = NetParams::load(checkpoint)?;
    let ds = load_dataset(dataset_dir)?;
    let config = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "dataset_dir": dataset_dir.display().to_string(),
        "split": split,
        "oracle": oracle,
    });
    let mut manifest = RunManifest::begin("eval", config, params.init_seed);
    ensure_dir(out)?;
    let pairs = if split == "test_source" {
        &ds.test_source
    } else {
        &ds.test_target
    };
    let rec = eval_split(&params, pairs, oracle)?;
    let run_id = manifest.run_id.clone();
    fs::write(out.join("metrics.csv"), metrics_csv(&rec, &run_id, split))?;
    manifest.register(out, "metrics.csv")?;
    manifest.finish(out, "complete")?;
    Ok(())
}

// --------------------------------------------------------------- compare

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Shared training settings; `mode`, `alpha_enc` and `alpha_dec` are
    /// overridden per ladder cell.
    pub train: TrainConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> HarnessResult<()> {
        self.dataset.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.modes.len() < 2 {
            return Err(HarnessError::Config("compare needs >= 2 modes".into()));
        }
        if self.seeds.len() < 3 {
            return Err(HarnessError::Config("compare needs >= 3 seeds".into()));
        }
        if !self.modes.contains(&Mode::Baseline) {
            return Err(HarnessError::Config("compare needs the baseline mode".into()));
        }
        for &m in &self.modes {
            self.cell_config(m).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Training config for one ladder cell: shared settings with the
    /// mode-specific consistency weights.
    pub fn cell_config(&self, mode: Mode) -> TrainConfig {
        let mut cfg = self.train.clone();
        let defaults = TrainConfig::for_mode(mode);
        cfg.mode = mode;
        cfg.alpha_enc = match mode {
            Mode::SynthEnc | Mode::SynthEncDec => {
                if self.train.alpha_enc > 0.0 {
                    self.train.alpha_enc
                } else {
                    defaults.alpha_enc
                }
            }
            _ => 0.0,
        };
        cfg.alpha_dec = match mode {
            Mode::SynthEncDec => {
                if self.train.alpha_dec > 0.0 {
                    self.train.alpha_dec
                } else {
                    defaults.alpha_dec
                }
            }
            _ => 0.0,
        };
        cfg
    }
}

/// One compare cell result: metrics for both splits.
#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub mode: Mode,
    pub seed: u64,
    pub source_dice: f64,
    pub target_dice: f64,
    pub source: CellMetrics,
    pub target: CellMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub hausdorff: f64,
}

fn cell_metrics(rec: &MetricsRecord) -> CellMetrics {
    CellMetrics {
        dice: rec.mean_dice,
        iou: rec.mean_iou,
        precision: rec.mean_precision,
        recall: rec.mean_recall,
        hausdorff: rec.mean_hausdorff,
    }
}

fn run_cell(cfg: &ExperimentConfig, ds: &Dataset, mode: Mode, seed: u64) -> HarnessResult<CellResult> {
    let tc = cfg.cell_config(mode);
    let outcome = train(&tc, &ds.train, seed).map_err(|e| {
        HarnessError::Run(format!("mode {} seed {}: {}", mode.as_str(), seed, e))
    })?;
    let source = eval_split(&outcome.params, &ds.test_source, false)?;
    let target = eval_split(&outcome.params, &ds.test_target, false)?;
    Ok(CellResult {
        mode,
        seed,
        source_dice: source.mean_dice,
        target_dice: target.mean_dice,
        source: cell_metrics(&source),
        target: cell_metrics(&target),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train and evaluate the full mode ladder over all seeds. Returns every
/// cell; row/summary CSV rendering is separate so tests can reuse this.
pub fn run_compare(cfg: &ExperimentConfig, threads: usize) -> HarnessResult<Vec<CellResult>> {
    cfg.validate()?;
    let mut datasets: BTreeMap<u64, Dataset> = BTreeMap::new();
    for &seed in &cfg.seeds {
        datasets.insert(seed, gen_dataset(&cfg.dataset, seed)?);
    }
    let cells: Vec<(Mode, u64)> = cfg
        .modes
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| HarnessError::Run(e.to_string()))?;
        pool.install(|| {
            cells
                .par_iter()
                .map(|&(m, s)| run_cell(cfg, &datasets[&s], m, s))
                .collect()
        })
    } else {
        cells
            .iter()
            .map(|&(m, s)| run_cell(cfg, &datasets[&s], m, s))
            .collect()
    }
}

fn compare_csv(cells: &[CellResult]) -> String {
    let mut csv =
        String::from("mode,seed,split,mean_dice,mean_iou,mean_precision,mean_recall,mean_hausdorff\n");
    for c in cells {
        for (split, m) in [("test_source", &c.source), ("test_target", &c.target)] {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                c.mode.as_str(),
                c.seed,
                split,
                m.dice,
                m.iou,
                m.precision,
                m.recall,
                m.hausdorff
            );
        }
    }
    csv
}

fn summary_csv(cfg: &ExperimentConfig, cells: &[CellResult]) -> String {
    let dices = |mode: Mode, target: bool| -> Vec<f64> {
        cells
            .iter()
            .filter(|c| c.mode == mode)
            .map(|c| if target { c.target_dice } else { c.source_dice })
            .collect()
    };
    let (base_src, _) = mean_std(&dices(Mode::Baseline, false));
    let (base_tgt, _) = mean_std(&dices(Mode::Baseline, true));
    let mut csv = String::from("mode,split,mean_dice,std_dice,delta_vs_baseline\n");
    for &mode in &cfg.modes {
        for (split, target, base) in
            [("test_source", false, base_src), ("test_target", true, base_tgt)]
        {
            let (mean, std) = mean_std(&dices(mode, target));
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                mode.as_str(),
                split,
                mean,
                std,
                mean - base
            );
        }
    }
    csv
}

pub fn cmd_compare(config_path: &Path, out: &Path, threads: usize) -> HarnessResult<()> {
    let cfg: ExperimentConfig = read_config(config_path)?;
    cfg.validate()?;
    let config = serde_json::to_value(&cfg).map_err(|e| HarnessError::Run(e.to_string()))?;
    let root_seed = cfg.seeds[0];
    let mut manifest = RunManifest::begin("compare", config, root_seed);
    ensure_dir(out)?;
    let cells = match run_compare(&cfg, threads) {
        Ok(c) => c,
        Err(e) => {
            let reason = e.to_string();
            manifest.finish(out, &format!("aborted: {}", reason))?;
            return Err(e);
        }
    };
    fs::write(out.join("compare.csv"), compare_csv(&cells))?;
    fs::write(out.join("compare_summary.csv"), summary_csv(&cfg, &cells))?;
    manifest.register(out, "compare.csv")?;
    manifest.register(out, "compare_summary.csv")?;
    manifest.finish(out, "complete")?;
    Ok(())
}
