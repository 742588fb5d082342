//! Experiment orchestration: a config file in, metrics out.
//!
//! One experiment fans out over `repeats` seeds. Each seed regenerates its
//! own domain pair, injects label noise, and runs up to three training
//! variants on identical data: the bare backbone (pretraining only), the
//! full bilateral loop, and the guide-ablated loop (`beta = 0`). Per-step
//! metrics land in a CSV with a fixed header; the summary table reports
//! mean and standard deviation of final-step and best-step target accuracy
//! across seeds and is recomputable from the CSV alone.
//!
//! Seeds may run in parallel; every piece of randomness is derived from the
//! config seed, so reruns of the same config produce identical bytes
//! (wall-clock columns aside).

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{
    build_transition_matrix, inject_noise, make_domain_pair, DomainPairSpec, LabeledSet, NoiseKind,
};
use crate::engine::{self, Direction, GearNetConfig, StepRecord};
use crate::seed::mix2;
use crate::{Error, Result};

const SALT_REPEAT: u64 = 0x30;
const SALT_DATA: u64 = 0x31;
const SALT_NOISE: u64 = 0x32;

pub const CSV_HEADER: &str =
    "run_id,seed,step,direction,source_acc,target_acc,super_loss,guide_loss,seconds";

// ── configuration ────────────────────────────────────────────────────────

/// Label-noise section of the config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    pub rho: f64,
}

/// Experiment-level switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Independent seeds to run.
    pub repeats: usize,
    /// Also run the backbone alone (pretraining only) per seed.
    pub run_baseline: bool,
    /// Also run the loop with the guide loss disabled per seed.
    pub run_beta0: bool,
    /// Metrics CSV destination; the CLI's `--out` overrides it.
    pub out: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { repeats: 5, run_baseline: true, run_beta0: false, out: None }
    }
}

/// The whole config file: `[data]`, `[noise]`, `[train]`, `[experiment]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DomainPairSpec,
    pub noise: NoiseSection,
    #[serde(default)]
    pub train: GearNetConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if !(0.0..=1.0).contains(&self.noise.rho) || !self.noise.rho.is_finite() {
            return Err(Error::config(format!("noise.rho must lie in [0, 1], got {}", self.noise.rho)));
        }
        self.train.validate()?;
        if self.experiment.repeats < 1 {
            return Err(Error::config("experiment.repeats must be >= 1"));
        }
        Ok(())
    }
}

/// Parses TOML text; syntax errors keep the parser's line/column context.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_config(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Named hyperparameter bundles layered over a parsed config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Desk-scale: 500 samples per domain, 30 epochs, 3 macro-steps.
    Quick,
    /// Full-scale defaults: 2000 per domain, 200 epochs, 10 macro-steps.
    PaperScale,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick" => Ok(Preset::Quick),
            "paper-scale" => Ok(Preset::PaperScale),
            other => Err(Error::config(format!("unknown preset {other:?}, expected quick or paper-scale"))),
        }
    }
}

impl Preset {
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        match self {
            Preset::Quick => {
                cfg.data.n_source = 500;
                cfg.data.n_target = 500;
                cfg.train.epochs_n = 30;
                cfg.train.steps_m = 3;
                cfg.train.eta = 0.01;
            }
            Preset::PaperScale => {
                cfg.data.n_source = 2000;
                cfg.data.n_target = 2000;
                cfg.train.epochs_n = 200;
                cfg.train.steps_m = 10;
                cfg.train.eta = 0.003;
            }
        }
    }
}

// ── metrics ──────────────────────────────────────────────────────────────

/// One CSV row: a single training step of a single run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub step: usize,
    pub direction: Direction,
    pub source_acc: f64,
    pub target_acc: f64,
    pub super_loss: f64,
    /// NaN on pretraining rows, where no dual exists yet.
    pub guide_loss: f64,
    pub seconds: f64,
}

/// A run that errored; surviving seeds are unaffected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub run_id: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub run_id: String,
    pub seeds: usize,
    pub final_mean: f64,
    pub final_std: f64,
    pub best_mean: f64,
    pub best_std: f64,
}

/// Across-seed aggregation, one row per run id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>5}  {:>18}  {:>18}", "run", "seeds", "final target acc", "best target acc")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<24} {:>5}  {:>8} ± {:<7}  {:>8} ± {:<7}",
                r.run_id,
                r.seeds,
                fmt6(r.final_mean),
                fmt6(r.final_std),
                fmt6(r.best_mean),
                fmt6(r.best_std),
            )?;
        }
        Ok(())
    }
}

/// Everything an experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<RunFailure>,
    pub summary: Summary,
}

// ── running ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunKind {
    Baseline,
    GearNet,
    Beta0,
}

impl RunKind {
    fn id(self, cfg: &ExperimentConfig) -> String {
        let bone = cfg.train.backbone.kind.as_str();
        match self {
            RunKind::Baseline => format!("baseline_{bone}"),
            RunKind::GearNet => format!("gearnet_{bone}"),
            RunKind::Beta0 => format!("beta0_{bone}"),
        }
    }
}

/// Seed for repeat `r` of the experiment.
pub fn repeat_seed(base: u64, repeat: usize) -> u64 {
    mix2(base, SALT_REPEAT, repeat as u64)
}

/// Deterministically rebuilds the domain pair for one repeat: fresh draw,
/// label noise on the source, evaluation-only truth on the target.
pub fn materialize_data(cfg: &ExperimentConfig, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    let (source, target) = make_domain_pair(&cfg.data, mix2(seed, SALT_DATA, 0))?;
    let q = build_transition_matrix(cfg.noise.kind, cfg.data.classes, cfg.noise.rho)?;
    let noisy = inject_noise(&source, &q, mix2(seed, SALT_NOISE, 0))?;
    Ok((noisy, target))
}

fn history_records(
    run_id: &str,
    seed: u64,
    history: &[StepRecord],
) -> Vec<MetricsRecord> {
    history
        .iter()
        .map(|r| MetricsRecord {
            run_id: run_id.to_string(),
            seed,
            step: r.step_index,
            direction: r.direction,
            source_acc: r.source_acc,
            target_acc: r.target_acc,
            super_loss: r.mean_super(),
            guide_loss: r.mean_guide(),
            seconds: r.seconds,
        })
        .collect()
}

fn run_one(cfg: &ExperimentConfig, kind: RunKind, seed: u64) -> Result<Vec<MetricsRecord>> {
    let (source, target) = materialize_data(cfg, seed)?;
    let mut train = cfg.train.clone();
    train.seed = seed;
    if kind == RunKind::Beta0 {
        train.beta = 0.0;
    }
    let state = match kind {
        RunKind::Baseline => engine::pretrain(&train, &source, &target)?,
        RunKind::GearNet | RunKind::Beta0 => engine::run(&train, &source, &target)?,
    };
    Ok(history_records(&kind.id(cfg), seed, &state.history))
}

/// Runs every (variant, seed) job, in parallel across seeds. A failing job
/// is recorded and skipped; the remaining jobs still run. Records come back
/// sorted by (run id, seed, step).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut kinds = Vec::new();
    if cfg.experiment.run_baseline {
        kinds.push(RunKind::Baseline);
    }
    kinds.push(RunKind::GearNet);
    if cfg.experiment.run_beta0 {
        kinds.push(RunKind::Beta0);
    }

    let jobs: Vec<(RunKind, u64)> = kinds
        .iter()
        .flat_map(|&k| (0..cfg.experiment.repeats).map(move |r| (k, repeat_seed(cfg.train.seed, r))))
        .collect();

    let results: Vec<(RunKind, u64, Result<Vec<MetricsRecord>>)> = jobs
        .into_par_iter()
        .map(|(kind, seed)| (kind, seed, run_one(cfg, kind, seed)))
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (kind, seed, outcome) in results {
        match outcome {
            Ok(mut r) => records.append(&mut r),
            Err(e) => failures.push(RunFailure { run_id: kind.id(cfg), seed, message: e.to_string() }),
        }
    }
    sort_records(&mut records);
    let summary = summarize(&records);
    Ok(ExperimentOutcome { records, failures, summary })
}

fn sort_records(records: &mut [MetricsRecord]) {
    records.sort_by(|a, b| {
        a.run_id.cmp(&b.run_id).then(a.seed.cmp(&b.seed)).then(a.step.cmp(&b.step))
    });
}

/// Per-run mean ± sample standard deviation of final-step and best-step
/// target accuracy across seeds. A pure function of the records, so the
/// same numbers can be recomputed from the CSV by any external tool.
pub fn summarize(records: &[MetricsRecord]) -> Summary {
    use std::collections::BTreeMap;
    // run_id -> seed -> (final step's acc, best acc)
    let mut groups: BTreeMap<&str, BTreeMap<u64, (usize, f64, f64)>> = BTreeMap::new();
    for r in records {
        let per_seed = groups.entry(&r.run_id).or_default();
        let entry = per_seed.entry(r.seed).or_insert((r.step, r.target_acc, r.target_acc));
        if r.step >= entry.0 {
            *entry = (r.step, r.target_acc, entry.2.max(r.target_acc));
        } else {
            entry.2 = entry.2.max(r.target_acc);
        }
    }
    let rows = groups
        .into_iter()
        .map(|(run_id, per_seed)| {
            let finals: Vec<f64> = per_seed.values().map(|v| v.1).collect();
            let bests: Vec<f64> = per_seed.values().map(|v| v.2).collect();
            let (final_mean, final_std) = mean_std(&finals);
            let (best_mean, best_std) = mean_std(&bests);
            SummaryRow {
                run_id: run_id.to_string(),
                seeds: finals.len(),
                final_mean,
                final_std,
                best_mean,
                best_std,
            }
        })
        .collect();
    Summary { rows }
}

/// Mean and sample standard deviation; a single value has deviation 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

// ── CSV emission ─────────────────────────────────────────────────────────

/// Renders a value with 6 significant digits: fixed notation for decimal
/// exponents in [-4, 5], scientific outside, trailing zeros trimmed.
pub fn fmt6(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".to_string() } else { "-inf".to_string() };
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let e = x.abs().log10().floor() as i32;
    if (-4..=5).contains(&e) {
        let prec = (5 - e).max(0) as usize;
        let s = format!("{x:.prec$}");
        trim_zeros(&s)
    } else {
        let s = format!("{x:.5e}");
        // "1.230000e7" -> "1.23e7"
        let (mantissa, exp) = s.split_once('e').expect("scientific format");
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// The CSV as one string, header first, rows in (run, seed, step) order.
pub fn render_csv(records: &[MetricsRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::contract("emit_csv needs at least one record"));
    }
    let mut sorted: Vec<&MetricsRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.run_id.cmp(&b.run_id).then(a.seed.cmp(&b.seed)).then(a.step.cmp(&b.step))
    });
    let mut out = String::with_capacity(64 * (sorted.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.seed,
            r.step,
            r.direction.as_str(),
            fmt6(r.source_acc),
            fmt6(r.target_acc),
            fmt6(r.super_loss),
            fmt6(r.guide_loss),
            fmt6(r.seconds),
        ));
    }
    Ok(out)
}

pub fn emit_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let text = render_csv(records)?;
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

// ── odds and ends the CLI needs ──────────────────────────────────────────

/// Target accuracy of a trained model; the target must carry
/// evaluation-only truth so a training-path read could never slip through.
pub fn evaluate_target_accuracy(model: &Backbone, target: &LabeledSet) -> Result<f64> {
    if !target.truth_eval_only() {
        return Err(Error::contract("target set must be evaluation-only"));
    }
    engine::evaluate_accuracy(model, target)
}

/// Draws one domain pair (noise injected on the source) and writes both
/// sets next to `out`: `<stem>_source.csv` and `<stem>_target.csv`.
pub fn generate_datasets(
    data: &DomainPairSpec,
    noise: &NoiseSection,
    seed: u64,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let source_path = dir.join(format!("{stem}_source.csv"));
    let target_path = dir.join(format!("{stem}_target.csv"));

    let (source, target) = make_domain_pair(data, mix2(seed, SALT_DATA, 0))?;
    let q = build_transition_matrix(noise.kind, data.classes, noise.rho)?;
    let noisy = inject_noise(&source, &q, mix2(seed, SALT_NOISE, 0))?;
    noisy.export_csv(&source_path)?;
    target.export_csv(&target_path)?;
    Ok((source_path, target_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneSettings, MlpSpec};
    use crate::data::{DomainTag, Family, LabelAccess};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const TOY_TOML: &str = r#"
        [data]
        family = "gaussians"
        classes = 2
        dim = 2
        n_source = 60
        n_target = 60
        rotation_deg = 30.0

        [noise]
        kind = "uniform"
        rho = 0.2

        [train]
        steps_m = 1
        epochs_n = 2
        eta = 0.05
        batch_source = 16
        batch_target = 16
        hidden = [8]
        seed = 7

        [experiment]
        repeats = 2
        run_baseline = true
        run_beta0 = true
    "#;

    #[test]
    fn config_parses_with_defaults_and_rejects_unknown_keys() {
        let cfg = parse_config(TOY_TOML).unwrap();
        assert_eq!(cfg.data.n_source, 60);
        assert_eq!(cfg.train.steps_m, 1);
        assert_eq!(cfg.train.momentum, 0.9, "unset keys fall back to defaults");
        assert_eq!(cfg.experiment.repeats, 2);
        assert!(cfg.experiment.out.is_none());

        let typo = TOY_TOML.replace("repeats", "repeates");
        let err = parse_config(&typo).unwrap_err().to_string();
        assert!(err.contains("repeates"), "error should name the unknown key: {err}");

        let bad = TOY_TOML.replace("rho = 0.2", "rho = 1.5");
        assert!(parse_config(&bad).is_err());
    }

    #[test]
    fn presets_pin_scale_knobs() {
        let mut cfg = parse_config(TOY_TOML).unwrap();
        Preset::Quick.apply(&mut cfg);
        assert_eq!((cfg.data.n_source, cfg.data.n_target), (500, 500));
        assert_eq!((cfg.train.epochs_n, cfg.train.steps_m), (30, 3));

        Preset::PaperScale.apply(&mut cfg);
        assert_eq!((cfg.train.epochs_n, cfg.train.steps_m), (200, 10));
        assert_eq!(cfg.train.eta, 0.003);

        assert_eq!("quick".parse::<Preset>().unwrap(), Preset::Quick);
        assert!("fast".parse::<Preset>().is_err());
    }

    #[test]
    fn fmt6_covers_the_documented_shapes() {
        assert_eq!(fmt6(0.0), "0");
        assert_eq!(fmt6(0.85), "0.85");
        assert_eq!(fmt6(1.0 / 3.0), "0.333333");
        assert_eq!(fmt6(123456.7), "123457");
        assert_eq!(fmt6(1234567.0), "1.23457e6");
        assert_eq!(fmt6(0.000123456), "0.000123456");
        assert_eq!(fmt6(0.0000123456), "1.23456e-5");
        assert_eq!(fmt6(-2.5), "-2.5");
        assert_eq!(fmt6(f64::NAN), "nan");
        assert_eq!(fmt6(f64::INFINITY), "inf");
    }

    #[test]
    fn fmt6_round_trips_within_rendering_precision() {
        let values = [
            0.1234567, 1.0, 3.14159265, 1e-7, 123456789.0, 0.9999995, 1e-4, 99999.9, -0.0421,
            2.5e-3, 7.0,
        ];
        for &v in &values {
            let parsed: f64 = fmt6(v).parse().unwrap();
            let rel = (parsed - v).abs() / v.abs().max(1e-300);
            assert!(rel <= 1e-5, "fmt6({v}) = {} drifted by {rel}", fmt6(v));
        }
    }

    #[test]
    fn target_accuracy_matches_brute_force_recount() {
        let spec = DomainPairSpec {
            family: Family::Gaussians,
            classes: 3,
            dim: 2,
            n_source: 40,
            n_target: 80,
            rotation_deg: 15.0,
            translation: vec![],
        };
        let (_, target) = make_domain_pair(&spec, 3).unwrap();
        let model = init_backbone(
            &BackboneSettings::standard(),
            &MlpSpec { init_scale: 0.5, ..MlpSpec::with_hidden(2, &[8], 3).unwrap() },
            11,
        )
        .unwrap();

        let reported = evaluate_target_accuracy(&model, &target).unwrap();
        let truth = target.true_labels(LabelAccess::Evaluation).unwrap();
        let predicted = engine::predict_labels(&model, target.features(), target.len()).unwrap();
        let mut hits = 0usize;
        for i in 0..target.len() {
            if predicted[i] == truth[i] {
                hits += 1;
            }
        }
        assert_eq!(reported, hits as f64 / target.len() as f64);
    }

    #[test]
    fn chance_level_accuracy_for_labels_independent_of_features() {
        // Labels drawn independently of x: any classifier sits near 1/K.
        let k = 4;
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let set = LabeledSet::new(x, 2, y, k, DomainTag::Target, true).unwrap();
        let model = init_backbone(
            &BackboneSettings::standard(),
            &MlpSpec { init_scale: 0.5, ..MlpSpec::with_hidden(2, &[8], k).unwrap() },
            13,
        )
        .unwrap();
        let acc = evaluate_target_accuracy(&model, &set).unwrap();
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        assert!(
            (acc - 0.25).abs() <= 3.0 * sigma + 0.02,
            "accuracy {acc} too far from chance level"
        );
    }

    #[test]
    fn run_experiment_produces_complete_sorted_records() {
        let cfg = parse_config(TOY_TOML).unwrap();
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.failures.is_empty(), "failures: {:?}", outcome.failures);

        // 2 seeds x (baseline 1 row + gearnet 3 rows + beta0 3 rows).
        assert_eq!(outcome.records.len(), 2 * (1 + 3 + 3));
        let ids: Vec<&str> =
            outcome.summary.rows.iter().map(|r| r.run_id.as_str()).collect();
        assert_eq!(ids, ["baseline_standard", "beta0_standard", "gearnet_standard"]);

        for r in &outcome.records {
            assert!((0.0..=1.0).contains(&r.source_acc));
            assert!((0.0..=1.0).contains(&r.target_acc));
        }
        // Steps contiguous per (run, seed) group.
        let mut last: Option<(&str, u64, usize)> = None;
        for r in &outcome.records {
            if let Some((id, seed, step)) = last {
                if id == r.run_id && seed == r.seed {
                    assert_eq!(r.step, step + 1, "gap inside {id} seed {seed}");
                }
            }
            last = Some((&r.run_id, r.seed, r.step));
        }
    }

    #[test]
    fn summary_matches_independent_recomputation() {
        let cfg = parse_config(TOY_TOML).unwrap();
        let outcome = run_experiment(&cfg).unwrap();

        for row in &outcome.summary.rows {
            let seeds: std::collections::BTreeSet<u64> = outcome
                .records
                .iter()
                .filter(|r| r.run_id == row.run_id)
                .map(|r| r.seed)
                .collect();
            let mut finals = Vec::new();
            let mut bests = Vec::new();
            for &s in &seeds {
                let group: Vec<&MetricsRecord> = outcome
                    .records
                    .iter()
                    .filter(|r| r.run_id == row.run_id && r.seed == s)
                    .collect();
                finals.push(group.iter().max_by_key(|r| r.step).unwrap().target_acc);
                bests.push(group.iter().map(|r| r.target_acc).fold(f64::MIN, f64::max));
            }
            let (fm, fs) = mean_std(&finals);
            let (bm, bs) = mean_std(&bests);
            assert_eq!((row.final_mean, row.final_std), (fm, fs), "run {}", row.run_id);
            assert_eq!((row.best_mean, row.best_std), (bm, bs), "run {}", row.run_id);
        }
    }

    /// Drops the trailing wall-clock field from every CSV row.
    fn strip_seconds(csv: &str) -> String {
        csv.lines()
            .map(|l| l.rsplit_once(',').map(|(head, _)| head).unwrap_or(l))
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn identical_configs_emit_identical_csv_bytes_modulo_seconds() {
        let cfg = parse_config(TOY_TOML).unwrap();
        let a = render_csv(&run_experiment(&cfg).unwrap().records).unwrap();
        let b = render_csv(&run_experiment(&cfg).unwrap().records).unwrap();
        assert_eq!(strip_seconds(&a), strip_seconds(&b));
    }

    #[test]
    fn csv_header_and_empty_rejection() {
        assert!(render_csv(&[]).is_err());
        let rec = MetricsRecord {
            run_id: "gearnet_standard".into(),
            seed: 1,
            step: 0,
            direction: Direction::Pretrain,
            source_acc: 0.9,
            target_acc: 0.75,
            super_loss: 0.5,
            guide_loss: f64::NAN,
            seconds: 1.25,
        };
        let text = render_csv(&[rec]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "gearnet_standard,1,0,pretrain,0.9,0.75,0.5,nan,1.25");
    }

    #[test]
    fn generated_datasets_land_in_two_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("pair.csv");
        let data = DomainPairSpec {
            family: Family::Gaussians,
            classes: 3,
            dim: 2,
            n_source: 30,
            n_target: 20,
            rotation_deg: 10.0,
            translation: vec![],
        };
        let noise = NoiseSection { kind: NoiseKind::Flip, rho: 0.3 };
        let (sp, tp) = generate_datasets(&data, &noise, 9, &out).unwrap();
        assert_eq!(sp.file_name().unwrap(), "pair_source.csv");
        assert_eq!(tp.file_name().unwrap(), "pair_target.csv");

        let source_text = std::fs::read_to_string(&sp).unwrap();
        let mut lines = source_text.lines();
        assert_eq!(lines.next().unwrap(), "f0,f1,y_true,y_noisy");
        assert_eq!(lines.count(), 30);
        let target_text = std::fs::read_to_string(&tp).unwrap();
        assert!(target_text.starts_with("f0,f1,y_true\n"));
    }

    #[test]
    fn failures_are_captured_per_seed_without_aborting() {
        // An absurd learning rate passes static validation but blows the
        // parameters up to non-finite values mid-run; every job must fail
        // individually while run_experiment itself still returns.
        let mut cfg = parse_config(TOY_TOML).unwrap();
        cfg.train.eta = 1e100;
        let outcome = run_experiment(&cfg).unwrap();
        assert_eq!(outcome.failures.len(), 2 * 3, "every (seed, variant) job diverges");
        assert!(outcome.records.is_empty());
        assert!(outcome.summary.rows.is_empty());
        let msg = &outcome.failures[0].message;
        assert!(msg.contains("step"), "failure should carry step context: {msg}");
    }
}
