//! The bilateral training loop.
//!
//! Training alternates between two models: the forward model `f` fits the
//! noisy source labels, the backward model `f_dual` fits pseudo-labels that
//! `f` assigned to the target domain. One runs while the other holds still:
//!
//! 1. step 0 pretrains `f` on the noisy source and pseudo-labels the target;
//! 2. each odd step trains a *freshly initialized* `f_dual` on the
//!    pseudo-labeled target, guided toward frozen `f` on source batches;
//! 3. each even step trains a freshly initialized `f` on the noisy source,
//!    guided toward frozen `f_dual` on target batches, then refreshes the
//!    pseudo-labels.
//!
//! The guide term is a symmetric KL divergence between the training model's
//! class probabilities and its frozen dual's, weighted by `beta`; the frozen
//! side enters as constants so no gradient reaches it. Every step trains from
//! scratch under a seed derived from the run seed and the step index, which
//! keeps whole runs bitwise reproducible.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    bone_loss, init_backbone, Backbone, BackboneSettings, LabeledBatch, MlpSpec, StepContext,
    UnlabeledBatch,
};
use crate::data::{batches_for_len, LabelAccess, LabeledSet};
use crate::losses::{symmetric_kl, symmetric_kl_value, total_loss};
use crate::seed::mix2;
use crate::tensor::{argmax_tie_smallest, Tape};
use crate::{Error, Result};

const SALT_INIT: u64 = 0x20;
const SALT_SHUFFLE: u64 = 0x21;

/// Seed for the training model freshly initialized at `step_index`.
pub fn init_seed(run_seed: u64, step_index: usize) -> u64 {
    mix2(run_seed, SALT_INIT, step_index as u64)
}

/// Base seed for batch shuffling within `step_index` (epochs mix in further).
pub fn shuffle_seed(run_seed: u64, step_index: usize) -> u64 {
    mix2(run_seed, SALT_SHUFFLE, step_index as u64)
}

// ── configuration ────────────────────────────────────────────────────────

/// Hyperparameters of one run. The defaults are the full-scale settings;
/// the harness layers presets on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GearNetConfig {
    /// Macro-steps; each contributes one backward and one forward step.
    pub steps_m: usize,
    /// Epochs per training step.
    pub epochs_n: usize,
    pub eta: f64,
    pub momentum: f64,
    /// Guide-loss weight; 0 disables the guide term as an optimization force
    /// (it is still reported as a metric).
    pub beta: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub backbone: BackboneSettings,
    /// Hidden widths of each classifier; empty means a linear model.
    pub hidden: Vec<usize>,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for GearNetConfig {
    fn default() -> Self {
        GearNetConfig {
            steps_m: 10,
            epochs_n: 200,
            eta: 0.003,
            momentum: 0.9,
            beta: 0.1,
            batch_source: 32,
            batch_target: 32,
            backbone: BackboneSettings::standard(),
            hidden: vec![64],
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl GearNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_m < 1 {
            return Err(Error::invalid("steps_m must be >= 1"));
        }
        if self.epochs_n < 1 {
            return Err(Error::invalid("epochs_n must be >= 1"));
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.batch_source < 1 || self.batch_target < 1 {
            return Err(Error::invalid("batch sizes must be >= 1"));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(Error::invalid(format!("init_scale must be >= 0, got {}", self.init_scale)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must all be >= 1"));
        }
        self.backbone.validate()
    }

    /// Classifier architecture for data of the given width and class count.
    pub fn mlp_spec(&self, input_dim: usize, classes: usize) -> Result<MlpSpec> {
        let spec = MlpSpec::with_hidden(input_dim, &self.hidden, classes)?;
        Ok(MlpSpec { init_scale: self.init_scale, ..spec })
    }
}

// ── step bookkeeping ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Pretrain,
    Backward,
    Forward,
}

impl Direction {
    /// Parity rule: 0 is pretraining, odd steps run backward, even forward.
    pub fn of_step(step_index: usize) -> Direction {
        if step_index == 0 {
            Direction::Pretrain
        } else if step_index % 2 == 1 {
            Direction::Backward
        } else {
            Direction::Forward
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Pretrain => "pretrain",
            Direction::Backward => "backward",
            Direction::Forward => "forward",
        }
    }
}

/// Everything recorded about one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step_index: usize,
    pub direction: Direction,
    /// Per-epoch mean supervised loss.
    pub super_trace: Vec<f64>,
    /// Per-epoch mean guide value; NaN entries while no dual exists.
    pub guide_trace: Vec<f64>,
    /// Accuracy of this step's trained model on true source labels.
    pub source_acc: f64,
    /// Accuracy of this step's trained model on true target labels
    /// (evaluation-path access only).
    pub target_acc: f64,
    pub seconds: f64,
    /// Parameter hash of the training model before its first update;
    /// reproducible from [`init_seed`].
    pub init_hash: u64,
    /// Frozen dual's parameter hash entering the step, when one exists.
    pub dual_hash_before: Option<u64>,
    /// The same hash after the step; equality is the freezing contract.
    pub dual_hash_after: Option<u64>,
    /// Whether this step rewrote the pseudo-labels when it finished.
    pub pseudo_refreshed: bool,
}

impl StepRecord {
    pub fn mean_super(&self) -> f64 {
        mean(&self.super_trace)
    }

    pub fn mean_guide(&self) -> f64 {
        mean(&self.guide_trace)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// The run in flight: both models, the current pseudo-labels, and the
/// per-step history.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub f: Backbone,
    pub f_dual: Option<Backbone>,
    pub pseudo_labels: Vec<usize>,
    pub step_index: usize,
    pub history: Vec<StepRecord>,
}

// ── the shared phase kernel ──────────────────────────────────────────────

/// One training phase, fully specified. Every step (pretraining included)
/// runs through this one kernel, so aligning the seeds of two plans aligns
/// their arithmetic exactly.
#[derive(Debug, Clone, Copy)]
pub struct PhasePlan<'a> {
    /// Step index, for seed derivation checks and error context.
    pub step_index: usize,
    /// The domain being fit: features, row count, training labels.
    pub train_x: &'a [f64],
    pub train_n: usize,
    pub train_labels: &'a [usize],
    pub train_batch: usize,
    /// The opposite domain, consumed by the guide term and by backbones
    /// that use unlabeled data.
    pub opposite_x: &'a [f64],
    pub opposite_n: usize,
    pub opposite_batch: usize,
    /// Frozen dual; None during pretraining.
    pub dual: Option<&'a Backbone>,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

/// What a phase produced: the trained model and its per-epoch traces.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub model: Backbone,
    pub super_trace: Vec<f64>,
    pub guide_trace: Vec<f64>,
    pub init_hash: u64,
}

/// Trains a freshly initialized model for `cfg.epochs_n` epochs against the
/// plan. Per iteration one batch is drawn from each domain; the domain with
/// fewer batches cycles. The dual is read-only throughout.
pub fn train_phase(cfg: &GearNetConfig, spec: &MlpSpec, plan: &PhasePlan<'_>) -> Result<PhaseOutcome> {
    let dim = spec.input_dim();
    if plan.train_n == 0 || plan.opposite_n == 0 {
        return Err(Error::contract("train_phase needs non-empty domains"));
    }
    if plan.train_x.len() != plan.train_n * dim
        || plan.train_labels.len() != plan.train_n
        || plan.opposite_x.len() != plan.opposite_n * dim
    {
        return Err(Error::ShapeMismatch {
            op: "train_phase",
            left: vec![plan.train_x.len(), plan.train_labels.len(), plan.opposite_x.len()],
            right: vec![plan.train_n, dim, plan.opposite_n],
        });
    }

    let mut model = init_backbone(&cfg.backbone, spec, plan.init_seed)?;
    let init_hash = model.param_hash();
    let mut velocity = model.zeros_like_params();
    let mut super_trace = Vec::with_capacity(cfg.epochs_n);
    let mut guide_trace = Vec::with_capacity(cfg.epochs_n);

    for epoch in 0..cfg.epochs_n {
        run_epoch(cfg, plan, &mut model, &mut velocity, epoch)
            .map(|(s, g)| {
                super_trace.push(s);
                guide_trace.push(g);
            })
            .map_err(|e| e.at_step(plan.step_index, epoch))?;
    }

    model.check_finite().map_err(|e| e.at_step(plan.step_index, cfg.epochs_n - 1))?;
    Ok(PhaseOutcome { model, super_trace, guide_trace, init_hash })
}

/// One epoch of the phase; returns (mean super loss, mean guide value).
fn run_epoch(
    cfg: &GearNetConfig,
    plan: &PhasePlan<'_>,
    model: &mut Backbone,
    velocity: &mut [Vec<f64>],
    epoch: usize,
) -> Result<(f64, f64)> {
    let dim = model.classifier(0).input_dim();
    // Distinct sub-salts keep the two domains' shuffles independent.
    let train_chunks =
        batches_for_len(plan.train_n, plan.train_batch, mix2(plan.shuffle_seed, 0, 0), epoch)?;
    let opp_chunks =
        batches_for_len(plan.opposite_n, plan.opposite_batch, mix2(plan.shuffle_seed, 1, 0), epoch)?;
    let iterations = train_chunks.len().max(opp_chunks.len());

    let ctx = StepContext { epoch };
    let mut super_sum = 0.0;
    let mut guide_sum = 0.0;
    let mut guide_seen = true;

    for it in 0..iterations {
        let tb = &train_chunks[it % train_chunks.len()];
        let ob = &opp_chunks[it % opp_chunks.len()];
        let tx: Vec<f64> = tb.iter().flat_map(|&i| plan.train_x[i * dim..(i + 1) * dim].iter().copied()).collect();
        let ty: Vec<usize> = tb.iter().map(|&i| plan.train_labels[i]).collect();
        let ox: Vec<f64> = ob.iter().flat_map(|&i| plan.opposite_x[i * dim..(i + 1) * dim].iter().copied()).collect();

        let mut tape = Tape::new();
        let ids = model.insert_params(&mut tape)?;
        let sup = bone_loss(
            model,
            &mut tape,
            &ids,
            LabeledBatch { x: &tx, n: tb.len(), labels: &ty },
            UnlabeledBatch { x: &ox, n: ob.len() },
            &ctx,
        )?;

        // The guide aligns every classifier head with the frozen dual on the
        // opposite-domain batch (summed over heads). With beta = 0 nothing
        // is added to the graph; the value is still computed off-tape so the
        // metric stays comparable across ablations.
        let mut guide_value = f64::NAN;
        let guide_id = match plan.dual {
            Some(dual) if cfg.beta != 0.0 => {
                let ox_id = tape.constant(ox.clone(), vec![ob.len(), dim])?;
                let mut combined = None;
                for head in model.guide_heads() {
                    let (logits, _) = model.classifier(head).forward_on_tape(
                        &mut tape,
                        &ids.classifiers[head],
                        ox_id,
                    )?;
                    let probs = tape.softmax(logits)?;
                    let dual_probs = dual_head_probs(dual, head, &ox, ob.len())?.constant(&mut tape)?;
                    let term = symmetric_kl(&mut tape, probs, dual_probs)?;
                    combined = Some(match combined {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                let id = combined.expect("backbones always expose at least one head");
                guide_value = tape.scalar_value(id)?;
                Some(id)
            }
            Some(dual) => {
                let mut total = 0.0;
                for head in model.guide_heads() {
                    let probs = model.head_probs(head, &ox, ob.len())?;
                    let dual_probs = dual_head_probs(dual, head, &ox, ob.len())?;
                    total += symmetric_kl_value(&probs, &dual_probs)?;
                }
                guide_value = total;
                None
            }
            None => {
                guide_seen = false;
                None
            }
        };

        let bundle = total_loss(&mut tape, sup, guide_id, cfg.beta)?;
        let total_v = tape.scalar_value(bundle.total)?;
        if !total_v.is_finite() {
            return Err(Error::non_finite(format!("training loss {total_v} at iteration {it}")));
        }
        tape.backward(bundle.total)?;
        let grads = model.collect_grads(&tape, &ids);
        model.apply_sgd(&grads, cfg.eta, cfg.momentum, velocity)?;

        super_sum += tape.scalar_value(sup)?;
        guide_sum += guide_value;
    }

    let guide_mean = if guide_seen { guide_sum / iterations as f64 } else { f64::NAN };
    Ok((super_sum / iterations as f64, guide_mean))
}

/// Dual head paired with training head `head`: the same index when the dual
/// has one, otherwise its last head. Single-head models guide against a
/// two-head dual's first head and vice versa.
fn dual_head_probs(
    dual: &Backbone,
    head: usize,
    x: &[f64],
    n: usize,
) -> Result<crate::losses::ProbBatch> {
    let dual_head = head.min(dual.classifiers().len() - 1);
    dual.head_probs(dual_head, x, n)
}

// ── evaluation and pseudo-labels ─────────────────────────────────────────

/// Fraction of samples whose predicted class matches the true label. This is
/// the evaluation path: the only place target truth is ever read.
pub fn evaluate_accuracy(model: &Backbone, set: &LabeledSet) -> Result<f64> {
    let truth = set.true_labels(LabelAccess::Evaluation)?;
    let predicted = predict_labels(model, set.features(), set.len())?;
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / set.len() as f64)
}

/// Hard labels from the first classifier head: per-row argmax with ties
/// toward the smallest class index.
pub fn predict_labels(model: &Backbone, x: &[f64], n: usize) -> Result<Vec<usize>> {
    let k = model.classifier(0).classes();
    let logits = model.classifier(0).logits(x, n)?;
    Ok((0..n).map(|i| argmax_tie_smallest(&logits[i * k..(i + 1) * k])).collect())
}

/// Rewrites the pseudo-labels for the whole target set from the current
/// forward model. Never touches target truth.
pub fn update_pseudo_labels(state: &mut TrainingState, target: &LabeledSet) -> Result<()> {
    state.pseudo_labels = predict_labels(&state.f, target.features(), target.len())?;
    Ok(())
}

// ── the algorithm's steps ────────────────────────────────────────────────

fn validate_pair(cfg: &GearNetConfig, source: &LabeledSet, target: &LabeledSet) -> Result<()> {
    cfg.validate()?;
    if source.dim() != target.dim() || source.classes() != target.classes() {
        return Err(Error::contract(format!(
            "domain mismatch: source is {}d/{} classes, target {}d/{} classes",
            source.dim(),
            source.classes(),
            target.dim(),
            target.classes()
        )));
    }
    Ok(())
}

/// Labels the forward model trains on: the noisy labels when noise was
/// injected, otherwise the raw training labels.
fn source_training_labels<'a>(source: &'a LabeledSet) -> Result<&'a [usize]> {
    match source.noisy_labels() {
        Some(y) => Ok(y),
        None => source.true_labels(LabelAccess::Training),
    }
}

/// Step 0: trains `f` on the noisy source and generates the first
/// pseudo-labels. `beta` plays no role because no dual exists yet.
pub fn pretrain(cfg: &GearNetConfig, source: &LabeledSet, target: &LabeledSet) -> Result<TrainingState> {
    validate_pair(cfg, source, target)?;
    let spec = cfg.mlp_spec(source.dim(), source.classes())?;
    let labels = source_training_labels(source)?;
    let started = Instant::now();
    let outcome = train_phase(
        cfg,
        &spec,
        &PhasePlan {
            step_index: 0,
            train_x: source.features(),
            train_n: source.len(),
            train_labels: labels,
            train_batch: cfg.batch_source,
            opposite_x: target.features(),
            opposite_n: target.len(),
            opposite_batch: cfg.batch_target,
            dual: None,
            init_seed: init_seed(cfg.seed, 0),
            shuffle_seed: shuffle_seed(cfg.seed, 0),
        },
    )?;

    let mut state = TrainingState {
        f: outcome.model,
        f_dual: None,
        pseudo_labels: Vec::new(),
        step_index: 0,
        history: Vec::new(),
    };
    update_pseudo_labels(&mut state, target)?;
    state.history.push(StepRecord {
        step_index: 0,
        direction: Direction::Pretrain,
        super_trace: outcome.super_trace,
        guide_trace: outcome.guide_trace,
        source_acc: evaluate_accuracy(&state.f, source)?,
        target_acc: evaluate_accuracy(&state.f, target)?,
        seconds: started.elapsed().as_secs_f64(),
        init_hash: outcome.init_hash,
        dual_hash_before: None,
        dual_hash_after: None,
        pseudo_refreshed: true,
    });
    Ok(state)
}

/// Odd step: trains a fresh `f_dual` on the pseudo-labeled target, guided by
/// frozen `f` on source batches.
pub fn backward_step(
    state: &mut TrainingState,
    cfg: &GearNetConfig,
    source: &LabeledSet,
    target: &LabeledSet,
) -> Result<()> {
    let step = state.step_index + 1;
    if Direction::of_step(step) != Direction::Backward {
        return Err(Error::contract(format!("backward_step at step {step}, expected an odd index")));
    }
    if state.pseudo_labels.len() != target.len() {
        return Err(Error::contract("pseudo-labels missing; pretrain must run first"));
    }
    let spec = cfg.mlp_spec(source.dim(), source.classes())?;
    let started = Instant::now();
    let dual_hash_before = state.f.param_hash();
    let outcome = train_phase(
        cfg,
        &spec,
        &PhasePlan {
            step_index: step,
            train_x: target.features(),
            train_n: target.len(),
            train_labels: &state.pseudo_labels,
            train_batch: cfg.batch_target,
            opposite_x: source.features(),
            opposite_n: source.len(),
            opposite_batch: cfg.batch_source,
            dual: Some(&state.f),
            init_seed: init_seed(cfg.seed, step),
            shuffle_seed: shuffle_seed(cfg.seed, step),
        },
    )?;
    let dual_hash_after = state.f.param_hash();

    state.history.push(StepRecord {
        step_index: step,
        direction: Direction::Backward,
        super_trace: outcome.super_trace,
        guide_trace: outcome.guide_trace,
        source_acc: evaluate_accuracy(&outcome.model, source)?,
        target_acc: evaluate_accuracy(&outcome.model, target)?,
        seconds: started.elapsed().as_secs_f64(),
        init_hash: outcome.init_hash,
        dual_hash_before: Some(dual_hash_before),
        dual_hash_after: Some(dual_hash_after),
        pseudo_refreshed: false,
    });
    state.f_dual = Some(outcome.model);
    state.step_index = step;
    Ok(())
}

/// Even step: trains a fresh `f` on the noisy source, guided by the frozen
/// dual on target batches, then refreshes the pseudo-labels.
pub fn forward_step(
    state: &mut TrainingState,
    cfg: &GearNetConfig,
    source: &LabeledSet,
    target: &LabeledSet,
) -> Result<()> {
    let step = state.step_index + 1;
    if Direction::of_step(step) != Direction::Forward {
        return Err(Error::contract(format!("forward_step at step {step}, expected an even index")));
    }
    let dual = state
        .f_dual
        .as_ref()
        .ok_or_else(|| Error::contract("forward_step needs the preceding backward step's model"))?;
    let spec = cfg.mlp_spec(source.dim(), source.classes())?;
    let labels = source_training_labels(source)?;
    let started = Instant::now();
    let dual_hash_before = dual.param_hash();
    let outcome = train_phase(
        cfg,
        &spec,
        &PhasePlan {
            step_index: step,
            train_x: source.features(),
            train_n: source.len(),
            train_labels: labels,
            train_batch: cfg.batch_source,
            opposite_x: target.features(),
            opposite_n: target.len(),
            opposite_batch: cfg.batch_target,
            dual: Some(dual),
            init_seed: init_seed(cfg.seed, step),
            shuffle_seed: shuffle_seed(cfg.seed, step),
        },
    )?;
    let dual_hash_after = state.f_dual.as_ref().unwrap().param_hash();

    state.f = outcome.model;
    update_pseudo_labels(state, target)?;
    state.history.push(StepRecord {
        step_index: step,
        direction: Direction::Forward,
        super_trace: outcome.super_trace,
        guide_trace: outcome.guide_trace,
        source_acc: evaluate_accuracy(&state.f, source)?,
        target_acc: evaluate_accuracy(&state.f, target)?,
        seconds: started.elapsed().as_secs_f64(),
        init_hash: outcome.init_hash,
        dual_hash_before: Some(dual_hash_before),
        dual_hash_after: Some(dual_hash_after),
        pseudo_refreshed: true,
    });
    state.step_index = step;
    Ok(())
}

/// The full loop: pretrain, then `steps_m` rounds of backward + forward.
/// History holds `1 + 2 * steps_m` records.
pub fn run(cfg: &GearNetConfig, source: &LabeledSet, target: &LabeledSet) -> Result<TrainingState> {
    let mut state = pretrain(cfg, source, target)?;
    for _ in 0..cfg.steps_m {
        backward_step(&mut state, cfg, source, target)?;
        forward_step(&mut state, cfg, source, target)?;
    }
    Ok(state)
}

/// Best recorded target accuracy and the step that achieved it.
pub fn best_target_step(history: &[StepRecord]) -> Option<(usize, f64)> {
    history
        .iter()
        .map(|r| (r.step_index, r.target_acc))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
}
