//! Backbone training objectives.
//!
//! A backbone bundles one or two MLP classifiers (plus, for DANN, a domain
//! discriminator) with the method-specific way of turning a labeled batch and
//! an opposite-domain unlabeled batch into a scalar training loss:
//!
//! - `Standard`: plain mean cross-entropy on the labeled batch;
//! - `CoTeaching`: two peers each pick their smallest-loss fraction of the
//!   batch and the *other* peer trains on that selection; the loss is the sum
//!   of the two peer losses and the kept fraction anneals with epoch;
//! - `Dann`: cross-entropy plus a domain-classification loss whose gradient
//!   reaches the feature layers through gradient reversal, pushing features
//!   toward domain invariance.
//!
//! All parameters live in plain `Vec<f64>` buffers; each training iteration
//! inserts them as fresh tape leaves, runs `bone_loss`, backpropagates, and
//! applies SGD in place.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::losses::{cross_entropy, ProbBatch};
use crate::seed::{hash_f64_buffers, mix, mix2};
use crate::tensor::{log_softmax_rows, sgd_step, Tape, TensorId};
use crate::{Error, Result};

const SALT_HEAD: u64 = 0x10;
const SALT_DISC: u64 = 0x11;

// ── multilayer perceptron ────────────────────────────────────────────────

/// Architecture of one MLP: the full width chain `[d, hidden.., K]` and the
/// weight init scale (weights are `init_scale * N(0,1)`, biases zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.1
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        let spec = MlpSpec { widths, init_scale: default_init_scale() };
        spec.validate()?;
        Ok(spec)
    }

    /// `[input_dim, hidden.., classes]` in one call.
    pub fn with_hidden(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(hidden);
        widths.push(classes);
        Self::new(widths)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output widths"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid(format!("zero width in {:?}", self.widths)));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(Error::invalid(format!("init scale must be >= 0, got {}", self.init_scale)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Width feeding the output layer; where a domain discriminator attaches.
    pub fn penultimate_dim(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }
}

/// Tape handles for one MLP's parameters, `[w0, b0, w1, b1, ..]`.
#[derive(Debug, Clone)]
pub struct MlpTapeIds {
    pub params: Vec<TensorId>,
}

/// A relu MLP whose parameters are plain buffers: `params[2l]` is the
/// row-major `widths[l] x widths[l+1]` weight, `params[2l+1]` the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<Vec<f64>>,
}

impl Mlp {
    /// Seeded init: weights `init_scale * N(0,1)` drawn in layer order,
    /// biases zero.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * (spec.widths.len() - 1));
        for l in 0..spec.widths.len() - 1 {
            let (rows, cols) = (spec.widths[l], spec.widths[l + 1]);
            let w: Vec<f64> = (0..rows * cols)
                .map(|_| spec.init_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            params.push(w);
            params.push(vec![0.0; cols]);
        }
        Ok(Mlp { widths: spec.widths.clone(), params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Vec<Vec<f64>> {
        &mut self.params
    }

    /// `(rows, cols)` per parameter tensor; biases report `(1, n)`.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.params.len());
        for l in 0..self.widths.len() - 1 {
            shapes.push((self.widths[l], self.widths[l + 1]));
            shapes.push((1, self.widths[l + 1]));
        }
        shapes
    }

    pub fn zeros_like_params(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Plain (no-tape) forward: returns `(logits, penultimate)` where the
    /// penultimate activation feeds the output layer. With no hidden layer
    /// the penultimate is the input itself.
    pub fn forward_plain(&self, x: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != n * self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "Mlp::forward_plain",
                left: vec![x.len()],
                right: vec![n, self.input_dim()],
            });
        }
        let layers = self.widths.len() - 1;
        let mut h = x.to_vec();
        let mut width = self.input_dim();
        let mut penult = h.clone();
        for l in 0..layers {
            let (rows, cols) = (width, self.widths[l + 1]);
            let w = &self.params[2 * l];
            let b = &self.params[2 * l + 1];
            let mut z = vec![0.0; n * cols];
            for i in 0..n {
                for p in 0..rows {
                    let hv = h[i * rows + p];
                    if hv == 0.0 {
                        continue;
                    }
                    let wrow = &w[p * cols..(p + 1) * cols];
                    let zrow = &mut z[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        zrow[j] += hv * wrow[j];
                    }
                }
                for j in 0..cols {
                    z[i * cols + j] += b[j];
                }
            }
            if l + 1 < layers {
                for v in &mut z {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                penult = z.clone();
            }
            h = z;
            width = cols;
        }
        Ok((h, penult))
    }

    pub fn logits(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.forward_plain(x, n)?.0)
    }

    /// Inserts every parameter as a gradient-taking leaf.
    pub fn insert_params(&self, tape: &mut Tape) -> Result<MlpTapeIds> {
        let shapes = self.param_shapes();
        let mut ids = Vec::with_capacity(self.params.len());
        for (p, (rows, cols)) in self.params.iter().zip(shapes) {
            let shape = if rows == 1 { vec![cols] } else { vec![rows, cols] };
            ids.push(tape.leaf(p.clone(), shape, true)?);
        }
        Ok(MlpTapeIds { params: ids })
    }

    /// Tape forward mirroring [`Mlp::forward_plain`]; returns
    /// `(logits, penultimate)` node ids.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        ids: &MlpTapeIds,
        x: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let layers = self.widths.len() - 1;
        let mut h = x;
        let mut penult = x;
        for l in 0..layers {
            let z = tape.matmul(h, ids.params[2 * l])?;
            let z = tape.add_bias(z, ids.params[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(z);
                penult = h;
            } else {
                h = z;
            }
        }
        Ok((h, penult))
    }
}

/// Per-sample cross-entropy values under an MLP, computed off-tape. This is
/// the quantity co-teaching ranks for its small-loss selection.
pub fn per_sample_ce(mlp: &Mlp, x: &[f64], n: usize, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "per_sample_ce",
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    let k = mlp.classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
    }
    let logits = mlp.logits(x, n)?;
    let ls = log_softmax_rows(&logits, n, k);
    Ok((0..n).map(|i| -ls[i * k + labels[i]]).collect())
}

// ── method settings ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Standard,
    CoTeaching,
    Dann,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Standard => "standard",
            BackboneKind::CoTeaching => "coteaching",
            BackboneKind::Dann => "dann",
        }
    }
}

/// Co-teaching keep-rate annealing: `keep_rate(t) = 1 - noise_rate *
/// min(t / rampup_epochs, 1)`, so everything is kept at epoch 0 and
/// `1 - noise_rate` is kept from `rampup_epochs` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeepRateSchedule {
    pub noise_rate: f64,
    #[serde(default = "default_rampup")]
    pub rampup_epochs: usize,
}

fn default_rampup() -> usize {
    10
}

impl KeepRateSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_rate) || !self.noise_rate.is_finite() {
            return Err(Error::invalid(format!(
                "co-teaching noise rate must lie in [0, 1], got {}",
                self.noise_rate
            )));
        }
        if self.rampup_epochs == 0 {
            return Err(Error::invalid("co-teaching rampup must be >= 1 epoch"));
        }
        Ok(())
    }

    pub fn keep_rate(&self, epoch: usize) -> f64 {
        let t = (epoch as f64 / self.rampup_epochs as f64).min(1.0);
        1.0 - self.noise_rate * t
    }
}

/// DANN settings: gradient-reversal strength and discriminator hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DannSettings {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_disc_hidden")]
    pub disc_hidden: usize,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_disc_hidden() -> usize {
    16
}

impl Default for DannSettings {
    fn default() -> Self {
        DannSettings { lambda: default_lambda(), disc_hidden: default_disc_hidden() }
    }
}

impl DannSettings {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.disc_hidden == 0 {
            return Err(Error::invalid("discriminator hidden width must be >= 1"));
        }
        Ok(())
    }
}

/// Which method to train with, plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSettings {
    pub kind: BackboneKind,
    /// Used when `kind` is `CoTeaching`.
    #[serde(default)]
    pub coteaching: Option<KeepRateSchedule>,
    /// Used when `kind` is `Dann`.
    #[serde(default)]
    pub dann: Option<DannSettings>,
}

impl BackboneSettings {
    pub fn standard() -> Self {
        BackboneSettings { kind: BackboneKind::Standard, coteaching: None, dann: None }
    }

    pub fn coteaching(schedule: KeepRateSchedule) -> Self {
        BackboneSettings {
            kind: BackboneKind::CoTeaching,
            coteaching: Some(schedule),
            dann: None,
        }
    }

    pub fn dann(settings: DannSettings) -> Self {
        BackboneSettings { kind: BackboneKind::Dann, coteaching: None, dann: Some(settings) }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackboneKind::Standard => Ok(()),
            BackboneKind::CoTeaching => self
                .coteaching
                .as_ref()
                .ok_or_else(|| Error::invalid("co-teaching needs a keep-rate schedule"))?
                .validate(),
            BackboneKind::Dann => self.dann.unwrap_or_default().validate(),
        }
    }
}

// ── the backbone itself ──────────────────────────────────────────────────

/// One or two classifier heads plus method extras, ready to train.
#[derive(Debug, Clone)]
pub struct Backbone {
    kind: BackboneKind,
    classifiers: Vec<Mlp>,
    discriminator: Option<Mlp>,
    coteaching: Option<KeepRateSchedule>,
    dann: Option<DannSettings>,
}

/// Tape handles for every trainable tensor of a backbone, in the fixed
/// order classifiers-then-discriminator that gradient collection uses.
#[derive(Debug, Clone)]
pub struct BackboneTapeIds {
    pub classifiers: Vec<MlpTapeIds>,
    pub discriminator: Option<MlpTapeIds>,
}

/// Seeded construction. Classifier head `i` draws from a sub-seed of `seed`;
/// co-teaching's two heads therefore start distinct. The same settings, spec
/// and seed always reproduce the same parameters bitwise.
pub fn init_backbone(settings: &BackboneSettings, spec: &MlpSpec, seed: u64) -> Result<Backbone> {
    settings.validate()?;
    spec.validate()?;
    let heads = match settings.kind {
        BackboneKind::CoTeaching => 2,
        _ => 1,
    };
    let classifiers: Vec<Mlp> = (0..heads)
        .map(|i| Mlp::init(spec, mix2(seed, SALT_HEAD, i as u64)))
        .collect::<Result<_>>()?;
    let (discriminator, dann) = if settings.kind == BackboneKind::Dann {
        let dann = settings.dann.unwrap_or_default();
        let disc_spec =
            MlpSpec::with_hidden(spec.penultimate_dim(), &[dann.disc_hidden], 2)?;
        let disc_spec = MlpSpec { init_scale: spec.init_scale, ..disc_spec };
        (Some(Mlp::init(&disc_spec, mix(seed, SALT_DISC))?), Some(dann))
    } else {
        (None, None)
    };
    Ok(Backbone {
        kind: settings.kind,
        classifiers,
        discriminator,
        coteaching: settings.coteaching,
        dann,
    })
}

impl Backbone {
    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn classifiers(&self) -> &[Mlp] {
        &self.classifiers
    }

    pub fn classifier(&self, head: usize) -> &Mlp {
        &self.classifiers[head]
    }

    pub fn classifier_mut(&mut self, head: usize) -> &mut Mlp {
        &mut self.classifiers[head]
    }

    pub fn discriminator(&self) -> Option<&Mlp> {
        self.discriminator.as_ref()
    }

    pub fn dann_settings(&self) -> Option<DannSettings> {
        self.dann
    }

    pub fn keep_rate_schedule(&self) -> Option<KeepRateSchedule> {
        self.coteaching
    }

    /// Indices of the classifier heads whose predictions a guide loss must
    /// align with the dual model (every head; extras like the DANN
    /// discriminator are never aligned).
    pub fn guide_heads(&self) -> Vec<usize> {
        (0..self.classifiers.len()).collect()
    }

    /// Class probabilities from the first classifier head.
    pub fn predict_probs(&self, x: &[f64], n: usize) -> Result<ProbBatch> {
        self.head_probs(0, x, n)
    }

    /// Class probabilities from a specific head (co-teaching's second head
    /// is reachable here).
    pub fn head_probs(&self, head: usize, x: &[f64], n: usize) -> Result<ProbBatch> {
        if head >= self.classifiers.len() {
            return Err(Error::contract(format!(
                "head {head} out of range, backbone has {}",
                self.classifiers.len()
            )));
        }
        let logits = self.classifiers[head].logits(x, n)?;
        Ok(ProbBatch::from_logits(&logits, n, self.classifiers[head].classes()))
    }

    /// Every parameter buffer, classifiers first then discriminator. The
    /// order is the contract shared by gradient collection, SGD, hashing,
    /// and snapshots.
    pub fn param_buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for c in &self.classifiers {
            out.extend(c.params().iter().map(|p| p.as_slice()));
        }
        if let Some(d) = &self.discriminator {
            out.extend(d.params().iter().map(|p| p.as_slice()));
        }
        out
    }

    /// FNV fingerprint of all parameters; equal iff bitwise-identical.
    pub fn param_hash(&self) -> u64 {
        hash_f64_buffers(self.param_buffers())
    }

    pub fn zeros_like_params(&self) -> Vec<Vec<f64>> {
        self.param_buffers().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Errors if any parameter became NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, buf) in self.param_buffers().iter().enumerate() {
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("backbone parameter tensor {i}")));
            }
        }
        Ok(())
    }

    /// Inserts every trainable tensor as gradient-taking leaves.
    pub fn insert_params(&self, tape: &mut Tape) -> Result<BackboneTapeIds> {
        let classifiers = self
            .classifiers
            .iter()
            .map(|c| c.insert_params(tape))
            .collect::<Result<Vec<_>>>()?;
        let discriminator =
            self.discriminator.as_ref().map(|d| d.insert_params(tape)).transpose()?;
        Ok(BackboneTapeIds { classifiers, discriminator })
    }

    /// Gradients in [`Backbone::param_buffers`] order; zeros for any tensor
    /// the loss never touched.
    pub fn collect_grads(&self, tape: &Tape, ids: &BackboneTapeIds) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut push = |mlp: &Mlp, ids: &MlpTapeIds| {
            for (p, &id) in mlp.params().iter().zip(&ids.params) {
                out.push(tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]));
            }
        };
        for (c, cid) in self.classifiers.iter().zip(&ids.classifiers) {
            push(c, cid);
        }
        if let (Some(d), Some(did)) = (&self.discriminator, &ids.discriminator) {
            push(d, did);
        }
        out
    }

    /// One in-place SGD-with-momentum update over all parameters.
    pub fn apply_sgd(
        &mut self,
        grads: &[Vec<f64>],
        eta: f64,
        momentum: f64,
        velocity: &mut [Vec<f64>],
    ) -> Result<()> {
        let mut offset = 0;
        for c in &mut self.classifiers {
            let n = c.params().len();
            sgd_step(
                c.params_mut(),
                &grads[offset..offset + n],
                eta,
                momentum,
                &mut velocity[offset..offset + n],
            )?;
            offset += n;
        }
        if let Some(d) = &mut self.discriminator {
            let n = d.params().len();
            sgd_step(
                d.params_mut(),
                &grads[offset..offset + n],
                eta,
                momentum,
                &mut velocity[offset..offset + n],
            )?;
            offset += n;
        }
        if offset != grads.len() {
            return Err(Error::ShapeMismatch {
                op: "apply_sgd",
                left: vec![offset],
                right: vec![grads.len()],
            });
        }
        Ok(())
    }
}

// ── the bone loss ────────────────────────────────────────────────────────

/// A feature batch with labels (noisy source labels or target pseudo-labels).
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    pub x: &'a [f64],
    pub n: usize,
    pub labels: &'a [usize],
}

/// A feature batch from the opposite domain, labels unknown.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledBatch<'a> {
    pub x: &'a [f64],
    pub n: usize,
}

/// Where inside a training step the loss is being built; drives schedules.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepContext {
    /// Epoch index within the current training step, starting at 0.
    pub epoch: usize,
}

/// Smallest-loss selection: indices of the `max(1, floor(keep_rate * n))`
/// lowest values, ties broken toward the smaller index. The returned indices
/// are sorted ascending.
pub fn small_loss_selection(losses: &[f64], keep_rate: f64) -> Result<Vec<usize>> {
    if losses.is_empty() {
        return Err(Error::contract("small_loss_selection on an empty batch"));
    }
    if !(0.0..=1.0).contains(&keep_rate) || !keep_rate.is_finite() {
        return Err(Error::invalid(format!("keep rate must lie in [0, 1], got {keep_rate}")));
    }
    let keep = ((keep_rate * losses.len() as f64).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].partial_cmp(&losses[b]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Builds the method's scalar training loss on `tape` against parameters
/// already inserted as `ids`. The unlabeled batch is consumed only by
/// methods that use one (DANN's discriminator); others ignore it.
pub fn bone_loss(
    backbone: &Backbone,
    tape: &mut Tape,
    ids: &BackboneTapeIds,
    labeled: LabeledBatch<'_>,
    unlabeled: UnlabeledBatch<'_>,
    ctx: &StepContext,
) -> Result<TensorId> {
    let dim = backbone.classifier(0).input_dim();
    if labeled.n == 0 {
        return Err(Error::contract("bone_loss needs a non-empty labeled batch"));
    }
    if labeled.x.len() != labeled.n * dim || labeled.labels.len() != labeled.n {
        return Err(Error::ShapeMismatch {
            op: "bone_loss(labeled)",
            left: vec![labeled.x.len(), labeled.labels.len()],
            right: vec![labeled.n, dim],
        });
    }
    if unlabeled.x.len() != unlabeled.n * dim {
        return Err(Error::ShapeMismatch {
            op: "bone_loss(unlabeled)",
            left: vec![unlabeled.x.len()],
            right: vec![unlabeled.n, dim],
        });
    }

    match backbone.kind {
        BackboneKind::Standard => {
            let x = tape.constant(labeled.x.to_vec(), vec![labeled.n, dim])?;
            let (logits, _) =
                backbone.classifier(0).forward_on_tape(tape, &ids.classifiers[0], x)?;
            cross_entropy(tape, logits, labeled.labels)
        }
        BackboneKind::CoTeaching => {
            let schedule = backbone
                .coteaching
                .ok_or_else(|| Error::contract("co-teaching backbone without a schedule"))?;
            let keep_rate = schedule.keep_rate(ctx.epoch);
            // Rank samples off-tape with each head, then cross-train: each
            // head optimizes on the batch its *peer* judged clean.
            let mut selections = Vec::with_capacity(2);
            for head in 0..2 {
                let losses =
                    per_sample_ce(backbone.classifier(head), labeled.x, labeled.n, labeled.labels)?;
                selections.push(small_loss_selection(&losses, keep_rate)?);
            }
            let mut peer_losses = Vec::with_capacity(2);
            for head in 0..2 {
                let sel = &selections[1 - head];
                let mut sx = Vec::with_capacity(sel.len() * dim);
                let mut sy = Vec::with_capacity(sel.len());
                for &i in sel {
                    sx.extend_from_slice(&labeled.x[i * dim..(i + 1) * dim]);
                    sy.push(labeled.labels[i]);
                }
                let x = tape.constant(sx, vec![sel.len(), dim])?;
                let (logits, _) =
                    backbone.classifier(head).forward_on_tape(tape, &ids.classifiers[head], x)?;
                peer_losses.push(cross_entropy(tape, logits, &sy)?);
            }
            tape.add(peer_losses[0], peer_losses[1])
        }
        BackboneKind::Dann => {
            let dann = backbone.dann.unwrap_or_default();
            let disc = backbone
                .discriminator
                .as_ref()
                .ok_or_else(|| Error::contract("DANN backbone without a discriminator"))?;
            let disc_ids = ids
                .discriminator
                .as_ref()
                .ok_or_else(|| Error::contract("DANN tape ids missing the discriminator"))?;
            if unlabeled.n == 0 {
                return Err(Error::contract("DANN needs a non-empty unlabeled batch"));
            }

            let xl = tape.constant(labeled.x.to_vec(), vec![labeled.n, dim])?;
            let (logits, penult_l) =
                backbone.classifier(0).forward_on_tape(tape, &ids.classifiers[0], xl)?;
            let class_loss = cross_entropy(tape, logits, labeled.labels)?;

            let xu = tape.constant(unlabeled.x.to_vec(), vec![unlabeled.n, dim])?;
            let (_, penult_u) =
                backbone.classifier(0).forward_on_tape(tape, &ids.classifiers[0], xu)?;

            // Domain labels: 0 for the labeled domain, 1 for the unlabeled
            // one. The discriminator trains normally; feature gradients are
            // reversed.
            let mut domain_terms = Vec::with_capacity(2);
            for (penult, n, domain) in
                [(penult_l, labeled.n, 0usize), (penult_u, unlabeled.n, 1usize)]
            {
                let reversed = tape.grad_reverse(penult, dann.lambda);
                let (dlogits, _) = disc.forward_on_tape(tape, disc_ids, reversed)?;
                let labels = vec![domain; n];
                let ce = cross_entropy(tape, dlogits, &labels)?;
                // Weight per-domain means back into one mean over all rows.
                let w = n as f64 / (labeled.n + unlabeled.n) as f64;
                domain_terms.push(tape.scale(ce, w));
            }
            let domain_loss = tape.add(domain_terms[0], domain_terms[1])?;
            tape.add(class_loss, domain_loss)
        }
    }
}

// ── parameter snapshots ──────────────────────────────────────────────────

fn snapshot_names(backbone: &Backbone) -> Vec<String> {
    let mut names = Vec::new();
    for (ci, c) in backbone.classifiers.iter().enumerate() {
        for l in 0..c.widths().len() - 1 {
            names.push(format!("c{ci}.w{l}"));
            names.push(format!("c{ci}.b{l}"));
        }
    }
    if let Some(d) = &backbone.discriminator {
        for l in 0..d.widths().len() - 1 {
            names.push(format!("disc.w{l}"));
            names.push(format!("disc.b{l}"));
        }
    }
    names
}

fn snapshot_shapes(backbone: &Backbone) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    for c in &backbone.classifiers {
        shapes.extend(c.param_shapes());
    }
    if let Some(d) = &backbone.discriminator {
        shapes.extend(d.param_shapes());
    }
    shapes
}

/// Writes every parameter tensor as one CSV record:
/// `name,rows,cols,v00,v01,..` with values row-major in shortest
/// round-trip form.
pub fn save_params(backbone: &Backbone, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::config(format!("snapshot writer on {}: {e}", path.display())))?;
    let names = snapshot_names(backbone);
    let shapes = snapshot_shapes(backbone);
    for ((name, (rows, cols)), buf) in
        names.iter().zip(shapes).zip(backbone.param_buffers())
    {
        let mut rec = vec![name.clone(), rows.to_string(), cols.to_string()];
        rec.extend(buf.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| Error::config(format!("snapshot write: {e}")))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

/// Loads a snapshot written by [`save_params`] into a structurally identical
/// backbone; names and shapes must match record for record.
pub fn load_params(backbone: &mut Backbone, path: &Path) -> Result<()> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::config(format!("snapshot reader on {}: {e}", path.display())))?;
    let names = snapshot_names(backbone);
    let shapes = snapshot_shapes(backbone);
    let mut records = r.records();
    for (i, (name, (rows, cols))) in names.iter().zip(shapes).enumerate() {
        let rec = records
            .next()
            .ok_or_else(|| Error::config(format!("snapshot ended before tensor {name}")))?
            .map_err(|e| Error::config(format!("snapshot record {i}: {e}")))?;
        if &rec[0] != name.as_str() {
            return Err(Error::config(format!("expected tensor {name}, found {}", &rec[0])));
        }
        let (r0, c0): (usize, usize) = (
            rec[1].parse().map_err(|_| Error::config(format!("bad rows in {name}")))?,
            rec[2].parse().map_err(|_| Error::config(format!("bad cols in {name}")))?,
        );
        if (r0, c0) != (rows, cols) {
            return Err(Error::ShapeMismatch {
                op: "load_params",
                left: vec![rows, cols],
                right: vec![r0, c0],
            });
        }
        if rec.len() != 3 + rows * cols {
            return Err(Error::config(format!(
                "tensor {name} carries {} values, expected {}",
                rec.len() - 3,
                rows * cols
            )));
        }
        let values: Vec<f64> = (3..rec.len())
            .map(|j| rec[j].parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("non-numeric value in tensor {name}")))?;
        // Locate the owning buffer by flat index.
        write_param(backbone, i, values)?;
    }
    if records.next().is_some() {
        return Err(Error::config("snapshot has extra records"));
    }
    Ok(())
}

fn write_param(backbone: &mut Backbone, flat_index: usize, values: Vec<f64>) -> Result<()> {
    let mut idx = flat_index;
    for c in &mut backbone.classifiers {
        if idx < c.params().len() {
            c.params_mut()[idx] = values;
            return Ok(());
        }
        idx -= c.params().len();
    }
    if let Some(d) = &mut backbone.discriminator {
        if idx < d.params().len() {
            d.params_mut()[idx] = values;
            return Ok(());
        }
    }
    Err(Error::contract(format!("parameter index {flat_index} out of range")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::total_loss;

    fn spec(d: usize, h: usize, k: usize) -> MlpSpec {
        MlpSpec::with_hidden(d, &[h], k).unwrap()
    }

    fn toy_batch(n: usize, d: usize, k: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<usize> = (0..n).map(|i| i % k).collect();
        (x, y)
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let s = BackboneSettings::standard();
        let a = init_backbone(&s, &spec(3, 8, 2), 5).unwrap();
        let b = init_backbone(&s, &spec(3, 8, 2), 5).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        let c = init_backbone(&s, &spec(3, 8, 2), 6).unwrap();
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn coteaching_heads_start_distinct() {
        let s = BackboneSettings::coteaching(KeepRateSchedule { noise_rate: 0.2, rampup_epochs: 10 });
        let b = init_backbone(&s, &spec(3, 8, 2), 5).unwrap();
        assert_eq!(b.classifiers().len(), 2);
        assert_ne!(b.classifier(0).params()[0], b.classifier(1).params()[0]);
        assert_eq!(b.guide_heads(), vec![0, 1]);
    }

    #[test]
    fn guide_heads_per_kind() {
        assert_eq!(
            init_backbone(&BackboneSettings::standard(), &spec(2, 4, 2), 1)
                .unwrap()
                .guide_heads(),
            vec![0]
        );
        assert_eq!(
            init_backbone(&BackboneSettings::dann(DannSettings::default()), &spec(2, 4, 2), 1)
                .unwrap()
                .guide_heads(),
            vec![0],
            "the DANN discriminator is never a guide target"
        );
    }

    #[test]
    fn near_zero_init_predicts_near_uniform() {
        let tiny = MlpSpec { init_scale: 1e-3, ..spec(4, 16, 5) };
        let b = init_backbone(&BackboneSettings::standard(), &tiny, 3).unwrap();
        let (x, _) = toy_batch(20, 4, 5, 17);
        let probs = b.predict_probs(&x, 20).unwrap();
        for i in 0..20 {
            for &p in probs.row(i) {
                assert!((p - 0.2).abs() < 0.01, "row {i} entry {p} far from uniform");
            }
        }
    }

    #[test]
    fn keep_rate_schedule_anneals() {
        let s = KeepRateSchedule { noise_rate: 0.4, rampup_epochs: 10 };
        assert_eq!(s.keep_rate(0), 1.0);
        assert!((s.keep_rate(5) - 0.8).abs() < 1e-12);
        assert!((s.keep_rate(10) - 0.6).abs() < 1e-12);
        assert!((s.keep_rate(50) - 0.6).abs() < 1e-12, "schedule floors after rampup");
    }

    #[test]
    fn small_loss_selection_picks_smallest() {
        assert_eq!(small_loss_selection(&[3.0, 1.0, 2.0], 2.0 / 3.0).unwrap(), vec![1, 2]);
        assert_eq!(small_loss_selection(&[3.0, 1.0, 2.0], 0.5).unwrap(), vec![1]);
        // Floor never empties the selection.
        assert_eq!(small_loss_selection(&[3.0, 1.0], 0.0).unwrap(), vec![1]);
        // Ties break toward the smaller index.
        assert_eq!(small_loss_selection(&[1.0, 1.0, 1.0], 1.0 / 3.0).unwrap(), vec![0]);
        assert!(small_loss_selection(&[], 0.5).is_err());
    }

    #[test]
    fn standard_bone_loss_is_plain_cross_entropy() {
        let b = init_backbone(&BackboneSettings::standard(), &spec(3, 8, 2), 7).unwrap();
        let (x, y) = toy_batch(6, 3, 2, 23);
        let mut tape = Tape::new();
        let ids = b.insert_params(&mut tape).unwrap();
        let loss = bone_loss(
            &b,
            &mut tape,
            &ids,
            LabeledBatch { x: &x, n: 6, labels: &y },
            UnlabeledBatch { x: &[], n: 0 },
            &StepContext::default(),
        )
        .unwrap();

        // Oracle: CE recomputed from plain per-sample losses.
        let per = per_sample_ce(b.classifier(0), &x, 6, &y).unwrap();
        let want = per.iter().sum::<f64>() / 6.0;
        assert!((tape.scalar_value(loss).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn coteaching_full_keep_is_sum_of_peer_ce() {
        let s = BackboneSettings::coteaching(KeepRateSchedule { noise_rate: 0.4, rampup_epochs: 10 });
        let b = init_backbone(&s, &spec(3, 8, 2), 9).unwrap();
        let (x, y) = toy_batch(8, 3, 2, 29);
        let mut tape = Tape::new();
        let ids = b.insert_params(&mut tape).unwrap();
        // Epoch 0 keeps everything.
        let loss = bone_loss(
            &b,
            &mut tape,
            &ids,
            LabeledBatch { x: &x, n: 8, labels: &y },
            UnlabeledBatch { x: &[], n: 0 },
            &StepContext { epoch: 0 },
        )
        .unwrap();
        let ce0: f64 =
            per_sample_ce(b.classifier(0), &x, 8, &y).unwrap().iter().sum::<f64>() / 8.0;
        let ce1: f64 =
            per_sample_ce(b.classifier(1), &x, 8, &y).unwrap().iter().sum::<f64>() / 8.0;
        assert!((tape.scalar_value(loss).unwrap() - (ce0 + ce1)).abs() < 1e-12);
    }

    #[test]
    fn coteaching_and_dann_match_standard_gradients_when_disabled() {
        // keep_rate = 1 and lambda = 0 must leave the classification-path
        // gradients exactly as the standard backbone computes them.
        let base = init_backbone(&BackboneSettings::standard(), &spec(3, 8, 3), 11).unwrap();
        let (x, y) = toy_batch(10, 3, 3, 31);
        let (ux, _) = toy_batch(10, 3, 3, 32);

        let grads_of = |b: &Backbone| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let ids = b.insert_params(&mut tape).unwrap();
            let loss = bone_loss(
                b,
                &mut tape,
                &ids,
                LabeledBatch { x: &x, n: 10, labels: &y },
                UnlabeledBatch { x: &ux, n: 10 },
                &StepContext { epoch: 0 },
            )
            .unwrap();
            tape.backward(loss).unwrap();
            b.collect_grads(&tape, &ids)
        };

        let standard_grads = grads_of(&base);

        let s = BackboneSettings::coteaching(KeepRateSchedule { noise_rate: 0.0, rampup_epochs: 10 });
        let mut ct = init_backbone(&s, &spec(3, 8, 3), 12).unwrap();
        *ct.classifier_mut(0) = base.classifier(0).clone();
        let ct_grads = grads_of(&ct);
        for (ti, (sg, cg)) in standard_grads.iter().zip(&ct_grads).enumerate() {
            for (a, b) in sg.iter().zip(cg) {
                assert!((a - b).abs() <= 1e-6, "co-teaching head-0 grad differs at tensor {ti}");
            }
        }

        let s = BackboneSettings::dann(DannSettings { lambda: 0.0, disc_hidden: 8 });
        let mut dn = init_backbone(&s, &spec(3, 8, 3), 13).unwrap();
        *dn.classifier_mut(0) = base.classifier(0).clone();
        let dn_grads = grads_of(&dn);
        for (ti, (sg, dg)) in standard_grads.iter().zip(&dn_grads).enumerate() {
            for (a, b) in sg.iter().zip(dg) {
                assert!((a - b).abs() <= 1e-6, "DANN classifier grad differs at tensor {ti}");
            }
        }
        // The discriminator itself still learns at lambda = 0.
        let disc_grads = &dn_grads[base.param_buffers().len()..];
        assert!(disc_grads.iter().flatten().any(|&g| g != 0.0));
    }

    #[test]
    fn dann_feature_gradients_are_linear_in_lambda() {
        // The reversal layer scales the domain-path contribution by -lambda,
        // so classifier gradients must satisfy g(2) - g(0) = 2 (g(1) - g(0)).
        let (x, y) = toy_batch(6, 3, 2, 41);
        let (ux, _) = toy_batch(6, 3, 2, 42);
        let grads_with = |lambda: f64| -> Vec<Vec<f64>> {
            let s = BackboneSettings::dann(DannSettings { lambda, disc_hidden: 8 });
            let b = init_backbone(&s, &spec(3, 8, 2), 14).unwrap();
            let mut tape = Tape::new();
            let ids = b.insert_params(&mut tape).unwrap();
            let loss = bone_loss(
                &b,
                &mut tape,
                &ids,
                LabeledBatch { x: &x, n: 6, labels: &y },
                UnlabeledBatch { x: &ux, n: 6 },
                &StepContext::default(),
            )
            .unwrap();
            tape.backward(loss).unwrap();
            b.collect_grads(&tape, &ids)
        };
        let g0 = grads_with(0.0);
        let g1 = grads_with(1.0);
        let g2 = grads_with(2.0);
        assert_ne!(g0[0], g1[0], "lambda must change first-layer gradients");
        for ((a0, a1), a2) in g0[0].iter().zip(&g1[0]).zip(&g2[0]) {
            assert!((a2 - a0 - 2.0 * (a1 - a0)).abs() < 1e-10);
        }
    }

    #[test]
    fn bone_loss_composes_with_total_loss() {
        let b = init_backbone(&BackboneSettings::standard(), &spec(2, 4, 2), 15).unwrap();
        let (x, y) = toy_batch(4, 2, 2, 51);
        let mut tape = Tape::new();
        let ids = b.insert_params(&mut tape).unwrap();
        let sup = bone_loss(
            &b,
            &mut tape,
            &ids,
            LabeledBatch { x: &x, n: 4, labels: &y },
            UnlabeledBatch { x: &[], n: 0 },
            &StepContext::default(),
        )
        .unwrap();
        let guide = tape.constant(vec![2.0], vec![1]).unwrap();
        let bundle = total_loss(&mut tape, sup, Some(guide), 0.1).unwrap();
        let sup_v = tape.scalar_value(sup).unwrap();
        assert!((tape.scalar_value(bundle.total).unwrap() - (sup_v + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn sgd_roundtrip_updates_all_tensors() {
        let b0 = init_backbone(&BackboneSettings::dann(DannSettings::default()), &spec(3, 8, 2), 17)
            .unwrap();
        let mut b = b0.clone();
        let (x, y) = toy_batch(8, 3, 2, 61);
        let (ux, _) = toy_batch(8, 3, 2, 62);
        let mut velocity = b.zeros_like_params();

        let mut tape = Tape::new();
        let ids = b.insert_params(&mut tape).unwrap();
        let loss = bone_loss(
            &b,
            &mut tape,
            &ids,
            LabeledBatch { x: &x, n: 8, labels: &y },
            UnlabeledBatch { x: &ux, n: 8 },
            &StepContext::default(),
        )
        .unwrap();
        tape.backward(loss).unwrap();
        let grads = b.collect_grads(&tape, &ids);
        b.apply_sgd(&grads, 0.1, 0.9, &mut velocity).unwrap();

        assert_ne!(b.param_hash(), b0.param_hash());
        b.check_finite().unwrap();
    }

    #[test]
    fn snapshot_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.csv");
        let s = BackboneSettings::coteaching(KeepRateSchedule { noise_rate: 0.3, rampup_epochs: 10 });
        let b = init_backbone(&s, &spec(3, 8, 4), 19).unwrap();
        save_params(&b, &path).unwrap();

        let mut fresh = init_backbone(&s, &spec(3, 8, 4), 20).unwrap();
        assert_ne!(fresh.param_hash(), b.param_hash());
        load_params(&mut fresh, &path).unwrap();
        assert_eq!(fresh.param_hash(), b.param_hash(), "snapshot load must be bitwise");
    }

    #[test]
    fn snapshot_rejects_mismatched_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.csv");
        let b = init_backbone(&BackboneSettings::standard(), &spec(3, 8, 4), 19).unwrap();
        save_params(&b, &path).unwrap();
        let mut other = init_backbone(&BackboneSettings::standard(), &spec(3, 9, 4), 19).unwrap();
        assert!(load_params(&mut other, &path).is_err());
    }

    #[test]
    fn forward_plain_matches_tape_forward() {
        let b = init_backbone(&BackboneSettings::standard(), &spec(4, 8, 3), 21).unwrap();
        let (x, _) = toy_batch(5, 4, 3, 71);
        let plain = b.classifier(0).logits(&x, 5).unwrap();

        let mut tape = Tape::new();
        let ids = b.insert_params(&mut tape).unwrap();
        let xid = tape.constant(x.clone(), vec![5, 4]).unwrap();
        let (logits, _) = b.classifier(0).forward_on_tape(&mut tape, &ids.classifiers[0], xid).unwrap();
        assert_eq!(tape.data(logits), plain.as_slice(), "two forward paths must agree bitwise");
    }
}
