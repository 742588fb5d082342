//! Synthetic shifted-domain datasets and label-noise models.
//!
//! A *domain pair* is two draws of the same class-conditional generative
//! process where the target draw is pushed through a fixed shift (rotation of
//! the first two feature dims and/or a translation). Source labels can then be
//! corrupted through a row-stochastic transition matrix, leaving the target
//! unlabeled from the trainer's point of view: its true labels are flagged
//! evaluation-only and any training-path read is an error.
//!
//! All sampling is seeded; the same spec and seed reproduce a dataset
//! bitwise.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seed::{mix, mix2};
use crate::{Error, Result};

/// Class-mean circle radius for the `gaussians` family.
pub const GAUSSIAN_RADIUS: f64 = 2.0;
/// Isotropic class-conditional standard deviation for `gaussians`.
pub const GAUSSIAN_SIGMA: f64 = 0.3;
/// Coordinate noise for the `moons` family.
pub const MOON_SIGMA: f64 = 0.2;

const SALT_SOURCE: u64 = 0x01;
const SALT_TARGET: u64 = 0x02;
const SALT_NOISE: u64 = 0x03;
const SALT_BATCH: u64 = 0x04;

// ── label-noise transition matrices ──────────────────────────────────────

/// Noise process applied to source labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Each label flips to any *other* class with probability rho/K each,
    /// keeping probability 1 - rho*(K-1)/K.
    Uniform,
    /// Each label flips to its cyclic successor (c+1 mod K) with
    /// probability rho, keeping probability 1 - rho.
    Flip,
}

/// Row-stochastic K x K matrix; `row(c)` is the corrupted-label distribution
/// for true class c.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    classes: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.entries[class * self.classes..(class + 1) * self.classes]
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.classes + to]
    }
}

/// Builds the noise transition matrix for `kind` at rate `rho`.
pub fn build_transition_matrix(kind: NoiseKind, classes: usize, rho: f64) -> Result<TransitionMatrix> {
    if classes < 2 {
        return Err(Error::invalid(format!("noise matrix needs >= 2 classes, got {classes}")));
    }
    if !(0.0..=1.0).contains(&rho) || !rho.is_finite() {
        return Err(Error::invalid(format!("noise rate must lie in [0, 1], got {rho}")));
    }
    let k = classes;
    let mut entries = vec![0.0; k * k];
    match kind {
        NoiseKind::Uniform => {
            let off = rho / k as f64;
            let diag = 1.0 - rho * (k as f64 - 1.0) / k as f64;
            for c in 0..k {
                for j in 0..k {
                    entries[c * k + j] = if j == c { diag } else { off };
                }
            }
        }
        NoiseKind::Flip => {
            for c in 0..k {
                entries[c * k + c] = 1.0 - rho;
                entries[c * k + (c + 1) % k] = rho;
            }
        }
    }
    Ok(TransitionMatrix { classes: k, entries })
}

// ── labeled sets ─────────────────────────────────────────────────────────

/// Which domain a set was drawn as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

/// Why true labels are being read. Training-path reads of an
/// evaluation-only set are contract violations and are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelAccess {
    Training,
    Evaluation,
}

/// A dense feature matrix with true labels, optional noisy labels, and a
/// domain tag. For target sets the true labels are evaluation-only.
#[derive(Debug)]
pub struct LabeledSet {
    x: Vec<f64>,
    n: usize,
    dim: usize,
    classes: usize,
    y_true: Vec<usize>,
    y_noisy: Option<Vec<usize>>,
    domain: DomainTag,
    truth_eval_only: bool,
    truth_training_reads: AtomicU64,
    truth_eval_reads: AtomicU64,
}

impl Clone for LabeledSet {
    /// Clones data and flags; access counters restart at zero.
    fn clone(&self) -> Self {
        LabeledSet {
            x: self.x.clone(),
            n: self.n,
            dim: self.dim,
            classes: self.classes,
            y_true: self.y_true.clone(),
            y_noisy: self.y_noisy.clone(),
            domain: self.domain,
            truth_eval_only: self.truth_eval_only,
            truth_training_reads: AtomicU64::new(0),
            truth_eval_reads: AtomicU64::new(0),
        }
    }
}

impl LabeledSet {
    /// Builds a set from row-major features and labels.
    ///
    /// `truth_eval_only` marks the true labels as reachable only through
    /// [`LabelAccess::Evaluation`]; pass true for anything a trainer must
    /// treat as unlabeled.
    pub fn new(
        x: Vec<f64>,
        dim: usize,
        y_true: Vec<usize>,
        classes: usize,
        domain: DomainTag,
        truth_eval_only: bool,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dim must be >= 1"));
        }
        if classes < 2 {
            return Err(Error::invalid(format!("need >= 2 classes, got {classes}")));
        }
        if x.len() != y_true.len() * dim {
            return Err(Error::ShapeMismatch {
                op: "LabeledSet::new",
                left: vec![x.len()],
                right: vec![y_true.len(), dim],
            });
        }
        if let Some(&bad) = y_true.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
        }
        let n = y_true.len();
        Ok(LabeledSet {
            x,
            n,
            dim,
            classes,
            y_true,
            y_noisy: None,
            domain,
            truth_eval_only,
            truth_training_reads: AtomicU64::new(0),
            truth_eval_reads: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn truth_eval_only(&self) -> bool {
        self.truth_eval_only
    }

    /// Row-major feature matrix, `len() x dim()`.
    pub fn features(&self) -> &[f64] {
        &self.x
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the rows named by `indices` into a dense batch.
    pub fn gather_features(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.feature_row(i));
        }
        out
    }

    pub fn noisy_labels(&self) -> Option<&[usize]> {
        self.y_noisy.as_deref()
    }

    /// True labels, gated by purpose. A [`LabelAccess::Training`] read of an
    /// evaluation-only set fails and is recorded; the engine's tests assert
    /// the training path never even attempts one.
    pub fn true_labels(&self, access: LabelAccess) -> Result<&[usize]> {
        match access {
            LabelAccess::Training => {
                if self.truth_eval_only {
                    self.truth_training_reads.fetch_add(1, Ordering::Relaxed);
                    return Err(Error::contract(format!(
                        "true labels of this {:?} set are evaluation-only",
                        self.domain
                    )));
                }
                Ok(&self.y_true)
            }
            LabelAccess::Evaluation => {
                self.truth_eval_reads.fetch_add(1, Ordering::Relaxed);
                Ok(&self.y_true)
            }
        }
    }

    /// How many forbidden training-path reads were attempted.
    pub fn truth_training_read_attempts(&self) -> u64 {
        self.truth_training_reads.load(Ordering::Relaxed)
    }

    /// How many evaluation reads happened.
    pub fn truth_eval_reads(&self) -> u64 {
        self.truth_eval_reads.load(Ordering::Relaxed)
    }

    /// Writes `f0..f{d-1},y_true[,y_noisy]` rows to `path`. The noisy column
    /// appears only when the set has noisy labels. Floats are written in
    /// shortest round-trip form.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source: std::io::Error| Error::Io { path: path.to_path_buf(), source };
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => io_err(source),
            other => Error::config(format!("csv writer on {}: {other:?}", path.display())),
        })?;
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("f{j}")).collect();
        header.push("y_true".to_string());
        if self.y_noisy.is_some() {
            header.push("y_noisy".to_string());
        }
        w.write_record(&header).map_err(|e| Error::config(format!("csv write: {e}")))?;
        for i in 0..self.n {
            let mut rec: Vec<String> =
                self.feature_row(i).iter().map(|v| format!("{v}")).collect();
            rec.push(self.y_true[i].to_string());
            if let Some(yn) = &self.y_noisy {
                rec.push(yn[i].to_string());
            }
            w.write_record(&rec).map_err(|e| Error::config(format!("csv write: {e}")))?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }
}

/// Returns a copy of `set` whose noisy labels are drawn per sample from the
/// transition-matrix row of its true label. Rows with no corruption mass
/// stay identical; the draw is a pure function of `seed`.
pub fn inject_noise(set: &LabeledSet, matrix: &TransitionMatrix, seed: u64) -> Result<LabeledSet> {
    if matrix.classes() != set.classes() {
        return Err(Error::ShapeMismatch {
            op: "inject_noise",
            left: vec![set.classes()],
            right: vec![matrix.classes()],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, SALT_NOISE));
    let mut noisy = Vec::with_capacity(set.len());
    // Noisy labels derive from true labels as part of dataset construction;
    // this is the generative step, not a training-path read.
    let truth = set.true_labels(LabelAccess::Evaluation)?;
    for &y in truth {
        let row = matrix.row(y);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut drawn = matrix.classes() - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                drawn = j;
                break;
            }
        }
        noisy.push(drawn);
    }
    let mut out = set.clone();
    out.y_noisy = Some(noisy);
    Ok(out)
}

// ── domain pairs ─────────────────────────────────────────────────────────

/// Generative family for a domain pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// K isotropic Gaussian blobs with means spaced on a circle of radius
    /// [`GAUSSIAN_RADIUS`] in the first two feature dims.
    Gaussians,
    /// The classic interleaved two half-moons (K=2, d=2).
    Moons,
}

/// Everything needed to draw a source/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPairSpec {
    pub family: Family,
    pub classes: usize,
    pub dim: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Rotation of the first two feature dims, applied to target samples.
    #[serde(default)]
    pub rotation_deg: f64,
    /// Translation added to target samples; empty means zero, otherwise
    /// must have `dim` entries.
    #[serde(default)]
    pub translation: Vec<f64>,
}

impl DomainPairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("need >= 2 classes, got {}", self.classes)));
        }
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::invalid("both domains need at least one sample"));
        }
        if !self.rotation_deg.is_finite() {
            return Err(Error::invalid("rotation must be finite"));
        }
        if !self.translation.is_empty() && self.translation.len() != self.dim {
            return Err(Error::invalid(format!(
                "translation has {} entries but dim is {}",
                self.translation.len(),
                self.dim
            )));
        }
        match self.family {
            Family::Gaussians => {
                if self.dim < 2 {
                    return Err(Error::invalid("gaussians need dim >= 2"));
                }
            }
            Family::Moons => {
                if self.classes != 2 || self.dim != 2 {
                    return Err(Error::invalid("moons are defined for exactly 2 classes in 2 dims"));
                }
            }
        }
        Ok(())
    }
}

fn draw_family(spec: &DomainPairSpec, n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let d = spec.dim;
    let k = spec.classes;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    match spec.family {
        Family::Gaussians => {
            let step = std::f64::consts::TAU / k as f64;
            for i in 0..n {
                let c = i % k;
                let angle = step * c as f64;
                let (mx, my) = (GAUSSIAN_RADIUS * angle.cos(), GAUSSIAN_RADIUS * angle.sin());
                for j in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    let mean = match j {
                        0 => mx,
                        1 => my,
                        _ => 0.0,
                    };
                    x.push(mean + GAUSSIAN_SIGMA * noise);
                }
                y.push(c);
            }
        }
        Family::Moons => {
            for i in 0..n {
                let c = i % 2;
                let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let (bx, by) = if c == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                x.push(bx + MOON_SIGMA * nx);
                x.push(by + MOON_SIGMA * ny);
                y.push(c);
            }
        }
    }
    (x, y)
}

fn apply_shift(spec: &DomainPairSpec, x: &mut [f64]) {
    let d = spec.dim;
    let theta = spec.rotation_deg.to_radians();
    let (s, c) = theta.sin_cos();
    let rotate = spec.rotation_deg != 0.0 && d >= 2;
    for row in x.chunks_mut(d) {
        if rotate {
            let (x0, x1) = (row[0], row[1]);
            row[0] = c * x0 - s * x1;
            row[1] = s * x0 + c * x1;
        }
        if !spec.translation.is_empty() {
            for (v, t) in row.iter_mut().zip(&spec.translation) {
                *v += t;
            }
        }
    }
}

/// Draws a source/target pair. The target is an independent draw of the same
/// class-conditional process with the configured shift applied to its
/// features; its true labels come back flagged evaluation-only.
pub fn make_domain_pair(spec: &DomainPairSpec, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let mut src_rng = ChaCha8Rng::seed_from_u64(mix(seed, SALT_SOURCE));
    let (sx, sy) = draw_family(spec, spec.n_source, &mut src_rng);
    let source = LabeledSet::new(sx, spec.dim, sy, spec.classes, DomainTag::Source, false)?;

    let mut tgt_rng = ChaCha8Rng::seed_from_u64(mix(seed, SALT_TARGET));
    let (mut tx, ty) = draw_family(spec, spec.n_target, &mut tgt_rng);
    apply_shift(spec, &mut tx);
    let target = LabeledSet::new(tx, spec.dim, ty, spec.classes, DomainTag::Target, true)?;
    Ok((source, target))
}

// ── batching ─────────────────────────────────────────────────────────────

/// Chunks one seeded permutation of `set`'s indices into batches. Every index
/// appears exactly once per epoch; the final batch may be short, and a batch
/// size above `set.len()` yields a single short batch. The permutation is a
/// pure function of `(seed, epoch)`.
pub fn batches(set: &LabeledSet, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    batches_for_len(set.len(), batch_size, seed, epoch)
}

pub(crate) fn batches_for_len(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if n == 0 {
        return Err(Error::contract("cannot batch an empty set"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, SALT_BATCH, epoch as u64));
    perm.shuffle(&mut rng);
    Ok(perm.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, classes: usize, dim: usize, n: usize, rot: f64) -> DomainPairSpec {
        DomainPairSpec {
            family,
            classes,
            dim,
            n_source: n,
            n_target: n,
            rotation_deg: rot,
            translation: vec![],
        }
    }

    #[test]
    fn uniform_matrix_known_entries() {
        let q = build_transition_matrix(NoiseKind::Uniform, 2, 0.4).unwrap();
        assert!((q.prob(0, 0) - 0.8).abs() < 1e-15);
        assert!((q.prob(0, 1) - 0.2).abs() < 1e-15);
        assert!((q.prob(1, 0) - 0.2).abs() < 1e-15);
        assert!((q.prob(1, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn flip_matrix_pairs_cyclically() {
        let q = build_transition_matrix(NoiseKind::Flip, 3, 0.4).unwrap();
        for c in 0..3 {
            assert!((q.prob(c, c) - 0.6).abs() < 1e-15);
            assert!((q.prob(c, (c + 1) % 3) - 0.4).abs() < 1e-15);
        }
        assert_eq!(q.prob(0, 2), 0.0);
        assert_eq!(q.prob(2, 1), 0.0);
    }

    #[test]
    fn zero_rate_gives_identity_rows() {
        for kind in [NoiseKind::Uniform, NoiseKind::Flip] {
            let q = build_transition_matrix(kind, 4, 0.0).unwrap();
            for c in 0..4 {
                for j in 0..4 {
                    let want = if c == j { 1.0 } else { 0.0 };
                    assert_eq!(q.prob(c, j), want, "{kind:?} at ({c},{j})");
                }
            }
        }
    }

    #[test]
    fn matrix_rows_are_stochastic() {
        for kind in [NoiseKind::Uniform, NoiseKind::Flip] {
            for &k in &[2usize, 3, 31] {
                for &rho in &[0.0, 0.2, 0.4, 1.0] {
                    let q = build_transition_matrix(kind, k, rho).unwrap();
                    for c in 0..k {
                        let s: f64 = q.row(c).iter().sum();
                        assert!((s - 1.0).abs() < 1e-12, "{kind:?} K={k} rho={rho} row {c}: {s}");
                        assert!(q.row(c).iter().all(|&p| (0.0..=1.0).contains(&p)));
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_noise_rates_are_rejected() {
        assert!(build_transition_matrix(NoiseKind::Uniform, 2, -0.1).is_err());
        assert!(build_transition_matrix(NoiseKind::Uniform, 2, 1.1).is_err());
        assert!(build_transition_matrix(NoiseKind::Flip, 1, 0.2).is_err());
    }

    #[test]
    fn inject_noise_identity_at_zero_rate() {
        let (source, _) = make_domain_pair(&spec(Family::Gaussians, 3, 2, 300, 0.0), 5).unwrap();
        let q = build_transition_matrix(NoiseKind::Uniform, 3, 0.0).unwrap();
        let noisy = inject_noise(&source, &q, 11).unwrap();
        assert_eq!(
            noisy.noisy_labels().unwrap(),
            noisy.true_labels(LabelAccess::Evaluation).unwrap()
        );
    }

    #[test]
    fn inject_noise_corruption_fraction_tracks_rate() {
        let (source, _) =
            make_domain_pair(&spec(Family::Gaussians, 31, 2, 10_000, 0.0), 21).unwrap();
        let q = build_transition_matrix(NoiseKind::Uniform, 31, 0.2).unwrap();
        let noisy = inject_noise(&source, &q, 22).unwrap();
        let truth = noisy.true_labels(LabelAccess::Evaluation).unwrap();
        let flipped = noisy
            .noisy_labels()
            .unwrap()
            .iter()
            .zip(truth)
            .filter(|(a, b)| a != b)
            .count();
        let frac = flipped as f64 / truth.len() as f64;
        let expect = 0.2 * 30.0 / 31.0;
        assert!((frac - expect).abs() < 0.02, "corrupted fraction {frac}, expected ~{expect}");
    }

    #[test]
    fn inject_noise_is_deterministic_per_seed() {
        let (source, _) = make_domain_pair(&spec(Family::Gaussians, 3, 2, 500, 0.0), 7).unwrap();
        let q = build_transition_matrix(NoiseKind::Flip, 3, 0.3).unwrap();
        let a = inject_noise(&source, &q, 42).unwrap();
        let b = inject_noise(&source, &q, 42).unwrap();
        assert_eq!(a.noisy_labels().unwrap(), b.noisy_labels().unwrap());
        let c = inject_noise(&source, &q, 43).unwrap();
        assert_ne!(a.noisy_labels().unwrap(), c.noisy_labels().unwrap());
    }

    /// Observed corrupted-label counts per true class should fit the matrix
    /// row. Chi-square test at p > 0.001.
    #[test]
    fn inject_noise_chi_square_sanity() {
        // 0.999 quantiles of chi-square with dof 1, 2, 30.
        let crit = |dof: usize| -> f64 {
            match dof {
                1 => 10.828,
                2 => 13.816,
                30 => 59.703,
                _ => unreachable!("unexpected dof {dof}"),
            }
        };
        for (kind, k, rho) in [
            (NoiseKind::Uniform, 3usize, 0.4),
            (NoiseKind::Flip, 2, 0.2),
            (NoiseKind::Uniform, 31, 0.2),
        ] {
            let n = 100_000;
            let (source, _) = make_domain_pair(&spec(Family::Gaussians, k, 2, n, 0.0), 31).unwrap();
            let q = build_transition_matrix(kind, k, rho).unwrap();
            let noisy = inject_noise(&source, &q, 77).unwrap();
            let truth = noisy.true_labels(LabelAccess::Evaluation).unwrap();
            let observed_labels = noisy.noisy_labels().unwrap();

            for c in 0..k {
                let idx: Vec<usize> =
                    (0..n).filter(|&i| truth[i] == c).collect();
                let mut counts = vec![0usize; k];
                for &i in &idx {
                    counts[observed_labels[i]] += 1;
                }
                let total = idx.len() as f64;
                let mut chi2 = 0.0;
                let mut dof = 0usize;
                for j in 0..k {
                    let e = q.prob(c, j) * total;
                    if e == 0.0 {
                        assert_eq!(counts[j], 0, "mass appeared in a zero cell");
                        continue;
                    }
                    dof += 1;
                    let d = counts[j] as f64 - e;
                    chi2 += d * d / e;
                }
                assert!(
                    chi2 < crit(dof - 1),
                    "{kind:?} K={k} rho={rho} class {c}: chi2 {chi2}"
                );
            }
        }
    }

    #[test]
    fn zero_shift_keeps_distributions_aligned() {
        let sp = spec(Family::Gaussians, 2, 2, 2000, 0.0);
        let (source, target) = make_domain_pair(&sp, 9).unwrap();
        for c in 0..2 {
            let (ms, mt) = (class_mean(&source, c), class_mean(&target, c));
            for j in 0..2 {
                // Means agree within 3 standard errors of each domain draw.
                let se = GAUSSIAN_SIGMA / (1000f64).sqrt();
                assert!(
                    (ms[j] - mt[j]).abs() < 6.0 * se,
                    "class {c} dim {j}: {} vs {}",
                    ms[j],
                    mt[j]
                );
            }
        }
    }

    fn class_mean(set: &LabeledSet, class: usize) -> Vec<f64> {
        let truth = set.true_labels(LabelAccess::Evaluation).unwrap();
        let mut mean = vec![0.0; set.dim()];
        let mut count = 0.0;
        for i in 0..set.len() {
            if truth[i] == class {
                for j in 0..set.dim() {
                    mean[j] += set.feature_row(i)[j];
                }
                count += 1.0;
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        mean
    }

    #[test]
    fn rotation_rotates_target_class_means() {
        let sp = spec(Family::Gaussians, 2, 2, 2000, 30.0);
        let (source, target) = make_domain_pair(&sp, 13).unwrap();
        let theta = 30f64.to_radians();
        let (s, c) = theta.sin_cos();
        for cls in 0..2 {
            let ms = class_mean(&source, cls);
            let mt = class_mean(&target, cls);
            let want = [c * ms[0] - s * ms[1], s * ms[0] + c * ms[1]];
            let se = GAUSSIAN_SIGMA / (1000f64).sqrt();
            for j in 0..2 {
                assert!(
                    (mt[j] - want[j]).abs() < 3.0 * se * 2.0,
                    "class {cls} dim {j}: got {}, want {}",
                    mt[j],
                    want[j]
                );
            }
        }
    }

    #[test]
    fn domain_pair_is_bitwise_deterministic() {
        let sp = spec(Family::Moons, 2, 2, 400, 15.0);
        let (s1, t1) = make_domain_pair(&sp, 99).unwrap();
        let (s2, t2) = make_domain_pair(&sp, 99).unwrap();
        assert_eq!(s1.features(), s2.features());
        assert_eq!(t1.features(), t2.features());
        assert_eq!(
            s1.true_labels(LabelAccess::Evaluation).unwrap(),
            s2.true_labels(LabelAccess::Evaluation).unwrap()
        );
        let (s3, _) = make_domain_pair(&sp, 100).unwrap();
        assert_ne!(s1.features(), s3.features());
    }

    #[test]
    fn moons_reject_bad_shapes() {
        assert!(make_domain_pair(&spec(Family::Moons, 3, 2, 100, 0.0), 1).is_err());
        assert!(make_domain_pair(&spec(Family::Moons, 2, 3, 100, 0.0), 1).is_err());
    }

    #[test]
    fn eval_only_truth_is_fenced_and_counted() {
        let sp = spec(Family::Gaussians, 2, 2, 50, 0.0);
        let (source, target) = make_domain_pair(&sp, 3).unwrap();
        assert!(!source.truth_eval_only());
        assert!(target.truth_eval_only());

        assert!(source.true_labels(LabelAccess::Training).is_ok());
        let err = target.true_labels(LabelAccess::Training).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
        assert_eq!(target.truth_training_read_attempts(), 1);

        assert!(target.true_labels(LabelAccess::Evaluation).is_ok());
        assert_eq!(target.truth_eval_reads(), 1);
    }

    #[test]
    fn batches_partition_and_vary_by_epoch() {
        let (set, _) = make_domain_pair(&spec(Family::Gaussians, 2, 2, 5, 0.0), 17).unwrap();
        let bs = batches(&set, 2, 7, 0).unwrap();
        assert_eq!(bs.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut seen: Vec<usize> = bs.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);

        let (big, _) = make_domain_pair(&spec(Family::Gaussians, 2, 2, 64, 0.0), 18).unwrap();
        let e0: Vec<usize> = batches(&big, 16, 7, 0).unwrap().into_iter().flatten().collect();
        let e1: Vec<usize> = batches(&big, 16, 7, 1).unwrap().into_iter().flatten().collect();
        assert_ne!(e0, e1, "different epochs must reshuffle");
        let again: Vec<usize> = batches(&big, 16, 7, 0).unwrap().into_iter().flatten().collect();
        assert_eq!(e0, again, "same (seed, epoch) must reproduce the permutation");
    }

    #[test]
    fn oversized_batch_yields_single_short_batch() {
        let (set, _) = make_domain_pair(&spec(Family::Gaussians, 2, 2, 3, 0.0), 19).unwrap();
        let bs = batches(&set, 10, 1, 0).unwrap();
        assert_eq!(bs.len(), 1);
        assert_eq!(bs[0].len(), 3);
    }

    #[test]
    fn export_csv_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.csv");
        let (source, _) = make_domain_pair(&spec(Family::Gaussians, 2, 2, 10, 0.0), 23).unwrap();
        let q = build_transition_matrix(NoiseKind::Uniform, 2, 0.4).unwrap();
        let noisy = inject_noise(&source, &q, 24).unwrap();
        noisy.export_csv(&path).unwrap();

        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let header = rdr.headers().unwrap().clone();
        assert_eq!(header.iter().collect::<Vec<_>>(), vec!["f0", "f1", "y_true", "y_noisy"]);
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 10);
        for (i, row) in rows.iter().enumerate() {
            let f0: f64 = row[0].parse().unwrap();
            assert_eq!(f0, noisy.feature_row(i)[0], "shortest round-trip float must parse back");
            let yt: usize = row[2].parse().unwrap();
            assert_eq!(yt, noisy.true_labels(LabelAccess::Evaluation).unwrap()[i]);
        }
    }
}
