//! Slow and fast learners: PET-adapted feature extractors with cosine
//! classifiers, trained on one session at a time.
//!
//! The slow learner is trained once, on the first session, with transfer
//! losses that keep its features correlated with the frozen backbone; its
//! classifier is then replaced by feature centroids and frozen. The fast
//! learner starts as a copy of the slow one and is updated every later
//! session under the slow learner's guidance.

pub mod losses;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{contract, Error, Result};
use crate::numeric::{archive, gaussian_matrix, l2_normalize, Rng, Tape, Tensor, Var};
use crate::optim::{sgd_step, CosineSchedule, SgdState};
use crate::pet::{Adapter, PetAttachment, PetConfig, PetKind, PetVars, Ssf, Vpt};

pub use losses::{CorrelationNorm, CrossInputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Slow,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub lambda_diag: f64,
    pub lambda_rdn: f64,
    pub lambda_cos: f64,
    /// Temperature dividing every cosine logit.
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decoupled_decay: bool,
    /// Anneal per optimizer step instead of per epoch.
    pub per_step_schedule: bool,
    pub correlation: CorrelationNorm,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda_diag: 0.1,
            lambda_rdn: 100.0,
            lambda_cos: 50.0,
            tau: 1.0 / 16.0,
            epochs: 20,
            batch_size: 48,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            decoupled_decay: false,
            per_step_schedule: false,
            correlation: CorrelationNorm::PerSample,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_diag", self.lambda_diag), ("lambda_rdn", self.lambda_rdn), ("lambda_cos", self.lambda_cos)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative real, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr, momentum and weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which loss terms are active; everything on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub diag: bool,
    pub rdn: bool,
    pub cos: bool,
    pub cross: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches { diag: true, rdn: true, cos: true, cross: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub role: Role,
    pub pet: PetAttachment,
    /// Classifier rows, `C × d`; row `c` is the weight vector of class `c`.
    pub classifier: Tensor,
    frozen: bool,
    /// Per-class sums of unit-normalized features and their counts, kept so
    /// re-seen classes can refresh their imprinted row by a running mean.
    centroid_sums: Vec<Vec<f64>>,
    centroid_counts: Vec<usize>,
}

impl Learner {
    pub fn classes(&self) -> usize {
        self.classifier.rows()
    }

    pub fn width(&self) -> usize {
        self.classifier.cols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn features(&self, backbone: &Backbone, inputs: &[Vec<f64>]) -> Result<Tensor> {
        backbone.features(&self.pet, inputs)
    }

    /// Byte image of the PET parameters and classifier.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.pet.tensors().iter().flat_map(|t| t.to_le_bytes()).collect();
        out.extend(self.classifier.to_le_bytes());
        out
    }

    /// A fast learner initialized as an exact, trainable copy of `slow`.
    pub fn fast_from(slow: &Learner) -> Learner {
        let mut fast = slow.clone();
        fast.role = Role::Fast;
        fast.frozen = false;
        fast
    }

    /// Cosine-classifier logits (divided by `tau`) for each feature row.
    pub fn cosine_logits(&self, feats: &Tensor, tau: f64) -> Result<Tensor> {
        let w = self.classifier.row_vecs().iter().map(|r| l2_normalize(r)).collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(feats.rows() * w.len());
        for i in 0..feats.rows() {
            let f = l2_normalize(feats.row(i))?;
            out.extend(w.iter().map(|wc| wc.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() / tau));
        }
        Tensor::matrix(feats.rows(), w.len(), out)
    }

    /// Appends imprinted rows for classes `C..` found in `labels`; those
    /// classes must form a contiguous block. Classes already present are
    /// refreshed by a running mean only on the slow learner, whose rows are
    /// pure centroids; trained fast rows are left alone.
    pub fn expand(&mut self, feats: &Tensor, labels: &[usize]) -> Result<()> {
        contract!(feats.rows() == labels.len(), "{} feature rows for {} labels", feats.rows(), labels.len());
        contract!(feats.cols() == self.width(), "feature width {} does not match classifier width {}", feats.cols(), self.width());
        let old = self.classes();
        let top = labels.iter().max().map_or(0, |m| m + 1);
        let d = self.width();
        let mut sums = vec![vec![0.0; d]; top.max(old)];
        let mut counts = vec![0usize; top.max(old)];
        for (i, &y) in labels.iter().enumerate() {
            let u = l2_normalize(feats.row(i))?;
            for (s, v) in sums[y].iter_mut().zip(&u) {
                *s += v;
            }
            counts[y] += 1;
        }
        for c in old..top {
            if counts[c] == 0 {
                return Err(Error::MissingClass(c));
            }
        }
        let mut refreshed = Vec::new();
        if self.role == Role::Slow {
            for c in 0..old.min(top) {
                if counts[c] > 0 {
                    for (a, b) in self.centroid_sums[c].iter_mut().zip(&sums[c]) {
                        *a += b;
                    }
                    self.centroid_counts[c] += counts[c];
                    refreshed.push(c);
                }
            }
        }
        let mut rows = self.classifier.values().to_vec();
        for c in refreshed {
            let row = l2_normalize(&self.centroid_sums[c])?;
            rows[c * d..(c + 1) * d].copy_from_slice(&row);
        }
        for c in old..top {
            rows.extend(l2_normalize(&sums[c])?);
            self.centroid_sums.push(sums[c].clone());
            self.centroid_counts.push(counts[c]);
        }
        let trainable = self.classifier.is_trainable();
        self.classifier = Tensor::matrix(top.max(old), d, rows)?;
        if trainable {
            self.classifier = std::mem::replace(&mut self.classifier, Tensor::scalar(0.0)).trainable();
        }
        Ok(())
    }

    fn freeze(&mut self) {
        self.pet.freeze();
        self.classifier.freeze();
        self.frozen = true;
    }

    /// Archive layout: a header `[role, pet kind, adapters, ssf points,
    /// prompts, frozen]`, the PET tensors, the classifier, the centroid sums
    /// and the centroid counts.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let role = match self.role {
            Role::Slow => 0.0,
            Role::Fast => 1.0,
        };
        let kind = match self.pet.kind {
            PetKind::None => 0.0,
            PetKind::Adapter => 1.0,
            PetKind::Ssf => 2.0,
            PetKind::Vpt => 3.0,
        };
        let prompts = self.pet.vpt.as_ref().map_or(-1.0, |v| v.count() as f64);
        let header = Tensor::vector(vec![role, kind, self.pet.adapters.len() as f64, self.pet.ssf.len() as f64, prompts, f64::from(u8::from(self.frozen))]);
        let sums = Tensor::new(vec![self.centroid_sums.len(), self.width()], self.centroid_sums.concat())?;
        let counts = Tensor::vector(self.centroid_counts.iter().map(|&n| n as f64).collect());
        let mut ts = vec![&header];
        ts.extend(self.pet.tensors());
        ts.extend([&self.classifier, &sums, &counts]);
        archive::write_tensors(w, LEARNER_KIND, &ts)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (kind, ts) = archive::read_tensors(r)?;
        if kind != LEARNER_KIND || ts.len() < 4 {
            return Err(Error::Format("not a learner snapshot".into()));
        }
        let h = ts[0].values().to_vec();
        if h.len() != 6 {
            return Err(Error::Format("learner header needs 6 fields".into()));
        }
        let role = if h[0] == 0.0 { Role::Slow } else { Role::Fast };
        let pet_kind = match h[1] as u8 {
            0 => PetKind::None,
            1 => PetKind::Adapter,
            2 => PetKind::Ssf,
            3 => PetKind::Vpt,
            x => return Err(Error::Format(format!("unknown PET kind {x}"))),
        };
        let (adapters, ssf, has_vpt) = (h[2] as usize, h[3] as usize, h[4] >= 0.0);
        let frozen = h[5] != 0.0;
        let pet_count = 2 * adapters + 2 * ssf + usize::from(has_vpt);
        if ts.len() != 1 + pet_count + 3 {
            return Err(Error::Format(format!("expected {} tensors, found {}", 4 + pet_count, ts.len())));
        }
        let mut it = ts.into_iter().skip(1);
        let mut next = |trainable: bool| {
            let t = it.next().expect("count checked");
            if trainable {
                t.trainable()
            } else {
                t
            }
        };
        let live = !frozen;
        let mut pet = PetAttachment { kind: pet_kind, ..PetAttachment::none() };
        for _ in 0..adapters {
            pet.adapters.push(Adapter { down: next(live), up: next(live) });
        }
        for _ in 0..ssf {
            pet.ssf.push(Ssf { scale: next(live), shift: next(live) });
        }
        if has_vpt {
            pet.vpt = Some(Vpt { prompts: next(live) });
        }
        let classifier = next(false);
        let sums = next(false);
        let counts = next(false);
        if sums.len() != classifier.len() || counts.len() != classifier.rows() {
            return Err(Error::Format("centroid statistics do not match the classifier".into()));
        }
        Ok(Learner {
            role,
            pet,
            classifier,
            frozen,
            centroid_sums: sums.row_vecs(),
            centroid_counts: counts.values().iter().map(|&n| n as usize).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Learner::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

const LEARNER_KIND: u32 = 0x1EA2;

/// Row `c` is the unit-normalized mean of class `c`'s unit-normalized
/// features.
pub fn imprint_weights(per_class: &[Vec<Vec<f64>>]) -> Result<Tensor> {
    contract!(!per_class.is_empty(), "no classes to imprint");
    let mut rows = Vec::with_capacity(per_class.len());
    for (c, samples) in per_class.iter().enumerate() {
        let Some(first) = samples.first() else {
            return Err(Error::MissingClass(c));
        };
        let mut sum = vec![0.0; first.len()];
        for s in samples {
            contract!(s.len() == sum.len(), "class {c} mixes feature widths");
            for (a, b) in sum.iter_mut().zip(l2_normalize(s)?) {
                *a += b;
            }
        }
        let n = samples.len() as f64;
        let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
        rows.push(l2_normalize(&mean)?);
    }
    Tensor::from_rows(&rows)
}

/// Groups feature rows by label, for `classes` classes.
fn group_by_class(feats: &Tensor, labels: &[usize], classes: usize) -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        out[y].push(feats.row(i).to_vec());
    }
    out
}

fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let c = t.cols();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, out)
}

/// Everything a batch loss needs from the tape.
struct BatchCtx<'a> {
    idx: &'a [usize],
    pet: &'a PetVars,
    weights: Var,
}

/// Minibatch SGD over the learner's PET parameters and classifier.
/// Returns the mean loss of the last epoch.
fn optimize<F>(learner: &mut Learner, n: usize, hp: &HyperParams, rng: &mut Rng, mut batch_loss: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &BatchCtx) -> Result<Var>,
{
    contract!(n > 0, "no training samples");
    learner.pet.unfreeze();
    learner.classifier = std::mem::replace(&mut learner.classifier, Tensor::scalar(0.0)).trainable();
    let batches = n.div_ceil(hp.batch_size);
    let total = if hp.per_step_schedule { hp.epochs * batches } else { hp.epochs };
    let schedule = CosineSchedule::new(hp.lr, total);
    let mut opt = SgdState::new(hp.momentum, hp.weight_decay).decoupled(hp.decoupled_decay);
    let mut last = 0.0;
    let mut step = 0;
    for epoch in 0..hp.epochs {
        let order = rng.permutation(n);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(hp.batch_size) {
            let lr = schedule.lr(if hp.per_step_schedule { step } else { epoch })?;
            let mut tape = Tape::new();
            let pet = learner.pet.bind(&mut tape);
            let weights = tape.param(&learner.classifier);
            let loss = batch_loss(&mut tape, &BatchCtx { idx, pet: &pet, weights })?;
            epoch_loss += tape.scalar(loss) * idx.len() as f64;
            let grads = tape.backward(loss)?;
            learner.pet.store_grads(&pet, &grads);
            learner.classifier.grad = Some(grads.get_or_zeros(weights, learner.classifier.len()));
            let mut params = learner.pet.tensors_mut();
            params.push(&mut learner.classifier);
            sgd_step(&mut params, &mut opt, lr)?;
            step += 1;
        }
        last = epoch_loss / n as f64;
    }
    Ok(last)
}

/// Adapted features for the batch `idx`, recorded on the tape.
fn batch_features(tape: &mut Tape, backbone: &Backbone, inputs: &[Vec<f64>], ctx: &BatchCtx) -> Result<Var> {
    let rows: Vec<Vec<f64>> = ctx.idx.iter().map(|&i| inputs[i].clone()).collect();
    let x = tape.constant(Tensor::from_rows(&rows)?);
    let bb = backbone.bind(tape);
    backbone.forward_batch(tape, x, &bb, ctx.pet)
}

/// Slow-learner objective on one batch: classification plus the weighted
/// diagonal and redundancy transfer terms.
pub fn loss_slow(tape: &mut Tape, feats: Var, ptm_feats: Var, weights: Var, labels: &[usize], hp: &HyperParams, on: LossSwitches) -> Result<Var> {
    let mut loss = losses::loss_cls(tape, feats, weights, labels, hp.tau)?;
    let diag = on.diag && hp.lambda_diag != 0.0;
    let rdn = on.rdn && hp.lambda_rdn != 0.0;
    if diag || rdn {
        let m = losses::correlation_matrix(tape, ptm_feats, feats, hp.correlation)?;
        if diag {
            let l = losses::loss_diag(tape, m)?;
            let l = tape.scale(l, hp.lambda_diag)?;
            loss = tape.add(loss, l)?;
        }
        if rdn {
            let l = losses::loss_rdn(tape, m)?;
            let l = tape.scale(l, hp.lambda_rdn)?;
            loss = tape.add(loss, l)?;
        }
    }
    Ok(loss)
}

/// Fast-learner objective on one batch: classification over all seen
/// classes, cross-classification against the slow learner, and feature
/// alignment.
pub fn loss_fast(tape: &mut Tape, inp: CrossInputs, labels: &[usize], prev_classes: usize, hp: &HyperParams, on: LossSwitches) -> Result<Var> {
    let mut loss = losses::loss_cls(tape, inp.fast_feats, inp.fast_weights, labels, hp.tau)?;
    if on.cross {
        let l = losses::loss_cross(tape, inp, labels, prev_classes, hp.tau)?;
        loss = tape.add(loss, l)?;
    }
    if on.cos && hp.lambda_cos != 0.0 {
        let l = losses::loss_cos(tape, inp.slow_feats, inp.fast_feats)?;
        let l = tape.scale(l, hp.lambda_cos)?;
        loss = tape.add(loss, l)?;
    }
    Ok(loss)
}

/// Result of a training call, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    pub final_loss: f64,
}

/// First-session training: PET and classifier on the slow objective, then
/// the classifier is replaced by imprinted centroids and everything frozen.
pub fn train_slow(inputs: &[Vec<f64>], labels: &[usize], backbone: &Backbone, pet_cfg: &PetConfig, hp: &HyperParams, on: LossSwitches, rng: &mut Rng) -> Result<(Learner, TrainReport)> {
    hp.validate()?;
    contract!(inputs.len() == labels.len(), "{} inputs but {} labels", inputs.len(), labels.len());
    contract!(!inputs.is_empty(), "first session is empty");
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let d = backbone.width();
    let pet = PetAttachment::init(pet_cfg, backbone.blocks.len(), d, rng)?;
    let classifier = gaussian_matrix(rng, classes, d, 1.0)?;
    let mut learner = Learner { role: Role::Slow, pet, classifier, frozen: false, centroid_sums: vec![], centroid_counts: vec![] };

    let ptm = backbone.features(&PetAttachment::none(), inputs)?;
    let final_loss = optimize(&mut learner, inputs.len(), hp, rng, |tape, ctx| {
        let f = batch_features(tape, backbone, inputs, ctx)?;
        let p = tape.constant(gather(&ptm, ctx.idx)?);
        let ys: Vec<usize> = ctx.idx.iter().map(|&i| labels[i]).collect();
        loss_slow(tape, f, p, ctx.weights, &ys, hp, on)
    })?;

    learner.freeze();
    let feats = learner.features(backbone, inputs)?;
    let groups = group_by_class(&feats, labels, classes);
    learner.classifier = imprint_weights(&groups)?;
    learner.centroid_counts = groups.iter().map(Vec::len).collect();
    learner.centroid_sums = groups
        .iter()
        .map(|g| {
            let mut s = vec![0.0; d];
            for f in g {
                for (a, b) in s.iter_mut().zip(l2_normalize(f)?) {
                    *a += b;
                }
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok((learner, TrainReport { final_loss }))
}

/// Incremental-session training of the fast learner under slow guidance.
///
/// Both classifiers must already hold rows for every class in `labels`;
/// `prev_classes` is the number of classes seen before this session.
pub fn train_fast(session: usize, inputs: &[Vec<f64>], labels: &[usize], backbone: &Backbone, slow: &Learner, fast: &mut Learner, prev_classes: usize, hp: &HyperParams, on: LossSwitches, rng: &mut Rng) -> Result<TrainReport> {
    if session < 2 {
        return Err(Error::NotApplicable(format!("fast learner trains from session 2, not session {session}")));
    }
    hp.validate()?;
    contract!(slow.is_frozen(), "slow learner must be frozen before guiding");
    contract!(fast.role == Role::Fast, "second learner is not a fast learner");
    contract!(inputs.len() == labels.len(), "{} inputs but {} labels", inputs.len(), labels.len());
    contract!(slow.classes() == fast.classes(), "classifier widths differ: slow {} vs fast {}", slow.classes(), fast.classes());
    if let Some(bad) = labels.iter().find(|&&y| y >= fast.classes()) {
        return Err(Error::Contract(format!("label {bad} has no classifier row; expand first")));
    }
    let slow_feats = slow.features(backbone, inputs)?;
    let slow_w = Tensor::new(slow.classifier.shape().to_vec(), slow.classifier.values().to_vec())?;
    let final_loss = optimize(fast, inputs.len(), hp, rng, |tape, ctx| {
        let f = batch_features(tape, backbone, inputs, ctx)?;
        let s = tape.constant(gather(&slow_feats, ctx.idx)?);
        let sw = tape.constant(slow_w.clone());
        let ys: Vec<usize> = ctx.idx.iter().map(|&i| labels[i]).collect();
        let inp = CrossInputs { slow_feats: s, fast_feats: f, slow_weights: sw, fast_weights: ctx.weights };
        loss_fast(tape, inp, &ys, prev_classes, hp, on)
    })?;
    Ok(TrainReport { final_loss })
}
