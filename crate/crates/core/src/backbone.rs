//! Tiny transformer encoder standing in for a pre-trained feature extractor.
//!
//! An input vector is mapped by a linear embedder to `L` tokens of width `d`,
//! passed through pre-norm encoder blocks (single-head attention plus a
//! two-layer ReLU feed-forward sublayer, both residual), layer-normalized,
//! and mean-pooled over tokens into a `d`-dimensional feature.
//!
//! PET insertion points:
//! * adapters run parallel to each feed-forward sublayer, before its residual add;
//! * SSF rescales the output of every sublayer (two points per block);
//! * VPT prompts are prepended once, ahead of the first block.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::learners::losses;
use crate::numeric::{archive, gaussian_matrix, Gradients, Rng, Tape, Tensor, Var};
use crate::optim::{sgd_step, CosineSchedule, SgdState};
use crate::pet::{self, PetAttachment, PetVars};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_width: usize,
    /// Token count `L`.
    pub tokens: usize,
    /// Feature width `d`.
    pub width: usize,
    /// Encoder block count `E`.
    pub blocks: usize,
    /// Feed-forward hidden width.
    pub hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { input_width: 16, tokens: 8, width: 32, blocks: 2, hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const BLOCK_TENSORS: usize = 12;

impl Block {
    fn init(d: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let s = 1.0 / (d as f64).sqrt();
        Ok(Block {
            ln1_gain: Tensor::full(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            wq: gaussian_matrix(rng, d, d, s)?,
            wk: gaussian_matrix(rng, d, d, s)?,
            wv: gaussian_matrix(rng, d, d, s)?,
            wo: gaussian_matrix(rng, d, d, s)?,
            ln2_gain: Tensor::full(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
            w1: gaussian_matrix(rng, d, hidden, s)?,
            b1: Tensor::zeros(vec![hidden]),
            w2: gaussian_matrix(rng, hidden, d, 1.0 / (hidden as f64).sqrt())?,
            b2: Tensor::zeros(vec![d]),
        })
    }

    fn tensors(&self) -> [&Tensor; BLOCK_TENSORS] {
        [&self.ln1_gain, &self.ln1_bias, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_gain, &self.ln2_bias, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; BLOCK_TENSORS] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_tensors(mut ts: std::vec::Drain<'_, Tensor>) -> Self {
        let mut next = || ts.next().expect("block tensor count checked by caller");
        Block {
            ln1_gain: next(),
            ln1_bias: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// `input_width × (L·d)`
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub blocks: Vec<Block>,
}

/// Tape handles for a bound [`Backbone`], in [`Backbone::tensors`] order.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    vars: Vec<Var>,
}

impl BackboneVars {
    fn block(&self, b: usize) -> &[Var] {
        &self.vars[2 + b * BLOCK_TENSORS..2 + (b + 1) * BLOCK_TENSORS]
    }
}

impl Backbone {
    /// Randomly initialized, frozen backbone.
    pub fn init(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        contract!(config.input_width > 0 && config.tokens > 0 && config.width > 0 && config.hidden > 0, "backbone extents must be positive: {config:?}");
        let embed_w = gaussian_matrix(rng, config.input_width, config.tokens * config.width, 1.0 / (config.input_width as f64).sqrt())?;
        let embed_b = Tensor::zeros(vec![config.tokens * config.width]);
        let blocks = (0..config.blocks).map(|_| Block::init(config.width, config.hidden, rng)).collect::<Result<_>>()?;
        Ok(Backbone { config, embed_w, embed_b, blocks })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed_w, &self.embed_b];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn freeze(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::freeze);
    }

    pub fn unfreeze(&mut self) {
        for t in self.tensors_mut() {
            if t.grad.is_none() {
                t.grad = Some(vec![0.0; t.len()]);
            }
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.tensors().iter().all(|t| !t.is_trainable())
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars { vars: self.tensors().into_iter().map(|t| tape.param(t)).collect() }
    }

    /// Handles over leaves created elsewhere, one per tensor in
    /// [`Backbone::tensors`] order.
    pub fn vars_from(&self, vars: &[Var]) -> Result<BackboneVars> {
        let want = 2 + self.blocks.len() * BLOCK_TENSORS;
        contract!(vars.len() == want, "{} handles for {want} backbone tensors", vars.len());
        Ok(BackboneVars { vars: vars.to_vec() })
    }

    pub fn store_grads(&mut self, vars: &BackboneVars, grads: &Gradients) {
        pet::store_grads(self.tensors_mut(), &vars.vars, grads);
    }

    /// Byte image of every parameter, for freeze checks.
    pub fn fingerprint(&self) -> Vec<u8> {
        self.tensors().iter().flat_map(|t| t.to_le_bytes()).collect()
    }

    /// Batched forward pass: `x` is `B × input_width`, result is `B × d`.
    pub fn forward_batch(&self, tape: &mut Tape, x: Var, bb: &BackboneVars, pet: &PetVars) -> Result<Var> {
        let cfg = &self.config;
        let s = tape.shape(x).to_vec();
        contract!(s.len() == 2 && s[1] == cfg.input_width, "backbone expects B×{} input, got {:?}", cfg.input_width, s);
        let batch = s[0];
        let d = cfg.width;

        let emb = tape.matmul(x, bb.vars[0])?;
        let emb = tape.add(emb, bb.vars[1])?;
        let mut h = tape.reshape(emb, vec![batch, cfg.tokens, d])?;
        if let Some(p) = pet.prompts() {
            h = pet::vpt_extend(tape, h, p)?;
        }
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for b in 0..self.blocks.len() {
            let v = bb.block(b);
            let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2] = v.try_into().expect("block binding");

            let u = tape.layer_norm(h)?;
            let u = tape.mul(u, ln1_g)?;
            let u = tape.add(u, ln1_b)?;
            let q = tape.matmul(u, wq)?;
            let k = tape.matmul(u, wk)?;
            let val = tape.matmul(u, wv)?;
            let scores = tape.matmul_t(q, k, false, true)?;
            let scores = tape.scale(scores, inv_sqrt_d)?;
            let attn = tape.softmax(scores)?;
            let mixed = tape.matmul(attn, val)?;
            let mut a_out = tape.matmul(mixed, wo)?;
            if let Some(ssf) = pet.ssf(b, 0) {
                a_out = pet::ssf_forward(tape, a_out, ssf)?;
            }
            h = tape.add(h, a_out)?;

            let u = tape.layer_norm(h)?;
            let u = tape.mul(u, ln2_g)?;
            let u = tape.add(u, ln2_b)?;
            let f = tape.matmul(u, w1)?;
            let f = tape.add(f, b1)?;
            let f = tape.relu(f)?;
            let f = tape.matmul(f, w2)?;
            let mut f = tape.add(f, b2)?;
            if let Some(ad) = pet.adapter(b) {
                f = pet::adapter_forward(tape, u, f, ad)?;
            }
            if let Some(ssf) = pet.ssf(b, 1) {
                f = pet::ssf_forward(tape, f, ssf)?;
            }
            h = tape.add(h, f)?;
        }
        let h = tape.layer_norm(h)?;
        tape.mean_axis(h, 1)
    }

    /// Features for a batch of raw inputs without gradient tracking.
    pub fn features(&self, pet: &PetAttachment, inputs: &[Vec<f64>]) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let d = self.config.width;
        let mut out = Vec::with_capacity(inputs.len() * d);
        let mut frozen_pet = pet.clone();
        frozen_pet.freeze();
        for chunk in inputs.chunks(CHUNK) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(chunk)?);
            let bb = self.bind_frozen(&mut tape);
            let pv = frozen_pet.bind(&mut tape);
            let f = self.forward_batch(&mut tape, x, &bb, &pv)?;
            out.extend_from_slice(tape.value(f));
        }
        Tensor::matrix(inputs.len(), d, out)
    }

    fn bind_frozen(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars { vars: self.tensors().into_iter().map(|t| tape.constant(Tensor::new(t.shape().to_vec(), t.values().to_vec()).expect("finite"))).collect() }
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let c = &self.config;
        let header = Tensor::vector(vec![c.input_width as f64, c.tokens as f64, c.width as f64, c.blocks as f64, c.hidden as f64]);
        let mut ts = vec![&header];
        ts.extend(self.tensors());
        archive::write_tensors(w, ARCHIVE_KIND, &ts)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (kind, mut ts) = archive::read_tensors(r)?;
        if kind != ARCHIVE_KIND || ts.is_empty() {
            return Err(Error::Format("not a backbone snapshot".into()));
        }
        let h = ts.remove(0);
        let hv = h.values();
        if hv.len() != 5 {
            return Err(Error::Format("backbone header needs 5 extents".into()));
        }
        let config = BackboneConfig { input_width: hv[0] as usize, tokens: hv[1] as usize, width: hv[2] as usize, blocks: hv[3] as usize, hidden: hv[4] as usize };
        if ts.len() != 2 + config.blocks * BLOCK_TENSORS {
            return Err(Error::Format(format!("expected {} tensors, found {}", 2 + config.blocks * BLOCK_TENSORS, ts.len())));
        }
        let reference = Backbone::init(config, &mut Rng::new(0))?;
        for (got, want) in ts.iter().zip(reference.tensors()) {
            if got.shape() != want.shape() {
                return Err(Error::Format(format!("tensor shape {:?} where {:?} expected", got.shape(), want.shape())));
            }
        }
        let mut it = ts.drain(..);
        let embed_w = it.next().unwrap();
        let embed_b = it.next().unwrap();
        let mut rest: Vec<Tensor> = it.collect();
        let blocks = (0..config.blocks).map(|_| Block::from_tensors(rest.drain(..BLOCK_TENSORS))).collect();
        Ok(Backbone { config, embed_w, embed_b, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Backbone::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

const ARCHIVE_KIND: u32 = 0xBB01;

/// Single-sample forward pass.
pub fn forward(x: &[f64], backbone: &Backbone, pet: &PetAttachment) -> Result<Vec<f64>> {
    contract!(x.len() == backbone.config.input_width, "input width {} does not match backbone input {}", x.len(), backbone.config.input_width);
    Ok(backbone.features(pet, &[x.to_vec()])?.into_values())
}

/// The tensors that training may update: exactly the PET parameters.
pub fn trainable_params<'a>(_backbone: &Backbone, pet: &'a PetAttachment) -> Vec<&'a Tensor> {
    pet.tensors()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 30, lr: 0.05, batch_size: 48, momentum: 0.9, weight_decay: 5e-4, tau: 1.0 / 16.0 }
    }
}

/// A pretrained, frozen surrogate plus its final pretext training accuracy.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub backbone: Backbone,
    pub train_accuracy: f64,
}

/// Trains every backbone parameter on a labeled pretext set with a cosine
/// classifier, then freezes the result.
pub fn pretrain_surrogate(config: BackboneConfig, inputs: &[Vec<f64>], labels: &[usize], train: &PretrainConfig, rng: &mut Rng) -> Result<Surrogate> {
    contract!(!inputs.is_empty(), "pretext set is empty");
    contract!(inputs.len() == labels.len(), "{} inputs but {} labels", inputs.len(), labels.len());
    contract!(train.batch_size > 0, "batch size must be positive");
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut backbone = Backbone::init(config, rng)?;
    let mut classifier = gaussian_matrix(rng, classes, config.width, 1.0)?;
    if train.epochs == 0 {
        let acc = pretext_accuracy(&backbone, &classifier, inputs, labels)?;
        return Ok(Surrogate { backbone, train_accuracy: acc });
    }
    backbone.unfreeze();
    classifier = classifier.trainable();
    let schedule = CosineSchedule::new(train.lr, train.epochs);
    let mut opt = SgdState::new(train.momentum, train.weight_decay);
    let pet = PetVars::none();
    for epoch in 0..train.epochs {
        let lr = schedule.lr(epoch)?;
        let order = rng.permutation(inputs.len());
        for batch in order.chunks(train.batch_size) {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(&xs)?);
            let bb = backbone.bind(&mut tape);
            let w = tape.param(&classifier);
            let f = backbone.forward_batch(&mut tape, x, &bb, &pet)?;
            let loss = losses::loss_cls(&mut tape, f, w, &ys, train.tau)?;
            let grads = tape.backward(loss)?;
            backbone.store_grads(&bb, &grads);
            classifier.grad = Some(grads.get_or_zeros(w, classifier.len()));
            let mut params = backbone.tensors_mut();
            params.push(&mut classifier);
            sgd_step(&mut params, &mut opt, lr)?;
        }
    }
    backbone.freeze();
    classifier.freeze();
    let acc = pretext_accuracy(&backbone, &classifier, inputs, labels)?;
    Ok(Surrogate { backbone, train_accuracy: acc })
}

fn pretext_accuracy(backbone: &Backbone, classifier: &Tensor, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let feats = backbone.features(&PetAttachment::none(), inputs)?;
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let f = feats.row(i);
        let scores: Vec<f64> = (0..classifier.rows()).map(|c| crate::numeric::cosine(f, classifier.row(c))).collect::<Result<_>>()?;
        if crate::aggregate::argmax(&scores) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use crate::pet::{PetConfig, PetKind, Ssf, Vpt};

    fn small() -> BackboneConfig {
        BackboneConfig { input_width: 5, tokens: 3, width: 6, blocks: 2, hidden: 8 }
    }

    fn inputs(n: usize, w: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| (0..w).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn empty_encoder_is_mean_of_embedded_tokens() {
        let cfg = BackboneConfig { blocks: 0, ..small() };
        let bb = Backbone::init(cfg, &mut Rng::new(1)).unwrap();
        let x = inputs(1, cfg.input_width, 2).remove(0);
        let got = forward(&x, &bb, &PetAttachment::none()).unwrap();
        // Hand pooling: embed, layer-normalize every token, average.
        let emb = Tensor::matrix(1, cfg.input_width, x.clone()).unwrap().matmul(&bb.embed_w).unwrap();
        let mut expect = vec![0.0; cfg.width];
        for t in 0..cfg.tokens {
            let tok = &emb.values()[t * cfg.width..(t + 1) * cfg.width];
            let mu = tok.iter().sum::<f64>() / cfg.width as f64;
            let var = tok.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / cfg.width as f64;
            for (e, v) in expect.iter_mut().zip(tok) {
                *e += (v - mu) / (var + 1e-5).sqrt() / cfg.tokens as f64;
            }
        }
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_width() {
        let bb = Backbone::init(small(), &mut Rng::new(3)).unwrap();
        let x = inputs(1, 5, 4).remove(0);
        let a = forward(&x, &bb, &PetAttachment::none()).unwrap();
        let b = forward(&x, &bb, &PetAttachment::none()).unwrap();
        assert_eq!(a, b);
        assert!(matches!(forward(&x[..4], &bb, &PetAttachment::none()), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_pet_configurations_preserve_function() {
        let cfg = small();
        let bb = Backbone::init(cfg, &mut Rng::new(5)).unwrap();
        let xs = inputs(7, cfg.input_width, 6);
        let base = bb.features(&PetAttachment::none(), &xs).unwrap();

        let ssf = PetAttachment::init(&PetConfig { kind: PetKind::Ssf, ..Default::default() }, cfg.blocks, cfg.width, &mut Rng::new(0)).unwrap();
        assert!(max_diff(&base, &bb.features(&ssf, &xs).unwrap()) <= 1e-12);

        let mut adapter = PetAttachment::init(&PetConfig { kind: PetKind::Adapter, rank: 2, ..Default::default() }, cfg.blocks, cfg.width, &mut Rng::new(0)).unwrap();
        for a in &mut adapter.adapters {
            a.up = Tensor::zeros(a.up.shape().to_vec()).trainable();
        }
        assert!(max_diff(&base, &bb.features(&adapter, &xs).unwrap()) <= 1e-12);

        let vpt = PetAttachment { kind: PetKind::Vpt, vpt: Some(Vpt::init(0, cfg.width, 0.01, &mut Rng::new(0)).unwrap()), ..PetAttachment::none() };
        assert!(max_diff(&base, &bb.features(&vpt, &xs).unwrap()) <= 1e-12);
    }

    #[test]
    fn vpt_extends_sequence_but_not_feature() {
        let cfg = small();
        let bb = Backbone::init(cfg, &mut Rng::new(7)).unwrap();
        let pet = PetAttachment::init(&PetConfig { kind: PetKind::Vpt, prompts: 2, ..Default::default() }, cfg.blocks, cfg.width, &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&inputs(3, cfg.input_width, 8)).unwrap());
        let bv = bb.bind(&mut tape);
        let pv = pet.bind(&mut tape);
        let f = bb.forward_batch(&mut tape, x, &bv, &pv).unwrap();
        assert_eq!(tape.shape(f), &[3, cfg.width]);
        // The attention score tensor is the widest intermediate: B × (L+K) × (L+K).
        let seq = cfg.tokens + 2;
        let found = (0..tape.len()).any(|i| {
            let s = tape.shape(crate::numeric::Var::from_index_for_tests(i));
            s == [3, seq, seq]
        });
        assert!(found);
    }

    #[test]
    fn trainable_params_are_exactly_pet() {
        let cfg = small();
        let bb = Backbone::init(cfg, &mut Rng::new(0)).unwrap();
        assert!(trainable_params(&bb, &PetAttachment::none()).is_empty());
        let ssf = PetAttachment::init(&PetConfig { kind: PetKind::Ssf, ..Default::default() }, cfg.blocks, cfg.width, &mut Rng::new(0)).unwrap();
        let tp = trainable_params(&bb, &ssf);
        assert_eq!(tp.len(), 4 * cfg.blocks);
        assert!(tp.iter().all(|t| t.is_trainable()));
        assert!(bb.is_frozen());
        let ad = PetAttachment::init(&PetConfig { kind: PetKind::Adapter, rank: 3, ..Default::default() }, cfg.blocks, cfg.width, &mut Rng::new(0)).unwrap();
        let shapes: Vec<Vec<usize>> = trainable_params(&bb, &ad).iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![6, 3], vec![3, 6], vec![6, 3], vec![3, 6]]);
    }

    #[test]
    fn gradients_reach_only_pet() {
        let cfg = small();
        let bb = Backbone::init(cfg, &mut Rng::new(9)).unwrap();
        let xs = Tensor::from_rows(&inputs(3, cfg.input_width, 10)).unwrap();
        for kind in [PetKind::Adapter, PetKind::Ssf, PetKind::Vpt] {
            let mut pet = PetAttachment::init(&PetConfig { kind, rank: 2, prompts: 2, init_sigma: 0.3 }, cfg.blocks, cfg.width, &mut Rng::new(11)).unwrap();
            if kind == PetKind::Ssf {
                // Move off the identity point so every path is exercised.
                let mut r = Rng::new(12);
                for s in &mut pet.ssf {
                    *s = Ssf { scale: crate::numeric::rng::uniform_tensor(&mut r, vec![cfg.width], 0.5, 1.5).trainable(), shift: crate::numeric::rng::uniform_tensor(&mut r, vec![cfg.width], -0.5, 0.5).trainable() };
                }
            }
            let params: Vec<Tensor> = pet.tensors().into_iter().cloned().collect();
            let err = grad_check(
                |tape, vars| {
                    let x = tape.constant(xs.clone());
                    let bv = bb.bind(tape);
                    let pv = pet.vars_from(vars)?;
                    let f = bb.forward_batch(tape, x, &bv, &pv)?;
                    let sq = tape.mul(f, f)?;
                    let w = tape.constant(crate::numeric::rng::uniform_tensor(&mut Rng::new(13), vec![3, cfg.width], -1.0, 1.0));
                    let s = tape.mul(sq, w)?;
                    tape.mean(s)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{kind:?}: {err}");

            // Backbone leaves are frozen and receive nothing.
            let mut tape = Tape::new();
            let x = tape.constant(xs.clone());
            let bv = bb.bind(&mut tape);
            let pv = pet.bind(&mut tape);
            let f = bb.forward_batch(&mut tape, x, &bv, &pv).unwrap();
            let loss = tape.mean(f).unwrap();
            let g = tape.backward(loss).unwrap();
            assert!(bv.vars.iter().all(|v| g.get(*v).is_none()));
            assert!(pv.vars().iter().any(|v| g.get(*v).is_some_and(|gv| gv.iter().any(|x| *x != 0.0))));
        }
    }

    #[test]
    fn full_backbone_passes_grad_check() {
        let cfg = small();
        let bb = Backbone::init(cfg, &mut Rng::new(14)).unwrap();
        let xs = Tensor::from_rows(&inputs(2, cfg.input_width, 15)).unwrap();
        let params: Vec<Tensor> = bb.tensors().into_iter().cloned().collect();
        let err = grad_check(
            |tape, vars| {
                let x = tape.constant(xs.clone());
                let bv = BackboneVars { vars: vars.to_vec() };
                let f = bb.forward_batch(tape, x, &bv, &PetVars::none())?;
                let sq = tape.mul(f, f)?;
                let w = tape.constant(crate::numeric::rng::uniform_tensor(&mut Rng::new(16), vec![2, cfg.width], -1.0, 1.0));
                let s = tape.mul(sq, w)?;
                tape.mean(s)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn snapshot_roundtrip_and_header_checks() {
        let bb = Backbone::init(small(), &mut Rng::new(17)).unwrap();
        let mut buf = Vec::new();
        bb.write_to(&mut buf).unwrap();
        let back = Backbone::read_from(&buf[..]).unwrap();
        assert_eq!(back.fingerprint(), bb.fingerprint());
        assert_eq!(back.config, bb.config);
        let mut other = Vec::new();
        archive::write_tensors(&mut other, 1, &[&Tensor::scalar(1.0)]).unwrap();
        assert!(Backbone::read_from(&other[..]).is_err());
    }

    #[test]
    fn pretrain_zero_epochs_is_initialization() {
        let cfg = small();
        let xs = inputs(8, cfg.input_width, 18);
        let ys: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let s = pretrain_surrogate(cfg, &xs, &ys, &PretrainConfig { epochs: 0, ..Default::default() }, &mut Rng::new(19)).unwrap();
        let init = Backbone::init(cfg, &mut Rng::new(19)).unwrap();
        assert_eq!(s.backbone.fingerprint(), init.fingerprint());
        assert!(s.backbone.is_frozen());
        assert!(pretrain_surrogate(cfg, &[], &[], &PretrainConfig::default(), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let cfg = small();
        let xs = inputs(20, cfg.input_width, 20);
        let ys: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let tc = PretrainConfig { epochs: 2, batch_size: 8, ..Default::default() };
        let a = pretrain_surrogate(cfg, &xs, &ys, &tc, &mut Rng::new(21)).unwrap();
        let b = pretrain_surrogate(cfg, &xs, &ys, &tc, &mut Rng::new(21)).unwrap();
        assert_eq!(a.backbone.fingerprint(), b.backbone.fingerprint());
        assert_ne!(a.backbone.fingerprint(), Backbone::init(cfg, &mut Rng::new(21)).unwrap().fingerprint());
    }
}
