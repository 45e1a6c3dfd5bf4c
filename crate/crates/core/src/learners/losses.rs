//! Training objectives, recorded on a [`Tape`].
//!
//! Features and classifier rows are l2-normalized before every product, so
//! all losses are invariant to positive rescaling of raw features.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// How features are normalized before forming the cross-correlation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationNorm {
    /// Unit-length rows per sample.
    #[default]
    PerSample,
    /// Zero-mean, unit-variance columns over the batch.
    BatchStandardize,
}

/// `d × d` cross-correlation between PTM features (rows of the result) and
/// adapted features (columns), averaged over the batch.
pub fn correlation_matrix(tape: &mut Tape, ptm: Var, slow: Var, norm: CorrelationNorm) -> Result<Var> {
    let sp = tape.shape(ptm).to_vec();
    contract!(sp.len() == 2 && sp == tape.shape(slow), "correlation needs equal N×d inputs, got {:?} and {:?}", sp, tape.shape(slow));
    let n = sp[0];
    contract!(n >= 1, "correlation needs at least one sample");
    let m = match norm {
        CorrelationNorm::PerSample => {
            let a = tape.l2_normalize(ptm)?;
            let b = tape.l2_normalize(slow)?;
            tape.matmul_t(a, b, true, false)?
        }
        CorrelationNorm::BatchStandardize => {
            // Transpose through an identity product, then normalize each
            // feature's row of batch values.
            let eye = tape.constant(Tensor::identity(n));
            let at = tape.matmul_t(ptm, eye, true, false)?;
            let bt = tape.matmul_t(slow, eye, true, false)?;
            let a = tape.layer_norm(at)?;
            let b = tape.layer_norm(bt)?;
            tape.matmul_t(a, b, false, true)?
        }
    };
    tape.scale(m, 1.0 / n as f64)
}

fn square_dim(tape: &Tape, m: Var) -> Result<usize> {
    let s = tape.shape(m);
    contract!(s.len() == 2 && s[0] == s[1], "expected a square matrix, got {:?}", s);
    Ok(s[0])
}

/// Mean squared deviation of the diagonal from 1.
pub fn loss_diag(tape: &mut Tape, m: Var) -> Result<Var> {
    let d = square_dim(tape, m)?;
    contract!(d >= 1, "empty correlation matrix");
    let eye = tape.constant(Tensor::identity(d));
    let masked = tape.mul(m, eye)?;
    let diag = tape.sum_last(masked)?;
    let neg = tape.scale(diag, -1.0)?;
    let dev = tape.add_scalar(neg, 1.0)?;
    let sq = tape.mul(dev, dev)?;
    tape.mean(sq)
}

/// Mean squared off-diagonal entry.
pub fn loss_rdn(tape: &mut Tape, m: Var) -> Result<Var> {
    let d = square_dim(tape, m)?;
    if d < 2 {
        return Err(Error::UndefinedDivisor(format!("redundancy loss needs d >= 2, got {d}")));
    }
    let mut mask = Tensor::full(vec![d, d], 1.0);
    for i in 0..d {
        mask.set(i, i, 0.0);
    }
    let mask = tape.constant(mask);
    let off = tape.mul(m, mask)?;
    let sq = tape.mul(off, off)?;
    let mean = tape.mean(sq)?;
    // mean over d² entries → sum over d(d−1) off-diagonal entries
    tape.scale(mean, d as f64 / (d as f64 - 1.0))
}

/// Cosine logits `normalize(feats)·normalize(weights)ᵀ / tau` for
/// classifier rows `weights` (`C × d`).
pub fn cosine_logits(tape: &mut Tape, feats: Var, weights: Var, tau: f64) -> Result<Var> {
    contract!(tau > 0.0, "temperature must be positive");
    let f = tape.l2_normalize(feats)?;
    let w = tape.l2_normalize(weights)?;
    let z = tape.matmul_t(f, w, false, true)?;
    tape.scale(z, 1.0 / tau)
}

/// Batch-mean cross-entropy of cosine logits against `labels`.
pub fn loss_cls(tape: &mut Tape, feats: Var, weights: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let n = tape.shape(feats)[0];
    let c = tape.shape(weights)[0];
    contract!(labels.len() == n, "{} labels for {} samples", labels.len(), n);
    contract!(n > 0, "empty batch");
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
    }
    let z = cosine_logits(tape, feats, weights, tau)?;
    let p = tape.softmax(z)?;
    let lp = tape.log(p)?;
    let mut onehot = Tensor::zeros(vec![n, c]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.set(i, y, 1.0);
    }
    let oh = tape.constant(onehot);
    let picked = tape.mul(lp, oh)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -(c as f64))
}

/// Mean of `1 − cos(slow_i, fast_i)` over the batch.
pub fn loss_cos(tape: &mut Tape, slow: Var, fast: Var) -> Result<Var> {
    let c = tape.cosine(slow, fast)?;
    let m = tape.mean(c)?;
    let neg = tape.scale(m, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Inputs to the bidirectional cross-classification loss.
#[derive(Debug, Clone, Copy)]
pub struct CrossInputs {
    pub slow_feats: Var,
    pub fast_feats: Var,
    /// Slow classifier rows, `C × d`.
    pub slow_weights: Var,
    /// Fast classifier rows, `C × d`.
    pub fast_weights: Var,
}

/// Fast-to-slow plus slow-to-fast cross-classification, each made of a batch
/// term and a prototype term over the first `prev_classes` classifier rows.
pub fn loss_cross(tape: &mut Tape, inp: CrossInputs, labels: &[usize], prev_classes: usize, tau: f64) -> Result<Var> {
    if prev_classes == 0 {
        return Err(Error::NotApplicable("cross-classification needs classes from an earlier session".into()));
    }
    let cs = tape.shape(inp.slow_weights)[0];
    let cf = tape.shape(inp.fast_weights)[0];
    contract!(cs == cf, "slow and fast classifiers differ in width: {cs} vs {cf}");
    contract!(prev_classes <= cs, "{prev_classes} previous classes exceed classifier width {cs}");
    let proto_labels: Vec<usize> = (0..prev_classes).collect();

    let f2s_batch = loss_cls(tape, inp.fast_feats, inp.slow_weights, labels, tau)?;
    let fast_protos = tape.slice(inp.fast_weights, 0, prev_classes)?;
    let f2s_proto = loss_cls(tape, fast_protos, inp.slow_weights, &proto_labels, tau)?;

    let s2f_batch = loss_cls(tape, inp.slow_feats, inp.fast_weights, labels, tau)?;
    let slow_protos = tape.slice(inp.slow_weights, 0, prev_classes)?;
    let s2f_proto = loss_cls(tape, slow_protos, inp.fast_weights, &proto_labels, tau)?;

    let f2s = tape.add(f2s_batch, f2s_proto)?;
    let s2f = tape.add(s2f_batch, s2f_proto)?;
    tape.add(f2s, s2f)
}
