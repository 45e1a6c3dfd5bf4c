//! Self-checks behind the `gradcheck` and `oracle` subcommands.
//!
//! The gradient suite compares tape gradients against central differences
//! for every primitive, loss, PET forward and backbone pass. The oracle suite
//! recomputes worked examples and head outputs by independent, brute-force
//! means and compares them with the library.

use std::fmt;
use std::time::Instant;

use crate::aggregate::{aggregation_weights, argmax, entropy, fuse, predict, softmax, AggregationConfig, AggregationMode};
use crate::backbone::{pretrain_surrogate, Backbone, BackboneConfig, PretrainConfig};
use crate::error::Result;
use crate::harness::data::gen_blobs;
use crate::head::{accuracy, select_beta, HeadConfig, HeadMode, ProjectionHead};
use crate::learners::losses::{correlation_matrix, loss_cls, loss_cos, loss_cross, loss_diag, loss_rdn, CorrelationNorm, CrossInputs};
use crate::learners::{imprint_weights, loss_fast, loss_slow, train_slow, HyperParams, Learner, LossSwitches};
use crate::numeric::gradcheck::DEFAULT_EPS;
use crate::numeric::rng::uniform_tensor;
use crate::numeric::{gaussian_matrix, grad_check, l2_normalize, spd_solve, Rng, Tape, Tensor, Var};
use crate::optim::{cosine_lr, sgd_step, CosineSchedule, SgdState};
use crate::pet::{self, AdapterVars, PetAttachment, PetConfig, PetKind, Ssf, SsfVars};

/// Largest relative gradient error a check may report.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// One named check and its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckLine {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        CheckLine { name: name.to_string(), pass, detail: detail.into() }
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

type Instance<'a> = Box<dyn FnMut(&mut Rng) -> Result<f64> + 'a>;

/// Runs `one` on `instances` independently seeded draws and reports the
/// worst error. A probe that fails outright fails the check.
fn grad_line(name: &str, instances: usize, mut one: Instance<'_>) -> CheckLine {
    let root = Rng::new(0x5AFE);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        match one(&mut root.fork(i as u64)) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return CheckLine::new(name, false, format!("instance {i}: {e}")),
        }
    }
    let pass = instances > 0 && worst <= GRAD_TOLERANCE;
    CheckLine::new(name, pass, format!("max rel err {worst:.2e} over {instances} instances"))
}

/// Fixed, sign-varying weights used to reduce an output to a scalar.
fn probe_weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|j| (1.7 * j as f64 + 0.3).sin()).collect()).expect("finite")
}

/// `mean(y ⊙ w)` for the fixed probe weights `w`.
fn reduce(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = tape.constant(probe_weights(tape.shape(y)));
    let p = tape.mul(y, w)?;
    tape.mean(p)
}

/// Uniform `[-1, 1]` leaves of the given shapes, checked through `build`.
fn shaped<'a, F>(shapes: &'a [&'a [usize]], mut build: F) -> Instance<'a>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var> + 'a,
{
    Box::new(move |rng| {
        let params: Vec<Tensor> = shapes.iter().map(|s| uniform_tensor(rng, s.to_vec(), -1.0, 1.0)).collect();
        grad_check(&mut build, &params, DEFAULT_EPS)
    })
}

fn labels_for(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    // Every class appears at least once when n ≥ classes.
    (0..n).map(|i| if i < classes { i } else { rng.below(classes) }).collect()
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig { input_width: 5, tokens: 3, width: 6, blocks: 2, hidden: 8 }
}

fn pet_for(kind: PetKind, cfg: &BackboneConfig, rng: &mut Rng) -> Result<PetAttachment> {
    let mut pet = PetAttachment::init(&PetConfig { kind, rank: 2, prompts: 2, init_sigma: 0.3 }, cfg.blocks, cfg.width, rng)?;
    // Move SSF off the identity point so every path carries signal.
    for s in &mut pet.ssf {
        *s = Ssf { scale: uniform_tensor(rng, vec![cfg.width], 0.5, 1.5).trainable(), shift: uniform_tensor(rng, vec![cfg.width], -0.5, 0.5).trainable() };
    }
    Ok(pet)
}

fn primitive_checks(instances: usize) -> Vec<CheckLine> {
    let mut out = Vec::new();
    let mut add = |name: &str, inst: Instance<'_>| out.push(grad_line(name, instances, inst));
    add("matmul", shaped(&[&[3, 4], &[4, 2]], |t, v| { let y = t.matmul(v[0], v[1])?; let y = t.mul(y, y)?; reduce(t, y) }));
    add("matmul transposed", shaped(&[&[4, 3], &[2, 4]], |t, v| { let y = t.matmul_t(v[0], v[1], true, true)?; let y = t.mul(y, y)?; reduce(t, y) }));
    add("matmul batched", shaped(&[&[2, 3, 4], &[2, 5, 4]], |t, v| { let y = t.matmul_t(v[0], v[1], false, true)?; let y = t.mul(y, y)?; reduce(t, y) }));
    add("matmul shared", shaped(&[&[2, 3, 4], &[4, 2]], |t, v| { let y = t.matmul(v[0], v[1])?; let y = t.mul(y, y)?; reduce(t, y) }));
    add("add broadcast", shaped(&[&[2, 3], &[3]], |t, v| { let y = t.add(v[0], v[1])?; let y = t.mul(y, y)?; reduce(t, y) }));
    add("mul broadcast", shaped(&[&[2, 3], &[3]], |t, v| { let y = t.mul(v[0], v[1])?; let y = t.mul(y, v[0])?; reduce(t, y) }));
    add("scale and shift", shaped(&[&[4]], |t, v| { let y = t.scale(v[0], -2.5)?; let y = t.add_scalar(y, 0.7)?; let y = t.mul(y, y)?; reduce(t, y) }));
    add("relu", shaped(&[&[6], &[6]], |t, v| { let y = t.relu(v[0])?; let y = t.mul(y, v[1])?; reduce(t, y) }));
    add("softmax", shaped(&[&[2, 4], &[2, 4]], |t, v| { let y = t.softmax(v[0])?; let y = t.mul(y, v[1])?; reduce(t, y) }));
    add("log softmax", shaped(&[&[3, 4]], |t, v| { let y = t.softmax(v[0])?; let y = t.log(y)?; reduce(t, y) }));
    add("mean axis", shaped(&[&[2, 3, 4]], |t, v| { let y = t.mean_axis(v[0], 1)?; let y = t.mul(y, y)?; reduce(t, y) }));
    add("sum last", shaped(&[&[3, 4]], |t, v| { let y = t.sum_last(v[0])?; let y = t.mul(y, y)?; reduce(t, y) }));
    add("concat and slice", shaped(&[&[2, 3], &[2, 2, 3]], |t, v| { let y = t.concat(v[0], v[1])?; let y = t.mul(y, y)?; let y = t.slice(y, 1, 2)?; reduce(t, y) }));
    add("layer norm", shaped(&[&[3, 5]], |t, v| { let y = t.layer_norm(v[0])?; let y = t.mul(y, y)?; reduce(t, y) }));
    add("l2 normalize", shaped(&[&[3, 5]], |t, v| { let y = t.l2_normalize(v[0])?; reduce(t, y) }));
    add("cosine", shaped(&[&[3, 5], &[3, 5]], |t, v| { let y = t.cosine(v[0], v[1])?; let y = t.mul(y, y)?; reduce(t, y) }));
    add("reshape", shaped(&[&[6], &[2, 2]], |t, v| { let y = t.reshape(v[0], vec![3, 2])?; let y = t.matmul(y, v[1])?; let y = t.mul(y, y)?; reduce(t, y) }));
    out
}

const N: usize = 6;
const D: usize = 5;
const C: usize = 3;

fn loss_checks(instances: usize) -> Vec<CheckLine> {
    let hp = HyperParams::default();
    let all = LossSwitches::default();
    let mut out = Vec::new();
    for (tag, norm) in [("per-sample", CorrelationNorm::PerSample), ("batch-standardized", CorrelationNorm::BatchStandardize)] {
        out.push(grad_line(
            &format!("correlation matrix ({tag})"),
            instances,
            shaped(&[&[N, D], &[N, D]], move |t, v| { let m = correlation_matrix(t, v[0], v[1], norm)?; reduce(t, m) }),
        ));
        out.push(grad_line(&format!("diagonal loss ({tag})"), instances, shaped(&[&[N, D], &[N, D]], move |t, v| { let m = correlation_matrix(t, v[0], v[1], norm)?; loss_diag(t, m) })));
        out.push(grad_line(&format!("redundancy loss ({tag})"), instances, shaped(&[&[N, D], &[N, D]], move |t, v| { let m = correlation_matrix(t, v[0], v[1], norm)?; loss_rdn(t, m) })));
        let hp_n = HyperParams { correlation: norm, ..hp };
        out.push(grad_line(
            &format!("slow objective ({tag})"),
            instances,
            Box::new(move |rng| {
                let labels = labels_for(N, C, rng);
                let ps: Vec<Tensor> = [vec![N, D], vec![N, D], vec![C, D]].into_iter().map(|s| uniform_tensor(rng, s, -1.0, 1.0)).collect();
                grad_check(|t, v| loss_slow(t, v[0], v[1], v[2], &labels, &hp_n, all), &ps, DEFAULT_EPS)
            }),
        ));
    }
    out.push(grad_line(
        "classification loss",
        instances,
        Box::new(|rng| {
            let labels = labels_for(N, C, rng);
            let ps: Vec<Tensor> = [vec![N, D], vec![C, D]].into_iter().map(|s| uniform_tensor(rng, s, -1.0, 1.0)).collect();
            grad_check(|t, v| loss_cls(t, v[0], v[1], &labels, hp.tau), &ps, DEFAULT_EPS)
        }),
    ));
    out.push(grad_line("cosine alignment loss", instances, shaped(&[&[N, D], &[N, D]], |t, v| loss_cos(t, v[0], v[1]))));
    out.push(grad_line(
        "cross-classification loss",
        instances,
        Box::new(|rng| {
            let labels = labels_for(N, C, rng);
            let ps: Vec<Tensor> = [vec![N, D], vec![N, D], vec![C, D], vec![C, D]].into_iter().map(|s| uniform_tensor(rng, s, -1.0, 1.0)).collect();
            grad_check(|t, v| loss_cross(t, CrossInputs { slow_feats: v[0], fast_feats: v[1], slow_weights: v[2], fast_weights: v[3] }, &labels, 2, hp.tau), &ps, DEFAULT_EPS)
        }),
    ));
    out.push(grad_line(
        "fast objective",
        instances,
        Box::new(|rng| {
            let labels = labels_for(N, C, rng);
            let ps: Vec<Tensor> = [vec![N, D], vec![N, D], vec![C, D], vec![C, D]].into_iter().map(|s| uniform_tensor(rng, s, -1.0, 1.0)).collect();
            grad_check(|t, v| loss_fast(t, CrossInputs { slow_feats: v[0], fast_feats: v[1], slow_weights: v[2], fast_weights: v[3] }, &labels, 2, &hp, all), &ps, DEFAULT_EPS)
        }),
    ));
    out
}

fn pet_checks(instances: usize) -> Vec<CheckLine> {
    vec![
        grad_line(
            "adapter forward",
            instances,
            shaped(&[&[2, 3, D], &[2, 3, D], &[D, 2], &[2, D]], |t, v| {
                let y = pet::adapter_forward(t, v[0], v[1], AdapterVars { down: v[2], up: v[3] })?;
                let y = t.mul(y, y)?;
                reduce(t, y)
            }),
        ),
        grad_line(
            "ssf forward",
            instances,
            shaped(&[&[2, 3, D], &[D], &[D]], |t, v| {
                let y = pet::ssf_forward(t, v[0], SsfVars { scale: v[1], shift: v[2] })?;
                let y = t.mul(y, y)?;
                reduce(t, y)
            }),
        ),
        grad_line(
            "vpt extend",
            instances,
            shaped(&[&[2, 3, D], &[2, D]], |t, v| {
                let y = pet::vpt_extend(t, v[0], v[1])?;
                let y = t.mul(y, y)?;
                reduce(t, y)
            }),
        ),
    ]
}

fn backbone_checks(instances: usize) -> Vec<CheckLine> {
    let cfg = small_backbone();
    let mut out = Vec::new();
    for kind in [PetKind::None, PetKind::Adapter, PetKind::Ssf, PetKind::Vpt] {
        // Input, every backbone tensor and every PET tensor are leaves.
        out.push(grad_line(
            &format!("backbone pass ({kind:?})"),
            instances,
            Box::new(move |rng| {
                let bb = Backbone::init(cfg, rng)?;
                let pet = pet_for(kind, &cfg, rng)?;
                let mut params = vec![uniform_tensor(rng, vec![3, cfg.input_width], -1.0, 1.0)];
                params.extend(bb.tensors().into_iter().cloned());
                params.extend(pet.tensors().into_iter().cloned());
                let nb = bb.tensors().len();
                grad_check(
                    |t, v| {
                        let bv = bb.vars_from(&v[1..1 + nb])?;
                        let pv = pet.vars_from(&v[1 + nb..])?;
                        let f = bb.forward_batch(t, v[0], &bv, &pv)?;
                        let f = t.mul(f, f)?;
                        reduce(t, f)
                    },
                    &params,
                    DEFAULT_EPS,
                )
            }),
        ));
    }
    // The slow objective through a frozen backbone, w.r.t. PET and classifier.
    for kind in [PetKind::Adapter, PetKind::Ssf, PetKind::Vpt] {
        out.push(grad_line(
            &format!("slow objective through backbone ({kind:?})"),
            instances,
            Box::new(move |rng| {
                let bb = Backbone::init(cfg, rng)?;
                let pet = pet_for(kind, &cfg, rng)?;
                let xs = uniform_tensor(rng, vec![4, cfg.input_width], -1.0, 1.0);
                let labels = labels_for(4, 2, rng);
                let ptm = bb.features(&PetAttachment::none(), &xs.row_vecs())?;
                let mut params: Vec<Tensor> = pet.tensors().into_iter().cloned().collect();
                params.push(uniform_tensor(rng, vec![2, cfg.width], -1.0, 1.0));
                let np = params.len() - 1;
                let hp = HyperParams::default();
                grad_check(
                    |t, v| {
                        let x = t.constant(xs.clone());
                        let bv = bb.bind(t);
                        let pv = pet.vars_from(&v[..np])?;
                        let f = bb.forward_batch(t, x, &bv, &pv)?;
                        let p = t.constant(ptm.clone());
                        loss_slow(t, f, p, v[np], &labels, &hp, LossSwitches::default())
                    },
                    &params,
                    DEFAULT_EPS,
                )
            }),
        ));
    }
    out
}

/// Finite-difference checks over every differentiable component, with
/// `instances` random draws each.
pub fn gradcheck_suite(instances: usize) -> Result<Vec<CheckLine>> {
    let start = Instant::now();
    let mut lines = primitive_checks(instances);
    lines.extend(loss_checks(instances));
    lines.extend(pet_checks(instances));
    lines.extend(backbone_checks(instances));
    let secs = start.elapsed().as_secs_f64();
    lines.push(CheckLine::new("gradient suite runtime", secs < 60.0, format!("{secs:.1} s (limit 60 s)")));
    Ok(lines)
}

/// Dense Gaussian elimination with partial pivoting; `None` when a pivot
/// vanishes.
pub fn gauss_solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, s)| r.iter().chain(s).copied().collect()).collect();
    let w = m.first().map_or(0, Vec::len);
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[p][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, p);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                for k in col..w {
                    m[r][k] -= f * m[col][k];
                }
            }
        }
    }
    Some((0..n).map(|i| m[i][n..].iter().map(|v| v / m[i][i]).collect()).collect())
}

/// Closed-form one-hot ridge regression fit on all samples:
/// `X = (HᵀH + βI)⁻¹ HᵀY`, returned as logits `Xᵀh` for each query.
pub fn ridge_oracle(feats: &[Vec<f64>], labels: &[usize], classes: usize, beta: f64, queries: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let d = feats.first()?.len();
    let mut hth = vec![vec![0.0; d]; d];
    let mut hty = vec![vec![0.0; classes]; d];
    for (h, &y) in feats.iter().zip(labels) {
        for i in 0..d {
            for j in 0..d {
                hth[i][j] += h[i] * h[j];
            }
            hty[i][y] += h[i];
        }
    }
    for (i, row) in hth.iter_mut().enumerate() {
        row[i] += beta;
    }
    let x = gauss_solve(&hth, &hty)?;
    Some(queries.iter().map(|q| (0..classes).map(|c| (0..d).map(|i| x[i][c] * q[i]).sum()).collect()).collect())
}

/// Index of the class mean with the largest cosine to `q`; ties go to the
/// lowest index.
pub fn nearest_centroid_oracle(feats: &[Vec<f64>], labels: &[usize], classes: usize, q: &[f64]) -> usize {
    let d = q.len();
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..classes {
        let members: Vec<&Vec<f64>> = feats.iter().zip(labels).filter(|(_, &y)| y == c).map(|(f, _)| f).collect();
        let mean: Vec<f64> = (0..d).map(|k| members.iter().map(|m| m[k]).sum::<f64>() / members.len() as f64).collect();
        let dot: f64 = mean.iter().zip(q).map(|(a, b)| a * b).sum();
        let cos = dot / (mean.iter().map(|v| v * v).sum::<f64>().sqrt() * q.iter().map(|v| v * v).sum::<f64>().sqrt());
        if cos > best.1 {
            best = (c, cos);
        }
    }
    best.0
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn eval_scalar(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.value(v).to_vec())
}

fn m(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, v).expect("finite")
}

const LN_1P_EXP_M1: f64 = 0.313_261_687_518_222_8;

fn numeric_oracles(out: &mut Vec<CheckLine>) -> Result<()> {
    let x = spd_solve(&m(2, 2, vec![2.0, 1.0, 1.0, 2.0]), &m(2, 1, vec![1.0, 1.0]))?;
    let hand = gauss_solve(&[vec![2.0, 1.0], vec![1.0, 2.0]], &[vec![1.0], vec![1.0]]).expect("nonsingular");
    let ok = x.values().iter().zip([hand[0][0], hand[1][0]]).all(|(a, b)| close(*a, b, 1e-14) && close(*a, 1.0 / 3.0, 1e-14));
    out.push(CheckLine::new("spd solve 2×2", ok, format!("{:?}", x.values())));

    let mut rng = Rng::new(11);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = 2 + rng.below(6);
        let r = uniform_tensor(&mut rng, vec![n, n], -1.0, 1.0);
        let mut a = r.transpose().matmul(&r)?;
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 0.5);
        }
        let b = uniform_tensor(&mut rng, vec![n, 2], -1.0, 1.0);
        let got = spd_solve(&a, &b)?;
        let want = gauss_solve(&a.row_vecs(), &b.row_vecs()).expect("spd");
        for (g, w) in got.values().iter().zip(want.concat()) {
            worst = worst.max((g - w).abs());
        }
    }
    out.push(CheckLine::new("spd solve vs elimination (10 systems)", worst <= 1e-10, format!("max abs diff {worst:.2e}")));

    let g = gaussian_matrix(&mut Rng::new(3), 512, 512, 1.0)?;
    let n = g.len() as f64;
    let mean = g.values().iter().sum::<f64>() / n;
    let std = (g.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    out.push(CheckLine::new("gaussian 512×512 moments", mean.abs() <= 0.01 && (std - 1.0).abs() <= 0.01, format!("mean {mean:.4}, std {std:.4}")));

    let lr = cosine_lr(50, &CosineSchedule::new(0.01, 100))?;
    out.push(CheckLine::new("cosine schedule midpoint", close(lr, 0.005, 1e-15), format!("{lr}")));

    let mut w = Tensor::scalar(0.0).trainable();
    let mut st = SgdState::new(0.9, 0.0);
    for _ in 0..2 {
        w.grad = Some(vec![1.0]);
        sgd_step(&mut [&mut w], &mut st, 1.0)?;
    }
    out.push(CheckLine::new("momentum two steps", close(w.values()[0], -2.9, 1e-14), format!("w = {}", w.values()[0])));
    Ok(())
}

fn pet_oracles(out: &mut Vec<CheckLine>) -> Result<()> {
    let v = eval_scalar(|t| {
        let x = t.constant(m(1, 2, vec![1.0, -1.0]));
        let zero = t.constant(m(1, 2, vec![0.0, 0.0]));
        let down = t.constant(Tensor::identity(2));
        let up = t.constant(Tensor::identity(2));
        pet::adapter_forward(t, x, zero, AdapterVars { down, up })
    })?;
    out.push(CheckLine::new("adapter example", v == [1.0, 0.0], format!("{v:?}")));

    // Prompts reach the pooled output only through attention mixing.
    let cfg = small_backbone();
    let mut rng = Rng::new(21);
    let bb = Backbone::init(cfg, &mut rng)?;
    let pet = PetAttachment::init(&PetConfig { kind: PetKind::Vpt, prompts: 2, init_sigma: 0.3, ..PetConfig::default() }, cfg.blocks, cfg.width, &mut rng)?;
    let xs = uniform_tensor(&mut rng, vec![3, cfg.input_width], -1.0, 1.0);
    let params: Vec<Tensor> = pet.tensors().into_iter().cloned().collect();
    let build = |t: &mut Tape, v: &[Var]| {
        let x = t.constant(xs.clone());
        let bv = bb.bind(t);
        let pv = pet.vars_from(v)?;
        let f = bb.forward_batch(t, x, &bv, &pv)?;
        let f = t.mul(f, f)?;
        reduce(t, f)
    };
    let err = grad_check(build, &params, DEFAULT_EPS)?;
    let mut tape = Tape::new();
    let pv: Vec<Var> = params.iter().map(|p| tape.variable(p.clone())).collect();
    let loss = build(&mut tape, &pv)?;
    let g = tape.backward(loss)?;
    let norm: f64 = g.get_or_zeros(pv[0], params[0].len()).iter().map(|x| x * x).sum::<f64>().sqrt();
    out.push(CheckLine::new("prompt gradient", err <= GRAD_TOLERANCE && norm > 0.0, format!("rel err {err:.2e}, gradient norm {norm:.3e}")));
    Ok(())
}

fn loss_oracles(out: &mut Vec<CheckLine>) -> Result<()> {
    let corr = |a: Tensor, b: Tensor| eval_scalar(|t| { let x = t.constant(a); let y = t.constant(b); correlation_matrix(t, x, y, CorrelationNorm::PerSample) });
    let one = corr(m(1, 2, vec![1.0, 0.0]), m(1, 2, vec![1.0, 0.0]))?;
    out.push(CheckLine::new("correlation of one sample", one == [1.0, 0.0, 0.0, 0.0], format!("{one:?}")));
    let half = corr(Tensor::identity(2), Tensor::identity(2))?;
    out.push(CheckLine::new("correlation of two basis samples", half == [0.5, 0.0, 0.0, 0.5], format!("{half:?}")));

    let on = |vals: Vec<f64>, f: fn(&mut Tape, Var) -> Result<Var>| eval_scalar(|t| { let x = t.constant(m(2, 2, vals)); f(t, x) }).map(|v| v[0]);
    let d = on(vec![0.5, 0.0, 0.0, 0.5], loss_diag)?;
    out.push(CheckLine::new("diagonal loss at M = I/2", close(d, 0.25, 1e-15), format!("{d}")));
    let r = on(vec![9.0, 0.5, 0.5, -3.0], loss_rdn)?;
    out.push(CheckLine::new("redundancy loss, off-diagonal 0.5", close(r, 0.25, 1e-15), format!("{r}")));
    let r = on(vec![1.0; 4], loss_rdn)?;
    out.push(CheckLine::new("redundancy loss, all ones", close(r, 1.0, 1e-15), format!("{r}")));

    let ce = eval_scalar(|t| { let f = t.constant(m(1, 2, vec![1.0, 0.0])); let w = t.constant(Tensor::identity(2)); loss_cls(t, f, w, &[0], 1.0) })?[0];
    let hand = (1.0 + (-1f64).exp()).ln();
    out.push(CheckLine::new("classification loss example", close(ce, hand, 1e-12) && close(hand, LN_1P_EXP_M1, 1e-15), format!("{ce}")));

    let (dd, k) = (6, 4);
    let mut rows = Tensor::zeros(vec![k, dd]);
    for i in 0..k {
        rows.set(i, i, 1.0);
    }
    let v = eval_scalar(|t| {
        let a = t.constant(rows.clone());
        let mm = correlation_matrix(t, a, a, CorrelationNorm::PerSample)?;
        let ld = loss_diag(t, mm)?;
        let lr = loss_rdn(t, mm)?;
        Ok(t.constant(Tensor::vector(vec![t.scalar(ld), t.scalar(lr)])))
    })?;
    let kf = k as f64;
    let want = (kf * (1.0 - 1.0 / kf).powi(2) + (dd - k) as f64) / dd as f64;
    out.push(CheckLine::new("orthonormal batch closed form", close(v[0], want, 1e-14) && v[1] == 0.0, format!("diag {} (want {want}), rdn {}", v[0], v[1])));

    // Prototype term of one direction: slow and fast rows equal the basis.
    let p = eval_scalar(|t| { let w = t.constant(Tensor::identity(2)); loss_cls(t, w, w, &[0, 1], 1.0) })?[0];
    out.push(CheckLine::new("cross prototype term", close(p, hand, 1e-12), format!("{p}")));

    let w = imprint_weights(&[vec![vec![1.0, 0.0], vec![0.0, 1.0]]])?;
    let h = 1.0 / 2f64.sqrt();
    out.push(CheckLine::new("imprinted row of two samples", close(w.get(0, 0), h, 1e-15) && close(w.get(0, 1), h, 1e-15), format!("{:?}", w.values())));

    let mut rng = Rng::new(31);
    let labels = vec![0, 1, 0, 1];
    let ps: Vec<Tensor> = [vec![4, 5], vec![4, 5], vec![2, 5]].into_iter().map(|s| uniform_tensor(&mut rng, s, -1.0, 1.0)).collect();
    let hp = HyperParams::default();
    let err = grad_check(|t, v| loss_slow(t, v[0], v[1], v[2], &labels, &hp, LossSwitches::default()), &ps, DEFAULT_EPS)?;
    out.push(CheckLine::new("slow objective on a 2-class batch", err <= GRAD_TOLERANCE, format!("rel err {err:.2e}")));
    Ok(())
}

/// Within-class spread for blobs that are separable with unit center scale.
const SEPARABLE_SPREAD: f64 = 0.25;

fn learner_oracles(out: &mut Vec<CheckLine>) -> Result<()> {
    let cfg = BackboneConfig::default();
    let mut rng = Rng::new(41);
    let pretext = gen_blobs(8, 50, cfg.input_width, SEPARABLE_SPREAD, &mut rng)?;
    let sur = pretrain_surrogate(cfg, &pretext.inputs, &pretext.labels, &PretrainConfig::default(), &mut rng)?;
    out.push(CheckLine::new("pretext training accuracy", sur.train_accuracy >= 0.95, format!("{:.4}", sur.train_accuracy)));

    let data = gen_blobs(4, 50, cfg.input_width, SEPARABLE_SPREAD, &mut rng)?;
    let hp = HyperParams::default();
    let (slow, _) = train_slow(&data.inputs, &data.labels, &sur.backbone, &PetConfig::default(), &hp, LossSwitches::default(), &mut rng)?;
    let feats = slow.features(&sur.backbone, &data.inputs)?;
    let acc = accuracy(&slow.cosine_logits(&feats, hp.tau)?, &data.labels);
    out.push(CheckLine::new("first-session training accuracy", acc >= 0.95, format!("{acc:.4}")));

    // A second pass over the same classes: each row becomes the normalized
    // mean over both passes' normalized features.
    let again = gen_blobs(4, 30, cfg.input_width, SEPARABLE_SPREAD, &mut Rng::new(42))?;
    let f2 = slow.features(&sur.backbone, &again.inputs)?;
    let mut refreshed: Learner = slow.clone();
    refreshed.expand(&f2, &again.labels)?;
    let mut worst: f64 = 0.0;
    for c in 0..4 {
        let mut sum = vec![0.0; cfg.width];
        for (f, y) in [(&feats, &data.labels), (&f2, &again.labels)] {
            for (i, _) in y.iter().enumerate().filter(|(_, &l)| l == c) {
                for (s, v) in sum.iter_mut().zip(l2_normalize(f.row(i))?) {
                    *s += v;
                }
            }
        }
        let want = l2_normalize(&sum)?;
        for (a, b) in refreshed.classifier.row(c).iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    out.push(CheckLine::new("running-mean refresh of re-seen classes", worst <= 1e-12, format!("max abs diff {worst:.2e}")));
    Ok(())
}

fn head_oracles(out: &mut Vec<CheckLine>) -> Result<()> {
    let start = Instant::now();
    let mut rng = Rng::new(51);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for p in 0..10 {
        let (d, c, n) = (3 + rng.below(5), 2 + rng.below(3), 20 + rng.below(20));
        let feats = uniform_tensor(&mut rng, vec![n, d], -1.0, 1.0);
        let labels = labels_for(n, c, &mut rng);
        let beta = [1e-3, 1e-1, 1.0][p % 3];
        let mut head = ProjectionHead::new(&HeadConfig { mode: HeadMode::Ridge, ..HeadConfig::default() }, d, 0)?;
        // Two sessions, the second introducing no new data for some classes.
        let split = n / 2;
        let first = Tensor::from_rows(&feats.row_vecs()[..split])?;
        let second = Tensor::from_rows(&feats.row_vecs()[split..])?;
        head.accumulate_session(&first, &labels[..split], c)?;
        head.accumulate_session(&second, &labels[split..], c)?;
        let queries = uniform_tensor(&mut rng, vec![5, d], -1.0, 1.0);
        let got = head.logits_with_beta(&queries, beta)?;
        match ridge_oracle(&feats.row_vecs(), &labels, c, beta, &queries.row_vecs()) {
            Some(want) => {
                for (g, w) in got.values().iter().zip(want.concat()) {
                    worst = worst.max((g - w).abs());
                }
            }
            None => ok = false,
        }
    }
    out.push(CheckLine::new("ridge head vs normal equations (10 problems)", ok && worst <= 1e-8, format!("max abs diff {worst:.2e}")));

    let mut mismatches = 0;
    for _ in 0..10 {
        let (d, c, n) = (3 + rng.below(5), 2 + rng.below(4), 20 + rng.below(20));
        let feats = uniform_tensor(&mut rng, vec![n, d], -1.0, 1.0);
        let labels = labels_for(n, c, &mut rng);
        let mut head = ProjectionHead::new(&HeadConfig { mode: HeadMode::Ncm, ..HeadConfig::default() }, d, 0)?;
        head.accumulate_session(&feats, &labels, c)?;
        let queries = uniform_tensor(&mut rng, vec![20, d], -1.0, 1.0);
        let z = head.logits(&queries)?;
        for i in 0..20 {
            if argmax(z.row(i)) != nearest_centroid_oracle(&feats.row_vecs(), &labels, c, queries.row(i)) {
                mismatches += 1;
            }
        }
    }
    out.push(CheckLine::new("ncm head vs nearest centroid (10 problems)", mismatches == 0, format!("{mismatches} mismatches over 200 queries")));

    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (d, n) = (4 + rng.below(4), 10 + rng.below(30));
        let feats = uniform_tensor(&mut rng, vec![n, d], -1.0, 1.0);
        let labels = labels_for(n, 3, &mut rng);
        let mut head = ProjectionHead::new(&HeadConfig { dim: 64, ..HeadConfig::default() }, d, rng.next_u64())?;
        let split = 1 + rng.below(n - 1);
        let rows = feats.row_vecs();
        head.accumulate_session(&Tensor::from_rows(&rows[..split])?, &labels[..split], 3)?;
        head.accumulate_session(&Tensor::from_rows(&rows[split..])?, &labels[split..], 3)?;
        // Batch Gram HᵀH from the stacked projections.
        let h: Vec<Vec<f64>> = rows.iter().map(|r| head.project(r)).collect::<Result<_>>()?;
        let hm = Tensor::from_rows(&h)?;
        let batch = hm.transpose().matmul(&hm)?;
        for (a, b) in head.gram().values().iter().zip(batch.values()) {
            worst = worst.max((a - b).abs());
        }
    }
    out.push(CheckLine::new("incremental vs batch Gram (10 problems)", worst <= 1e-12, format!("max abs diff {worst:.2e}")));

    let feats = uniform_tensor(&mut rng, vec![30, 5], -1.0, 1.0);
    let labels = labels_for(30, 3, &mut rng);
    let mut head = ProjectionHead::new(&HeadConfig { dim: 32, ..HeadConfig::default() }, 5, 9)?;
    head.accumulate_session(&feats, &labels, 3)?;
    let sums = head.class_sums();
    let z = head.logits_with_beta(&feats, 1e9)?;
    let mut agree = 0;
    for i in 0..30 {
        let h = head.project(feats.row(i))?;
        let direct: Vec<f64> = (0..3).map(|c| (0..32).map(|k| sums.get(k, c) * h[k]).sum()).collect();
        agree += usize::from(argmax(z.row(i)) == argmax(&direct));
    }
    out.push(CheckLine::new("large-beta limit", agree == 30, format!("{agree}/30 argmax agree")));

    let feats = uniform_tensor(&mut rng, vec![24, 4], -1.0, 1.0);
    let labels: Vec<usize> = (0..24).map(|i| usize::from(feats.get(i, 0) + 0.5 * feats.get(i, 1) > 0.0)).collect();
    let mut head = ProjectionHead::new(&HeadConfig { dim: 32, ..HeadConfig::default() }, 4, 13)?;
    head.accumulate_session(&feats, &labels, 2)?;
    let cands = [1e-6, 1e6];
    let accs: Vec<f64> = cands.iter().map(|&b| head.logits_with_beta(&feats, b).map(|z| accuracy(&z, &labels))).collect::<Result<_>>()?;
    let want = if accs[1] > accs[0] { cands[1] } else { cands[0] };
    let got = select_beta(&head, &feats, &labels, &cands)?;
    out.push(CheckLine::new("beta sweep", got == want, format!("chose {got:e}; accuracies {accs:?}")));

    let secs = start.elapsed().as_secs_f64();
    out.push(CheckLine::new("head oracle runtime", secs < 30.0, format!("{secs:.2} s (limit 30 s)")));
    Ok(())
}

fn aggregation_oracles(out: &mut Vec<CheckLine>) -> Result<()> {
    let (a, b) = aggregation_weights(0.0, 2f64.ln(), 1.0);
    out.push(CheckLine::new("entropy weights example", close(a, 2.0 / 3.0, 1e-15) && close(b, 1.0 / 3.0, 1e-15), format!("({a}, {b})")));

    let mut rng = Rng::new(61);
    let mut sum_err: f64 = 0.0;
    let mut half = true;
    for _ in 0..1000 {
        let (hs, hf) = (rng.uniform_in(0.0, 3.0), rng.uniform_in(0.0, 3.0));
        let (x, y) = aggregation_weights(hs, hf, rng.uniform_in(0.0, 10.0));
        sum_err = sum_err.max((x + y - 1.0).abs());
        half &= aggregation_weights(hs, hf, 0.0) == (0.5, 0.5);
    }
    out.push(CheckLine::new("weights sum to one", sum_err <= 1e-12, format!("max deviation {sum_err:.2e}")));
    out.push(CheckLine::new("gamma 0 gives equal weights", half, "1000 entropy pairs"));

    let cfg = AggregationConfig { gamma: 1e3, mode: AggregationMode::Entropy };
    let (mut pairs, mut wrong, mut gap) = (0, 0, 0.0f64);
    while pairs < 1000 {
        let scale = rng.uniform_in(0.5, 6.0);
        let zs: Vec<f64> = (0..5).map(|_| scale * rng.normal()).collect();
        let zf: Vec<f64> = (0..5).map(|_| rng.uniform_in(0.5, 6.0) * rng.normal()).collect();
        let (hs, hf) = (entropy(&softmax(&zs))?, entropy(&softmax(&zf))?);
        if (hs - hf).abs() <= 0.1 {
            continue;
        }
        pairs += 1;
        let pick = if hs < hf { &zs } else { &zf };
        if predict(&zs, Some(&zf), &cfg, 2)? != argmax(pick) {
            wrong += 1;
        }
        let fused = fuse(&zs, &zf, &cfg)?;
        gap = gap.max(fused.iter().zip(pick).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
    }
    out.push(CheckLine::new("hard selection at gamma 1e3", wrong == 0 && gap <= 1e-6, format!("{wrong} mismatches over 1000 pairs, max logit gap {gap:.2e}")));
    Ok(())
}

fn data_oracles(out: &mut Vec<CheckLine>) -> Result<()> {
    let mut rng = Rng::new(71);
    let train = gen_blobs(2, 40, 16, SEPARABLE_SPREAD, &mut rng)?;
    // Held-out draw from the same generator state.
    let mut rng2 = Rng::new(71);
    let gen = crate::harness::data::BlobGenerator::new(2, 16, SEPARABLE_SPREAD, 1.0, &mut rng2)?;
    let test = gen.sample(0..2, 40, &mut Rng::new(72));
    let mut hits = 0;
    for (x, &y) in test.inputs.iter().zip(&test.labels) {
        let dists: Vec<f64> = (0..2)
            .map(|c| {
                let members: Vec<&Vec<f64>> = train.inputs.iter().zip(&train.labels).filter(|(_, &l)| l == c).map(|(v, _)| v).collect();
                let mean: Vec<f64> = (0..16).map(|k| members.iter().map(|m| m[k]).sum::<f64>() / members.len() as f64).collect();
                -mean.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .collect();
        hits += usize::from(argmax(&dists) == y);
    }
    let acc = hits as f64 / test.labels.len() as f64;
    out.push(CheckLine::new("two distant blobs, held-out nearest centroid", acc == 1.0, format!("{acc:.4}")));
    Ok(())
}

/// Head readouts against closed-form, nearest-centroid and batch oracles.
pub fn head_suite() -> Result<Vec<CheckLine>> {
    let mut out = Vec::new();
    head_oracles(&mut out)?;
    Ok(out)
}

/// Aggregation weights and the hard-selection limit.
pub fn aggregation_suite() -> Result<Vec<CheckLine>> {
    let mut out = Vec::new();
    aggregation_oracles(&mut out)?;
    Ok(out)
}

/// Brute-force and hand-derived oracles for the worked examples and heads.
pub fn oracle_suite() -> Result<Vec<CheckLine>> {
    let mut out = Vec::new();
    numeric_oracles(&mut out)?;
    pet_oracles(&mut out)?;
    loss_oracles(&mut out)?;
    head_oracles(&mut out)?;
    aggregation_oracles(&mut out)?;
    data_oracles(&mut out)?;
    learner_oracles(&mut out)?;
    Ok(out)
}
