//! Second-order inference head: fixed random projection, accumulated Gram
//! matrix and per-class sums, and a regularized solve.
//!
//! Logits are `z = W̃ᵀ (G + βI)⁻¹ h(x)` with `h(x) = ψ(W_randᵀ x)`. Ridge mode
//! drops the projection (`W_rand = I`, `ψ = identity`); NCM mode ignores `G`
//! and scores cosine similarity to class-mean features.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregate::argmax;
use crate::error::{contract, Error, Result};
use crate::numeric::{archive, cosine, gaussian_matrix, l2_normalize, Cholesky, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    Full,
    Ridge,
    Ncm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// 11 log-spaced values from 1e-8 to 1e2.
pub fn default_beta_grid() -> Vec<f64> {
    (0..=10).map(|i| 10f64.powi(i - 8)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub mode: HeadMode,
    /// Projection width `M` (ignored in ridge mode, where `M = d`).
    pub dim: usize,
    /// Entry scale of `W_rand`; `1/√d` when unset.
    pub sigma: Option<f64>,
    pub activation: Activation,
    pub beta_grid: Vec<f64>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { mode: HeadMode::Full, dim: 512, sigma: None, activation: Activation::Relu, beta_grid: default_beta_grid() }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == HeadMode::Full && self.dim == 0 {
            return Err(Error::Config("head.dim must be positive".into()));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("head.sigma must be positive, got {s}")));
            }
        }
        if self.beta_grid.is_empty() || self.beta_grid.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::Config("head.beta_grid must be a nonempty list of positive reals".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub mode: HeadMode,
    pub activation: Activation,
    pub seed: u64,
    pub sigma: f64,
    pub beta: f64,
    /// `d × M`; never modified after construction.
    w_rand: Tensor,
    /// `M × M`, row-major.
    gram: Vec<f64>,
    /// Row `c` holds column `c` of `W̃` (sum of projected features of class `c`).
    class_sums: Vec<Vec<f64>>,
    /// Raw-feature sums and counts per class, for NCM scoring.
    raw_sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl ProjectionHead {
    pub fn new(cfg: &HeadConfig, width: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        contract!(width > 0, "feature width must be positive");
        let sigma = cfg.sigma.unwrap_or(1.0 / (width as f64).sqrt());
        let (w_rand, activation) = match cfg.mode {
            HeadMode::Ridge => (Tensor::identity(width), Activation::Identity),
            _ => (gaussian_matrix(&mut Rng::new(seed), width, cfg.dim, sigma)?, cfg.activation),
        };
        let m = w_rand.cols();
        Ok(ProjectionHead {
            mode: cfg.mode,
            activation,
            seed,
            sigma,
            beta: cfg.beta_grid[0],
            w_rand,
            gram: vec![0.0; m * m],
            class_sums: Vec::new(),
            raw_sums: Vec::new(),
            counts: Vec::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.w_rand.rows()
    }

    /// Projection width `M`.
    pub fn dim(&self) -> usize {
        self.w_rand.cols()
    }

    pub fn classes(&self) -> usize {
        self.class_sums.len()
    }

    pub fn w_rand(&self) -> &Tensor {
        &self.w_rand
    }

    pub fn gram(&self) -> Tensor {
        Tensor::matrix(self.dim(), self.dim(), self.gram.clone()).expect("gram is finite")
    }

    /// `W̃` as an `M × C` matrix.
    pub fn class_sums(&self) -> Tensor {
        let (m, c) = (self.dim(), self.classes());
        let mut out = vec![0.0; m * c];
        for (j, col) in self.class_sums.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                out[i * c + j] = *v;
            }
        }
        Tensor::matrix(m, c, out).expect("sums are finite")
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.counts
    }

    /// `h = ψ(W_randᵀ · feat)`.
    pub fn project(&self, feat: &[f64]) -> Result<Vec<f64>> {
        contract!(feat.len() == self.width(), "feature width {} does not match head width {}", feat.len(), self.width());
        let m = self.dim();
        let w = self.w_rand.values();
        let mut h = vec![0.0; m];
        for (i, &f) in feat.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            for (hj, wij) in h.iter_mut().zip(&w[i * m..(i + 1) * m]) {
                *hj += f * wij;
            }
        }
        h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        Ok(h)
    }

    /// Adds one session's samples to the Gram matrix and class sums.
    /// `classes` is the number of classes seen so far, including this
    /// session's.
    ///
    /// Samples are folded in one at a time, in order, so accumulating two
    /// sessions back to back is bitwise identical to accumulating their
    /// concatenation.
    pub fn accumulate_session(&mut self, feats: &Tensor, labels: &[usize], classes: usize) -> Result<()> {
        contract!(feats.rows() == labels.len(), "{} feature rows for {} labels", feats.rows(), labels.len());
        contract!(classes >= self.classes(), "class count cannot shrink from {} to {}", self.classes(), classes);
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
        }
        if labels.is_empty() {
            return Ok(());
        }
        contract!(feats.cols() == self.width(), "feature width {} does not match head width {}", feats.cols(), self.width());
        let (m, d) = (self.dim(), self.width());
        self.class_sums.resize(classes, vec![0.0; m]);
        self.raw_sums.resize(classes, vec![0.0; d]);
        self.counts.resize(classes, 0);
        for (i, &y) in labels.iter().enumerate() {
            let f = feats.row(i);
            if self.mode != HeadMode::Ncm {
                let h = self.project(f)?;
                for (a, b) in self.gram.chunks_exact_mut(m).zip(&h) {
                    if *b == 0.0 {
                        continue;
                    }
                    for (g, hj) in a.iter_mut().zip(&h) {
                        *g += b * hj;
                    }
                }
                for (s, v) in self.class_sums[y].iter_mut().zip(&h) {
                    *s += v;
                }
            }
            for (s, v) in self.raw_sums[y].iter_mut().zip(f) {
                *s += v;
            }
            self.counts[y] += 1;
        }
        if self.gram.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "accumulate_session" });
        }
        Ok(())
    }

    /// The readout `X = (G + βI)⁻¹ W̃` (`M × C`), computed once per query batch.
    fn readout(&self, beta: f64) -> Result<Tensor> {
        let m = self.dim();
        let mut a = self.gram.clone();
        for i in 0..m {
            a[i * m + i] += beta;
        }
        let a = Tensor::matrix(m, m, a)?;
        Cholesky::factor(&a)?.solve(&self.class_sums())
    }

    fn ncm_centroids(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.classes())
            .map(|c| {
                if self.counts[c] == 0 {
                    return Err(Error::MissingClass(c));
                }
                let n = self.counts[c] as f64;
                l2_normalize(&self.raw_sums[c].iter().map(|v| v / n).collect::<Vec<_>>())
            })
            .collect()
    }

    /// Logits for every feature row of `feats` (`B × C`) at the given β.
    pub fn logits_with_beta(&self, feats: &Tensor, beta: f64) -> Result<Tensor> {
        contract!(feats.cols() == self.width(), "feature width {} does not match head width {}", feats.cols(), self.width());
        let c = self.classes();
        contract!(c > 0, "head has seen no classes");
        let mut out = Vec::with_capacity(feats.rows() * c);
        match self.mode {
            HeadMode::Ncm => {
                let centroids = self.ncm_centroids()?;
                for i in 0..feats.rows() {
                    for mu in &centroids {
                        out.push(cosine(feats.row(i), mu)?);
                    }
                }
            }
            HeadMode::Full | HeadMode::Ridge => {
                contract!(beta >= 0.0, "beta must be nonnegative");
                let x = self.readout(beta)?;
                let xv = x.values();
                for i in 0..feats.rows() {
                    let h = self.project(feats.row(i))?;
                    let mut z = vec![0.0; c];
                    for (hk, xk) in h.iter().zip(xv.chunks_exact(c)) {
                        if *hk == 0.0 {
                            continue;
                        }
                        for (zj, xkj) in z.iter_mut().zip(xk) {
                            *zj += hk * xkj;
                        }
                    }
                    out.extend(z);
                }
            }
        }
        Tensor::matrix(feats.rows(), c, out)
    }

    pub fn logits(&self, feats: &Tensor) -> Result<Tensor> {
        self.logits_with_beta(feats, self.beta)
    }

    /// Logits for a single feature vector.
    pub fn infer_logits(&self, feat: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, feat.len(), feat.to_vec())?;
        Ok(self.logits(&t)?.into_values())
    }

    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        contract!(beta > 0.0 && beta.is_finite(), "beta must be positive, got {beta}");
        self.beta = beta;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mode = match self.mode {
            HeadMode::Full => 0.0,
            HeadMode::Ridge => 1.0,
            HeadMode::Ncm => 2.0,
        };
        let act = match self.activation {
            Activation::Relu => 0.0,
            Activation::Identity => 1.0,
        };
        let (m, d, c) = (self.dim(), self.width(), self.classes());
        let header = Tensor::vector(vec![mode, act, self.sigma, self.beta, d as f64, m as f64, c as f64]);
        // Seeds do not fit losslessly in an f64; store them as two u32 halves.
        let seed = Tensor::vector(vec![(self.seed >> 32) as f64, (self.seed & 0xFFFF_FFFF) as f64]);
        let gram = self.gram();
        let sums = Tensor::new(vec![c, m], self.class_sums.concat())?;
        let raw = Tensor::new(vec![c, d], self.raw_sums.concat())?;
        let counts = Tensor::vector(self.counts.iter().map(|&n| n as f64).collect());
        archive::write_tensors(w, ARCHIVE_KIND, &[&header, &seed, &self.w_rand, &gram, &sums, &raw, &counts])
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (kind, ts) = archive::read_tensors(r)?;
        if kind != ARCHIVE_KIND || ts.len() != 7 {
            return Err(Error::Format("not a head snapshot".into()));
        }
        let h = ts[0].values();
        if h.len() != 7 {
            return Err(Error::Format("head header needs 7 fields".into()));
        }
        let mode = match h[0] as u8 {
            0 => HeadMode::Full,
            1 => HeadMode::Ridge,
            2 => HeadMode::Ncm,
            x => return Err(Error::Format(format!("unknown head mode {x}"))),
        };
        let activation = if h[1] == 0.0 { Activation::Relu } else { Activation::Identity };
        let (d, m, c) = (h[4] as usize, h[5] as usize, h[6] as usize);
        let s = ts[1].values();
        let seed = ((s[0] as u64) << 32) | s[1] as u64;
        let shapes: [&[usize]; 5] = [&[d, m], &[m, m], &[c, m], &[c, d], &[c]];
        for (t, want) in ts[2..].iter().zip(shapes) {
            if t.shape() != want {
                return Err(Error::Format(format!("head tensor shape {:?} where {:?} expected", t.shape(), want)));
            }
        }
        Ok(ProjectionHead {
            mode,
            activation,
            seed,
            sigma: h[2],
            beta: h[3],
            w_rand: ts[2].clone(),
            gram: ts[3].values().to_vec(),
            class_sums: ts[4].row_vecs(),
            raw_sums: ts[5].row_vecs(),
            counts: ts[6].values().iter().map(|&n| n as usize).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        ProjectionHead::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

const ARCHIVE_KIND: u32 = 0xEE01;

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().enumerate().filter(|(i, y)| argmax(logits.row(*i)) == **y).count();
    hits as f64 / labels.len() as f64
}

/// The candidate with the best training accuracy; ties go to the smaller β.
/// Candidates whose system cannot be factored are skipped.
pub fn select_beta(head: &ProjectionHead, feats: &Tensor, labels: &[usize], candidates: &[f64]) -> Result<f64> {
    contract!(!candidates.is_empty(), "no beta candidates");
    contract!(candidates.iter().all(|b| *b > 0.0), "beta candidates must be positive");
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    if head.mode == HeadMode::Ncm || labels.is_empty() {
        return Ok(sorted[0]);
    }
    let mut best: Option<(f64, f64)> = None;
    let mut last_err = None;
    for &b in &sorted {
        match head.logits_with_beta(feats, b) {
            Ok(z) => {
                let acc = accuracy(&z, labels);
                if best.map_or(true, |(_, a)| acc > a) {
                    best = Some((b, acc));
                }
            }
            Err(e @ (Error::SingularSystem(_) | Error::NonFinite { .. })) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    match (best, last_err) {
        (Some((b, _)), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("candidates are nonempty"),
    }
}
