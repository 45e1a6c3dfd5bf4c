//! Synthetic Gaussian-blob data and session streams.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numeric::Rng;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, y: usize) {
        self.inputs.push(x);
        self.labels.push(y);
    }

    pub fn extend(&mut self, other: Dataset) {
        self.inputs.extend(other.inputs);
        self.labels.extend(other.labels);
    }

    /// Samples whose label satisfies `keep`, relabeled by `relabel`.
    pub fn select(&self, keep: impl Fn(usize) -> bool, relabel: impl Fn(usize) -> usize) -> Dataset {
        let mut out = Dataset::default();
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            if keep(y) {
                out.push(x.clone(), relabel(y));
            }
        }
        out
    }
}

/// Class centers for isotropic Gaussian blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobGenerator {
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
}

const PLACEMENT_ATTEMPTS: usize = 1000;

impl BlobGenerator {
    /// Draws `classes` centers from `N(0, scale²I)`, rejecting any center
    /// closer than `4·spread` to an earlier one.
    pub fn new(classes: usize, width: usize, spread: f64, scale: f64, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Generation(format!("need at least 2 classes, got {classes}")));
        }
        if width == 0 || !(spread > 0.0 && spread.is_finite()) || !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Generation(format!("invalid blob geometry: width {width}, spread {spread}, scale {scale}")));
        }
        let min_sep = 4.0 * spread;
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
        for c in 0..classes {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let cand: Vec<f64> = (0..width).map(|_| scale * rng.normal()).collect();
                if centers.iter().all(|o| dist(o, &cand) >= min_sep) {
                    centers.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Generation(format!("could not place class {c} at separation {min_sep} in width {width}")));
            }
        }
        Ok(BlobGenerator { centers, spread })
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    pub fn width(&self) -> usize {
        self.centers[0].len()
    }

    /// `n` samples around `center`.
    pub fn sample_around(&self, center: &[f64], n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| center.iter().map(|m| m + self.spread * rng.normal()).collect()).collect()
    }

    /// `per_class` samples of every class in `classes`, labeled by class id.
    pub fn sample(&self, classes: impl IntoIterator<Item = usize>, per_class: usize, rng: &mut Rng) -> Dataset {
        let mut out = Dataset::default();
        for c in classes {
            for x in self.sample_around(&self.centers[c], per_class, rng) {
                out.push(x, c);
            }
        }
        out
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Labeled blobs: `per_class` samples for each of `classes` classes.
pub fn gen_blobs(classes: usize, per_class: usize, width: usize, spread: f64, rng: &mut Rng) -> Result<Dataset> {
    let generator = BlobGenerator::new(classes, width, spread, 1.0, rng)?;
    Ok(generator.sample(0..classes, per_class, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Disjoint classes per session.
    #[default]
    Cil,
    /// Shared classes, shifting inputs.
    Dil,
}

/// One session's training data plus held-out test data for the same
/// classes (or domain).
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub train: Dataset,
    pub test: Dataset,
    /// Labels introduced or revisited in this session, ascending.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionStream {
    pub mode: StreamMode,
    pub sessions: Vec<Session>,
}

/// Test samples with the session each one originates from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSet {
    pub data: Dataset,
    /// 1-based session index per sample.
    pub origins: Vec<usize>,
}

/// Hands out session data. Training data for a session is only ever
/// requested while that session is current; nothing from earlier sessions
/// is re-read.
pub trait SessionSource {
    fn sessions(&self) -> usize;

    fn mode(&self) -> StreamMode;

    /// Number of distinct labels in sessions `1..=t`.
    fn classes_through(&self, t: usize) -> usize;

    /// Training data of session `t` (1-based).
    fn train(&mut self, t: usize) -> Result<Dataset>;

    /// Test data covering every session up to and including `t`.
    fn test_through(&mut self, t: usize) -> Result<EvalSet>;
}

impl SessionStream {
    fn session(&self, t: usize) -> Result<&Session> {
        contract!(t >= 1 && t <= self.sessions.len(), "session {t} outside 1..={}", self.sessions.len());
        Ok(&self.sessions[t - 1])
    }
}

impl SessionSource for SessionStream {
    fn sessions(&self) -> usize {
        self.sessions.len()
    }

    fn mode(&self) -> StreamMode {
        self.mode
    }

    fn classes_through(&self, t: usize) -> usize {
        let mut seen: Vec<usize> = self.sessions[..t.min(self.sessions.len())].iter().flat_map(|s| s.classes.iter().copied()).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    fn train(&mut self, t: usize) -> Result<Dataset> {
        Ok(self.session(t)?.train.clone())
    }

    fn test_through(&mut self, t: usize) -> Result<EvalSet> {
        self.session(t)?;
        let mut out = EvalSet::default();
        for (s, sess) in self.sessions[..t].iter().enumerate() {
            out.origins.extend(std::iter::repeat(s + 1).take(sess.test.len()));
            out.data.extend(sess.test.clone());
        }
        Ok(out)
    }
}

/// Splits labeled train/test data into class-incremental sessions: `base`
/// classes first, then equal blocks. Labels must be `0..classes` and are
/// assigned to sessions in ascending order.
pub fn make_cil_stream(train: &Dataset, test: &Dataset, sessions: usize, base: usize) -> Result<SessionStream> {
    contract!(sessions >= 1, "need at least one session");
    let classes = train.labels.iter().max().map_or(0, |m| m + 1);
    contract!(base >= 1 && base <= classes, "base class count {base} outside 1..={classes}");
    let rest = classes - base;
    let k = if sessions == 1 { 0 } else { rest / (sessions - 1) };
    contract!(
        (sessions == 1 && rest == 0) || (sessions > 1 && k >= 1 && base + (sessions - 1) * k == classes),
        "{classes} classes cannot be split into a base of {base} plus {} equal sessions",
        sessions - 1
    );
    let mut bounds = vec![0, base];
    for s in 1..sessions {
        bounds.push(base + s * k);
    }
    let out: Vec<Session> = bounds
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            Session { train: train.select(|y| y >= lo && y < hi, |y| y), test: test.select(|y| y >= lo && y < hi, |y| y), classes: (lo..hi).collect() }
        })
        .collect();
    for (i, s) in out.iter().enumerate() {
        contract!(s.classes.iter().all(|&c| s.train.labels.contains(&c)), "session {} is missing training samples for a class", i + 1);
    }
    validate_cil(&out)?;
    Ok(SessionStream { mode: StreamMode::Cil, sessions: out })
}

/// Refuses streams whose sessions share a label.
pub fn validate_cil(sessions: &[Session]) -> Result<()> {
    for (i, a) in sessions.iter().enumerate() {
        for b in &sessions[i + 1..] {
            if let Some(c) = a.classes.iter().find(|c| b.classes.contains(c)) {
                return Err(Error::Contract(format!("class {c} appears in more than one session")));
            }
        }
        let own: Vec<usize> = a.train.labels.iter().chain(&a.test.labels).copied().filter(|y| !a.classes.contains(y)).collect();
        contract!(own.is_empty(), "session {} holds samples of foreign classes {:?}", i + 1, own);
    }
    Ok(())
}

/// Domain-incremental stream: every session holds all `classes`, with the
/// class centers rotated in a random plane and translated along a random
/// direction, both in proportion to `shift` and the session index.
pub fn make_dil_stream(generator: &BlobGenerator, sessions: usize, per_class: usize, test_per_class: usize, shift: f64, rng: &mut Rng) -> Result<SessionStream> {
    contract!(sessions >= 2, "a domain-incremental stream needs at least 2 sessions, got {sessions}");
    contract!(shift >= 0.0 && shift.is_finite(), "shift must be a nonnegative real");
    let width = generator.width();
    let classes = generator.classes();
    let scale = generator.centers.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / classes as f64;
    let mut out = Vec::with_capacity(sessions);
    for t in 0..sessions {
        let (u, v) = random_plane(width, rng);
        let dir = unit(&(0..width).map(|_| rng.normal()).collect::<Vec<_>>());
        let angle = shift * t as f64 * std::f64::consts::FRAC_PI_4;
        let offset = shift * t as f64 * scale;
        let moved: Vec<Vec<f64>> = generator
            .centers
            .iter()
            .map(|c| {
                let mut m = rotate_in_plane(c, &u, &v, angle);
                for (a, d) in m.iter_mut().zip(&dir) {
                    *a += offset * d;
                }
                m
            })
            .collect();
        let mut train = Dataset::default();
        let mut test = Dataset::default();
        for (c, center) in moved.iter().enumerate() {
            for x in generator.sample_around(center, per_class, rng) {
                train.push(x, c);
            }
            for x in generator.sample_around(center, test_per_class, rng) {
                test.push(x, c);
            }
        }
        out.push(Session { train, test, classes: (0..classes).collect() });
    }
    Ok(SessionStream { mode: StreamMode::Dil, sessions: out })
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Two orthonormal random directions (Gram–Schmidt).
fn random_plane(width: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let u = unit(&(0..width).map(|_| rng.normal()).collect::<Vec<_>>());
    if width < 2 {
        return (u, vec![0.0; width]);
    }
    let raw: Vec<f64> = (0..width).map(|_| rng.normal()).collect();
    let p: f64 = raw.iter().zip(&u).map(|(a, b)| a * b).sum();
    let v = unit(&raw.iter().zip(&u).map(|(a, b)| a - p * b).collect::<Vec<_>>());
    (u, v)
}

fn rotate_in_plane(x: &[f64], u: &[f64], v: &[f64], angle: f64) -> Vec<f64> {
    let a: f64 = x.iter().zip(u).map(|(p, q)| p * q).sum();
    let b: f64 = x.iter().zip(v).map(|(p, q)| p * q).sum();
    let (s, c) = angle.sin_cos();
    let (a2, b2) = (c * a - s * b, s * a + c * b);
    x.iter().zip(u.iter().zip(v)).map(|(xi, (ui, vi))| xi + (a2 - a) * ui + (b2 - b) * vi).collect()
}

/// Test double that records every access, to check the replay-free
/// contract.
#[derive(Debug)]
pub struct AccessLog<S> {
    pub inner: S,
    /// `(kind, session)` in call order; kind is `"train"` or `"test"`.
    pub log: Vec<(&'static str, usize)>,
}

impl<S: SessionSource> AccessLog<S> {
    pub fn new(inner: S) -> Self {
        AccessLog { inner, log: Vec::new() }
    }

    /// True when training data was requested once per session, in order,
    /// and never for an earlier session after a later one.
    pub fn is_replay_free(&self) -> bool {
        let train: Vec<usize> = self.log.iter().filter(|(k, _)| *k == "train").map(|(_, t)| *t).collect();
        train == (1..=self.inner.sessions()).collect::<Vec<_>>()
    }
}

impl<S: SessionSource> SessionSource for AccessLog<S> {
    fn sessions(&self) -> usize {
        self.inner.sessions()
    }

    fn mode(&self) -> StreamMode {
        self.inner.mode()
    }

    fn classes_through(&self, t: usize) -> usize {
        self.inner.classes_through(t)
    }

    fn train(&mut self, t: usize) -> Result<Dataset> {
        self.log.push(("train", t));
        self.inner.train(t)
    }

    fn test_through(&mut self, t: usize) -> Result<EvalSet> {
        self.log.push(("test", t));
        self.inner.test_through(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset, classes: usize) -> f64 {
        let w = train.inputs[0].len();
        let mut sums = vec![vec![0.0; w]; classes];
        let mut counts = vec![0.0; classes];
        for (x, &y) in train.inputs.iter().zip(&train.labels) {
            sums[y].iter_mut().zip(x).for_each(|(s, v)| *s += v);
            counts[y] += 1.0;
        }
        let cents: Vec<Vec<f64>> = sums.iter().zip(&counts).map(|(s, n)| s.iter().map(|v| v / n).collect()).collect();
        let hits = test
            .inputs
            .iter()
            .zip(&test.labels)
            .filter(|(x, y)| {
                let d: Vec<f64> = cents.iter().map(|c| dist(c, x)).collect();
                crate::aggregate::argmax(&d.iter().map(|v| -v).collect::<Vec<_>>()) == **y
            })
            .count();
        hits as f64 / test.len() as f64
    }

    #[test]
    fn blob_examples() {
        let mut rng = Rng::new(1);
        let g = BlobGenerator::new(2, 8, 0.1, 3.0, &mut rng).unwrap();
        let train = g.sample(0..2, 20, &mut rng);
        let test = g.sample(0..2, 20, &mut rng);
        assert_eq!(nearest_centroid_accuracy(&train, &test, 2), 1.0);

        let d = gen_blobs(5, 7, 4, 0.1, &mut Rng::new(2)).unwrap();
        assert_eq!(d.len(), 35);
        assert_eq!(d, gen_blobs(5, 7, 4, 0.1, &mut Rng::new(2)).unwrap());
        assert!(matches!(gen_blobs(1, 7, 4, 0.1, &mut Rng::new(2)), Err(Error::Generation(_))));
        assert!(matches!(gen_blobs(50, 2, 1, 1.0, &mut Rng::new(2)), Err(Error::Generation(_))));
    }

    #[test]
    fn centers_respect_separation() {
        let g = BlobGenerator::new(24, 16, 0.5, 1.0, &mut Rng::new(3)).unwrap();
        for i in 0..24 {
            for j in 0..i {
                assert!(dist(&g.centers[i], &g.centers[j]) >= 2.0);
            }
        }
    }

    fn labeled(classes: usize) -> Dataset {
        gen_blobs(classes, 3, 4, 0.1, &mut Rng::new(4)).unwrap()
    }

    #[test]
    fn cil_splits() {
        let d = labeled(16);
        let s = make_cil_stream(&d, &d, 4, 4).unwrap();
        assert_eq!(s.sessions.iter().map(|x| x.classes.len()).collect::<Vec<_>>(), vec![4, 4, 4, 4]);
        let s = make_cil_stream(&d, &d, 5, 8).unwrap();
        assert_eq!(s.sessions.iter().map(|x| x.classes.len()).collect::<Vec<_>>(), vec![8, 2, 2, 2, 2]);
        assert_eq!(s.classes_through(3), 12);
        assert!(make_cil_stream(&d, &d, 4, 3).is_err());
        let mut bad = s.sessions.clone();
        bad[1].classes.push(0);
        assert!(validate_cil(&bad).is_err());
    }

    #[test]
    fn dil_shares_labels_and_zero_shift_keeps_centers() {
        let g = BlobGenerator::new(4, 6, 0.2, 2.0, &mut Rng::new(5)).unwrap();
        let s = make_dil_stream(&g, 3, 10, 5, 0.0, &mut Rng::new(6)).unwrap();
        for sess in &s.sessions {
            assert_eq!(sess.classes, vec![0, 1, 2, 3]);
            // Empirical class means stay near the unshifted centers.
            for c in 0..4 {
                let xs: Vec<&Vec<f64>> = sess.train.inputs.iter().zip(&sess.train.labels).filter(|(_, y)| **y == c).map(|(x, _)| x).collect();
                let mean: Vec<f64> = (0..6).map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / xs.len() as f64).collect();
                assert!(dist(&mean, &g.centers[c]) < 0.5);
            }
        }
        assert_eq!(s.classes_through(3), 4);
        let shifted = make_dil_stream(&g, 3, 10, 5, 1.0, &mut Rng::new(6)).unwrap();
        assert_ne!(shifted.sessions[2].train, s.sessions[2].train);
        assert!(make_dil_stream(&g, 1, 10, 5, 0.0, &mut Rng::new(6)).is_err());
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = Rng::new(7);
        let (u, v) = random_plane(5, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let r = rotate_in_plane(&x, &u, &v, 0.7);
        let n = |a: &[f64]| a.iter().map(|q| q * q).sum::<f64>().sqrt();
        assert!((n(&x) - n(&r)).abs() < 1e-12);
    }

    #[test]
    fn access_log_detects_replay() {
        let d = labeled(8);
        let mut log = AccessLog::new(make_cil_stream(&d, &d, 2, 4).unwrap());
        log.train(1).unwrap();
        log.train(2).unwrap();
        assert!(log.is_replay_free());
        log.train(1).unwrap();
        assert!(!log.is_replay_free());
    }
}
