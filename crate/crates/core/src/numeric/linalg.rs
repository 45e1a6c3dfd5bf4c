use super::Tensor;
use crate::error::{contract, Error, Result};

/// Guard below which a vector is considered collapsed.
pub const EPS_NORM: f64 = 1e-12;

/// `out += op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// With `ta` set, `a` is stored `k × m`; with `tb` set, `b` is stored `n × k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let a_at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
    if tb {
        // Row of op(b) column j is contiguous: b[j*k..].
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            if ta {
                for (j, o) in row.iter_mut().enumerate() {
                    let bj = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for (p, bv) in bj.iter().enumerate() {
                        acc += a_at(i, p) * bv;
                    }
                    *o += acc;
                }
            } else {
                let ai = &a[i * k..(i + 1) * k];
                for (j, o) in row.iter_mut().enumerate() {
                    let bj = &b[j * k..(j + 1) * k];
                    *o += ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
    } else {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a_at(i, p);
                if av == 0.0 {
                    continue;
                }
                let bp = &b[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(bp) {
                    *o += av * bv;
                }
            }
        }
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm2(v);
    if n <= EPS_NORM || !n.is_finite() {
        return Err(Error::DegenerateVector { norm: n, eps: EPS_NORM });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = norm2(a);
    let nb = norm2(b);
    for n in [na, nb] {
        if n <= EPS_NORM {
            return Err(Error::DegenerateVector { norm: n, eps: EPS_NORM });
        }
    }
    Ok(dot(a, b) / (na * nb))
}

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &Tensor) -> Result<Self> {
        let n = a.rows();
        contract!(a.shape().len() == 2 && a.cols() == n, "cholesky needs a square matrix, got {:?}", a.shape());
        let av = a.values();
        let scale = 1.0 + a.max_abs();
        for i in 0..n {
            for j in 0..i {
                if (av[i * n + j] - av[j * n + i]).abs() > 1e-12 * scale {
                    return Err(Error::Contract(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = av[j * n + j];
            let lj = j * n;
            for p in 0..j {
                d -= l[lj + p] * l[lj + p];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::SingularSystem(format!("non-positive pivot {d:e} at column {j}")));
            }
            let djj = d.sqrt();
            l[lj + j] = djj;
            for i in j + 1..n {
                let li = i * n;
                let mut s = av[li + j];
                for p in 0..j {
                    s -= l[li + p] * l[lj + p];
                }
                l[li + j] = s / djj;
            }
        }
        Ok(Cholesky { n, lower: l })
    }

    /// Solves `A·X = B` for `B` of shape `n × c`.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.n;
        contract!(b.rows() == n, "right-hand side has {} rows, factor has {}", b.rows(), n);
        let c = b.cols();
        let l = &self.lower;
        let mut x = b.values().to_vec();
        // Forward substitution, all columns at once.
        for i in 0..n {
            let (done, rest) = x.split_at_mut(i * c);
            let xi = &mut rest[..c];
            for p in 0..i {
                let lip = l[i * n + p];
                if lip != 0.0 {
                    let xp = &done[p * c..(p + 1) * c];
                    for (v, w) in xi.iter_mut().zip(xp) {
                        *v -= lip * w;
                    }
                }
            }
            let d = l[i * n + i];
            xi.iter_mut().for_each(|v| *v /= d);
        }
        // Back substitution with Lᵀ.
        for i in (0..n).rev() {
            let (head, tail) = x.split_at_mut((i + 1) * c);
            let xi = &mut head[i * c..];
            for p in i + 1..n {
                let lpi = l[p * n + i];
                if lpi != 0.0 {
                    let xp = &tail[(p - i - 1) * c..(p - i) * c];
                    for (v, w) in xi.iter_mut().zip(xp) {
                        *v -= lpi * w;
                    }
                }
            }
            let d = l[i * n + i];
            xi.iter_mut().for_each(|v| *v /= d);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "spd_solve" });
        }
        Tensor::matrix(n, c, x)
    }
}

/// Solves `A·X = B` for symmetric positive-definite `A` via Cholesky.
pub fn spd_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Cholesky::factor(a)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{rng::gaussian_matrix, Rng};
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalize_examples() {
        assert!(close(&l2_normalize(&[3.0, 4.0]).unwrap(), &[0.6, 0.8], 1e-15));
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn solve_examples() {
        let x = spd_solve(&Tensor::identity(2), &Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(x.values(), &[1.0, 2.0]);

        let a = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let x = spd_solve(&a, &Tensor::identity(2)).unwrap();
        assert!(close(x.values(), &[0.5, 0.0, 0.0, 0.5], 1e-15));

        // Hand elimination: 2x + y = 1, x + 2y = 1 gives x = y = 1/3.
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let x = spd_solve(&a, &Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(close(x.values(), &[1.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn indefinite_matrix_fails() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(matches!(spd_solve(&a, &b), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn asymmetric_matrix_is_rejected() {
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 0.0, 2.0]).unwrap();
        assert!(matches!(Cholesky::factor(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn gemm_transpose_variants_agree() {
        let mut rng = Rng::new(3);
        let a = gaussian_matrix(&mut rng, 3, 4, 1.0).unwrap();
        let b = gaussian_matrix(&mut rng, 4, 5, 1.0).unwrap();
        let reference = a.matmul(&b).unwrap();
        for (ta, tb) in [(true, false), (false, true), (true, true)] {
            let av = if ta { a.transpose() } else { a.clone() };
            let bv = if tb { b.transpose() } else { b.clone() };
            let mut out = vec![0.0; 15];
            gemm(av.values(), bv.values(), &mut out, 3, 4, 5, ta, tb);
            assert!(close(&out, reference.values(), 1e-12), "ta={ta} tb={tb}");
        }
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..12)) {
            prop_assume!(norm2(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!(close(&once, &twice, 1e-12));
            prop_assert!((norm2(&once) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn solve_recovers_known_solution(seed in 0u64..1000, n in 1usize..8, c in 1usize..4) {
            let mut rng = Rng::new(seed);
            let r = gaussian_matrix(&mut rng, n, n, 1.0).unwrap();
            let mut a = r.transpose().matmul(&r).unwrap();
            for i in 0..n {
                let v = a.get(i, i) + 1.0;
                a.set(i, i, v);
            }
            let x0 = gaussian_matrix(&mut rng, n, c, 1.0).unwrap();
            let b = a.matmul(&x0).unwrap();
            let x = spd_solve(&a, &b).unwrap();
            prop_assert!(close(x.values(), x0.values(), 1e-8));
            let resid = a.matmul(&x).unwrap();
            let tol = 1e-9 * (1.0 + b.max_abs());
            prop_assert!(close(resid.values(), b.values(), tol));
        }
    }
}
