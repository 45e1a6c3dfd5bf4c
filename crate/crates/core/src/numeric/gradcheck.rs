use super::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` builds the function on a fresh tape from leaves bound to `params`
/// (one [`Var`] per tensor, in order). Returns the largest
/// `|analytic − numeric| / max(1, |numeric|)` over all parameter entries.
pub fn grad_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    contract!(eps > 0.0, "eps must be positive");
    let eval = |f: &mut F, ps: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.variable(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(&mut f, params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().zip(params).map(|(v, p)| grads.get_or_zeros(*v, p.len())).collect();

    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let orig = p.values()[j];
            let mut side = |delta: f64, probe: &mut Vec<Tensor>| -> Result<f64> {
                probe[pi].values_mut()[j] = orig + delta;
                let r = eval(&mut f, probe);
                probe[pi].values_mut()[j] = orig;
                let (tape, _, out) = r.map_err(|e| Error::CheckAborted(format!("probe failed: {e}")))?;
                let v = tape.scalar(out);
                if !v.is_finite() {
                    return Err(Error::CheckAborted("non-finite probe value".into()));
                }
                Ok(v)
            };
            let plus = side(eps, &mut probe)?;
            let minus = side(-eps, &mut probe)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[pi][j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{rng::uniform_tensor, Rng};

    #[test]
    fn square_is_exact() {
        let err = grad_check(|t, v| t.mul(v[0], v[0]), &[Tensor::scalar(3.0)], DEFAULT_EPS).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(|t, _| Ok(t.constant_scalar(4.0)), &[Tensor::scalar(1.0)], DEFAULT_EPS).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_probe_aborts() {
        // log(w) at w = 0 is already non-finite on the forward pass.
        let r = grad_check(|t, v| { let l = t.log(v[0])?; t.mean(l) }, &[Tensor::vector(vec![0.0])], DEFAULT_EPS);
        assert!(r.is_err());
    }

    fn check(build: impl FnMut(&mut Tape, &[Var]) -> Result<Var>, shapes: &[Vec<usize>], seed: u64) {
        let mut rng = Rng::new(seed);
        let params: Vec<Tensor> = shapes.iter().map(|s| uniform_tensor(&mut rng, s.clone(), -1.0, 1.0)).collect();
        let err = grad_check(build, &params, DEFAULT_EPS).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn every_primitive_passes() {
        for seed in 0..5 {
            check(|t, v| { let y = t.matmul(v[0], v[1])?; let y = t.mul(y, y)?; t.mean(y) }, &[vec![3, 4], vec![4, 2]], seed);
            check(|t, v| { let y = t.matmul_t(v[0], v[1], true, true)?; let y = t.mul(y, y)?; t.mean(y) }, &[vec![4, 3], vec![2, 4]], seed);
            check(|t, v| { let y = t.matmul_t(v[0], v[1], false, true)?; let y = t.mul(y, y)?; t.mean(y) }, &[vec![2, 3, 4], vec![2, 5, 4]], seed);
            check(|t, v| { let y = t.matmul(v[0], v[1])?; let y = t.mul(y, y)?; t.mean(y) }, &[vec![2, 3, 4], vec![4, 2]], seed);
            check(|t, v| { let y = t.add(v[0], v[1])?; let y = t.mul(y, y)?; t.mean(y) }, &[vec![2, 3], vec![3]], seed);
            check(|t, v| { let y = t.mul(v[0], v[1])?; let y = t.mul(y, v[0])?; t.mean(y) }, &[vec![2, 3], vec![3]], seed);
            check(|t, v| { let y = t.relu(v[0])?; let y = t.mul(y, v[1])?; t.mean(y) }, &[vec![6], vec![6]], seed);
            check(|t, v| { let y = t.softmax(v[0])?; let y = t.mul(y, v[1])?; t.mean(y) }, &[vec![2, 4], vec![2, 4]], seed);
            check(|t, v| { let y = t.softmax(v[0])?; let y = t.log(y)?; let y = t.mul(y, v[1])?; t.mean(y) }, &[vec![3, 4], vec![3, 4]], seed);
            check(|t, v| { let y = t.mean_axis(v[0], 1)?; let y = t.mul(y, y)?; t.mean(y) }, &[vec![2, 3, 4]], seed);
            check(|t, v| { let y = t.concat(v[0], v[1])?; let y = t.mul(y, y)?; let y = t.slice(y, 1, 2)?; t.mean(y) }, &[vec![2, 3], vec![2, 2, 3]], seed);
            check(|t, v| { let y = t.layer_norm(v[0])?; let y = t.mul(y, v[1])?; t.mean(y) }, &[vec![3, 5], vec![3, 5]], seed);
            check(|t, v| { let y = t.l2_normalize(v[0])?; let y = t.mul(y, v[1])?; t.mean(y) }, &[vec![3, 5], vec![3, 5]], seed);
            check(|t, v| { let y = t.cosine(v[0], v[1])?; let y = t.mul(y, y)?; t.mean(y) }, &[vec![3, 5], vec![3, 5]], seed);
            check(|t, v| { let y = t.reshape(v[0], vec![3, 2])?; let y = t.matmul(y, v[1])?; let y = t.mul(y, y)?; t.mean(y) }, &[vec![6], vec![2, 2]], seed);
        }
    }
}
