use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central finite-difference gradient of `f` at `x`, evaluated in `f64`.
pub fn central_difference<F>(f: &F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Maximum over coordinates of `|autodiff − central| / max(1, |central|)`.
///
/// `f` maps a leaf holding `x` to a scalar on the given tape.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let auto = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let numeric = central_difference(&f, x, h)?;
    let mut worst = 0.0f64;
    for (&a, &n) in auto.data().iter().zip(numeric.data()) {
        let err = (a - n).abs() / n.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::NonFinite("gradient check".into()));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "gradcheck-test");
        Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
    }

    const H: f64 = 1e-3;

    #[test]
    fn linear_function_is_exact() {
        let x = random(&[5], 1);
        let w = random(&[5], 2);
        let err = grad_check(
            |t, v| {
                let c = t.constant(w.clone());
                let p = t.mul(v, c)?;
                Ok(t.sum(p))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let x = random(&[7], 3);
        let err = grad_check(
            |t, v| {
                let p = t.mul(v, v)?;
                Ok(t.sum(p))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    /// Every primitive, with a random weighting so the loss is not symmetric.
    fn weighted<F>(shape: &[usize], seed: u64, op: F) -> f64
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        let x = random(shape, seed);
        let probe = |t: &mut Tape<f64>, v: Var| -> Result<Var> {
            let y = op(t, v)?;
            let w = t.constant(random(t.shape(y), seed + 1000));
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        };
        grad_check(probe, &x, H).unwrap()
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let cases: Vec<(&str, Vec<usize>, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>)> = vec![
            ("add", vec![3, 4], Box::new(|t, v| t.add(v, v))),
            ("sub", vec![3, 4], Box::new(|t, v| {
                let c = t.constant(random(&[3, 4], 9));
                t.sub(c, v)
            })),
            ("mul", vec![3, 4], Box::new(|t, v| t.mul(v, v))),
            ("div", vec![2, 3], Box::new(|t, v| {
                let c = t.constant(random(&[2, 3], 5).map(|x| x + 3.0));
                let sq = t.mul(v, v)?;
                let den = t.add_scalar(sq, 1.0);
                let q = t.div(c, den)?;
                t.div(v, q)
            })),
            ("scale", vec![4], Box::new(|t, v| Ok(t.scale(v, -2.5)))),
            ("add_row", vec![3, 4], Box::new(|t, v| {
                let b = t.slice(v, 0, 0, 1)?;
                let b = t.reshape(b, [4])?;
                t.add_row(v, b)
            })),
            ("mul_row", vec![3, 4], Box::new(|t, v| {
                let g = t.slice(v, 0, 2, 3)?;
                let g = t.reshape(g, [4])?;
                t.mul_row(v, g)
            })),
            ("matmul", vec![3, 3], Box::new(|t, v| {
                let c = t.constant(random(&[3, 2], 4));
                let a = t.matmul(v, c)?;
                let vt = t.transpose(v)?;
                let b = t.matmul(vt, v)?;
                let b = t.matmul(b, c)?;
                t.add(a, b)
            })),
            ("transpose", vec![2, 5], Box::new(|t, v| t.transpose(v))),
            ("reshape", vec![2, 6], Box::new(|t, v| t.reshape(v, [3, 4]))),
            ("gelu", vec![8], Box::new(|t, v| {
                let s = t.scale(v, 3.0);
                Ok(t.gelu(s))
            })),
            ("softmax", vec![3, 5], Box::new(|t, v| {
                let s = t.scale(v, 2.0);
                Ok(t.softmax_rows(s))
            })),
            ("layer_norm", vec![4, 6], Box::new(|t, v| {
                let g = t.slice(v, 0, 0, 1)?;
                let g = t.reshape(g, [6])?;
                let b = t.slice(v, 0, 1, 2)?;
                let b = t.reshape(b, [6])?;
                t.layer_norm(v, g, b, 1e-5)
            })),
            ("concat", vec![2, 3], Box::new(|t, v| {
                let c = t.constant(random(&[2, 2], 6));
                let sq = t.mul(v, v)?;
                t.concat(&[v, c, sq], 1)
            })),
            ("slice", vec![4, 3, 2], Box::new(|t, v| t.slice(v, 1, 1, 3))),
            ("mean_axis", vec![3, 4, 2], Box::new(|t, v| {
                let sq = t.mul(v, v)?;
                t.mean_axis(sq, 1)
            })),
            ("mean", vec![5], Box::new(|t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.mean(sq))
            })),
            ("l2_norm", vec![3, 4], Box::new(|t, v| Ok(t.l2_norm(v)))),
            ("cosine", vec![3, 4], Box::new(|t, v| {
                let c = t.constant(random(&[3, 4], 8));
                t.cosine_rows(v, c, 1e-8)
            })),
        ];
        for (i, (name, shape, op)) in cases.into_iter().enumerate() {
            for seed in 0..3 {
                let err = weighted(&shape, 100 * i as u64 + seed, &op);
                assert!(err < 1e-4, "{name}: relative error {err}");
            }
        }
    }
}
