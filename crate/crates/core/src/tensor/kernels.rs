//! Reference kernels. All reductions accumulate left to right so that results
//! are reproducible bit for bit.

use super::Scalar;

/// `out += a[m×k] · b[k×n]`.
pub fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub(crate) fn matmul_nt_into<S: Scalar>(
    g: &[S],
    b: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn matmul_tn_into<S: Scalar>(
    a: &[S],
    g: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Sum of squares of a slice, sequential.
pub(crate) fn sum_sq<S: Scalar>(x: &[S]) -> S {
    let mut acc = S::zero();
    for &v in x {
        acc += v * v;
    }
    acc
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Cosine similarity with the denominator floored at `eps`.
///
/// Written as `dot / sqrt(|a|²|b|²)` so that identical inputs give exactly 1.
pub(crate) fn cosine<S: Scalar>(a: &[S], b: &[S], eps: S) -> S {
    let ab = dot(a, b);
    let den = (sum_sq(a) * sum_sq(b)).sqrt();
    ab / den.max(eps)
}
