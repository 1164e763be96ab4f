//! Catmull-Rom (a = -0.5) cubic interpolation used for positional-embedding
//! and image resizing. Sample positions use the corner-aligned mapping, so
//! the first and last source samples land exactly on the first and last
//! targets.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const A: f64 = -0.5;

fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// For each of `n_out` targets, the `(source index, weight)` taps over a
/// length-`n_in` axis. Out-of-range taps are clamped to the border.
pub fn catmull_rom_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n_out)
        .map(|i| {
            let src = if n_out == 1 {
                (n_in as f64 - 1.0) / 2.0
            } else {
                i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
            };
            let base = src.floor();
            let frac = src - base;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            for off in -1i64..=2 {
                let w = cubic(frac - off as f64);
                if w == 0.0 {
                    continue;
                }
                let idx = (base as i64 + off).clamp(0, n_in as i64 - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            taps
        })
        .collect()
}

/// Dense `[n_out, n_in]` interpolation matrix along one axis.
fn axis_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for (i, taps) in catmull_rom_weights(n_in, n_out).into_iter().enumerate() {
        for (j, w) in taps {
            m[i * n_in + j] += w;
        }
    }
    m
}

/// Matrix `R` with `resized = R · table` for a row-major `(rows, cols)` grid
/// table; shape `[to.0 * to.1, from.0 * from.1]`.
pub fn grid_resize_matrix<S: Scalar>(from: (usize, usize), to: (usize, usize)) -> Tensor<S> {
    let ry = axis_matrix(from.0, to.0);
    let rx = axis_matrix(from.1, to.1);
    let (n_in, n_out) = (from.0 * from.1, to.0 * to.1);
    Tensor::from_fn([n_out, n_in], |idx| {
        let (o, i) = (idx / n_in, idx % n_in);
        let (oy, ox) = (o / to.1, o % to.1);
        let (iy, ix) = (i / from.1, i % from.1);
        S::lit(ry[oy * from.0 + iy] * rx[ox * from.1 + ix])
    })
}

/// Bicubic resize of a positional table `[rows*cols, d]` from the `base`
/// grid to `target`, independently per channel.
pub fn resize_pos_embed<S: Scalar>(
    table: &Tensor<S>,
    base: (usize, usize),
    target: (usize, usize),
) -> Result<Tensor<S>> {
    if base.0 * base.1 == 0 || target.0 * target.1 == 0 {
        return Err(Error::invalid("positional grids must be non-empty"));
    }
    if table.rank() != 2 || table.shape()[0] != base.0 * base.1 {
        return Err(Error::shape(
            "resize_pos_embed",
            format!("table {:?} does not match base grid {base:?}", table.shape()),
        ));
    }
    if base == target {
        return Ok(table.clone());
    }
    grid_resize_matrix(base, target).matmul(table)
}
