use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Dense per-patch features on the `rows × cols` token grid.
///
/// Never contains class or register tokens. `coverage`, when present, counts
/// how many augmented views contributed to each location.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<S = f32> {
    rows: usize,
    cols: usize,
    dim: usize,
    values: Vec<S>,
    coverage: Option<Vec<u32>>,
}

impl<S: Scalar> FeatureGrid<S> {
    pub fn new(rows: usize, cols: usize, dim: usize, values: Vec<S>) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::invalid("feature grid extents must be positive"));
        }
        if values.len() != rows * cols * dim {
            return Err(Error::shape(
                "feature_grid",
                format!("{rows}x{cols}x{dim} needs {} values, got {}", rows * cols * dim, values.len()),
            ));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            values,
            coverage: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            values: vec![S::zero(); rows * cols * dim],
            coverage: None,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, dim: usize, mut f: impl FnMut(usize, usize, usize) -> S) -> Self {
        let mut values = Vec::with_capacity(rows * cols * dim);
        for r in 0..rows {
            for c in 0..cols {
                for k in 0..dim {
                    values.push(f(r, c, k));
                }
            }
        }
        Self {
            rows,
            cols,
            dim,
            values,
            coverage: None,
        }
    }

    /// From a `[rows*cols, dim]` tensor.
    pub fn from_tensor(rows: usize, cols: usize, t: &Tensor<S>) -> Result<Self> {
        match t.shape() {
            [n, d] if *n == rows * cols => Self::new(rows, cols, *d, t.data().to_vec()),
            s => Err(Error::shape("feature_grid", format!("{s:?} is not [{}, d]", rows * cols))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new([self.rows * self.cols, self.dim], self.values.clone())
            .expect("grid extents are positive")
    }

    pub fn with_coverage(mut self, coverage: Vec<u32>) -> Result<Self> {
        if coverage.len() != self.rows * self.cols {
            return Err(Error::shape("coverage", format!("{} counts for {} cells", coverage.len(), self.rows * self.cols)));
        }
        self.coverage = Some(coverage);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn coverage(&self) -> Option<&[u32]> {
        self.coverage.as_deref()
    }

    pub fn token(&self, row: usize, col: usize) -> &[S] {
        let i = (row * self.cols + col) * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn token_mut(&mut self, row: usize, col: usize) -> &mut [S] {
        let i = (row * self.cols + col) * self.dim;
        &mut self.values[i..i + self.dim]
    }

    /// Tokens in row-major order.
    pub fn tokens(&self) -> impl Iterator<Item = &[S]> {
        self.values.chunks(self.dim)
    }

    pub fn same_extents(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.dim == other.dim
    }

    /// Per-token L2 norms, row-major.
    pub fn norms(&self) -> Vec<S> {
        self.tokens()
            .map(|t| t.iter().map(|&v| v * v).sum::<S>().sqrt())
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> FeatureGrid<T> {
        FeatureGrid {
            rows: self.rows,
            cols: self.cols,
            dim: self.dim,
            values: self.values.iter().map(|v| T::lit(v.as_f64())).collect(),
            coverage: self.coverage.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
