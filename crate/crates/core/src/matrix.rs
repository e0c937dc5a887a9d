use crate::error::{Error, Result};

/// Dense symmetric nonnegative matrix with zero diagonal, stored in full
/// row-major form.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl AffinityMatrix {
    pub fn zeros(n: usize) -> Self {
        AffinityMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Builds from explicit rows, checking shape, symmetry, sign and diagonal.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = AffinityMatrix::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: row.len(),
                });
            }
            m.data[i * n..(i + 1) * n].copy_from_slice(row);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) != 0.0 {
                return Err(Error::InvalidParameter(format!("nonzero diagonal at {i}")));
            }
            for j in 0..self.n {
                let v = self.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidParameter(format!("entry ({i}, {j}) = {v}")));
                }
                if v != self.get(j, i) {
                    return Err(Error::InvalidParameter(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    /// `out = A x`, accumulated as a sum of rows so zero entries of `x`
    /// cost nothing.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (xj, row) in x.iter().zip(self.data.chunks_exact(self.n)) {
            if *xj == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(row) {
                *o += xj * a;
            }
        }
    }

    /// `x^T A x`
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.data
            .chunks_exact(self.n)
            .zip(x)
            .map(|(row, xi)| xi * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    /// Copy with the given nodes' rows and columns zeroed.
    pub fn without_nodes(&self, nodes: &[usize]) -> Self {
        let mut m = self.clone();
        for &i in nodes {
            for j in 0..self.n {
                m.set_sym(i, j, 0.0);
            }
        }
        m
    }
}
