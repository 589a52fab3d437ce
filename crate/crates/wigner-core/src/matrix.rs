//! Dense Hermitian matrices with bit-exact conjugate symmetry, plus the
//! pluggable eigensolver backend contract.

use nalgebra::DMatrix;
use num_complex::Complex64;
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("dimension must be at least 1")]
    EmptyDimension,
    #[error("eigensolver backend failed: {0}")]
    BackendFailure(String),
    #[error("matrix i/o: {0}")]
    Io(#[from] io::Error),
    #[error("binary matrix payload is truncated or oversized")]
    MalformedPayload,
}

/// Dense `N x N` Hermitian matrix.  `M[j][i] = conj(M[i][j])` holds
/// bit-exactly and diagonal imaginary parts are exactly zero; both are
/// enforced at every construction site.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix {
    n: usize,
    data: Vec<Complex64>, // row major
}

impl HermitianMatrix {
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            data: vec![Complex64::ZERO; n * n],
        }
    }

    /// Build from the upper triangle: `f(i, j)` is consulted for
    /// `i <= j`; the diagonal keeps only the real part and the lower
    /// triangle is the exact conjugate.
    pub fn from_upper_triangle(n: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut m = Self::zero(n);
        for i in 0..n {
            let d = f(i, i);
            m.data[i * n + i] = Complex64::new(d.re, 0.0);
            for j in i + 1..n {
                let z = f(i, j);
                m.data[i * n + j] = z;
                m.data[j * n + i] = z.conj();
            }
        }
        m
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.n + j]
    }

    /// Add `delta` to entry `(i, j)`, mirroring the conjugate to keep
    /// Hermiticity; on the diagonal only the real part is applied.
    pub fn perturb_entry(&mut self, i: usize, j: usize, delta: Complex64) {
        if i == j {
            let cur = self.data[i * self.n + i];
            self.data[i * self.n + i] = Complex64::new(cur.re + delta.re, 0.0);
        } else {
            let z = self.data[i * self.n + j] + delta;
            self.data[i * self.n + j] = z;
            self.data[j * self.n + i] = z.conj();
        }
    }

    /// Bitwise Hermiticity check: real parts identical, imaginary parts
    /// exact negations.  The two zero signs are identified, otherwise a
    /// zero matrix could never pass its own conjugate check.
    pub fn is_hermitian_bitexact(&self) -> bool {
        fn bits(x: f64) -> u64 {
            if x == 0.0 {
                0
            } else {
                x.to_bits()
            }
        }
        for i in 0..self.n {
            if bits(self.data[i * self.n + i].im) != 0 {
                return false;
            }
            for j in i + 1..self.n {
                let upper = self.data[i * self.n + j];
                let lower = self.data[j * self.n + i];
                if bits(upper.re) != bits(lower.re) || bits(upper.im) != bits(-lower.im) {
                    return false;
                }
            }
        }
        true
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.n).map(|i| self.data[i * self.n + i]).sum()
    }

    pub fn to_dmatrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// `Tr M^k` for every `k` in `1..=max_power`, via repeated products
    /// (no eigendecomposition).  Uses `Tr(A B) = sum_ij A_ij conj(B_ij)`
    /// for Hermitian `A`, `B` to halve the number of multiplications.
    pub fn trace_powers(&self, max_power: u32) -> Vec<f64> {
        let m = self.to_dmatrix();
        let mut powers: Vec<DMatrix<Complex64>> = vec![m.clone()];
        // need explicit powers only up to ceil(max_power / 2)
        while 2 * powers.len() < max_power as usize {
            let next = powers.last().unwrap() * &m;
            powers.push(next);
        }
        let hermitian_product_trace = |a: &DMatrix<Complex64>, b: &DMatrix<Complex64>| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
        };
        (1..=max_power)
            .map(|k| {
                let k = k as usize;
                if k == 1 {
                    self.trace().re
                } else {
                    let a = &powers[k / 2 - 1];
                    let b = &powers[k - k / 2 - 1];
                    hermitian_product_trace(a, b)
                }
            })
            .collect()
    }

    /// Little-endian binary dump: 8-byte dimension header, then the
    /// row-major entries as (re, im) f64 pairs.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<(), MatrixError> {
        w.write_all(&(self.n as u64).to_le_bytes())?;
        for z in &self.data {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self, MatrixError> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)?;
        let n = u64::from_le_bytes(header) as usize;
        if n == 0 {
            return Err(MatrixError::EmptyDimension);
        }
        let mut data = Vec::with_capacity(n * n);
        let mut buf = [0u8; 16];
        for _ in 0..n * n {
            r.read_exact(&mut buf)?;
            let re = f64::from_le_bytes(buf[..8].try_into().unwrap());
            let im = f64::from_le_bytes(buf[8..].try_into().unwrap());
            data.push(Complex64::new(re, im));
        }
        let m = Self { n, data };
        if !m.is_hermitian_bitexact() {
            return Err(MatrixError::MalformedPayload);
        }
        Ok(m)
    }
}

/// Contract for dense Hermitian eigensolvers: all-real spectrum with
/// residual `||M v - lambda v|| <= tol * ||M||` at working precision.
pub trait HermitianEigenSolver: Sync {
    /// Eigenvalues of `m` in ascending order.
    fn eigenvalues(&self, m: &HermitianMatrix) -> Result<Vec<f64>, MatrixError>;

    /// Eigenpairs `(values ascending, eigenvector columns)`; used by the
    /// residual spot-checks.
    fn eigenpairs(&self, m: &HermitianMatrix)
        -> Result<(Vec<f64>, DMatrix<Complex64>), MatrixError>;
}

/// Default backend built on nalgebra's Hermitian eigendecomposition.
#[derive(Debug, Default, Clone, Copy)]
pub struct NalgebraEigenSolver;

impl HermitianEigenSolver for NalgebraEigenSolver {
    fn eigenvalues(&self, m: &HermitianMatrix) -> Result<Vec<f64>, MatrixError> {
        if m.dimension() == 0 {
            return Err(MatrixError::EmptyDimension);
        }
        let se = m.to_dmatrix().symmetric_eigen();
        let mut values: Vec<f64> = se.eigenvalues.iter().cloned().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MatrixError::BackendFailure(
                "non-finite eigenvalue".to_string(),
            ));
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
        Ok(values)
    }

    fn eigenpairs(
        &self,
        m: &HermitianMatrix,
    ) -> Result<(Vec<f64>, DMatrix<Complex64>), MatrixError> {
        if m.dimension() == 0 {
            return Err(MatrixError::EmptyDimension);
        }
        let se = m.to_dmatrix().symmetric_eigen();
        let mut order: Vec<usize> = (0..se.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| {
            se.eigenvalues[a]
                .partial_cmp(&se.eigenvalues[b])
                .expect("finite eigenvalues")
        });
        let values: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
        let vectors = DMatrix::from_fn(m.dimension(), m.dimension(), |r, c| {
            se.eigenvectors[(r, order[c])]
        });
        Ok((values, vectors))
    }
}
