//! Kronecker-product algebra for two factors.
//!
//! For `B` of shape `m1 × n1` and `C` of shape `m2 × n2` the product
//! `B ⊗ C` is `(m1·m2) × (n1·n2)` with
//! `(B ⊗ C)[i1·m2 + i2, j1·n2 + j2] = B[i1, j1] · C[i2, j2]`.
//!
//! Products with a vector never build the full matrix. With row-major
//! storage, reshaping `x` into the `n1 × n2` matrix `X` (row `j1` holds
//! `x[j1·n2 .. (j1+1)·n2]`) gives `(B ⊗ C) x = vec(B · X · Cᵀ)`, read back
//! row-major.

use alloc::vec;
use alloc::vec::Vec;

use crate::dense::{axpy, dot, DenseMatrix};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct KronFactorPair {
    b: DenseMatrix,
    c: DenseMatrix,
}

/// Gradients of a scalar loss through `y = (B ⊗ C) x`.
#[derive(Clone, Debug, PartialEq)]
pub struct KronGrads {
    pub b: DenseMatrix,
    pub c: DenseMatrix,
    pub x: Vec<f64>,
}

/// Factor shapes `(m1, n1)` and `(m2, n2)` for a Kronecker pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactorShapes {
    pub b: (usize, usize),
    pub c: (usize, usize),
}

impl FactorShapes {
    pub fn product_shape(&self) -> (usize, usize) {
        (self.b.0 * self.c.0, self.b.1 * self.c.1)
    }

    pub fn param_count(&self) -> usize {
        self.b.0 * self.b.1 + self.c.0 * self.c.1
    }
}

impl KronFactorPair {
    pub fn new(b: DenseMatrix, c: DenseMatrix) -> Result<Self> {
        b.rows()
            .checked_mul(c.rows())
            .zip(b.cols().checked_mul(c.cols()))
            .and_then(|(r, k)| r.checked_mul(k))
            .ok_or(Error::Overflow("KronFactorPair::new"))?;
        Ok(Self { b, c })
    }

    /// Factors drawn from `uniform(-scale, scale)`.
    pub fn random(shapes: FactorShapes, scale: f64, rng: &mut Rng) -> Result<Self> {
        let b = DenseMatrix::from_fn(shapes.b.0, shapes.b.1, |_, _| rng.uniform(-scale, scale));
        let c = DenseMatrix::from_fn(shapes.c.0, shapes.c.1, |_, _| rng.uniform(-scale, scale));
        Self::new(b, c)
    }

    #[inline]
    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    #[inline]
    pub fn c(&self) -> &DenseMatrix {
        &self.c
    }

    pub fn b_mut(&mut self) -> &mut DenseMatrix {
        &mut self.b
    }

    pub fn c_mut(&mut self) -> &mut DenseMatrix {
        &mut self.c
    }

    /// Mutable access to both factors at once.
    pub fn factors_mut(&mut self) -> (&mut DenseMatrix, &mut DenseMatrix) {
        (&mut self.b, &mut self.c)
    }

    pub fn factor_shapes(&self) -> FactorShapes {
        FactorShapes {
            b: self.b.shape(),
            c: self.c.shape(),
        }
    }

    /// `(m1·m2, n1·n2)`.
    pub fn shape(&self) -> (usize, usize) {
        self.factor_shapes().product_shape()
    }

    pub fn param_count(&self) -> usize {
        self.b.len() + self.c.len()
    }

    pub fn materialize(&self) -> Result<DenseMatrix> {
        let (m1, n1) = self.b.shape();
        let (m2, n2) = self.c.shape();
        let rows = m1.checked_mul(m2).ok_or(Error::Overflow("kron_materialize"))?;
        let cols = n1.checked_mul(n2).ok_or(Error::Overflow("kron_materialize"))?;
        rows.checked_mul(cols)
            .ok_or(Error::Overflow("kron_materialize"))?;
        let mut out = DenseMatrix::zeros(rows, cols);
        let data = out.as_mut_slice();
        for i1 in 0..m1 {
            for i2 in 0..m2 {
                let row = &mut data[(i1 * m2 + i2) * cols..(i1 * m2 + i2 + 1) * cols];
                for j1 in 0..n1 {
                    let bij = self.b.get(i1, j1);
                    for (dst, &cv) in row[j1 * n2..(j1 + 1) * n2].iter_mut().zip(self.c.row(i2)) {
                        *dst = bij * cv;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (m, n) = self.shape();
        if x.len() != n {
            return Err(Error::shape("kron_matvec", n, x.len()));
        }
        let mut out = vec![0.0; m];
        self.matvec_into(x, &mut out);
        Ok(out)
    }

    /// Writes `(B ⊗ C) x` into `out`. Lengths are the caller's contract.
    pub(crate) fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        let (m1, n1) = self.b.shape();
        let (m2, n2) = self.c.shape();
        debug_assert_eq!(x.len(), n1 * n2);
        debug_assert_eq!(out.len(), m1 * m2);
        // T = X · Cᵀ, n1 × m2
        let mut t = vec![0.0; n1 * m2];
        for j1 in 0..n1 {
            let xr = &x[j1 * n2..(j1 + 1) * n2];
            for i2 in 0..m2 {
                t[j1 * m2 + i2] = dot(xr, self.c.row(i2));
            }
        }
        // Y = B · T, m1 × m2
        out.iter_mut().for_each(|v| *v = 0.0);
        for i1 in 0..m1 {
            let yr = &mut out[i1 * m2..(i1 + 1) * m2];
            for (j1, &bij) in self.b.row(i1).iter().enumerate() {
                axpy(bij, &t[j1 * m2..(j1 + 1) * m2], yr);
            }
        }
    }

    /// Accumulates `∂L/∂B`, `∂L/∂C` and `∂L/∂x` given `g_out = ∂L/∂y`.
    pub(crate) fn grad_accumulate(
        &self,
        x: &[f64],
        g_out: &[f64],
        g_b: &mut [f64],
        g_c: &mut [f64],
        g_x: &mut [f64],
    ) {
        let (m1, n1) = self.b.shape();
        let (m2, n2) = self.c.shape();
        debug_assert_eq!(g_out.len(), m1 * m2);
        // g_B = G · Tᵀ with T = X · Cᵀ
        let mut t = vec![0.0; n1 * m2];
        for j1 in 0..n1 {
            let xr = &x[j1 * n2..(j1 + 1) * n2];
            for i2 in 0..m2 {
                t[j1 * m2 + i2] = dot(xr, self.c.row(i2));
            }
        }
        for i1 in 0..m1 {
            let gr = &g_out[i1 * m2..(i1 + 1) * m2];
            for j1 in 0..n1 {
                g_b[i1 * n1 + j1] += dot(gr, &t[j1 * m2..(j1 + 1) * m2]);
            }
        }
        // S = Bᵀ · G, n1 × m2
        let mut s = vec![0.0; n1 * m2];
        for i1 in 0..m1 {
            let gr = &g_out[i1 * m2..(i1 + 1) * m2];
            for (j1, &bij) in self.b.row(i1).iter().enumerate() {
                axpy(bij, gr, &mut s[j1 * m2..(j1 + 1) * m2]);
            }
        }
        // g_C = Sᵀ · X, g_X = S · C
        for j1 in 0..n1 {
            let xr = &x[j1 * n2..(j1 + 1) * n2];
            let gxr = &mut g_x[j1 * n2..(j1 + 1) * n2];
            for i2 in 0..m2 {
                let sv = s[j1 * m2 + i2];
                axpy(sv, xr, &mut g_c[i2 * n2..(i2 + 1) * n2]);
                axpy(sv, self.c.row(i2), gxr);
            }
        }
    }

    /// Gradients of `L` with respect to `B`, `C` and `x` for `y = (B ⊗ C) x`.
    pub fn matvec_grad(&self, x: &[f64], g_out: &[f64]) -> Result<KronGrads> {
        let (m, n) = self.shape();
        if x.len() != n {
            return Err(Error::shape("kron_matvec_grad (x)", n, x.len()));
        }
        if g_out.len() != m {
            return Err(Error::shape("kron_matvec_grad (g_out)", m, g_out.len()));
        }
        let mut g = KronGrads {
            b: DenseMatrix::zeros(self.b.rows(), self.b.cols()),
            c: DenseMatrix::zeros(self.c.rows(), self.c.cols()),
            x: vec![0.0; n],
        };
        self.grad_accumulate(x, g_out, g.b.as_mut_slice(), g.c.as_mut_slice(), &mut g.x);
        Ok(g)
    }
}

/// Picks `m = m1·m2`, `n = n1·n2` minimizing `m1·n1 + m2·n2`.
///
/// Candidates where every factor dimension is at least 2 are preferred;
/// degenerate splits are only used when `m` or `n` admits nothing else.
/// Ties go to the squarest factors (smallest largest dimension), then to
/// the smallest `(m1, n1)`.
pub fn select_factor_shapes(m: usize, n: usize) -> Result<FactorShapes> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "cannot factor a {m}x{n} matrix"
        )));
    }
    let dm = divisors(m);
    let dn = divisors(n);
    let mut best: Option<(bool, usize, usize, FactorShapes)> = None;
    for &m1 in &dm {
        for &n1 in &dn {
            let shapes = FactorShapes {
                b: (m1, n1),
                c: (m / m1, n / n1),
            };
            let degenerate = m1 < 2 || n1 < 2 || m / m1 < 2 || n / n1 < 2;
            let widest = m1.max(n1).max(m / m1).max(n / n1);
            let key = (degenerate, shapes.param_count(), widest, shapes);
            let better = match &best {
                None => true,
                Some((d, p, w, _)) => (key.0, key.1, key.2) < (*d, *p, *w),
            };
            if better {
                best = Some(key);
            }
        }
    }
    Ok(best.expect("1 divides everything").3)
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}
