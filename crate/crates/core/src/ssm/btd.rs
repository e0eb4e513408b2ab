//! Block-tridiagonal matrices plus low-rank corrections.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};

/// Symmetric block-tridiagonal matrix with `T` diagonal blocks `D_t` and
/// sub-diagonal blocks `B_t` (block `(t, t−1)`, `t ≥ 1`).
#[derive(Clone, Debug)]
pub struct BlockTridiagonal {
    pub diag: Vec<DMatrix<f64>>,
    /// `sub[t − 1]` is block `(t, t−1)`.
    pub sub: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn new(diag: Vec<DMatrix<f64>>, sub: Vec<DMatrix<f64>>) -> Self {
        assert!(diag.is_empty() || sub.len() + 1 == diag.len(), "need T − 1 sub-diagonal blocks");
        Self { diag, sub }
    }

    pub fn identity(t_len: usize, b: usize) -> Self {
        Self::new(vec![DMatrix::identity(b, b); t_len], vec![DMatrix::zeros(b, b); t_len.saturating_sub(1)])
    }

    pub fn n_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.diag.first().map_or(0, |d| d.nrows())
    }

    pub fn dim(&self) -> usize {
        self.n_blocks() * self.block_size()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let b = self.block_size();
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (t, d) in self.diag.iter().enumerate() {
            m.view_mut((t * b, t * b), (b, b)).copy_from(d);
        }
        for (i, s) in self.sub.iter().enumerate() {
            let t = i + 1;
            m.view_mut((t * b, (t - 1) * b), (b, b)).copy_from(s);
            m.view_mut(((t - 1) * b, t * b), (b, b)).copy_from(&s.transpose());
        }
        m
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let b = self.block_size();
        let mut out = DVector::zeros(self.dim());
        for (t, d) in self.diag.iter().enumerate() {
            let mut r = d * x.rows(t * b, b);
            if t > 0 {
                r += &self.sub[t - 1] * x.rows((t - 1) * b, b);
            }
            if t + 1 < self.n_blocks() {
                r += self.sub[t].tr_mul(&x.rows((t + 1) * b, b));
            }
            out.rows_mut(t * b, b).copy_from(&r);
        }
        out
    }

    /// Block Cholesky `A = L Lᵀ` with `L_t L_tᵀ = D_t − M_t M_tᵀ` and
    /// `M_t = B_t L_{t−1}⁻ᵀ`.
    pub fn cholesky(&self) -> Result<BlockCholesky> {
        let mut l = Vec::with_capacity(self.n_blocks());
        let mut m: Vec<DMatrix<f64>> = Vec::with_capacity(self.sub.len());
        for t in 0..self.n_blocks() {
            let mut d = self.diag[t].clone();
            if t > 0 {
                let lp: &Cholesky<f64, Dyn> = &l[t - 1];
                // M_t = B_t L_{t−1}⁻ᵀ, i.e. L_{t−1} M_tᵀ = B_tᵀ.
                let mt = lp.l_dirty().solve_lower_triangular(&self.sub[t - 1].transpose()).expect("non-singular factor").transpose();
                d -= &mt * mt.transpose();
                m.push(mt);
            }
            let c = Cholesky::new(d).ok_or_else(|| Error::Numerical(format!("block {t} of the tridiagonal core is not positive definite")))?;
            l.push(c);
        }
        Ok(BlockCholesky { l, m })
    }
}

/// Factor of a [`BlockTridiagonal`]: diagonal Cholesky blocks `L_t` and
/// sub-diagonal blocks `M_t` of the lower block-bidiagonal `L`.
#[derive(Clone, Debug)]
pub struct BlockCholesky {
    l: Vec<Cholesky<f64, Dyn>>,
    m: Vec<DMatrix<f64>>,
}

impl BlockCholesky {
    fn b(&self) -> usize {
        self.l.first().map_or(0, |c| c.l_dirty().nrows())
    }

    pub fn log_det(&self) -> f64 {
        self.l.iter().map(|c| 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()).sum()
    }

    /// `L⁻¹ x`.
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let b = self.b();
        let mut y = DMatrix::zeros(x.nrows(), x.ncols());
        for t in 0..self.l.len() {
            let mut r = x.rows(t * b, b).into_owned();
            if t > 0 {
                r -= &self.m[t - 1] * y.rows((t - 1) * b, b);
            }
            let s = self.l[t].l_dirty().solve_lower_triangular(&r).expect("non-singular factor");
            y.rows_mut(t * b, b).copy_from(&s);
        }
        y
    }

    /// `L⁻ᵀ y`.
    fn backward(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let b = self.b();
        let n = self.l.len();
        let mut x = DMatrix::zeros(y.nrows(), y.ncols());
        for t in (0..n).rev() {
            let mut r = y.rows(t * b, b).into_owned();
            if t + 1 < n {
                r -= self.m[t].tr_mul(&x.rows((t + 1) * b, b));
            }
            let s = self.l[t].l_dirty().tr_solve_lower_triangular(&r).expect("non-singular factor");
            x.rows_mut(t * b, b).copy_from(&s);
        }
        x
    }

    /// Solves `A X = B` for a block of right-hand sides.
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.backward(&self.forward(rhs))
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        DVector::from_column_slice(self.solve_matrix(&m).as_slice())
    }

    /// Diagonal and sub-diagonal blocks of `A⁻¹` by selected inversion,
    /// sweeping from the last block: `Σ_{t,t+1} = −L_t⁻ᵀ M_{t+1}ᵀ Σ_{t+1,t+1}`
    /// and `Σ_tt = L_t⁻ᵀ (L_t⁻¹ − M_{t+1}ᵀ Σ_{t+1,t})`.
    pub fn inverse_band(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let n = self.l.len();
        let b = self.b();
        let mut diag = vec![DMatrix::zeros(b, b); n];
        let mut sub = vec![DMatrix::zeros(b, b); n.saturating_sub(1)];
        for t in (0..n).rev() {
            let lt = self.l[t].l_dirty();
            let l_inv = lt.solve_lower_triangular(&DMatrix::identity(b, b)).expect("non-singular factor");
            if t + 1 == n {
                diag[t] = l_inv.tr_mul(&l_inv);
                continue;
            }
            let upper = -lt.tr_solve_lower_triangular(&(self.m[t].transpose() * &diag[t + 1])).expect("non-singular factor");
            // upper = Σ_{t,t+1}; Σ_{t+1,t} = upperᵀ.
            let s_next_t = upper.transpose();
            let dd = lt.tr_solve_lower_triangular(&(l_inv - self.m[t].transpose() * &s_next_t)).expect("non-singular factor");
            diag[t] = (&dd + dd.transpose()) * 0.5;
            sub[t] = s_next_t;
        }
        (diag, sub)
    }
}

/// `Ḡ = Tri(D, B) + U Uᵀ`, the structured Gram matrix of a Markovian
/// constraint.
#[derive(Clone, Debug)]
pub struct BlockTridiagonalGram {
    pub core: BlockTridiagonal,
    /// Low-rank factor, `T·b × d_φ` (possibly with no columns).
    pub u: DMatrix<f64>,
}

impl BlockTridiagonalGram {
    pub fn new(core: BlockTridiagonal, u: DMatrix<f64>) -> Self {
        assert_eq!(u.nrows(), core.dim());
        Self { core, u }
    }

    pub fn dim(&self) -> usize {
        self.core.dim()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.core.dense() + &self.u * self.u.transpose()
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        self.core.mul_vec(x) + &self.u * self.u.tr_mul(x)
    }

    pub fn factor(&self) -> Result<GramFactorization> {
        let chol = self.core.cholesky()?;
        let z = chol.solve_matrix(&self.u);
        let p = self.u.ncols();
        let s = DMatrix::identity(p, p) + self.u.tr_mul(&z);
        let s = Cholesky::new(s).ok_or_else(|| Error::Numerical("capacitance matrix is not positive definite".into()))?;
        Ok(GramFactorization { chol, z, capacitance: s, u: self.u.clone() })
    }
}

/// Factorization of a [`BlockTridiagonalGram`]: block Cholesky of the core,
/// `Z = Tri⁻¹ U` and the Cholesky of `S = I + Uᵀ Z`.
#[derive(Clone, Debug)]
pub struct GramFactorization {
    chol: BlockCholesky,
    z: DMatrix<f64>,
    capacitance: Cholesky<f64, Dyn>,
    u: DMatrix<f64>,
}

impl GramFactorization {
    /// `Ḡ⁻¹ b = A⁻¹b − Z S⁻¹ Uᵀ A⁻¹ b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let x = self.chol.solve(b);
        if self.u.ncols() == 0 {
            return x;
        }
        let w = self.capacitance.solve(&self.u.tr_mul(&x));
        x - &self.z * w
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.chol.solve_matrix(b);
        if self.u.ncols() == 0 {
            return x;
        }
        let w = self.capacitance.solve(&self.u.tr_mul(&x));
        x - &self.z * w
    }

    /// `log det Tri + log det S` by the matrix determinant lemma.
    pub fn log_det(&self) -> f64 {
        let s: f64 = self.capacitance.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        self.chol.log_det() + s
    }

    /// Diagonal and sub-diagonal blocks of `Ḡ⁻¹`.
    pub fn inverse_band(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let (mut diag, mut sub) = self.chol.inverse_band();
        if self.u.ncols() == 0 {
            return (diag, sub);
        }
        let b = diag.first().map_or(0, |d| d.nrows());
        // Z S⁻¹ Zᵀ = (Z L_S⁻ᵀ)(Z L_S⁻ᵀ)ᵀ.
        let y = self
            .capacitance
            .l_dirty()
            .solve_lower_triangular(&self.z.transpose())
            .expect("non-singular factor")
            .transpose();
        for t in 0..diag.len() {
            let yt = y.rows(t * b, b);
            diag[t] -= &yt * yt.transpose();
            if t > 0 {
                sub[t - 1] -= &yt * y.rows((t - 1) * b, b).transpose();
            }
        }
        (diag, sub)
    }
}

/// General (nonsymmetric) block-tridiagonal matrix.
#[derive(Clone, Debug)]
pub struct BlockTridiagonalGeneral {
    pub diag: Vec<DMatrix<f64>>,
    /// Block `(t, t−1)` at index `t − 1`.
    pub lower: Vec<DMatrix<f64>>,
    /// Block `(t−1, t)` at index `t − 1`.
    pub upper: Vec<DMatrix<f64>>,
}

impl BlockTridiagonalGeneral {
    pub fn dense(&self) -> DMatrix<f64> {
        let b = self.diag.first().map_or(0, |d| d.nrows());
        let n = self.diag.len() * b;
        let mut m = DMatrix::zeros(n, n);
        for (t, d) in self.diag.iter().enumerate() {
            m.view_mut((t * b, t * b), (b, b)).copy_from(d);
        }
        for i in 0..self.lower.len() {
            let t = i + 1;
            m.view_mut((t * b, (t - 1) * b), (b, b)).copy_from(&self.lower[i]);
            m.view_mut(((t - 1) * b, t * b), (b, b)).copy_from(&self.upper[i]);
        }
        m
    }

    /// Block LU without inter-block pivoting: `Δ_t = D_t − L_t Δ_{t−1}⁻¹ U_t`.
    pub fn lu(&self) -> Result<BlockLu> {
        let mut pivots: Vec<LU<f64, Dyn, Dyn>> = Vec::with_capacity(self.diag.len());
        for t in 0..self.diag.len() {
            let mut d = self.diag[t].clone();
            if t > 0 {
                let corr = pivots[t - 1]
                    .solve(&self.upper[t - 1])
                    .ok_or_else(|| Error::Numerical(format!("singular pivot block {}", t - 1)))?;
                d -= &self.lower[t - 1] * corr;
            }
            let lu = d.lu();
            if !lu.is_invertible() {
                return Err(Error::Numerical(format!("singular pivot block {t}")));
            }
            pivots.push(lu);
        }
        Ok(BlockLu { pivots, lower: self.lower.clone(), upper: self.upper.clone() })
    }
}

/// LU factor of a [`BlockTridiagonalGeneral`].
#[derive(Clone, Debug)]
pub struct BlockLu {
    pivots: Vec<LU<f64, Dyn, Dyn>>,
    lower: Vec<DMatrix<f64>>,
    upper: Vec<DMatrix<f64>>,
}

impl BlockLu {
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.pivots.len();
        let b = self.lower.first().or(self.upper.first()).map_or_else(|| rhs.nrows() / n.max(1), |m| m.nrows());
        let fail = || Error::Numerical("block LU solve failed".into());
        // Forward: y_t = r_t − L_t Δ_{t−1}⁻¹ y_{t−1}.
        let mut y = rhs.clone();
        for t in 1..n {
            let prev = self.pivots[t - 1].solve(&y.rows((t - 1) * b, b).into_owned()).ok_or_else(fail)?;
            let upd = &self.lower[t - 1] * prev;
            let mut r = y.rows_mut(t * b, b);
            r -= upd;
        }
        // Backward: x_t = Δ_t⁻¹ (y_t − U_{t+1} x_{t+1}).
        let mut x = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for t in (0..n).rev() {
            let mut r = y.rows(t * b, b).into_owned();
            if t + 1 < n {
                r -= &self.upper[t] * x.rows((t + 1) * b, b);
            }
            let s = self.pivots[t].solve(&r).ok_or_else(fail)?;
            x.rows_mut(t * b, b).copy_from(&s);
        }
        Ok(x)
    }
}

/// Solves `Ḡ x = b`.
pub fn btd_solve(gram: &BlockTridiagonalGram, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(gram.factor()?.solve(b))
}

/// `log det Ḡ`.
pub fn btd_logdet(gram: &BlockTridiagonalGram) -> Result<f64> {
    Ok(gram.factor()?.log_det())
}
