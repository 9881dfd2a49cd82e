//! Chunked products against the projection basis.
//!
//! `O·P` (with `O` a motion or forward operator) is never stored whole; its
//! rows are produced `chunk_rows` at a time and folded into `r × r` Gram
//! matrices and `r`-vectors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_len, Error, Result};
use crate::linops::LinearOperator;
use crate::memory::{Tracked, Workspace};

/// Calls `f(start, OPc, Pc)` for successive row chunks of `O·P`. `Pc` holds
/// the matching rows of `P` when `with_p` is set (requires a square `O`),
/// otherwise it is empty.
pub(crate) fn for_each_chunk<F>(
    op: &LinearOperator,
    p: &DMatrix<f64>,
    with_p: bool,
    ws: &Workspace,
    mut f: F,
) -> Result<()>
where
    F: FnMut(usize, &DMatrix<f64>, &DMatrix<f64>) -> Result<()>,
{
    let rows = op.rows();
    let r = p.ncols();
    if with_p {
        check_len("operator rows against basis rows", p.nrows(), rows)?;
    }
    let plan = op.row_block(p)?;
    let step = ws.chunk_rows.min(rows.max(1));
    let mut opc = ws.meter.zeros(step, r);
    let mut pc = ws.meter.zeros(if with_p { step } else { 0 }, r);
    let mut start = 0;
    while start < rows {
        let len = step.min(rows - start);
        if len != opc.nrows() {
            opc = ws.meter.zeros(len, r);
            if with_p {
                pc = ws.meter.zeros(len, r);
            }
        }
        plan.fill(start, &mut opc);
        if with_p {
            pc.copy_from(&p.rows(start, len));
        }
        f(start, &opc, &pc)?;
        start += len;
    }
    Ok(())
}

/// Weighted Gram products of a chunked pass.
pub(crate) struct Gram {
    /// `(OP)ᵀ W (OP)`
    pub oo: Tracked<DMatrix<f64>>,
    /// `(OP)ᵀ W P`
    pub op: Option<Tracked<DMatrix<f64>>>,
    /// `Pᵀ W P`
    pub pp: Option<Tracked<DMatrix<f64>>>,
    /// `(OP)ᵀ W v` for each requested `v`.
    pub ov: Vec<DVector<f64>>,
}

pub(crate) fn gram_pass(
    op: &LinearOperator,
    p: &DMatrix<f64>,
    w: &DVector<f64>,
    vecs: &[&DVector<f64>],
    with_op: bool,
    with_pp: bool,
    ws: &Workspace,
) -> Result<Gram> {
    check_len("Gram weights", op.rows(), w.len())?;
    for v in vecs {
        check_len("Gram vector", op.rows(), v.len())?;
    }
    let r = p.ncols();
    let mut oo = ws.meter.zeros(r, r);
    let mut op_p = with_op.then(|| ws.meter.zeros(r, r));
    let mut pp = with_pp.then(|| ws.meter.zeros(r, r));
    let mut ov = vec![DVector::zeros(r); vecs.len()];
    let mut scratch: Option<Tracked<DMatrix<f64>>> = None;
    for_each_chunk(op, p, with_op || with_pp, ws, |start, opc, pc| {
        let len = opc.nrows();
        if scratch.as_ref().is_none_or(|s| s.nrows() != len) {
            scratch = Some(ws.meter.zeros(len, r));
        }
        let wo = scratch.as_mut().expect("scratch allocated");
        wo.copy_from(opc);
        let wc = w.rows(start, len);
        for mut row_scaled in wo.column_iter_mut() {
            row_scaled.component_mul_assign(&wc);
        }
        oo.gemm_tr(1.0, opc, wo, 1.0);
        if let Some(m) = op_p.as_mut() {
            m.gemm_tr(1.0, wo, pc, 1.0);
        }
        if let Some(m) = pp.as_mut() {
            // Reuse the buffer for W·Pc once W·OPc is no longer needed.
            for (acc, v) in ov.iter_mut().zip(vecs) {
                acc.gemv_tr(1.0, wo, &v.rows(start, len), 1.0);
            }
            wo.copy_from(pc);
            for mut col in wo.column_iter_mut() {
                col.component_mul_assign(&wc);
            }
            m.gemm_tr(1.0, pc, wo, 1.0);
        } else {
            for (acc, v) in ov.iter_mut().zip(vecs) {
                acc.gemv_tr(1.0, wo, &v.rows(start, len), 1.0);
            }
        }
        Ok(())
    })?;
    symmetrize(&mut oo);
    if let Some(m) = pp.as_mut() {
        symmetrize(m);
    }
    Ok(Gram {
        oo,
        op: op_p,
        pp,
        ov,
    })
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetric square root of a PSD matrix. Negative eigenvalues down to
/// `−1e-8·max|λ|` are treated as roundoff and clipped to zero.
pub(crate) fn psd_sqrt(m: &DMatrix<f64>, ws: &Workspace, what: &str) -> Result<Tracked<DMatrix<f64>>> {
    let n = m.nrows();
    // Eigen-solver copies: input, vectors and the product.
    let _scratch = ws.meter.charge(2 * n * n * 8);
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.amax();
    if !top.is_finite() {
        return Err(Error::Numeric(format!("{what} has non-finite entries")));
    }
    let low = eig.eigenvalues.min();
    if low < -1e-8 * top {
        return Err(Error::Numeric(format!(
            "{what} is not positive semidefinite (eigenvalue {low:e}, largest {top:e})"
        )));
    }
    let mut scaled = eig.eigenvectors.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[k].max(0.0).sqrt();
    }
    let mut out = ws.meter.zeros(n, n);
    out.gemm_tr(1.0, &scaled.transpose(), &eig.eigenvectors.transpose(), 0.0);
    symmetrize(&mut out);
    Ok(out)
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub(crate) fn spd_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite{}", condition_note(&m))))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    debug_assert_eq!(inv.nrows(), n);
    Ok(inv)
}

/// Eigenvalue-ratio description for error messages.
pub(crate) fn condition_note(m: &DMatrix<f64>) -> String {
    let eig = SymmetricEigen::new(m.clone());
    let hi = eig.eigenvalues.max();
    let lo = eig.eigenvalues.min();
    format!(" (eigenvalues in [{lo:e}, {hi:e}], condition ≈ {:e})", hi.abs() / lo.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::linops::SparseMatrix;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gram_pass_matches_dense_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 37;
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if rng.random::<f64>() < 0.2 {
                    t.push((i, j, rng.random_range(-1.0..1.0)));
                }
            }
        }
        let sp = SparseMatrix::from_triplets(n, n, t).unwrap();
        let dense = sp.to_dense();
        let op = LinearOperator::Sparse(sp);
        let p = rand_mat(&mut rng, n, 5);
        let w = DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0));
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let ws = Workspace::with_chunk_rows(8);
        let g = gram_pass(&op, &p, &w, &[&v], true, true, &ws).unwrap();
        let mp = &dense * &p;
        let wd = DMatrix::from_diagonal(&w);
        let oo = mp.transpose() * &wd * &mp;
        let opp = mp.transpose() * &wd * &p;
        let pp = p.transpose() * &wd * &p;
        let ov = mp.transpose() * &wd * &v;
        assert!((&*g.oo - oo).amax() < 1e-12);
        assert!((&**g.op.as_ref().unwrap() - opp).amax() < 1e-12);
        assert!((&**g.pp.as_ref().unwrap() - pp).amax() < 1e-12);
        assert!((&g.ov[0] - ov).amax() < 1e-12);
        drop(g);
        assert_eq!(ws.meter.current_bytes(), 0);
    }

    #[test]
    fn rectangular_operator_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sp = SparseMatrix::from_triplets(
            7,
            12,
            (0..30).map(|_| (rng.random_range(0..7), rng.random_range(0..12), 1.0)).collect(),
        )
        .unwrap();
        let dense = sp.to_dense();
        let p = rand_mat(&mut rng, 12, 3);
        let w = DVector::from_element(7, 2.0);
        let g = gram_pass(&LinearOperator::Sparse(sp), &p, &w, &[], false, false, &Workspace::with_chunk_rows(3)).unwrap();
        let hp = dense * &p;
        assert!((&*g.oo - hp.transpose() * &hp * 2.0).amax() < 1e-12);
    }

    #[test]
    fn sqrt_of_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = rand_mat(&mut rng, 6, 4);
        let m = &b * b.transpose();
        let ws = Workspace::new();
        let a = psd_sqrt(&m, &ws, "test").unwrap();
        assert!((&*a * &*a - &m).amax() < 1e-12);
        assert!((&*a - a.transpose()).amax() == 0.0);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(psd_sqrt(&bad, &ws, "bad").unwrap_err().is_numeric());
    }
}
