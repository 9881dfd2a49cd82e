//! Matrix-free linear operators.
//!
//! Forward projectors, warps and DMD motion models are all exposed through
//! [`LinearOperator`], which only offers matrix-vector and matrix-block
//! products. Dense materialisation is available to tests and the
//! `dense-oracle` feature.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::memory::Footprint;

/// Sequential left-to-right dot product. Used wherever two code paths must
/// agree to the last bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed and
    /// zeros dropped.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(r, c, v) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::Domain(format!(
                    "entry ({r}, {c}) outside a {rows}x{cols} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::Domain(format!("non-finite entry at ({r}, {c})")));
            }
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut k = 0;
        while k < triplets.len() {
            let (r, c, mut v) = triplets[k];
            k += 1;
            while k < triplets.len() && triplets[k].0 == r && triplets[k].1 == c {
                v += triplets[k].2;
                k += 1;
            }
            if v != 0.0 {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
            }
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds row by row; each row's entries must have strictly increasing
    /// column indices. Zero values are skipped.
    pub fn from_rows<I>(rows: usize, cols: usize, row_entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<(usize, f64)>>,
    {
        let mut indptr = Vec::with_capacity(rows + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (r, entries) in row_entries.into_iter().enumerate() {
            if r >= rows {
                return Err(Error::shape("sparse rows", rows, r + 1));
            }
            let mut last = None;
            for (c, v) in entries {
                if c >= cols {
                    return Err(Error::Domain(format!("column {c} out of bounds ({cols})")));
                }
                if last.is_some_and(|l| c <= l) {
                    return Err(Error::Domain(format!(
                        "columns not strictly increasing in row {r}"
                    )));
                }
                last = Some(c);
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        check_len("sparse rows", rows, indptr.len() - 1)?;
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn mul_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let (idx, val) = self.row(r);
            let mut acc = 0.0;
            for (&c, &v) in idx.iter().zip(val) {
                acc += v * x[c];
            }
            *o = acc;
        }
    }

    fn mul_t_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                out[c] += v * yr;
            }
        }
    }

    #[cfg(any(test, feature = "dense-oracle"))]
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                m[(r, c)] = v;
            }
        }
        m
    }
}

/// Rank-one map `x ↦ u (vᵀx) / denom`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank1 {
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub denom: f64,
}

impl Rank1 {
    #[inline]
    fn coefficient(&self, x: &[f64]) -> f64 {
        scaled_coefficient(dot(self.v.as_slice(), x), self.denom)
    }

    #[inline]
    fn coefficient_t(&self, y: &[f64]) -> f64 {
        scaled_coefficient(dot(self.u.as_slice(), y), self.denom)
    }
}

#[inline]
fn scaled_coefficient(num: f64, denom: f64) -> f64 {
    // A zero denominator only arises for an all-zero pair, which maps to 0.
    if denom == 0.0 {
        0.0
    } else {
        num / denom
    }
}

/// Block-diagonal sum of rank-one maps over non-overlapping `z_x × z_y`
/// patches of an `n_x × n_y` image. Only the full-length vectors and one
/// denominator per patch are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRank1 {
    pub n_x: usize,
    pub n_y: usize,
    pub z_x: usize,
    pub z_y: usize,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub denoms: Vec<f64>,
}

impl PatchRank1 {
    pub fn patch_count(&self) -> usize {
        (self.n_x / self.z_x) * (self.n_y / self.z_y)
    }

    #[inline]
    pub fn patch_of(&self, p: usize) -> usize {
        let (i, j) = (p / self.n_y, p % self.n_y);
        (i / self.z_x) * (self.n_y / self.z_y) + j / self.z_y
    }

    fn coefficients(&self, a: &[f64], x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.patch_count()];
        for p in 0..a.len() {
            acc[self.patch_of(p)] += a[p] * x[p];
        }
        for (c, &d) in acc.iter_mut().zip(&self.denoms) {
            *c = scaled_coefficient(*c, d);
        }
        acc
    }
}

/// A linear map `ℝ^cols → ℝ^rows` that is applied, never stored densely.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearOperator {
    Sparse(SparseMatrix),
    Rank1(Rank1),
    PatchRank1(PatchRank1),
    /// Bilinear warp, stored as a sparse matrix with ≤ 4 entries per row.
    Warp(SparseMatrix),
    Identity(usize),
    Scaled(f64, Box<LinearOperator>),
}

impl LinearOperator {
    pub fn rank1(u: DVector<f64>, v: DVector<f64>, denom: f64) -> Result<Self> {
        check_len("rank-1 factors", u.len(), v.len())?;
        Ok(Self::Rank1(Rank1 { u, v, denom }))
    }

    pub fn rows(&self) -> usize {
        match self {
            Self::Sparse(s) | Self::Warp(s) => s.rows,
            Self::Rank1(r) => r.u.len(),
            Self::PatchRank1(p) => p.u.len(),
            Self::Identity(n) => *n,
            Self::Scaled(_, op) => op.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Self::Sparse(s) | Self::Warp(s) => s.cols,
            Self::Rank1(r) => r.v.len(),
            Self::PatchRank1(p) => p.v.len(),
            Self::Identity(n) => *n,
            Self::Scaled(_, op) => op.cols(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Sparse(_) => "sparse",
            Self::Rank1(_) => "rank1",
            Self::PatchRank1(_) => "patch-rank1",
            Self::Warp(_) => "warp",
            Self::Identity(_) => "identity",
            Self::Scaled(..) => "scaled",
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("operator apply", self.cols(), x.len())?;
        let mut out = DVector::zeros(self.rows());
        self.apply_into(x.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    pub fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("operator transpose apply", self.rows(), y.len())?;
        let mut out = DVector::zeros(self.cols());
        self.apply_t_into(y.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Sparse(s) | Self::Warp(s) => s.mul_into(x, out),
            Self::Rank1(r) => {
                let c = r.coefficient(x);
                for (o, &u) in out.iter_mut().zip(r.u.iter()) {
                    *o = u * c;
                }
            }
            Self::PatchRank1(p) => {
                let c = p.coefficients(p.v.as_slice(), x);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = p.u[k] * c[p.patch_of(k)];
                }
            }
            Self::Identity(_) => out.copy_from_slice(x),
            Self::Scaled(a, op) => {
                op.apply_into(x, out);
                out.iter_mut().for_each(|o| *o *= a);
            }
        }
    }

    fn apply_t_into(&self, y: &[f64], out: &mut [f64]) {
        match self {
            Self::Sparse(s) | Self::Warp(s) => s.mul_t_into(y, out),
            Self::Rank1(r) => {
                let c = r.coefficient_t(y);
                for (o, &v) in out.iter_mut().zip(r.v.iter()) {
                    *o = v * c;
                }
            }
            Self::PatchRank1(p) => {
                let c = p.coefficients(p.u.as_slice(), y);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = p.v[k] * c[p.patch_of(k)];
                }
            }
            Self::Identity(_) => out.copy_from_slice(y),
            Self::Scaled(a, op) => {
                op.apply_t_into(y, out);
                out.iter_mut().for_each(|o| *o *= a);
            }
        }
    }

    /// Column-wise product `op · X`, identical to applying [`Self::apply`]
    /// to each column.
    pub fn apply_block(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("operator block apply", self.cols(), x.nrows())?;
        let mut out = DMatrix::zeros(self.rows(), x.ncols());
        for c in 0..x.ncols() {
            let col = x.column(c);
            let src = col.as_slice();
            let mut dst = out.column_mut(c);
            self.apply_into(src, dst.as_mut_slice());
        }
        Ok(out)
    }

    /// Prepares row-range evaluation of `op · X` for chunked passes.
    pub fn row_block<'a>(&'a self, x: &'a DMatrix<f64>) -> Result<RowBlock<'a>> {
        check_len("operator row block", self.cols(), x.nrows())?;
        let plan = match self {
            Self::Sparse(s) | Self::Warp(s) => Plan::Sparse(s),
            Self::Identity(_) => Plan::Copy,
            Self::Rank1(r) => {
                let mut coef = DMatrix::zeros(1, x.ncols());
                for c in 0..x.ncols() {
                    coef[(0, c)] = r.coefficient(x.column(c).as_slice());
                }
                Plan::Rank1 { u: &r.u, coef }
            }
            Self::PatchRank1(p) => {
                let mut coef = DMatrix::zeros(p.patch_count(), x.ncols());
                for c in 0..x.ncols() {
                    let v = p.coefficients(p.v.as_slice(), x.column(c).as_slice());
                    coef.column_mut(c).copy_from_slice(&v);
                }
                Plan::Patch { op: p, coef }
            }
            Self::Scaled(a, op) => Plan::Scaled(*a, Box::new(op.row_block(x)?)),
        };
        Ok(RowBlock { plan, x })
    }

    /// Bytes of storage held by the operator.
    pub fn storage_bytes(&self) -> usize {
        let w = std::mem::size_of::<usize>();
        match self {
            Self::Sparse(s) | Self::Warp(s) => {
                s.values.len() * (8 + w) + s.indptr.len() * w
            }
            Self::Rank1(r) => (r.u.len() + r.v.len() + 1) * 8,
            Self::PatchRank1(p) => (p.u.len() + p.v.len() + p.denoms.len()) * 8,
            Self::Identity(_) => 0,
            Self::Scaled(_, op) => 8 + op.storage_bytes(),
        }
    }

    #[cfg(any(test, feature = "dense-oracle"))]
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Sparse(s) | Self::Warp(s) => s.to_dense(),
            Self::Identity(n) => DMatrix::identity(*n, *n),
            _ => {
                let eye = DMatrix::identity(self.cols(), self.cols());
                self.apply_block(&eye).expect("square identity block")
            }
        }
    }
}

impl Footprint for LinearOperator {
    fn footprint(&self) -> usize {
        self.storage_bytes()
    }
}

enum Plan<'a> {
    Sparse(&'a SparseMatrix),
    Copy,
    Rank1 { u: &'a DVector<f64>, coef: DMatrix<f64> },
    Patch { op: &'a PatchRank1, coef: DMatrix<f64> },
    Scaled(f64, Box<RowBlock<'a>>),
}

/// Evaluates contiguous row ranges of `op · X` without forming the product.
pub struct RowBlock<'a> {
    plan: Plan<'a>,
    x: &'a DMatrix<f64>,
}

impl RowBlock<'_> {
    /// Writes rows `start .. start + out.nrows()` of `op · X` into `out`.
    pub fn fill(&self, start: usize, out: &mut DMatrix<f64>) {
        let x = self.x;
        let rows = out.nrows();
        match &self.plan {
            Plan::Copy => out.copy_from(&x.rows(start, rows)),
            Plan::Sparse(s) => {
                out.fill(0.0);
                for c in 0..x.ncols() {
                    let src = x.column(c);
                    let mut dst = out.column_mut(c);
                    for k in 0..rows {
                        let (idx, val) = s.row(start + k);
                        let mut acc = 0.0;
                        for (&j, &v) in idx.iter().zip(val) {
                            acc += v * src[j];
                        }
                        dst[k] = acc;
                    }
                }
            }
            Plan::Rank1 { u, coef } => {
                for c in 0..out.ncols() {
                    let a = coef[(0, c)];
                    for k in 0..rows {
                        out[(k, c)] = u[start + k] * a;
                    }
                }
            }
            Plan::Patch { op, coef } => {
                for c in 0..out.ncols() {
                    for k in 0..rows {
                        let p = start + k;
                        out[(k, c)] = op.u[p] * coef[(op.patch_of(p), c)];
                    }
                }
            }
            Plan::Scaled(a, inner) => {
                inner.fill(start, out);
                *out *= *a;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> SparseMatrix {
        let mut t = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if rng.random::<f64>() < density {
                    t.push((r, c, rng.random_range(-1.0..1.0)));
                }
            }
        }
        SparseMatrix::from_triplets(rows, cols, t).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_apply_and_transpose() {
        let op = LinearOperator::Identity(3);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(op.apply(&x).unwrap(), x);
        let y = DVector::from_vec(vec![4.0, 5.0, 6.0]);
        assert_eq!(op.apply_transpose(&y).unwrap(), y);
        let m = DMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(LinearOperator::Identity(2).apply_block(&m).unwrap(), m);
    }

    #[test]
    fn rank1_examples() {
        let op = LinearOperator::rank1(
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
            1.0,
        )
        .unwrap();
        let y = op.apply(&DVector::from_vec(vec![5.0, 7.0])).unwrap();
        assert_eq!(y.as_slice(), &[7.0, 0.0]);

        let op2 = LinearOperator::rank1(
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
            2.0,
        )
        .unwrap();
        let z = op2.apply_transpose(&DVector::from_vec(vec![3.0, 0.0])).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 1.5]);
    }

    #[test]
    fn rank1_block_on_identity_is_outer_product() {
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let v = DVector::from_vec(vec![3.0, 1.0, 2.0]);
        let op = LinearOperator::rank1(u.clone(), v.clone(), 4.0).unwrap();
        let got = op.apply_block(&DMatrix::identity(3, 3)).unwrap();
        let want = &u * v.transpose() / 4.0;
        assert!((got - want).amax() < 1e-15);
    }

    #[test]
    fn sparse_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_sparse(&mut rng, 20, 30, 0.2);
        let dense = s.to_dense();
        let op = LinearOperator::Sparse(s);
        let x = random_vec(&mut rng, 30);
        let got = op.apply(&x).unwrap();
        let want = &dense * &x;
        assert!((got - want).amax() <= 1e-14);
    }

    #[test]
    fn block_apply_is_bitwise_per_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = LinearOperator::Sparse(random_sparse(&mut rng, 15, 12, 0.3));
        let x = DMatrix::from_fn(12, 5, |_, _| rng.random_range(-1.0..1.0));
        let block = op.apply_block(&x).unwrap();
        for c in 0..5 {
            let col = op.apply(&x.column(c).into_owned()).unwrap();
            assert_eq!(block.column(c).as_slice(), col.as_slice());
        }
    }

    #[test]
    fn shape_errors() {
        let op = LinearOperator::Identity(3);
        assert!(op.apply(&DVector::zeros(2)).is_err());
        assert!(op.apply_transpose(&DVector::zeros(4)).is_err());
        assert!(op.apply_block(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn triplets_merge_duplicates_and_drop_zeros() {
        let s = SparseMatrix::from_triplets(
            2,
            3,
            vec![(0, 2, 1.0), (0, 0, 2.0), (0, 2, 1.5), (1, 1, 1.0), (1, 1, -1.0)],
        )
        .unwrap();
        assert_eq!(s.nnz(), 2);
        assert_eq!(s.row(0), (&[0usize, 2][..], &[2.0, 2.5][..]));
        assert_eq!(s.row(1).0.len(), 0);
        assert!(SparseMatrix::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
        assert!(SparseMatrix::from_rows(1, 3, vec![vec![(1, 1.0), (1, 2.0)]]).is_err());
    }

    fn patch_op(rng: &mut ChaCha8Rng, n: usize, z: usize) -> PatchRank1 {
        let u = random_vec(rng, n * n);
        let v = random_vec(rng, n * n);
        let patches = (n / z) * (n / z);
        PatchRank1 {
            n_x: n,
            n_y: n,
            z_x: z,
            z_y: z,
            u,
            v,
            denoms: (0..patches).map(|k| 1.0 + k as f64).collect(),
        }
    }

    #[test]
    fn row_block_matches_apply_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(16, 4, |_, _| rng.random_range(-1.0..1.0));
        let ops = vec![
            LinearOperator::Sparse(random_sparse(&mut rng, 16, 16, 0.3)),
            LinearOperator::Identity(16),
            LinearOperator::rank1(random_vec(&mut rng, 16), random_vec(&mut rng, 16), 2.0).unwrap(),
            LinearOperator::PatchRank1(patch_op(&mut rng, 4, 2)),
            LinearOperator::Scaled(-0.5, Box::new(LinearOperator::Identity(16))),
        ];
        for op in ops {
            let full = op.apply_block(&x).unwrap();
            let rb = op.row_block(&x).unwrap();
            let mut chunk = DMatrix::zeros(5, 4);
            rb.fill(3, &mut chunk);
            assert!((chunk - full.rows(3, 5)).amax() < 1e-14, "{}", op.kind());
        }
    }

    #[test]
    fn patch_with_one_patch_equals_rank1() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_vec(&mut rng, 36);
        let v = random_vec(&mut rng, 36);
        let d = 0.7;
        let r1 = LinearOperator::rank1(u.clone(), v.clone(), d).unwrap();
        let p1 = LinearOperator::PatchRank1(PatchRank1 {
            n_x: 6,
            n_y: 6,
            z_x: 6,
            z_y: 6,
            u,
            v,
            denoms: vec![d],
        });
        let x = random_vec(&mut rng, 36);
        assert_eq!(r1.apply(&x).unwrap(), p1.apply(&x).unwrap());
        assert_eq!(
            r1.apply_transpose(&x).unwrap(),
            p1.apply_transpose(&x).unwrap()
        );
    }

    fn adjoint_gap(op: &LinearOperator, x: &DVector<f64>, y: &DVector<f64>) -> (f64, f64) {
        let ax = op.apply(x).unwrap();
        let aty = op.apply_transpose(y).unwrap();
        ((ax.dot(y) - x.dot(&aty)).abs(), ax.norm() * y.norm())
    }

    proptest! {
        #[test]
        fn adjoint_holds_for_every_kind(seed in 0u64..1000, kind in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 16;
            let op = match kind {
                0 => LinearOperator::Sparse(random_sparse(&mut rng, 11, n, 0.3)),
                1 => LinearOperator::rank1(random_vec(&mut rng, n), random_vec(&mut rng, n), 1.3).unwrap(),
                2 => LinearOperator::PatchRank1(patch_op(&mut rng, 4, 2)),
                3 => LinearOperator::Warp(random_sparse(&mut rng, n, n, 0.2)),
                4 => LinearOperator::Identity(n),
                _ => LinearOperator::Scaled(2.5, Box::new(LinearOperator::Sparse(random_sparse(&mut rng, 9, n, 0.4)))),
            };
            let x = random_vec(&mut rng, op.cols());
            let y = random_vec(&mut rng, op.rows());
            let (gap, scale) = adjoint_gap(&op, &x, &y);
            prop_assert!(gap <= 1e-12 * scale.max(f64::MIN_POSITIVE));
        }
    }
}
