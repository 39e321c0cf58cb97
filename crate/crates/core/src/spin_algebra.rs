//! Spin matrices, local operator sets, Kronecker embedding and sparse many-body operators.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::linalg::{self, c, r, CMat, CVec, C64, I, ONE, ZERO};

/// Tolerance for hermiticity flags on dense and sparse operators.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Validates `s` and returns `2s` as an integer.
pub fn two_s(s: f64) -> Result<usize> {
    let t = 2.0 * s;
    if !t.is_finite() || t < -1e-12 || (t - t.round()).abs() > 1e-9 {
        return Err(Error::InvalidSpin(s));
    }
    Ok(t.round() as usize)
}

pub fn spin_dim(s: f64) -> Result<usize> {
    Ok(two_s(s)? + 1)
}

/// A dense local operator with a cached hermiticity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinMatrix {
    pub entries: CMat,
    pub hermitian: bool,
}

impl SpinMatrix {
    pub fn new(entries: CMat) -> Self {
        assert!(entries.is_square(), "operator must be square");
        let hermitian = linalg::hermiticity_defect(&entries) < HERMITIAN_TOL;
        SpinMatrix { entries, hermitian }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn adjoint(&self) -> SpinMatrix {
        SpinMatrix { entries: self.entries.adjoint(), hermitian: self.hermitian }
    }
}

/// Ordered set of linearly independent operators on one factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteOperatorSet {
    pub site_dim: usize,
    pub ops: Vec<SpinMatrix>,
    pub labels: Vec<String>,
}

impl SiteOperatorSet {
    /// Builds the set after checking dimensions and linear independence.
    pub fn new(ops: Vec<CMat>, labels: Vec<String>) -> Result<Self> {
        if ops.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: ops.len(), found: labels.len() });
        }
        let site_dim = ops.first().map(|o| o.nrows()).unwrap_or(1);
        for o in &ops {
            if o.nrows() != site_dim || o.ncols() != site_dim {
                return Err(Error::DimensionMismatch { expected: site_dim, found: o.nrows() });
            }
            if o.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::InvalidArgument("non-finite operator entry".into()));
            }
        }
        if !ops.is_empty() {
            let mut m = CMat::zeros(site_dim * site_dim, ops.len());
            for (k, o) in ops.iter().enumerate() {
                m.set_column(k, &linalg::vec_row_major(o));
            }
            let sv = linalg::singular_values(&m);
            let smax = sv.first().copied().unwrap_or(0.0);
            let smin = if sv.len() < ops.len() { 0.0 } else { *sv.last().unwrap() };
            if smax == 0.0 || smin <= linalg::RANK_TOL * smax {
                return Err(Error::LinearlyDependent { ratio: if smax > 0.0 { smin / smax } else { 0.0 } });
            }
        }
        Ok(SiteOperatorSet { site_dim, ops: ops.into_iter().map(SpinMatrix::new).collect(), labels })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, k: usize) -> &CMat {
        &self.ops[k].entries
    }

    /// `Σ_μ coeffs[μ] S^μ`.
    pub fn combination(&self, coeffs: &[C64]) -> CMat {
        let mut m = CMat::zeros(self.site_dim, self.site_dim);
        for (o, w) in self.ops.iter().zip(coeffs) {
            if *w != ZERO {
                m += o.entries.map(|z| z * w);
            }
        }
        m
    }

    /// `S^+ = S^x + i S^y` for sets produced by [`spin_matrices`].
    pub fn splus(&self) -> CMat {
        self.op(0) + self.op(1).map(|z| z * I)
    }

    pub fn sminus(&self) -> CMat {
        self.op(0) - self.op(1).map(|z| z * I)
    }
}

/// `{S^x, S^y, S^z}` in the basis `|s>, |s-1>, ..., |-s>`.
pub fn spin_matrices(s: f64) -> Result<SiteOperatorSet> {
    let (sx, sy, sz) = spin_xyz(s)?;
    let labels = vec!["Sx".to_string(), "Sy".to_string(), "Sz".to_string()];
    if two_s(s)? == 0 {
        // spin 0: all three vanish, keep the set without the independence check
        return Ok(SiteOperatorSet {
            site_dim: 1,
            ops: vec![SpinMatrix::new(sx), SpinMatrix::new(sy), SpinMatrix::new(sz)],
            labels,
        });
    }
    SiteOperatorSet::new(vec![sx, sy, sz], labels)
}

/// Raw spin matrices without wrapping.
pub fn spin_xyz(s: f64) -> Result<(CMat, CMat, CMat)> {
    let d = spin_dim(s)?;
    let mut sp = CMat::zeros(d, d);
    let mut sz = CMat::zeros(d, d);
    for k in 0..d {
        let m = s - k as f64;
        sz[(k, k)] = r(m);
        if k > 0 {
            // <m+1| S^+ |m>, row k-1 holds m+1
            sp[(k - 1, k)] = r(((s - m) * (s + m + 1.0)).sqrt());
        }
    }
    let sm = sp.adjoint();
    let sx = (&sp + &sm).scale(0.5);
    let sy = (&sp - &sm).map(|z| z * c(0.0, -0.5));
    Ok((sx, sy, sz))
}

/// Spin operators `S_i^μ` of every spin in a cluster, labelled `S1x, S1y, ..., SNz`.
pub fn cluster_operators(spins: &[f64]) -> Result<SiteOperatorSet> {
    let dims: Vec<usize> = spins.iter().map(|&s| spin_dim(s)).collect::<Result<_>>()?;
    let mut ops = Vec::new();
    let mut labels = Vec::new();
    for (i, &s) in spins.iter().enumerate() {
        let (sx, sy, sz) = spin_xyz(s)?;
        for (m, name) in [(sx, "x"), (sy, "y"), (sz, "z")] {
            ops.push(embed_dense(&m, i, &dims)?);
            labels.push(format!("S{}{}", i + 1, name));
        }
    }
    SiteOperatorSet::new(ops, labels)
}

/// Generalized Gell-Mann basis: `D^2 - 1` traceless Hermitian operators on a `D`-dim space.
pub fn complete_hermitian_set(d: usize) -> SiteOperatorSet {
    let mut ops = Vec::new();
    let mut labels = Vec::new();
    for j in 0..d {
        for k in (j + 1)..d {
            let mut a = CMat::zeros(d, d);
            a[(j, k)] = r(0.5);
            a[(k, j)] = r(0.5);
            ops.push(a);
            labels.push(format!("X{j}{k}"));
            let mut b = CMat::zeros(d, d);
            b[(j, k)] = c(0.0, -0.5);
            b[(k, j)] = c(0.0, 0.5);
            ops.push(b);
            labels.push(format!("Y{j}{k}"));
        }
    }
    for l in 1..d {
        let norm = 0.5 * (2.0 / (l * (l + 1)) as f64).sqrt();
        let mut z = CMat::zeros(d, d);
        for m in 0..l {
            z[(m, m)] = r(norm);
        }
        z[(l, l)] = r(-norm * l as f64);
        ops.push(z);
        labels.push(format!("Z{l}"));
    }
    SiteOperatorSet::new(ops, labels).expect("Gell-Mann basis is independent")
}

/// Dense Kronecker embedding `I ⊗ ... ⊗ op ⊗ ... ⊗ I`, factor 0 leftmost.
pub fn embed_dense(op: &CMat, index: usize, dims: &[usize]) -> Result<CMat> {
    check_embed(op, index, dims)?;
    let left: usize = dims[..index].iter().product();
    let right: usize = dims[index + 1..].iter().product();
    Ok(linalg::kron(&linalg::kron(&linalg::identity(left), op), &linalg::identity(right)))
}

fn check_embed(op: &CMat, index: usize, dims: &[usize]) -> Result<()> {
    if index >= dims.len() {
        return Err(Error::IndexOutOfRange { index, len: dims.len() });
    }
    if op.nrows() != dims[index] || op.ncols() != dims[index] {
        return Err(Error::DimensionMismatch { expected: dims[index], found: op.nrows() });
    }
    Ok(())
}

/// Sparse Hermitian-flagged operator in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseManyBodyOperator {
    pub total_dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
    pub hermitian: bool,
}

/// Additive coordinate-format assembler.
#[derive(Debug, Clone, Default)]
pub struct CooBuilder {
    dim: usize,
    triplets: Vec<(usize, usize, C64)>,
}

impl CooBuilder {
    pub fn new(dim: usize) -> Self {
        CooBuilder { dim, triplets: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, i: usize, j: usize, v: C64) {
        if v != ZERO {
            self.triplets.push((i, j, v));
        }
    }

    pub fn extend(&mut self, other: CooBuilder) {
        self.triplets.extend(other.triplets);
    }

    /// Adds `coeff * op` acting on the listed factors (in the listed order) of `dims`.
    pub fn add_local(&mut self, op: &CMat, factors: &[usize], dims: &[usize], coeff: C64) -> Result<()> {
        let local = local_triplets(op, factors, dims)?;
        let pattern = LocalPattern::new(factors, dims);
        for rest in 0..pattern.rest_count() {
            let base = pattern.base(rest);
            for &(a, b, v) in &local {
                self.push(base + pattern.offset(a), base + pattern.offset(b), v * coeff);
            }
        }
        Ok(())
    }

    pub fn build(self) -> SparseManyBodyOperator {
        SparseManyBodyOperator::from_triplets(self.dim, self.triplets)
    }
}

fn local_triplets(op: &CMat, factors: &[usize], dims: &[usize]) -> Result<Vec<(usize, usize, C64)>> {
    for (k, &f) in factors.iter().enumerate() {
        if f >= dims.len() {
            return Err(Error::IndexOutOfRange { index: f, len: dims.len() });
        }
        if factors[..k].contains(&f) {
            return Err(Error::InvalidArgument(format!("factor {f} listed twice")));
        }
    }
    let local_dim: usize = factors.iter().map(|&f| dims[f]).product();
    if op.nrows() != local_dim || op.ncols() != local_dim {
        return Err(Error::DimensionMismatch { expected: local_dim, found: op.nrows() });
    }
    let mut out = Vec::new();
    for a in 0..local_dim {
        for b in 0..local_dim {
            let v = op[(a, b)];
            if v != ZERO {
                out.push((a, b, v));
            }
        }
    }
    Ok(out)
}

/// Index bookkeeping for a local operator acting on a subset of factors.
struct LocalPattern {
    local_dims: Vec<usize>,
    local_strides: Vec<usize>,
    rest_dims: Vec<usize>,
    rest_strides: Vec<usize>,
}

impl LocalPattern {
    fn new(factors: &[usize], dims: &[usize]) -> Self {
        let n = dims.len();
        let mut strides = vec![1usize; n];
        for k in (0..n.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }
        let local_dims: Vec<usize> = factors.iter().map(|&f| dims[f]).collect();
        let local_strides: Vec<usize> = factors.iter().map(|&f| strides[f]).collect();
        let rest: Vec<usize> = (0..n).filter(|k| !factors.contains(k)).collect();
        LocalPattern {
            rest_dims: rest.iter().map(|&k| dims[k]).collect(),
            rest_strides: rest.iter().map(|&k| strides[k]).collect(),
            local_dims,
            local_strides,
        }
    }

    fn rest_count(&self) -> usize {
        self.rest_dims.iter().product()
    }

    fn base(&self, mut rest: usize) -> usize {
        let mut idx = 0;
        for k in (0..self.rest_dims.len()).rev() {
            idx += (rest % self.rest_dims[k]) * self.rest_strides[k];
            rest /= self.rest_dims[k];
        }
        idx
    }

    fn offset(&self, mut local: usize) -> usize {
        let mut idx = 0;
        for k in (0..self.local_dims.len()).rev() {
            idx += (local % self.local_dims[k]) * self.local_strides[k];
            local /= self.local_dims[k];
        }
        idx
    }
}

impl SparseManyBodyOperator {
    /// Sums duplicate coordinates and drops exact zeros.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, C64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut rows = Vec::with_capacity(triplets.len());
        for (i, j, v) in triplets {
            assert!(i < dim && j < dim, "triplet outside matrix");
            if let (Some(&li), Some(&lj)) = (rows.last(), cols.last()) {
                if li == i && lj == j {
                    *vals.last_mut().unwrap() += v;
                    continue;
                }
            }
            rows.push(i);
            cols.push(j);
            vals.push(v);
        }
        let keep: Vec<bool> = vals.iter().map(|v| *v != ZERO).collect();
        let (mut rr, mut cc, mut vv) = (Vec::new(), Vec::new(), Vec::new());
        for idx in 0..vals.len() {
            if keep[idx] {
                rr.push(rows[idx]);
                cc.push(cols[idx]);
                vv.push(vals[idx]);
            }
        }
        for &i in &rr {
            row_ptr[i + 1] += 1;
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut op = SparseManyBodyOperator { total_dim: dim, row_ptr, cols: cc, vals: vv, hermitian: false };
        op.hermitian = op.hermiticity_defect() < HERMITIAN_TOL;
        op
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_triplets(dim, Vec::new())
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_triplets(dim, (0..dim).map(|i| (i, i, ONE)).collect())
    }

    pub fn from_dense(m: &CMat) -> Self {
        let mut t = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                t.push((i, j, m[(i, j)]));
            }
        }
        Self::from_triplets(m.nrows(), t)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.total_dim)
            .flat_map(move |i| (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.cols[k], self.vals[k])))
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&j) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => ZERO,
        }
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, j, v) in self.triplets() {
            worst = worst.max((v - self.get(j, i).conj()).norm());
        }
        worst
    }

    pub fn to_dense(&self) -> CMat {
        let mut m = CMat::zeros(self.total_dim, self.total_dim);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0f64, |a, v| a.max(v.norm()))
    }

    /// Upper bound on the spectral norm: the maximum absolute row sum.
    pub fn norm_bound(&self) -> f64 {
        (0..self.total_dim).map(|i| self.row(i).map(|(_, v)| v.norm()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> C64 {
        (0..self.total_dim).map(|i| self.get(i, i)).sum()
    }

    pub fn matvec_into(&self, x: &[C64], y: &mut [C64], mode: Parallelism) {
        assert_eq!(x.len(), self.total_dim);
        assert_eq!(y.len(), self.total_dim);
        exec::fill_rows(y, mode, |i| {
            let mut acc = ZERO;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            acc
        });
    }

    pub fn matvec(&self, x: &CVec) -> CVec {
        let mut y = CVec::zeros(self.total_dim);
        self.matvec_into(x.as_slice(), y.as_mut_slice(), Parallelism::Parallel);
        y
    }

    pub fn scaled(&self, a: C64) -> Self {
        Self::from_triplets(self.total_dim, self.triplets().map(|(i, j, v)| (i, j, v * a)).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.total_dim, other.total_dim);
        Self::from_triplets(self.total_dim, self.triplets().chain(other.triplets()).collect())
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.total_dim, other.total_dim);
        let mut t = Vec::new();
        for i in 0..self.total_dim {
            let mut acc: HashMap<usize, C64> = HashMap::new();
            for (k, a) in self.row(i) {
                for (j, b) in other.row(k) {
                    *acc.entry(j).or_insert(ZERO) += a * b;
                }
            }
            t.extend(acc.into_iter().map(|(j, v)| (i, j, v)));
        }
        Self::from_triplets(self.total_dim, t)
    }

    /// Principal sub-block on the given (sorted or unsorted) index list.
    pub fn restrict(&self, indices: &[usize]) -> Self {
        let mut pos = vec![usize::MAX; self.total_dim];
        for (k, &i) in indices.iter().enumerate() {
            pos[i] = k;
        }
        let mut t = Vec::new();
        for (k, &i) in indices.iter().enumerate() {
            for (j, v) in self.row(i) {
                if pos[j] != usize::MAX {
                    t.push((k, pos[j], v));
                }
            }
        }
        Self::from_triplets(indices.len(), t)
    }
}

/// Sparse embedding of a single-factor operator.
pub fn embed(op: &CMat, factor_index: usize, factor_dims: &[usize]) -> Result<SparseManyBodyOperator> {
    check_embed(op, factor_index, factor_dims)?;
    let total: usize = factor_dims.iter().product();
    let mut b = CooBuilder::new(total);
    b.add_local(op, &[factor_index], factor_dims, ONE)?;
    Ok(b.build())
}

/// Coefficients of `[S^μ, S^ν]` expanded on the set plus the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureConstants {
    /// `table[μ][ν][ρ]` with `[S^μ, S^ν] = Σ_ρ table[μ][ν][ρ] S^ρ + identity[μ][ν] 1`.
    pub table: Vec<Vec<Vec<C64>>>,
    pub identity: Vec<Vec<C64>>,
    pub residual_norm: f64,
}

impl StructureConstants {
    pub fn f(&self, mu: usize, nu: usize, rho: usize) -> C64 {
        self.table[mu][nu][rho]
    }

    /// Entries with magnitude above `tol`, as `(μ, ν, ρ, f)`.
    pub fn nonzero(&self, tol: f64) -> Vec<(usize, usize, usize, C64)> {
        let mut out = Vec::new();
        for (mu, row) in self.table.iter().enumerate() {
            for (nu, col) in row.iter().enumerate() {
                for (rho, v) in col.iter().enumerate() {
                    if v.norm() > tol {
                        out.push((mu, nu, rho, *v));
                    }
                }
            }
        }
        out
    }
}

pub fn structure_constants(ops: &SiteOperatorSet) -> StructureConstants {
    let d = ops.len();
    let dim = ops.site_dim;
    let mut basis = CMat::zeros(dim * dim, d + 1);
    for k in 0..d {
        basis.set_column(k, &linalg::vec_row_major(ops.op(k)));
    }
    basis.set_column(d, &linalg::vec_row_major(&linalg::identity(dim)));
    let mut table = vec![vec![vec![ZERO; d]; d]; d];
    let mut identity = vec![vec![ZERO; d]; d];
    let mut residual = 0.0f64;
    for mu in 0..d {
        for nu in (mu + 1)..d {
            let comm = linalg::vec_row_major(&linalg::commutator(ops.op(mu), ops.op(nu)));
            let x = linalg::lstsq(&basis, &comm);
            residual = residual.max(linalg::vec_norm(&(&basis * &x - &comm)));
            for rho in 0..d {
                table[mu][nu][rho] = x[rho];
                table[nu][mu][rho] = -x[rho];
            }
            identity[mu][nu] = x[d];
            identity[nu][mu] = -x[d];
        }
    }
    StructureConstants { table, identity, residual_norm: residual }
}

/// Clebsch-Gordan coefficient `<j1 m1; j2 m2 | J M>` (Condon-Shortley phase), Racah closed form.
pub fn clebsch_gordan(j1: f64, m1: f64, j2: f64, m2: f64, j: f64, m: f64) -> f64 {
    let is_int = |x: f64| (x - x.round()).abs() < 1e-9;
    if (m1 + m2 - m).abs() > 1e-9
        || j < (j1 - j2).abs() - 1e-9
        || j > j1 + j2 + 1e-9
        || !is_int(j1 + j2 + j)
        || m1.abs() > j1 + 1e-9
        || m2.abs() > j2 + 1e-9
        || m.abs() > j + 1e-9
        || !is_int(j1 - m1)
        || !is_int(j2 - m2)
        || !is_int(j - m)
    {
        return 0.0;
    }
    let lf = |x: f64| ln_factorial(x.round() as i64);
    let pre = 0.5
        * ((2.0 * j + 1.0).ln() + lf(j + j1 - j2) + lf(j - j1 + j2) + lf(j1 + j2 - j) - lf(j1 + j2 + j + 1.0)
            + lf(j + m)
            + lf(j - m)
            + lf(j1 - m1)
            + lf(j1 + m1)
            + lf(j2 - m2)
            + lf(j2 + m2));
    let kmin = 0.0f64.max(j2 - j - m1).max(j1 - j + m2).round() as i64;
    let kmax = (j1 + j2 - j).min(j1 - m1).min(j2 + m2).round() as i64;
    let mut sum = 0.0;
    for k in kmin..=kmax {
        let kf = k as f64;
        let den = lf(kf) + lf(j1 + j2 - j - kf) + lf(j1 - m1 - kf) + lf(j2 + m2 - kf) + lf(j - j2 + m1 + kf)
            + lf(j - j1 - m2 + kf);
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * (pre - den).exp();
    }
    sum
}

fn ln_factorial(n: i64) -> f64 {
    assert!(n >= 0, "negative factorial argument");
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Total-spin components `Σ_i S_i^μ` over a collection of spins, dense.
pub fn total_spin(spins: &[f64]) -> Result<[CMat; 3]> {
    let dims: Vec<usize> = spins.iter().map(|&s| spin_dim(s)).collect::<Result<_>>()?;
    let total: usize = dims.iter().product();
    let mut out = [CMat::zeros(total, total), CMat::zeros(total, total), CMat::zeros(total, total)];
    for (i, &s) in spins.iter().enumerate() {
        let (sx, sy, sz) = spin_xyz(s)?;
        out[0] += embed_dense(&sx, i, &dims)?;
        out[1] += embed_dense(&sy, i, &dims)?;
        out[2] += embed_dense(&sz, i, &dims)?;
    }
    Ok(out)
}
