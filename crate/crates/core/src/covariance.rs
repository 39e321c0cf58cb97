//! Quantum covariance matrices of local operator sets, their nullspaces and the
//! conserved local operators they generate.

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, CVec, C64, RANK_FLOOR, RANK_TOL, ZERO};
use crate::spin_algebra::{self, SiteOperatorSet, SpinMatrix};
use crate::states::LocalState;

/// Acceptance threshold for the direct eigen-residual of a conserved operator.
pub const CONSERVED_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    pub entries: CMat,
    /// Ascending, clipped at zero.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMat,
    pub rank: usize,
    /// Absolute cutoff applied to the eigenvalues (already scaled by λ_max).
    pub tolerance: f64,
}

impl CovarianceMatrix {
    /// Decomposes a Hermitian PSD matrix with the crate-wide relative tolerance.
    pub fn from_entries(entries: CMat) -> Result<Self> {
        Self::with_tolerance(entries, RANK_TOL)
    }

    pub fn with_tolerance(entries: CMat, rel_tol: f64) -> Result<Self> {
        let defect = linalg::hermiticity_defect(&entries);
        let scale = linalg::frobenius(&entries).max(1.0);
        if defect > 1e-12 * scale {
            return Err(Error::NotHermitian(defect));
        }
        let (raw, vecs) = linalg::eigh(&entries);
        let lmax = raw.iter().fold(0.0f64, |a, v| a.max(*v));
        let tolerance = rel_tol * lmax.max(RANK_FLOOR);
        let eigenvalues: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
        let rank = eigenvalues.iter().filter(|&&v| v > tolerance).count();
        Ok(CovarianceMatrix { entries, eigenvalues, eigenvectors: vecs, rank, tolerance })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    /// Orthonormal basis of the range (eigenvalues above tolerance).
    pub fn range_basis(&self) -> CMat {
        let d = self.dim();
        let cols: Vec<CVec> =
            (d - self.rank..d).map(|k| self.eigenvectors.column(k).into_owned()).collect();
        linalg::columns_to_matrix(d, &cols)
    }

    /// Projector onto the range of `C`; basis independent.
    pub fn range_projector(&self) -> CMat {
        let k = self.range_basis();
        &k * k.adjoint()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullspaceBasis {
    /// Orthonormal `d`-vectors as columns.
    pub vectors: CMat,
    pub count: usize,
}

impl NullspaceBasis {
    pub fn vector(&self, k: usize) -> CVec {
        self.vectors.column(k).into_owned()
    }

    pub fn projector(&self) -> CMat {
        &self.vectors * self.vectors.adjoint()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservedOperator {
    pub coefficients: CVec,
    pub matrix: SpinMatrix,
    pub eigenvalue: C64,
    pub residual: f64,
}

fn check_dims(state_dim: usize, ops: &SiteOperatorSet) -> Result<()> {
    if ops.site_dim != state_dim {
        return Err(Error::DimensionMismatch { expected: ops.site_dim, found: state_dim });
    }
    Ok(())
}

/// `C^{μν} = <S^{μ†} S^ν> - <S^{μ†}><S^ν>` in a pure state.
pub fn covariance_entries(state: &LocalState, ops: &SiteOperatorSet) -> Result<CMat> {
    check_dims(state.dim(), ops)?;
    let psi = &state.amplitudes;
    let applied: Vec<CVec> = ops.ops.iter().map(|o| &o.entries * psi).collect();
    let means: Vec<C64> = applied.iter().map(|v| linalg::inner(psi, v)).collect();
    let d = ops.len();
    let mut c = CMat::zeros(d, d);
    for mu in 0..d {
        for nu in mu..d {
            // <S^{μ†} S^ν> = <S^μ ψ | S^ν ψ>
            let v = linalg::inner(&applied[mu], &applied[nu]) - means[mu].conj() * means[nu];
            c[(mu, nu)] = v;
            c[(nu, mu)] = v.conj();
        }
    }
    Ok(c)
}

pub fn covariance_matrix(state: &LocalState, ops: &SiteOperatorSet) -> Result<CovarianceMatrix> {
    CovarianceMatrix::from_entries(covariance_entries(state, ops)?)
}

/// Covariance of a mixed state `ρ`: `tr(ρ S^{μ†} S^ν) - tr(ρ S^{μ†}) tr(ρ S^ν)`.
pub fn covariance_from_density(rho: &CMat, ops: &SiteOperatorSet) -> Result<CovarianceMatrix> {
    check_dims(rho.nrows(), ops)?;
    let d = ops.len();
    let means: Vec<C64> = ops.ops.iter().map(|o| (rho * &o.entries).trace()).collect();
    let mut c = CMat::zeros(d, d);
    for mu in 0..d {
        for nu in mu..d {
            let v = (rho * ops.op(mu).adjoint() * ops.op(nu)).trace() - means[mu].conj() * means[nu];
            c[(mu, nu)] = v;
            c[(nu, mu)] = v.conj();
        }
    }
    CovarianceMatrix::from_entries(c)
}

/// Eigenvectors of `C` with eigenvalue under the stored tolerance.
pub fn nullspace(c: &CovarianceMatrix) -> NullspaceBasis {
    let count = c.dim() - c.rank;
    let cols: Vec<CVec> = (0..count).map(|k| c.eigenvectors.column(k).into_owned()).collect();
    NullspaceBasis { vectors: linalg::columns_to_matrix(c.dim(), &cols), count }
}

/// `A_m^μ = <m| (S^μ - <S^μ>) |ψ>`; `A^† A = C`. Kept as an independent route.
pub fn a_matrix(state: &LocalState, ops: &SiteOperatorSet) -> Result<CMat> {
    check_dims(state.dim(), ops)?;
    let psi = &state.amplitudes;
    let mut a = CMat::zeros(state.dim(), ops.len());
    for (mu, o) in ops.ops.iter().enumerate() {
        let v = &o.entries * psi;
        let mean = linalg::inner(psi, &v);
        a.set_column(mu, &(v - psi.map(|z| z * mean)));
    }
    Ok(a)
}

/// Nullspace from the SVD of `A`, the oracle for [`nullspace`].
pub fn nullspace_via_a(state: &LocalState, ops: &SiteOperatorSet) -> Result<CMat> {
    Ok(linalg::kernel_svd(&a_matrix(state, ops)?, RANK_TOL.sqrt()))
}

/// `Q = Σ n_μ S^μ` with `λ = <Q>` and the direct residual `||(Q - λ)ψ||`.
pub fn conserved_operator(state: &LocalState, ops: &SiteOperatorSet, coefficients: CVec) -> ConservedOperator {
    let q = ops.combination(coefficients.as_slice());
    let qpsi = &q * &state.amplitudes;
    let lambda = linalg::inner(&state.amplitudes, &qpsi);
    let residual = linalg::vec_norm(&(qpsi - state.amplitudes.map(|z| z * lambda)));
    ConservedOperator { coefficients, matrix: SpinMatrix::new(q), eigenvalue: lambda, residual }
}

/// One conserved operator per nullspace vector.
pub fn conserved_operators(state: &LocalState, ops: &SiteOperatorSet) -> Result<Vec<ConservedOperator>> {
    let c = covariance_matrix(state, ops)?;
    let n = nullspace(&c);
    Ok((0..n.count).map(|k| conserved_operator(state, ops, n.vector(k))).collect())
}

/// The three diagonal `2×2` blocks of the six-operator covariance of an `M = 0` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCovariance {
    /// `<S^-_i S^+_j>`.
    pub plus_plus: CMat,
    /// `<S^+_i S^-_j>`.
    pub minus_minus: CMat,
    /// `<S^z_i S^z_j> - <S^z_i><S^z_j>`.
    pub zz: CMat,
    /// Largest cross-block entry (should vanish by rotational invariance about z).
    pub cross_max: f64,
    /// Deviation from `C^{--}_{ij} = C^{++}_{ji} + 2 δ_ij <S^z_i>`.
    pub identity_defect: f64,
}

pub fn block_covariance(state: &LocalState) -> Result<BlockCovariance> {
    if state.factor_spins.len() != 2 {
        return Err(Error::InvalidArgument("block covariance needs a two-spin state".into()));
    }
    let spins = &state.factor_spins;
    let dims = state.spin_dims();
    let [_, _, tz] = spin_algebra::total_spin(spins)?;
    let mres = linalg::vec_norm(&(&tz * &state.amplitudes));
    if mres > 1e-10 {
        return Err(Error::NotZeroMagnetization(mres));
    }
    // operators ordered S^+_1, S^+_2, S^-_1, S^-_2, S^z_1, S^z_2
    let mut ops = Vec::new();
    for &(kind, lab) in &[(0usize, "+"), (1, "-"), (2, "z")] {
        for (i, &s) in spins.iter().enumerate() {
            let (x, y, z) = spin_algebra::spin_xyz(s)?;
            let local = match kind {
                0 => &x + y.map(|v| v * linalg::I),
                1 => &x - y.map(|v| v * linalg::I),
                _ => z,
            };
            ops.push((spin_algebra::embed_dense(&local, i, &dims)?, format!("S{}{lab}", i + 1)));
        }
    }
    let (mats, labels): (Vec<CMat>, Vec<String>) = ops.into_iter().unzip();
    let set = SiteOperatorSet::new(mats, labels)?;
    let full = covariance_entries(state, &set)?;
    let block = |k: usize| full.view((2 * k, 2 * k), (2, 2)).into_owned();
    let mut cross_max = 0.0f64;
    for i in 0..6 {
        for j in 0..6 {
            if i / 2 != j / 2 {
                cross_max = cross_max.max(full[(i, j)].norm());
            }
        }
    }
    let (pp, mm, zz) = (block(0), block(1), block(2));
    let mut identity_defect = 0.0f64;
    for i in 0..2 {
        let (_, _, z) = spin_algebra::spin_xyz(spins[i])?;
        let mz = state.expectation(&spin_algebra::embed_dense(&z, i, &dims)?);
        for j in 0..2 {
            let extra = if i == j { mz.scale(2.0) } else { ZERO };
            identity_defect = identity_defect.max((mm[(i, j)] - pp[(j, i)] - extra).norm());
        }
    }
    Ok(BlockCovariance { plus_plus: pp, minus_minus: mm, zz, cross_max, identity_defect })
}

/// Closed-form blocks of the parity −1 generalized singlet: `(C^{++}, C^{--}, C^{zz})`.
pub fn singlet_blocks_closed_form(s: f64, xi: f64) -> Result<[CMat; 3]> {
    let mom = crate::states::local_moments(s, xi)?;
    let sz2 = mom.variance_z + mom.mean_z[0].powi(2);
    let pref = s * (s + 1.0) - sz2;
    let (cx, sx) = (xi.cos(), xi.sin());
    let m = |a: f64, b: f64, c: f64, d: f64| CMat::from_row_slice(2, 2, &[a, b, c, d].map(linalg::r));
    Ok([
        m(1.0 - cx, -sx, -sx, 1.0 + cx).scale(pref),
        m(1.0 + cx, -sx, -sx, 1.0 - cx).scale(pref),
        m(1.0, -1.0, -1.0, 1.0).scale(mom.variance_z),
    ])
}
