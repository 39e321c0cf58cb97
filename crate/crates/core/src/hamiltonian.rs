//! Quadratic spin Hamiltonians: model description, sparse assembly, and
//! Hamiltonians built directly from conserved local operators.

use serde::{Deserialize, Serialize};

use crate::covariance;
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::linalg::{self, r, CMat, CVec, C64, I, ONE, ZERO};
use crate::spin_algebra::{self, cluster_operators, spin_dim, spin_xyz, CooBuilder, SparseManyBodyOperator};
use crate::states::ProductState;

pub type Coupling = [[C64; 3]; 3];

pub fn real_coupling(m: [[f64; 3]; 3]) -> Coupling {
    m.map(|row| row.map(r))
}

pub fn diagonal_coupling(jx: f64, jy: f64, jz: f64) -> Coupling {
    real_coupling([[jx, 0.0, 0.0], [0.0, jy, 0.0], [0.0, 0.0, jz]])
}

/// `S_i^μ J_{μν} S_j^ν`. Each unordered pair listed once; `i == j` is an on-site quadratic term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub coupling: Coupling,
}

/// `H = Σ_i b_i·S_i + Σ_bonds S_i·J S_j + constant`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub spins: Vec<f64>,
    pub fields: Vec<[C64; 3]>,
    pub bonds: Vec<Bond>,
    /// Default factor partition; empty means one factor per site.
    #[serde(default)]
    pub clusters: Vec<Vec<usize>>,
    #[serde(default)]
    pub family_tag: Option<String>,
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub allow_non_hermitian: bool,
}

impl ModelSpec {
    pub fn new(spins: Vec<f64>) -> Self {
        let n = spins.len();
        ModelSpec {
            spins,
            fields: vec![[ZERO; 3]; n],
            bonds: Vec::new(),
            clusters: Vec::new(),
            family_tag: None,
            constant: 0.0,
            allow_non_hermitian: false,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.spins.len()
    }

    pub fn site_dims(&self) -> Result<Vec<usize>> {
        self.spins.iter().map(|&s| spin_dim(s)).collect()
    }

    pub fn total_dim(&self) -> Result<usize> {
        Ok(self.site_dims()?.iter().product())
    }

    pub fn add_field(&mut self, i: usize, b: [f64; 3]) {
        for mu in 0..3 {
            self.fields[i][mu] += r(b[mu]);
        }
    }

    /// Adds to an existing bond on the same pair, or creates one. `(j, i)` is stored transposed.
    pub fn add_bond(&mut self, i: usize, j: usize, coupling: Coupling) {
        let (a, b, m) = if i <= j { (i, j, coupling) } else { (j, i, transpose(&coupling)) };
        if let Some(bond) = self.bonds.iter_mut().find(|x| x.i == a && x.j == b) {
            for mu in 0..3 {
                for nu in 0..3 {
                    bond.coupling[mu][nu] += m[mu][nu];
                }
            }
        } else {
            self.bonds.push(Bond { i: a, j: b, coupling: m });
        }
    }

    pub fn add_xyz(&mut self, i: usize, j: usize, jx: f64, jy: f64, jz: f64) {
        self.add_bond(i, j, diagonal_coupling(jx, jy, jz));
    }

    /// Coupling matrix seen from `i` towards `j` (transposed when stored as `(j, i)`).
    pub fn coupling(&self, i: usize, j: usize) -> Coupling {
        let mut out = [[ZERO; 3]; 3];
        for b in &self.bonds {
            if b.i == i && b.j == j {
                add_into(&mut out, &b.coupling);
            } else if b.i == j && b.j == i {
                add_into(&mut out, &transpose(&b.coupling));
            }
        }
        out
    }

    /// Effective partition: explicit clusters or singletons.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        if self.clusters.is_empty() {
            (0..self.n_sites()).map(|i| vec![i]).collect()
        } else {
            self.clusters.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_sites();
        self.site_dims()?;
        if self.fields.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: self.fields.len() });
        }
        for b in &self.bonds {
            if b.i >= n || b.j >= n {
                return Err(Error::IndexOutOfRange { index: b.i.max(b.j), len: n });
            }
        }
        if !self.clusters.is_empty() {
            let mut seen = vec![false; n];
            for c in &self.clusters {
                for &s in c {
                    if s >= n || seen[s] {
                        return Err(Error::InvalidArgument(format!("clusters do not partition the sites (site {s})")));
                    }
                    seen[s] = true;
                }
            }
            if seen.iter().any(|x| !x) {
                return Err(Error::InvalidArgument("clusters do not cover all sites".into()));
            }
        }
        Ok(())
    }

    /// Largest imaginary component of any field or coupling; these spoil hermiticity.
    pub fn imaginary_defect(&self) -> f64 {
        let f = self.fields.iter().flat_map(|b| b.iter()).map(|z| z.im.abs());
        let j = self.bonds.iter().flat_map(|b| b.coupling.iter().flatten()).map(|z| z.im.abs());
        f.chain(j).fold(0.0, f64::max)
    }

    /// Largest field or coupling magnitude; the natural energy scale.
    pub fn scale(&self) -> f64 {
        let f = self.fields.iter().map(|b| b.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt());
        let j = self.bonds.iter().map(|b| b.coupling.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt());
        f.chain(j).fold(self.constant.abs(), f64::max)
    }

    /// `a * self + other` on the same site set.
    pub fn linear_combination(&self, a: f64, other: &ModelSpec) -> Result<ModelSpec> {
        if self.spins != other.spins {
            return Err(Error::InvalidArgument("models live on different sites".into()));
        }
        let mut out = self.scaled(a);
        for i in 0..out.n_sites() {
            for mu in 0..3 {
                out.fields[i][mu] += other.fields[i][mu];
            }
        }
        for b in &other.bonds {
            out.add_bond(b.i, b.j, b.coupling);
        }
        out.constant += other.constant;
        out.allow_non_hermitian |= other.allow_non_hermitian;
        Ok(out)
    }

    pub fn scaled(&self, a: f64) -> ModelSpec {
        let mut out = self.clone();
        for f in &mut out.fields {
            for z in f.iter_mut() {
                *z *= a;
            }
        }
        for b in &mut out.bonds {
            for z in b.coupling.iter_mut().flatten() {
                *z *= a;
            }
        }
        out.constant *= a;
        out
    }

    /// Drops imaginary parts below `tol`, returning an error if anything larger remains.
    pub fn realified(mut self, tol: f64) -> Result<ModelSpec> {
        let d = self.imaginary_defect();
        if d > tol {
            return Err(Error::NotHermitian(d));
        }
        for f in &mut self.fields {
            for z in f.iter_mut() {
                z.im = 0.0;
            }
        }
        for b in &mut self.bonds {
            for z in b.coupling.iter_mut().flatten() {
                z.im = 0.0;
            }
        }
        self.bonds.retain(|b| b.coupling.iter().flatten().any(|z| z.re != 0.0));
        Ok(self)
    }
}

pub fn transpose(m: &Coupling) -> Coupling {
    let mut t = [[ZERO; 3]; 3];
    for mu in 0..3 {
        for nu in 0..3 {
            t[nu][mu] = m[mu][nu];
        }
    }
    t
}

fn add_into(acc: &mut Coupling, m: &Coupling) {
    for mu in 0..3 {
        for nu in 0..3 {
            acc[mu][nu] += m[mu][nu];
        }
    }
}

pub fn coupling_to_matrix(m: &Coupling) -> CMat {
    CMat::from_fn(3, 3, |a, b| m[a][b])
}

/// Provenance of one assembled contribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Field { site: usize },
    Bond { i: usize, j: usize },
    Local { sites: Vec<usize>, label: String },
}

#[derive(Debug, Clone)]
pub struct AssembledHamiltonian {
    pub matrix: SparseManyBodyOperator,
    pub terms: Vec<Term>,
    pub energy_offset: f64,
    pub site_spins: Vec<f64>,
}

impl AssembledHamiltonian {
    pub fn dim(&self) -> usize {
        self.matrix.total_dim
    }

    pub fn site_dims(&self) -> Vec<usize> {
        self.site_spins.iter().map(|&s| spin_dim(s).expect("validated")).collect()
    }

    pub fn apply(&self, v: &CVec) -> CVec {
        self.matrix.matvec(v)
    }

    /// `<ψ|H|ψ>` including the constant offset.
    pub fn energy(&self, psi: &CVec) -> f64 {
        linalg::inner(psi, &self.apply(psi)).re + self.energy_offset
    }
}

/// Matrix acting on site `i` for the field `b·S`.
fn field_operator(spin: f64, b: &[C64; 3]) -> Result<CMat> {
    let (x, y, z) = spin_xyz(spin)?;
    Ok(x.map(|v| v * b[0]) + y.map(|v| v * b[1]) + z.map(|v| v * b[2]))
}

/// Two-site operator `Σ J_{μν} S_i^μ ⊗ S_j^ν` or, for `i == j`, `Σ J_{μν} S^μ S^ν`.
pub fn bond_operator(si: f64, sj: f64, same_site: bool, m: &Coupling) -> Result<CMat> {
    let (xi, yi, zi) = spin_xyz(si)?;
    let (xj, yj, zj) = spin_xyz(sj)?;
    let a = [xi, yi, zi];
    let b = [xj, yj, zj];
    let (di, dj) = (a[0].nrows(), b[0].nrows());
    let mut op = if same_site { CMat::zeros(di, di) } else { CMat::zeros(di * dj, di * dj) };
    for mu in 0..3 {
        for nu in 0..3 {
            let w = m[mu][nu];
            if w == ZERO {
                continue;
            }
            let piece = if same_site { &a[mu] * &b[nu] } else { linalg::kron(&a[mu], &b[nu]) };
            op += piece.map(|z| z * w);
        }
    }
    Ok(op)
}

/// Sparse assembly of a model. Terms are built in parallel and merged in a fixed order.
pub fn assemble(model: &ModelSpec) -> Result<AssembledHamiltonian> {
    assemble_with(model, Parallelism::Parallel)
}

pub fn assemble_with(model: &ModelSpec, mode: Parallelism) -> Result<AssembledHamiltonian> {
    model.validate()?;
    let dims = model.site_dims()?;
    let total: usize = dims.iter().product();
    let mut jobs: Vec<Term> = Vec::new();
    for (i, b) in model.fields.iter().enumerate() {
        if b.iter().any(|z| *z != ZERO) {
            jobs.push(Term::Field { site: i });
        }
    }
    let mut order: Vec<usize> = (0..model.bonds.len()).collect();
    order.sort_by_key(|&k| (model.bonds[k].i, model.bonds[k].j));
    let first_bond = jobs.len();
    jobs.extend(order.iter().map(|&k| Term::Bond { i: model.bonds[k].i, j: model.bonds[k].j }));
    let indices: Vec<usize> = (0..jobs.len()).collect();
    let pieces: Vec<Result<CooBuilder>> = exec::map(&indices, mode, |&t| {
        let mut coo = CooBuilder::new(total);
        match &jobs[t] {
            Term::Field { site } => {
                let op = field_operator(model.spins[*site], &model.fields[*site])?;
                coo.add_local(&op, &[*site], &dims, ONE)?;
            }
            Term::Bond { i, j } => {
                let m = &model.bonds[order[t - first_bond]].coupling;
                let op = bond_operator(model.spins[*i], model.spins[*j], i == j, m)?;
                if i == j {
                    coo.add_local(&op, &[*i], &dims, ONE)?;
                } else {
                    coo.add_local(&op, &[*i, *j], &dims, ONE)?;
                }
            }
            Term::Local { .. } => unreachable!("models carry no raw local terms"),
        }
        Ok(coo)
    });
    let mut all = CooBuilder::new(total);
    for p in pieces {
        all.extend(p?);
    }
    let matrix = all.build();
    ensure_hermitian(&matrix, model.allow_non_hermitian)?;
    Ok(AssembledHamiltonian { matrix, terms: jobs, energy_offset: model.constant, site_spins: model.spins.clone() })
}

fn ensure_hermitian(m: &SparseManyBodyOperator, allow: bool) -> Result<()> {
    if !allow {
        let defect = m.hermiticity_defect();
        if defect > spin_algebra::HERMITIAN_TOL * m.max_abs().max(1.0) {
            return Err(Error::NotHermitian(defect));
        }
    }
    Ok(())
}

/// `<ψ|H²|ψ> - <ψ|H|ψ>²` computed as `||Hψ - <H>ψ||²`.
pub fn global_variance(h: &AssembledHamiltonian, psi: &CVec) -> Result<f64> {
    if psi.len() != h.dim() {
        return Err(Error::DimensionMismatch { expected: h.dim(), found: psi.len() });
    }
    let hv = h.apply(psi);
    let mean = linalg::inner(psi, &hv);
    let res = hv - psi.map(|z| z * mean);
    Ok(res.iter().map(|z| z.norm_sqr()).sum::<f64>().max(0.0))
}

/// Conserved operator on factor `p` written over that factor's spin operators
/// `S_1^x, S_1^y, S_1^z, S_2^x, ...`, with its eigenvalue on `ψ_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorOperator {
    pub factor: usize,
    pub coefficients: CVec,
    pub eigenvalue: C64,
}

impl FactorOperator {
    /// Uses the actual expectation value, checking the eigen-residual.
    pub fn on_state(state: &ProductState, factor: usize, coefficients: CVec) -> Result<Self> {
        let f = state.factors.get(factor).ok_or(Error::IndexOutOfRange { index: factor, len: state.factors.len() })?;
        let ops = cluster_operators(&f.state.factor_spins)?;
        if coefficients.len() != ops.len() {
            return Err(Error::DimensionMismatch { expected: ops.len(), found: coefficients.len() });
        }
        let q = covariance::conserved_operator(&f.state, &ops, coefficients);
        if q.residual > covariance::CONSERVED_TOL {
            return Err(Error::Constraint(format!(
                "operator on factor {factor} is not conserved (residual {:.3e})",
                q.residual
            )));
        }
        Ok(FactorOperator { factor, coefficients: q.coefficients, eigenvalue: q.eigenvalue })
    }

    pub fn is_hermitian(&self) -> bool {
        self.coefficients.iter().all(|z| z.im.abs() < 1e-12) && self.eigenvalue.im.abs() < 1e-12
    }

    fn shifted_matrix(&self, state: &ProductState) -> Result<CMat> {
        let ops = cluster_operators(&state.factors[self.factor].state.factor_spins)?;
        let q = ops.combination(self.coefficients.as_slice());
        Ok(q - linalg::identity(ops.site_dim).map(|z| z * self.eigenvalue))
    }
}

/// Every linear conserved operator of factor `p`, one per covariance null vector.
pub fn conserved_factor_operators(state: &ProductState, factor: usize) -> Result<Vec<FactorOperator>> {
    let f = state.factors.get(factor).ok_or(Error::IndexOutOfRange { index: factor, len: state.factors.len() })?;
    let ops = cluster_operators(&f.state.factor_spins)?;
    let null = covariance::nullspace(&covariance::covariance_matrix(&f.state, &ops)?);
    (0..null.count).map(|k| FactorOperator::on_state(state, factor, null.vector(k))).collect()
}

/// Hermitian `Q̃_p ⊗ (k·S_q)`, annihilating the product state.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedTerm {
    pub conserved: FactorOperator,
    pub other: usize,
    /// Real weights over the spin operators of factor `other`.
    pub weights: Vec<f64>,
}

/// `k Q̃_a Q̃_b^† + h.c.`
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTerm {
    pub a: FactorOperator,
    pub b: FactorOperator,
    pub k: C64,
}

/// `½ Σ_{αβ} K_{αβ} Q̃_β^† Q̃_α` over a global operator list.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdForm {
    pub ops: Vec<FactorOperator>,
    pub k: CMat,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompatibleCouplingSpec {
    /// `e Q` with Hermitian `Q`.
    pub local: Vec<(FactorOperator, f64)>,
    pub mixed: Vec<MixedTerm>,
    pub paired: Vec<PairedTerm>,
    pub psd: Option<PsdForm>,
}

impl CompatibleCouplingSpec {
    /// `Σ e_α λ_α`.
    pub fn predicted_energy(&self) -> f64 {
        self.local.iter().map(|(q, e)| e * q.eigenvalue.re).sum()
    }

    fn validate(&self, state: &ProductState) -> Result<()> {
        let nf = state.factors.len();
        let check = |q: &FactorOperator| -> Result<()> {
            if q.factor >= nf {
                return Err(Error::IndexOutOfRange { index: q.factor, len: nf });
            }
            let f = &state.factors[q.factor];
            let ops = cluster_operators(&f.state.factor_spins)?;
            let c = covariance::conserved_operator(&f.state, &ops, q.coefficients.clone());
            if c.residual > covariance::CONSERVED_TOL || (c.eigenvalue - q.eigenvalue).norm() > 1e-10 {
                return Err(Error::Constraint(format!("operator on factor {} is not conserved", q.factor)));
            }
            Ok(())
        };
        for (q, _) in &self.local {
            check(q)?;
            if !q.is_hermitian() {
                return Err(Error::Constraint(
                    "a non-Hermitian conserved operator cannot carry a local weight".into(),
                ));
            }
        }
        for m in &self.mixed {
            check(&m.conserved)?;
            if !m.conserved.is_hermitian() {
                return Err(Error::Constraint("mixed terms need a Hermitian conserved operator".into()));
            }
            if m.other >= nf || m.other == m.conserved.factor {
                return Err(Error::InvalidArgument("mixed term must couple two distinct factors".into()));
            }
            if m.weights.len() != 3 * state.factors[m.other].sites.len() {
                return Err(Error::DimensionMismatch {
                    expected: 3 * state.factors[m.other].sites.len(),
                    found: m.weights.len(),
                });
            }
        }
        for p in &self.paired {
            check(&p.a)?;
            check(&p.b)?;
        }
        if let Some(psd) = &self.psd {
            for q in &psd.ops {
                check(q)?;
            }
            let n = psd.ops.len();
            if psd.k.nrows() != n || psd.k.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, found: psd.k.nrows() });
            }
            if linalg::hermiticity_defect(&psd.k) > 1e-12 {
                return Err(Error::NotHermitian(linalg::hermiticity_defect(&psd.k)));
            }
            let min = linalg::eigvalsh(&psd.k).first().copied().unwrap_or(0.0);
            if min < -1e-12 {
                return Err(Error::Constraint(format!("K is not positive semidefinite (min eigenvalue {min:.3e})")));
            }
        }
        Ok(())
    }
}

/// Direct assembly from factor-level operator matrices.
pub fn compatible_hamiltonian(spec: &CompatibleCouplingSpec, state: &ProductState) -> Result<AssembledHamiltonian> {
    spec.validate(state)?;
    let dims = state.site_dims();
    let total = state.total_dim;
    let mut coo = CooBuilder::new(total);
    let mut terms = Vec::new();
    let sites = |p: usize| state.factors[p].sites.clone();
    for (q, e) in &spec.local {
        let ops = cluster_operators(&state.factors[q.factor].state.factor_spins)?;
        let m = ops.combination(q.coefficients.as_slice());
        coo.add_local(&m, &sites(q.factor), &dims, r(*e))?;
        terms.push(Term::Local { sites: sites(q.factor), label: "eQ".into() });
    }
    for t in &spec.mixed {
        let a = t.conserved.shifted_matrix(state)?;
        let ops = cluster_operators(&state.factors[t.other].state.factor_spins)?;
        let w: Vec<C64> = t.weights.iter().map(|&x| r(x)).collect();
        let b = ops.combination(&w);
        let mut s = sites(t.conserved.factor);
        s.extend(sites(t.other));
        coo.add_local(&linalg::kron(&a, &b), &s, &dims, ONE)?;
        terms.push(Term::Local { sites: s, label: "QK".into() });
    }
    for t in &spec.paired {
        let a = t.a.shifted_matrix(state)?;
        let b = t.b.shifted_matrix(state)?;
        product_term(&mut coo, state, &dims, (&t.a, &a), (&t.b, &b.adjoint()), t.k)?;
        product_term(&mut coo, state, &dims, (&t.a, &a.adjoint()), (&t.b, &b), t.k.conj())?;
        terms.push(Term::Local { sites: [sites(t.a.factor), sites(t.b.factor)].concat(), label: "KQQ".into() });
    }
    if let Some(psd) = &spec.psd {
        let mats: Vec<CMat> = psd.ops.iter().map(|q| q.shifted_matrix(state)).collect::<Result<_>>()?;
        for (al, qa) in psd.ops.iter().enumerate() {
            for (be, qb) in psd.ops.iter().enumerate() {
                let k = psd.k[(al, be)];
                if k == ZERO {
                    continue;
                }
                // ½ K_{αβ} Q̃_β^† Q̃_α
                product_term(&mut coo, state, &dims, (qb, &mats[be].adjoint()), (qa, &mats[al]), k * 0.5)?;
            }
        }
        terms.push(Term::Local { sites: (0..state.n_sites()).collect(), label: "PSD".into() });
    }
    let matrix = coo.build();
    ensure_hermitian(&matrix, false)?;
    Ok(AssembledHamiltonian { matrix, terms, energy_offset: 0.0, site_spins: state.site_spins() })
}

/// Adds `k A B` where `A` lives on the factor of `fa` and `B` on the factor of `fb`.
fn product_term(
    coo: &mut CooBuilder,
    state: &ProductState,
    dims: &[usize],
    (fa, a): (&FactorOperator, &CMat),
    (fb, b): (&FactorOperator, &CMat),
    k: C64,
) -> Result<()> {
    if fa.factor == fb.factor {
        coo.add_local(&(a * b), &state.factors[fa.factor].sites, dims, k)
    } else {
        let mut s = state.factors[fa.factor].sites.clone();
        s.extend(state.factors[fb.factor].sites.iter());
        coo.add_local(&linalg::kron(a, b), &s, dims, k)
    }
}

/// Re-expands a compatible specification into fields, bonds and a constant.
pub fn compatible_model(spec: &CompatibleCouplingSpec, state: &ProductState) -> Result<ModelSpec> {
    spec.validate(state)?;
    let mut acc = QuadraticAccumulator::new(state);
    for (q, e) in &spec.local {
        acc.linear(q, r(*e), false);
    }
    for t in &spec.mixed {
        let w = CVec::from_iterator(t.weights.len(), t.weights.iter().map(|&x| r(x)));
        let fake = FactorOperator { factor: t.other, coefficients: w, eigenvalue: ZERO };
        // (Q - λ) ⊗ (w·S): quadratic part plus -λ w·S
        acc.quadratic(&t.conserved, false, &fake, false, ONE);
        acc.linear(&fake, -t.conserved.eigenvalue, false);
    }
    for t in &spec.paired {
        acc.shifted_product(&t.a, false, &t.b, true, t.k);
        acc.shifted_product(&t.a, true, &t.b, false, t.k.conj());
    }
    if let Some(psd) = &spec.psd {
        for (al, qa) in psd.ops.iter().enumerate() {
            for (be, qb) in psd.ops.iter().enumerate() {
                let k = psd.k[(al, be)];
                if k != ZERO {
                    acc.shifted_product(qb, true, qa, false, k * 0.5);
                }
            }
        }
    }
    acc.finish()
}

/// Collects `Σ c S_i^μ S_j^ν + Σ c S_i^μ + const` and folds it into a [`ModelSpec`].
struct QuadraticAccumulator<'a> {
    state: &'a ProductState,
    n: usize,
    fields: Vec<[C64; 3]>,
    pair: Vec<Vec<[[C64; 3]; 3]>>,
    constant: C64,
}

impl<'a> QuadraticAccumulator<'a> {
    fn new(state: &'a ProductState) -> Self {
        let n = state.n_sites();
        QuadraticAccumulator {
            state,
            n,
            fields: vec![[ZERO; 3]; n],
            pair: vec![vec![[[ZERO; 3]; 3]; n]; n],
            constant: ZERO,
        }
    }

    /// `(site, μ, coefficient)` expansion of `Q` or `Q^†`.
    fn expand(&self, q: &FactorOperator, dagger: bool) -> Vec<(usize, usize, C64)> {
        let sites = &self.state.factors[q.factor].sites;
        let mut out = Vec::new();
        for (k, &site) in sites.iter().enumerate() {
            for mu in 0..3 {
                let c = q.coefficients[3 * k + mu];
                out.push((site, mu, if dagger { c.conj() } else { c }));
            }
        }
        out
    }

    fn linear(&mut self, q: &FactorOperator, w: C64, dagger: bool) {
        for (site, mu, c) in self.expand(q, dagger) {
            self.fields[site][mu] += w * c;
        }
    }

    /// `w A B` with `A`, `B` linear in spins (no shifts).
    fn quadratic(&mut self, a: &FactorOperator, da: bool, b: &FactorOperator, db: bool, w: C64) {
        let ea = self.expand(a, da);
        let eb = self.expand(b, db);
        for &(i, mu, ca) in &ea {
            for &(j, nu, cb) in &eb {
                self.pair[i][j][mu][nu] += w * ca * cb;
            }
        }
    }

    /// `w (A - λ_A)(B - λ_B)` with optional daggers (which conjugate λ as well).
    fn shifted_product(&mut self, a: &FactorOperator, da: bool, b: &FactorOperator, db: bool, w: C64) {
        let la = if da { a.eigenvalue.conj() } else { a.eigenvalue };
        let lb = if db { b.eigenvalue.conj() } else { b.eigenvalue };
        self.quadratic(a, da, b, db, w);
        self.linear(a, -w * lb, da);
        self.linear(b, -w * la, db);
        self.constant += w * la * lb;
    }

    fn finish(mut self) -> Result<ModelSpec> {
        let spins = self.state.site_spins();
        let mut model = ModelSpec::new(spins.clone());
        for i in 0..self.n {
            // on-site S^μ S^ν = ½{S^μ,S^ν} + (i/2) ε_{μνρ} S^ρ
            let m = self.pair[i][i];
            for (mu, nu, rho) in [(0, 1, 2), (1, 2, 0), (2, 0, 1)] {
                let anti = m[mu][nu] - m[nu][mu];
                self.fields[i][rho] += anti * I * 0.5;
            }
            let mut sym = [[ZERO; 3]; 3];
            for mu in 0..3 {
                for nu in 0..3 {
                    sym[mu][nu] = (m[mu][nu] + m[nu][mu]) * 0.5;
                }
            }
            if spins[i] == 0.5 {
                // (S^μ)^2 = 1/4 and anticommutators vanish for spin 1/2
                for mu in 0..3 {
                    self.constant += sym[mu][mu] * 0.25;
                }
            } else if sym.iter().flatten().any(|z| z.norm() > 0.0) {
                model.bonds.push(Bond { i, j: i, coupling: sym });
            }
            for j in (i + 1)..self.n {
                let mut c = self.pair[i][j];
                let back = transpose(&self.pair[j][i]);
                add_into(&mut c, &back);
                if c.iter().flatten().any(|z| z.norm() > 0.0) {
                    model.bonds.push(Bond { i, j, coupling: c });
                }
            }
        }
        model.fields = self.fields;
        if self.constant.im.abs() > 1e-10 {
            return Err(Error::NotHermitian(self.constant.im.abs()));
        }
        model.constant = self.constant.re;
        model.clusters = self.state.factors.iter().map(|f| f.sites.clone()).collect();
        let scale = model.scale().max(1.0);
        model.realified(1e-10 * scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::states::{self, generalized_singlet, GeneralizedSingletSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn heisenberg_pair_spectrum() {
        let mut m = ModelSpec::new(vec![0.5, 0.5]);
        m.add_xyz(0, 1, 2.0, 2.0, 2.0);
        let h = assemble(&m).unwrap();
        let mut e = linalg::eigvalsh(&h.matrix.to_dense());
        e.sort_by(f64::total_cmp);
        let want = [-1.5, 0.5, 0.5, 0.5];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn zeeman_is_diagonal() {
        let mut m = ModelSpec::new(vec![1.0, 0.5]);
        m.add_field(0, [0.0, 0.0, 0.7]);
        m.add_field(1, [0.0, 0.0, -0.3]);
        let d = assemble(&m).unwrap().matrix.to_dense();
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert_eq!(d[(i, j)], ZERO);
                }
            }
        }
        assert!((d[(0, 0)].re - (0.7 - 0.15)).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_hermitian_unless_allowed() {
        let mut m = ModelSpec::new(vec![0.5, 0.5]);
        m.add_bond(0, 1, [[linalg::c(0.0, 1.0), ZERO, ZERO], [ZERO; 3], [ZERO; 3]]);
        assert!(matches!(assemble(&m), Err(Error::NotHermitian(_))));
        m.allow_non_hermitian = true;
        assert!(assemble(&m).is_ok());
    }

    fn random_model<R: Rng>(rng: &mut R, spins: Vec<f64>) -> ModelSpec {
        let n = spins.len();
        let mut m = ModelSpec::new(spins);
        for i in 0..n {
            m.add_field(i, [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            for j in (i + 1)..n {
                let mut c = [[0.0; 3]; 3];
                for row in c.iter_mut() {
                    for x in row.iter_mut() {
                        *x = rng.random_range(-1.0..1.0);
                    }
                }
                m.add_bond(i, j, real_coupling(c));
            }
        }
        m
    }

    #[test]
    fn assembly_is_linear_and_matches_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_model(&mut rng, vec![0.5, 1.0, 0.5]);
        let b = random_model(&mut rng, vec![0.5, 1.0, 0.5]);
        let comb = a.linear_combination(-1.7, &b).unwrap();
        let lhs = assemble(&comb).unwrap().matrix.to_dense();
        let rhs = assemble(&a).unwrap().matrix.to_dense().scale(-1.7) + assemble(&b).unwrap().matrix.to_dense();
        assert!(linalg::frobenius(&(lhs - rhs)) < 1e-12);
        // dense oracle from explicit Kronecker products
        let dims = a.site_dims().unwrap();
        let mut dense = CMat::zeros(12, 12);
        for (i, f) in a.fields.iter().enumerate() {
            let (x, y, z) = spin_xyz(a.spins[i]).unwrap();
            for (mu, op) in [x, y, z].iter().enumerate() {
                dense += spin_algebra::embed_dense(op, i, &dims).unwrap().map(|v| v * f[mu]);
            }
        }
        for bd in &a.bonds {
            let (xi, yi, zi) = spin_xyz(a.spins[bd.i]).unwrap();
            let (xj, yj, zj) = spin_xyz(a.spins[bd.j]).unwrap();
            let si = [xi, yi, zi];
            let sj = [xj, yj, zj];
            for mu in 0..3 {
                for nu in 0..3 {
                    let p = spin_algebra::embed_dense(&si[mu], bd.i, &dims).unwrap()
                        * spin_algebra::embed_dense(&sj[nu], bd.j, &dims).unwrap();
                    dense += p.map(|v| v * bd.coupling[mu][nu]);
                }
            }
        }
        let h = assemble(&a).unwrap();
        assert!(linalg::frobenius(&(h.matrix.to_dense() - dense)) < 1e-12);
        assert_eq!(h.terms.len(), 3 + 3);
        let seq = assemble_with(&a, Parallelism::Sequential).unwrap();
        assert_eq!(seq.matrix, h.matrix);
    }

    #[test]
    fn variance_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_model(&mut rng, vec![0.5, 0.5, 1.0]);
        let h = assemble(&m).unwrap();
        let d = h.matrix.to_dense();
        let (_, vecs) = linalg::eigh(&d);
        let v = vecs.column(3).into_owned();
        assert!(global_variance(&h, &v).unwrap() < 1e-24);
        let psi = states::random_state(&mut rng, vec![0.5, 0.5, 1.0]).unwrap().amplitudes;
        let var = global_variance(&h, &psi).unwrap();
        let hpsi = &d * &psi;
        let mean = linalg::inner(&psi, &hpsi).re;
        let direct = linalg::inner(&hpsi, &hpsi).re - mean * mean;
        assert!(var > 1e-3 && (var - direct).abs() < 1e-12);
    }

    fn singlet_product(n_pairs: usize, s: f64, xi: f64) -> ProductState {
        let spec = GeneralizedSingletSpec::new(s, xi, -1).unwrap();
        ProductState::contiguous((0..n_pairs).map(|_| generalized_singlet(&spec).unwrap()).collect()).unwrap()
    }

    fn singlet_ops(state: &ProductState, p: usize, xi: f64) -> [FactorOperator; 3] {
        let (c, s) = ((xi / 2.0).cos(), (xi / 2.0).sin());
        let mk = |v: [C64; 6]| FactorOperator::on_state(state, p, CVec::from_vec(v.to_vec())).unwrap();
        // Q^+ = c S1^+ + s S2^+, Q^- = s S1^- + c S2^-, Q^z = S1^z + S2^z
        let qp = mk([r(c), I * c, ZERO, r(s), I * s, ZERO]);
        let qm = mk([r(s), -I * s, ZERO, r(c), -I * c, ZERO]);
        let qz = mk([ZERO, ZERO, ONE, ZERO, ZERO, ONE]);
        [qp, qm, qz]
    }

    #[test]
    fn psd_parent_is_ground_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xi = 1.1;
        let state = singlet_product(2, 1.0, xi);
        let mut ops = Vec::new();
        for p in 0..2 {
            ops.extend(singlet_ops(&state, p, xi));
        }
        let a = CMat::from_fn(6, 6, |_, _| linalg::c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let k = &a * a.adjoint() + linalg::identity(6).scale(0.2);
        let spec = CompatibleCouplingSpec { psd: Some(PsdForm { ops, k }), ..Default::default() };
        let h = compatible_hamiltonian(&spec, &state).unwrap();
        let psi = state.full_vector();
        assert!(linalg::vec_norm(&h.apply(&psi)) < 1e-10);
        let (vals, vecs) = linalg::eigh(&h.matrix.to_dense());
        assert!(vals[0] > -1e-10 && vals[1] > 1e-6);
        assert!((linalg::inner(&vecs.column(0).into_owned(), &psi).norm() - 1.0).abs() < 1e-8);
        assert_eq!(conserved_factor_operators(&state, 1).unwrap().len(), 3);
        // the re-expanded model describes the same operator
        let model = compatible_model(&spec, &state).unwrap();
        let again = assemble(&model).unwrap();
        let diff = again.matrix.to_dense() + linalg::identity(81).scale(model.constant) - h.matrix.to_dense();
        assert!(linalg::frobenius(&diff) < 1e-10);
    }

    #[test]
    fn local_and_mixed_terms() {
        let xi = 0.7;
        let state = singlet_product(2, 0.5, xi);
        let [_, _, qz0] = singlet_ops(&state, 0, xi);
        let [qp1, _, qz1] = singlet_ops(&state, 1, xi);
        let spec = CompatibleCouplingSpec {
            local: vec![(qz0.clone(), 1.3)],
            mixed: vec![MixedTerm { conserved: qz1.clone(), other: 0, weights: vec![0.2, -0.4, 1.0, 0.0, 0.3, 0.0] }],
            paired: vec![PairedTerm { a: qp1.clone(), b: qz0.clone(), k: linalg::c(0.4, -0.9) }],
            psd: None,
        };
        let h = compatible_hamiltonian(&spec, &state).unwrap();
        let psi = state.full_vector();
        let e = spec.predicted_energy();
        assert!(linalg::vec_norm(&(h.apply(&psi) - psi.map(|z| z * e))) < 1e-10);
        let model = compatible_model(&spec, &state).unwrap();
        let again = assemble(&model).unwrap();
        let diff = again.matrix.to_dense() + linalg::identity(16).scale(model.constant) - h.matrix.to_dense();
        assert!(linalg::frobenius(&diff) < 1e-10);
        // forbidden: a local weight on a non-Hermitian operator
        let bad = CompatibleCouplingSpec { local: vec![(qp1, 1.0)], ..Default::default() };
        assert!(matches!(compatible_hamiltonian(&bad, &state), Err(Error::Constraint(_))));
    }

    #[test]
    fn rejects_non_conserved() {
        let state = singlet_product(1, 0.5, PI / 3.0);
        let v = CVec::from_vec(vec![ONE, ZERO, ZERO, ZERO, ZERO, ZERO]);
        assert!(FactorOperator::on_state(&state, 0, v).is_err());
    }
}
