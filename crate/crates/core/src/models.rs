//! Generators for the dimerized and fully factorized examples, plus parameter
//! sweeps that locate ground-state boundaries by bisection.

use serde::Serialize;
use std::f64::consts::PI;

use crate::diagonalize::{self, SpectrumResult};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::factorization::{self, check_conditions};
use crate::hamiltonian::{assemble, diagonal_coupling, AssembledHamiltonian, Coupling, ModelSpec};
use crate::linalg::{CVec, C64};
use crate::states::{generalized_singlet, spin_coherent, Factor, GeneralizedSingletSpec, LocalState, ProductState};

/// A trial product state with its closed-form energy.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub label: String,
    pub state: ProductState,
    pub energy: f64,
    pub pair_energies: Vec<f64>,
    pub angles: Vec<f64>,
}

impl Candidate {
    /// Runs the factorization check on `model`.
    pub fn verdict(&self, model: &ModelSpec) -> Result<bool> {
        Ok(check_conditions(model, &self.state)?.verdict)
    }
}

#[derive(Debug, Clone)]
pub struct ModelInstance {
    pub model: ModelSpec,
    pub candidates: Vec<Candidate>,
    pub notes: Vec<String>,
}

impl ModelInstance {
    pub fn candidate(&self, label: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.label == label)
    }
}

fn singlet(s: f64, xi: f64, parity: i8) -> Result<LocalState> {
    generalized_singlet(&GeneralizedSingletSpec::new(s, xi, parity)?)
}

/// `ξ ∈ [0, π/2]` with `sin ξ = ratio`.
fn angle(ratio: f64) -> Result<f64> {
    if !ratio.is_finite() || ratio.abs() > 1.0 + 1e-14 {
        return Err(Error::NoRealAngle(ratio.abs()));
    }
    if ratio < 0.0 {
        return Err(Error::Constraint(format!("sin(xi) = {ratio} must be non-negative")));
    }
    Ok(ratio.min(1.0).asin())
}

/// Neighbouring pairs `(p, p+1)`, closed into a ring when `cyclic`. Each unordered pair appears once.
pub fn nearest_pairs(n: usize, cyclic: bool) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for p in 0..n {
        if p + 1 < n || (cyclic && n > 1) {
            let q = (p + 1) % n;
            let key = (p.min(q), p.max(q));
            if !out.contains(&key) {
                out.push(key);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MgXxzParams {
    pub n_pairs: usize,
    pub s: f64,
    pub j: f64,
    pub jz: f64,
    pub je: f64,
    pub jez: f64,
    pub jd: f64,
    pub jdz: f64,
    pub b0: f64,
    pub cyclic: bool,
}

impl MgXxzParams {
    /// Dimerizing defaults: `J^E_z = J^E`, `J^D_z = J^E_z/2`, and `J_z` from the
    /// spin ≥ 1 condition (or `J_z = J` for spin 1/2).
    pub fn dimerizing(n_pairs: usize, s: f64, j: f64, je: f64, jd: f64, cyclic: bool) -> Self {
        let jz = if s >= 1.0 { j * je / (2.0 * jd) } else { j };
        MgXxzParams { n_pairs, s, j, jz, je, jez: je, jd, jdz: je / 2.0, b0: 0.0, cyclic }
    }
}

/// XXZ chain with first (`J`, `J^E`) and second (`J^D`) neighbour couplings; pair
/// `p` holds sites `2p, 2p+1`. When the dimerizing relations hold, the alternating
/// generalized-singlet product is returned with the matching alternating field.
pub fn mg_xxz_chain(p: &MgXxzParams) -> Result<ModelInstance> {
    if p.n_pairs == 0 {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    let n = 2 * p.n_pairs;
    let ratio = 2.0 * p.jd / p.je;
    let xi = angle(ratio)?;
    let mut notes = Vec::new();
    let scale = p.j.abs().max(p.je.abs()).max(p.jz.abs()).max(1e-300);
    let mut ok = (p.jez - 2.0 * p.jdz).abs() <= 1e-12 * scale;
    if !ok {
        notes.push("J^E_z != 2 J^D_z: no dimerized prediction".into());
    }
    if p.s >= 1.0 && (p.jz - p.j / xi.sin()).abs() > 1e-12 * scale {
        notes.push("spin >= 1 requires J_z = J J^E/(2 J^D): no dimerized prediction".into());
        ok = false;
    }
    if xi == 0.0 {
        notes.push("J^D = 0: separable limit, no dimerized prediction".into());
        ok = false;
    }
    if p.cyclic && p.n_pairs % 2 == 1 && (xi - PI / 2.0).abs() > 1e-12 {
        notes.push("odd cyclic chain cannot alternate xi, pi - xi: no dimerized prediction".into());
        ok = false;
    }
    let xis: Vec<f64> = (0..p.n_pairs).map(|q| if q % 2 == 0 { xi } else { PI - xi }).collect();
    let mut m = ModelSpec::new(vec![p.s; n]);
    m.family_tag = Some("mg_xxz".into());
    m.clusters = (0..p.n_pairs).map(|q| vec![2 * q, 2 * q + 1]).collect();
    for (q, &x) in xis.iter().enumerate() {
        let (a, b) = (2 * q, 2 * q + 1);
        m.add_xyz(a, b, p.j, p.j, p.jz);
        let alt = if ok { 0.5 * p.j / x.tan() } else { 0.0 };
        m.add_field(a, [0.0, 0.0, p.b0 - alt]);
        m.add_field(b, [0.0, 0.0, p.b0 + alt]);
    }
    for q in 0..p.n_pairs {
        if q + 1 == p.n_pairs && !p.cyclic {
            break;
        }
        let r = (q + 1) % p.n_pairs;
        if r == q {
            break;
        }
        m.add_xyz(2 * q + 1, 2 * r, p.je, p.je, p.jez);
        for i in 0..2 {
            m.add_xyz(2 * q + i, 2 * r + i, p.jd, p.jd, p.jdz);
        }
    }
    let mut candidates = Vec::new();
    if ok {
        let e_p = if p.s == 0.5 { -0.25 * (p.j * p.je / p.jd + p.jz) } else { -p.s * (p.s + 1.0) * p.jz };
        let states = xis.iter().map(|&x| singlet(p.s, x, -1)).collect::<Result<Vec<_>>>()?;
        candidates.push(Candidate {
            label: "dimerized".into(),
            state: ProductState::contiguous(states)?,
            energy: e_p * p.n_pairs as f64,
            pair_energies: vec![e_p; p.n_pairs],
            angles: xis,
        });
    }
    Ok(ModelInstance { model: m, candidates, notes })
}

/// Interpair range `r_pq`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Range {
    Nearest { cyclic: bool },
    Custom(Vec<(usize, usize, f64)>),
}

impl Range {
    pub fn weights(&self, n: usize) -> Vec<(usize, usize, f64)> {
        match self {
            Range::Nearest { cyclic } => nearest_pairs(n, *cyclic).into_iter().map(|(p, q)| (p, q, 1.0)).collect(),
            Range::Custom(w) => w.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XyzLadderParams {
    pub n_pairs: usize,
    pub jx: f64,
    pub jy: f64,
    pub jz: f64,
    /// `(J^E_x, J^E_y)`; the z components are zero.
    pub je: [f64; 2],
    pub jd: [f64; 2],
    pub range: Range,
    /// `(B_1, B_2)`; `None` selects the dimerizing fields.
    pub fields: Option<[f64; 2]>,
    /// Fail instead of returning a non-factorizing instance when the quadratic constraint is violated.
    pub require_exact: bool,
}

/// Spin-1/2 two-leg XYZ ladder. Returns the uniform vertical candidates `Ψ^+`, `Ψ^-`.
pub fn xyz_ladder(p: &XyzLadderParams) -> Result<ModelInstance> {
    let [jex, jey] = p.je;
    let [jdx, jdy] = p.jd;
    if p.n_pairs == 0 {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    if p.jx < p.jy.abs() || jdx < jex || jex < jey.abs() || jdy < 0.0 {
        return Err(Error::Constraint("require J_x >= |J_y|, J^D_x >= J^E_x >= |J^E_y|, J^D_y >= 0".into()));
    }
    let quad = (jdx * jdx - jdy * jdy) - (jex * jex - jey * jey);
    let scale = jdx.abs().max(jex.abs()).max(1e-300);
    let mut notes = Vec::new();
    if quad.abs() > 1e-12 * scale * scale {
        if p.require_exact {
            return Err(Error::Constraint(format!("(J^D_x)^2 - (J^D_y)^2 - (J^E_x)^2 + (J^E_y)^2 = {quad:e}")));
        }
        notes.push(format!("quadratic constraint violated by {quad:e}"));
    }
    let jdp = jdx + jdy;
    let xi_plus = angle((jex - jey) / jdp)?;
    let xi_minus = angle((jex + jey) / jdp)?;
    let [b1, b2] = match p.fields {
        Some(b) => b,
        None => {
            let bp = -0.5 * (p.jx - p.jy) / xi_plus.tan();
            let bm = -0.5 * (p.jx + p.jy) / xi_minus.tan();
            [0.5 * (bp + bm), 0.5 * (bp - bm)]
        }
    };
    let n = 2 * p.n_pairs;
    let mut m = ModelSpec::new(vec![0.5; n]);
    m.family_tag = Some("xyz_ladder".into());
    for q in 0..p.n_pairs {
        m.add_xyz(2 * q, 2 * q + 1, p.jx, p.jy, p.jz);
        m.add_field(2 * q, [0.0, 0.0, b1]);
        m.add_field(2 * q + 1, [0.0, 0.0, b2]);
    }
    for (a, b, r) in p.range.weights(p.n_pairs) {
        if a >= p.n_pairs || b >= p.n_pairs || a == b {
            return Err(Error::InvalidArgument(format!("bad range entry ({a}, {b})")));
        }
        for i in 0..2 {
            m.add_xyz(2 * a + i, 2 * b + i, r * jdx, r * jdy, 0.0);
            m.add_xyz(2 * a + i, 2 * b + 1 - i, r * jex, r * jey, 0.0);
        }
    }
    let mut candidates = Vec::new();
    for (label, parity, xi) in [("plus", 1i8, xi_plus), ("minus", -1, xi_minus)] {
        if xi == 0.0 {
            notes.push(format!("xi^{label} = 0: candidate omitted"));
            continue;
        }
        let sg = parity as f64;
        let e_p = 0.25 * (-(p.jx - sg * p.jy) / xi.sin() + sg * p.jz);
        let states = (0..p.n_pairs).map(|_| singlet(0.5, xi, parity)).collect::<Result<Vec<_>>>()?;
        candidates.push(Candidate {
            label: label.into(),
            state: ProductState::contiguous(states)?,
            energy: e_p * p.n_pairs as f64,
            pair_energies: vec![e_p; p.n_pairs],
            angles: vec![xi; p.n_pairs],
        });
    }
    Ok(ModelInstance { model: m, candidates, notes })
}

/// Four-spin XYZ instance with vertical `Ψ^±` and horizontal `Ψ'^{+-}` candidates.
#[derive(Debug, Clone)]
pub struct Tetramer {
    pub instance: ModelInstance,
    pub jdy: f64,
    pub jz_c: f64,
    pub b1: f64,
    pub b2: f64,
    pub xi_plus: f64,
    pub xi_minus: f64,
    pub xi_prime: f64,
}

pub fn tetramer_critical_jz(jx: f64, jdx: f64) -> f64 {
    (jdx * jdx - jx * jx).sqrt()
}

/// Sites `0, 1` form the upper vertical pair and `2, 3` the lower one; the
/// horizontal state pairs `(0, 2)` and `(1, 3)`.
pub fn xyz_tetramer(jx: f64, jy: f64, jdx: f64, jz: f64) -> Result<Tetramer> {
    if !(jdx > jx && jx > jy.abs()) {
        return Err(Error::Constraint(format!("require J^D_x > J_x > |J_y| (got {jdx}, {jx}, {jy})")));
    }
    let jdy = (jdx * jdx - jx * jx + jy * jy).sqrt();
    let params = XyzLadderParams {
        n_pairs: 2,
        jx,
        jy,
        jz,
        je: [jx, jy],
        jd: [jdx, jdy],
        range: Range::Nearest { cyclic: false },
        fields: None,
        require_exact: true,
    };
    let mut instance = xyz_ladder(&params)?;
    instance.model.family_tag = Some("xyz_tetramer".into());
    let b1 = instance.model.fields[0][2].re;
    let b2 = instance.model.fields[1][2].re;
    let xi_plus = instance.candidate("plus").expect("present").angles[0];
    let xi_minus = instance.candidate("minus").expect("present").angles[0];
    let mut xi_prime = (-(jdx - jdy) / (4.0 * b1)).atan();
    if xi_prime < 0.0 {
        xi_prime += PI;
    }
    let upper = Factor { sites: vec![0, 2], state: singlet(0.5, xi_prime, 1)? };
    let lower = Factor { sites: vec![1, 3], state: singlet(0.5, PI / 2.0, -1)? };
    let e_up = -0.25 * (jdx - jdy) / xi_prime.sin();
    let e_low = -0.25 * (jdx + jdy);
    let jz_c = tetramer_critical_jz(jx, jdx);
    let e_closed = -0.5 * (jz_c + jdx + jdy);
    instance.candidates.push(Candidate {
        label: "horizontal".into(),
        state: ProductState::new(vec![upper, lower])?,
        energy: e_closed,
        pair_energies: vec![e_up, e_low],
        angles: vec![xi_prime, PI / 2.0],
    });
    Ok(Tetramer { instance, jdy, jz_c, b1, b2, xi_plus, xi_minus, xi_prime })
}

/// Product of spin-coherent states with its verdict.
#[derive(Debug, Clone)]
pub struct CoherentInstance {
    pub model: ModelSpec,
    pub state: ProductState,
    pub verdict: bool,
    pub max_coupling_residual: f64,
}

/// Builds fields `b_p = λ_p n_p - Σ_q J^{pq} s_q n_q`, which make every
/// effective field parallel to `n_p`. Whether the state is an eigenstate then
/// depends only on the couplings, reported through the verdict.
pub fn full_factor_chain(
    spins: &[f64],
    directions: &[(f64, f64)],
    bonds: &[(usize, usize, Coupling)],
    lambda: &[f64],
) -> Result<CoherentInstance> {
    let n = spins.len();
    if directions.len() != n || lambda.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: directions.len().min(lambda.len()) });
    }
    let unit: Vec<[f64; 3]> =
        directions.iter().map(|&(t, f)| [t.sin() * f.cos(), t.sin() * f.sin(), t.cos()]).collect();
    let mut m = ModelSpec::new(spins.to_vec());
    m.family_tag = Some("full_factor".into());
    for &(i, j, c) in bonds {
        if i >= n || j >= n || i == j {
            return Err(Error::InvalidArgument(format!("bad bond ({i}, {j})")));
        }
        m.add_bond(i, j, c);
    }
    for p in 0..n {
        let mut h: [C64; 3] = [C64::new(0.0, 0.0); 3];
        for q in (0..n).filter(|&q| q != p) {
            let c = m.coupling(p, q);
            for mu in 0..3 {
                for nu in 0..3 {
                    h[mu] += c[mu][nu] * spins[q] * unit[q][nu];
                }
            }
        }
        let b: [f64; 3] = std::array::from_fn(|mu| lambda[p] * unit[p][mu] - h[mu].re);
        m.add_field(p, b);
    }
    let states = directions
        .iter()
        .zip(spins)
        .map(|(&(t, f), &s)| spin_coherent(s, t, f))
        .collect::<Result<Vec<_>>>()?;
    let state = ProductState::contiguous(states)?;
    let rep = check_conditions(&m, &state)?;
    let max_coupling_residual = rep.max_coupling_residual();
    Ok(CoherentInstance { model: m, state, verdict: rep.verdict, max_coupling_residual })
}

/// Uniform XYZ chain at its factorizing field: spins alternate between
/// `(±sin θ, 0, cos θ)` with `cos²θ = (J_y + J_z)/(J_x + J_z)`, and the field is
/// uniform along z.
pub fn kurmann_chain(s: f64, n: usize, jx: f64, jy: f64, jz: f64, cyclic: bool) -> Result<CoherentInstance> {
    if cyclic && n % 2 == 1 {
        return Err(Error::InvalidArgument("cyclic chain needs an even number of sites".into()));
    }
    let c2 = (jy + jz) / (jx + jz);
    if !(0.0..=1.0).contains(&c2) || !c2.is_finite() {
        return Err(Error::NoRealAngle(c2));
    }
    let theta = c2.sqrt().acos();
    let directions: Vec<(f64, f64)> = (0..n).map(|p| (theta, if p % 2 == 0 { 0.0 } else { PI })).collect();
    let bonds: Vec<(usize, usize, Coupling)> = (0..n)
        .filter(|&i| i + 1 < n || (cyclic && n > 2))
        .map(|i| (i, (i + 1) % n, diagonal_coupling(jx, jy, jz)))
        .collect();
    // λ_p cancels the transverse part of the mean field, leaving a z field
    let n_neighbours = |p: usize| bonds.iter().filter(|b| b.0 == p || b.1 == p).count() as f64;
    let lambda: Vec<f64> = (0..n).map(|p| if theta.sin() == 0.0 { 0.0 } else { -s * jx * n_neighbours(p) }).collect();
    let mut inst = full_factor_chain(&vec![s; n], &directions, &bonds, &lambda)?;
    inst.model.family_tag = Some("kurmann".into());
    Ok(inst)
}

/// One point of a parameter sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub spectrum: SpectrumResult,
    /// Ground-multiplet weight of each candidate.
    pub overlaps: Vec<f64>,
    pub predicted: Vec<f64>,
    pub labels: Vec<String>,
}

impl SweepPoint {
    /// Candidate identified as ground state (overlap above `1 - 1e-8`), best first.
    pub fn ground_label(&self) -> Option<usize> {
        self.overlaps
            .iter()
            .enumerate()
            .filter(|(_, &o)| o > 1.0 - SWEEP_OVERLAP)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
    }
}

pub const SWEEP_OVERLAP: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    /// `None` for dense spectra, `Some(k)` for the lowest `k` by Lanczos.
    pub lowest: Option<usize>,
    pub seed: u64,
    pub dense_cap: usize,
    pub mode: Parallelism,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { lowest: None, seed: 0, dense_cap: diagonalize::dense_cap(), mode: Parallelism::Parallel }
    }
}

fn spectrum(h: &AssembledHamiltonian, opts: &SweepOptions) -> Result<SpectrumResult> {
    match opts.lowest {
        None => diagonalize::dense_spectrum_capped(h, opts.dense_cap),
        Some(k) => diagonalize::lowest_k(h, k, opts.seed),
    }
}

/// Evaluate one sweep point of a generator.
pub fn evaluate<F>(build: &F, value: f64, opts: &SweepOptions) -> Result<SweepPoint>
where
    F: Fn(f64) -> Result<ModelInstance>,
{
    let inst = build(value)?;
    let h = assemble(&inst.model)?;
    let spectrum = spectrum(&h, opts)?;
    let overlaps = inst.candidates.iter().map(|c| spectrum.ground_overlap(&c.state.full_vector())).collect();
    Ok(SweepPoint {
        value,
        spectrum,
        overlaps,
        predicted: inst.candidates.iter().map(|c| c.energy).collect(),
        labels: inst.candidates.iter().map(|c| c.label.clone()).collect(),
    })
}

/// Points are independent and evaluated in parallel; output keeps input order.
pub fn sweep<F>(build: &F, values: &[f64], opts: &SweepOptions) -> Result<Vec<SweepPoint>>
where
    F: Fn(f64) -> Result<ModelInstance> + Sync,
{
    let inner = SweepOptions { mode: Parallelism::Sequential, ..*opts };
    exec::map(values, opts.mode, |&v| evaluate(build, v, &inner)).into_iter().collect()
}

/// A change of ground-state identity between two candidate labels (or none).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Boundary {
    pub value: f64,
    pub below: Option<String>,
    pub above: Option<String>,
}

/// Bisects every change of `ground_label` between neighbouring points down to `resolution`.
pub fn locate_boundaries<F>(build: &F, points: &[SweepPoint], resolution: f64, opts: &SweepOptions) -> Result<Vec<Boundary>>
where
    F: Fn(f64) -> Result<ModelInstance> + Sync,
{
    let windows: Vec<(f64, f64, Option<usize>, Option<usize>)> = points
        .windows(2)
        .filter(|w| w[0].ground_label() != w[1].ground_label())
        .map(|w| (w[0].value, w[1].value, w[0].ground_label(), w[1].ground_label()))
        .collect();
    let inner = SweepOptions { mode: Parallelism::Sequential, ..*opts };
    let name = |k: Option<usize>| k.map(|k| points[0].labels[k].clone());
    exec::map(&windows, opts.mode, |&(lo, hi, a, b)| {
        let keep_low = |v: f64| -> Result<bool> {
            let l = evaluate(build, v, &inner)?.ground_label();
            Ok(match a {
                Some(_) => l == a,
                None => l != b,
            })
        };
        let value = bisect(keep_low, lo, hi, resolution)?;
        Ok(Boundary { value, below: name(a), above: name(b) })
    })
    .into_iter()
    .collect()
}

/// Midpoint of the final bracket of a predicate that holds at `lo` and fails at `hi`.
pub fn bisect<P: FnMut(f64) -> Result<bool>>(mut holds: P, mut lo: f64, mut hi: f64, resolution: f64) -> Result<f64> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    while (hi - lo).abs() > resolution {
        let mid = 0.5 * (lo + hi);
        if holds(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Ground-state vector check shared by tests and the CLI: residual of each candidate on `h`.
pub fn candidate_residuals(h: &AssembledHamiltonian, inst: &ModelInstance) -> Result<Vec<f64>> {
    inst.candidates.iter().map(|c| diagonalize::eigen_residual(h, &c.state.full_vector())).collect()
}

/// Energy of a candidate evaluated on the assembled matrix.
pub fn candidate_energy(h: &AssembledHamiltonian, c: &Candidate) -> f64 {
    let v: CVec = c.state.full_vector();
    h.energy(&v)
}

/// Internal-family solution of each factor of a candidate, as reported by the factorization module.
pub fn internal_constraints(inst: &ModelInstance, c: &Candidate) -> Result<Vec<factorization::InternalSolution>> {
    let tag = inst.model.family_tag.clone().unwrap_or_default();
    (0..c.state.factors.len())
        .map(|p| {
            let parity = if c.label == "plus" || (c.label == "horizontal" && p == 0) { 1 } else { -1 };
            let fam = factorization::InternalFamily::from_tag(&tag, c.angles[p], parity)?;
            factorization::internal_solution(fam, &inst.model, &c.state, p)
        })
        .collect()
}
