//! Spectral verification: dense diagonalization, deflated Lanczos for the
//! low end of larger spectra, eigen-residuals and degeneracy counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::hamiltonian::AssembledHamiltonian;
use crate::linalg::{self, CMat, CVec, C64, ONE};
use crate::spin_algebra::{spin_xyz, SparseManyBodyOperator};
use crate::states::gauss;

pub const DEFAULT_DENSE_CAP: usize = 4096;
/// Default relative degeneracy window (times the spectral width).
pub const DEGENERACY_REL: f64 = 1e-8;

/// Dense cap, overridable through `SPINFACT_DENSE_CAP`.
pub fn dense_cap() -> usize {
    std::env::var("SPINFACT_DENSE_CAP").ok().and_then(|v| v.trim().parse().ok()).unwrap_or(DEFAULT_DENSE_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dense,
    Iterative,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumResult {
    /// Ascending, including the constant energy offset.
    pub eigenvalues: Vec<f64>,
    pub ground_energy: f64,
    /// Distance from the ground multiplet to the next level, if one was computed.
    pub gap: Option<f64>,
    pub degeneracy: usize,
    pub method: Method,
    /// Largest `||Hv - λv||` over the returned levels.
    pub residual_bound: f64,
    /// Spectral width used for the degeneracy window (an estimate for the iterative path).
    pub width: f64,
    /// Eigenvectors: the ground multiplet for dense runs, every level for iterative runs.
    #[serde(skip)]
    pub vectors: Vec<CVec>,
}

impl SpectrumResult {
    fn finish(eigenvalues: Vec<f64>, vectors: Vec<CVec>, method: Method, residual_bound: f64, width: f64) -> Self {
        let ground_energy = eigenvalues[0];
        let mut out = SpectrumResult {
            eigenvalues,
            ground_energy,
            gap: None,
            degeneracy: 0,
            method,
            residual_bound,
            width,
            vectors,
        };
        let delta = out.default_delta();
        out.degeneracy = degeneracy(&out, delta);
        out.gap = out.eigenvalues.get(out.degeneracy).map(|e| e - ground_energy);
        out
    }

    pub fn default_delta(&self) -> f64 {
        DEGENERACY_REL * self.width.max(f64::MIN_POSITIVE)
    }

    /// Weight of `psi` in the computed ground multiplet.
    pub fn ground_overlap(&self, psi: &CVec) -> f64 {
        let norm = linalg::vec_norm(psi).powi(2);
        self.vectors.iter().take(self.degeneracy).map(|v| linalg::inner(v, psi).norm_sqr()).sum::<f64>() / norm
    }
}

/// Count of eigenvalues within `delta` of the minimum.
pub fn degeneracy(spec: &SpectrumResult, delta: f64) -> usize {
    let e0 = spec.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    spec.eigenvalues.iter().filter(|&&e| e - e0 <= delta).count()
}

/// `||Hψ - <H>ψ|| / ||ψ||`.
pub fn eigen_residual(h: &AssembledHamiltonian, psi: &CVec) -> Result<f64> {
    if psi.len() != h.dim() {
        return Err(Error::DimensionMismatch { expected: h.dim(), found: psi.len() });
    }
    let n2 = linalg::vec_norm(psi).powi(2);
    let hv = h.apply(psi);
    let mean = linalg::inner(psi, &hv) / n2;
    Ok(linalg::vec_norm(&(hv - psi * mean)) / n2.sqrt())
}

pub fn dense_spectrum(h: &AssembledHamiltonian) -> Result<SpectrumResult> {
    dense_spectrum_capped(h, dense_cap())
}

pub fn dense_spectrum_capped(h: &AssembledHamiltonian, cap: usize) -> Result<SpectrumResult> {
    let dim = h.dim();
    if dim > cap {
        return Err(Error::CapExceeded { dim, cap });
    }
    dense_of(&h.matrix, h.energy_offset)
}

fn dense_of(m: &SparseManyBodyOperator, offset: f64) -> Result<SpectrumResult> {
    let dim = m.total_dim;
    if dim == 0 {
        return Err(Error::InvalidArgument("empty hamiltonian".into()));
    }
    let dense = m.to_dense();
    let (vals, vecs) = linalg::eigh(&dense);
    let tr = m.trace().re;
    let sum: f64 = vals.iter().sum();
    let scale = vals.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    if (tr - sum).abs() > 1e-8 * scale {
        return Err(Error::NoConvergence((tr - sum).abs()));
    }
    let width = vals[dim - 1] - vals[0];
    let delta = DEGENERACY_REL * width.max(f64::MIN_POSITIVE);
    let ground: Vec<CVec> = (0..dim).take_while(|&k| vals[k] - vals[0] <= delta).map(|k| vecs.column(k).into_owned()).collect();
    let mut res = 0.0f64;
    for (k, v) in ground.iter().enumerate() {
        res = res.max(linalg::vec_norm(&(&dense * v - v * linalg::r(vals[k]))));
    }
    let shifted = vals.iter().map(|v| v + offset).collect();
    Ok(SpectrumResult::finish(shifted, ground, Method::Dense, res, width))
}

#[derive(Debug, Clone, Copy)]
pub struct LanczosOptions {
    /// Residual target relative to the spectral-norm estimate.
    pub tolerance: f64,
    pub krylov_dim: usize,
    pub max_restarts: usize,
    pub mode: Parallelism,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions { tolerance: 1e-10, krylov_dim: 160, max_restarts: 60, mode: Parallelism::Parallel }
    }
}

pub fn lowest_k(h: &AssembledHamiltonian, k: usize, seed: u64) -> Result<SpectrumResult> {
    lowest_k_with(h, k, seed, &LanczosOptions::default())
}

/// Lowest `k` levels by Lanczos with full reorthogonalization. Converged vectors
/// are locked one at a time and projected out, so each degenerate copy is found
/// by a fresh restart.
pub fn lowest_k_with(h: &AssembledHamiltonian, k: usize, seed: u64, opts: &LanczosOptions) -> Result<SpectrumResult> {
    let (vals, vecs, res, width) = lanczos(&h.matrix, k, seed, opts)?;
    let shifted = vals.iter().map(|v| v + h.energy_offset).collect();
    Ok(SpectrumResult::finish(shifted, vecs, Method::Iterative, res, width))
}

fn orthogonalize(v: &mut CVec, against: &[&[CVec]]) {
    for _ in 0..2 {
        for u in against.iter().flat_map(|set| set.iter()) {
            let p = linalg::inner(u, v);
            v.axpy(-p, u, ONE);
        }
    }
}

fn apply(m: &SparseManyBodyOperator, x: &CVec, mode: Parallelism) -> CVec {
    let mut y = CVec::zeros(m.total_dim);
    m.matvec_into(x.as_slice(), y.as_mut_slice(), mode);
    y
}

/// Ritz pairs of one Lanczos run against the locked set, ascending.
struct KrylovRun {
    theta: Vec<f64>,
    ritz: Vec<CVec>,
}

fn krylov(m: &SparseManyBodyOperator, start: CVec, locked: &[CVec], kmax: usize, mode: Parallelism) -> Option<KrylovRun> {
    let mut q = start;
    orthogonalize(&mut q, &[locked]);
    let n = linalg::vec_norm(&q);
    if n < 1e-12 {
        return None;
    }
    q.unscale_mut(n);
    let mut basis: Vec<CVec> = Vec::with_capacity(kmax);
    let mut images: Vec<CVec> = Vec::with_capacity(kmax);
    for _ in 0..kmax {
        let mut w = apply(m, &q, mode);
        images.push(w.clone());
        basis.push(q);
        orthogonalize(&mut w, &[locked, &basis]);
        let b = linalg::vec_norm(&w);
        if b < 1e-13 || basis.len() == kmax {
            break;
        }
        q = w.unscale(b);
        // a small b leaves relative errors of order eps/b; clean them after rescaling
        if b < 1e-6 * linalg::vec_norm(images.last().expect("nonempty")) {
            orthogonalize(&mut q, &[locked, &basis]);
            let n = linalg::vec_norm(&q);
            if n < 0.5 {
                break;
            }
            q.unscale_mut(n);
        }
    }
    // full projection instead of the three-term recurrence: no ghosts near convergence
    let j = basis.len();
    let t = CMat::from_fn(j, j, |r, c| linalg::inner(&basis[r], &images[c]));
    let (vals, vecs) = linalg::eigh(&t);
    let theta = vals.as_slice().to_vec();
    let ritz = (0..j)
        .map(|i| {
            let mut v = CVec::zeros(m.total_dim);
            for (r, b) in basis.iter().enumerate() {
                v.axpy(vecs[(r, i)], b, ONE);
            }
            v
        })
        .collect();
    Some(KrylovRun { theta, ritz })
}

/// Rayleigh-Ritz over `locked + v`, removing the cross terms left by inexact locked vectors.
/// Returns the refined pairs and their largest explicit residual.
fn rayleigh_ritz(m: &SparseManyBodyOperator, locked: &[CVec], v: &CVec, mode: Parallelism) -> (Vec<f64>, Vec<CVec>, f64) {
    let mut basis: Vec<CVec> = locked.to_vec();
    let mut w = v.clone();
    orthogonalize(&mut w, &[&basis]);
    let nw = linalg::vec_norm(&w);
    basis.push(w.unscale(nw));
    let images: Vec<CVec> = basis.iter().map(|b| apply(m, b, mode)).collect();
    let n = basis.len();
    let proj = CMat::from_fn(n, n, |i, j| linalg::inner(&basis[i], &images[j]));
    let (vals, vecs) = linalg::eigh(&proj);
    let mut out = Vec::with_capacity(n);
    let mut res = 0.0f64;
    for k in 0..n {
        let mut x = CVec::zeros(m.total_dim);
        let mut hx = CVec::zeros(m.total_dim);
        for i in 0..n {
            x.axpy(vecs[(i, k)], &basis[i], ONE);
            hx.axpy(vecs[(i, k)], &images[i], ONE);
        }
        res = res.max(linalg::vec_norm(&(hx - &x * linalg::r(vals[k]))));
        out.push(x);
    }
    (vals.as_slice().to_vec(), out, res)
}

fn lanczos(m: &SparseManyBodyOperator, k: usize, seed: u64, opts: &LanczosOptions) -> Result<(Vec<f64>, Vec<CVec>, f64, f64)> {
    let dim = m.total_dim;
    if k == 0 || k > dim {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..={dim}")));
    }
    if !m.hermitian && m.hermiticity_defect() > 1e-12 * m.max_abs().max(1.0) {
        return Err(Error::NotHermitian(m.hermiticity_defect()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = || CVec::from_fn(dim, |_, _| C64::new(gauss(&mut rng), gauss(&mut rng)));
    let kmax = opts.krylov_dim.max(2 * k + 10).min(dim);
    let mut locked: Vec<CVec> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut max_res = 0.0f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut norm_est = 0.0f64;
    let mut start = random();
    let mut restarts = 0;
    let mut best = f64::INFINITY;
    while locked.len() < k {
        let room = dim - locked.len();
        let run = match krylov(m, start.clone(), &locked, kmax.min(room), opts.mode) {
            Some(r) => r,
            None => {
                start = random();
                continue;
            }
        };
        lo = lo.min(run.theta[0]);
        hi = hi.max(*run.theta.last().expect("nonempty"));
        norm_est = norm_est.max(lo.abs()).max(hi.abs()).max(f64::MIN_POSITIVE);
        let target = opts.tolerance * norm_est;
        let mut v = run.ritz[0].clone();
        v.unscale_mut(linalg::vec_norm(&v));
        let (rr_values, rr_vectors, r) = rayleigh_ritz(m, &locked, &v, opts.mode);
        best = best.min(r);
        if r <= target {
            max_res = max_res.max(r);
            values = rr_values;
            locked = rr_vectors;
            restarts = 0;
            best = f64::INFINITY;
            // a fresh random start overlaps every symmetry sector
            start = random();
        } else {
            restarts += 1;
            if restarts > opts.max_restarts {
                return Err(Error::NoConvergence(best));
            }
            start = v;
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let vals = order.iter().map(|&i| values[i]).collect();
    let vecs = order.iter().map(|&i| locked[i].clone()).collect();
    Ok((vals, vecs, max_res, hi - lo))
}

/// Total-`S^z` sectors of the product basis, keyed by `2M`.
pub fn sz_sectors(site_spins: &[f64]) -> Result<Vec<(i64, Vec<usize>)>> {
    let mut mz = vec![0i64];
    for &s in site_spins {
        let (_, _, z) = spin_xyz(s)?;
        let d = z.nrows();
        let mut next = Vec::with_capacity(mz.len() * d);
        for &m in &mz {
            for a in 0..d {
                next.push(m + (2.0 * z[(a, a)].re).round() as i64);
            }
        }
        mz = next;
    }
    let mut keys: Vec<i64> = mz.clone();
    keys.sort_unstable();
    keys.dedup();
    Ok(keys.into_iter().map(|key| (key, (0..mz.len()).filter(|&i| mz[i] == key).collect())).collect())
}

/// Dense spectrum assembled from total-`S^z` blocks. Fails when `H` couples sectors.
pub fn blocked_dense_spectrum(h: &AssembledHamiltonian, cap: usize) -> Result<SpectrumResult> {
    let sectors = sz_sectors(&h.site_spins)?;
    let mut label = vec![0i64; h.dim()];
    for (key, idx) in &sectors {
        for &i in idx {
            label[i] = *key;
        }
    }
    let leak = h.matrix.triplets().filter(|&(i, j, _)| label[i] != label[j]).map(|(_, _, v)| v.norm()).fold(0.0, f64::max);
    if leak > 1e-12 * h.matrix.max_abs().max(1.0) {
        return Err(Error::InvalidArgument(format!("hamiltonian does not conserve total S^z (entry {leak:e})")));
    }
    if let Some((_, idx)) = sectors.iter().find(|(_, idx)| idx.len() > cap) {
        return Err(Error::CapExceeded { dim: idx.len(), cap });
    }
    let mut levels: Vec<(f64, usize, usize)> = Vec::new();
    let mut blocks = Vec::new();
    for (b, (_, idx)) in sectors.iter().enumerate() {
        let sub = h.matrix.restrict(idx);
        let (vals, vecs) = linalg::eigh(&sub.to_dense());
        levels.extend(vals.iter().enumerate().map(|(k, &v)| (v, b, k)));
        blocks.push(vecs);
    }
    levels.sort_by(|a, b| a.0.total_cmp(&b.0));
    let width = levels.last().expect("nonempty").0 - levels[0].0;
    let delta = DEGENERACY_REL * width.max(f64::MIN_POSITIVE);
    let mut vectors = Vec::new();
    for &(_, b, k) in levels.iter().take_while(|l| l.0 - levels[0].0 <= delta) {
        let mut full = CVec::zeros(h.dim());
        for (r, &i) in sectors[b].1.iter().enumerate() {
            full[i] = blocks[b][(r, k)];
        }
        vectors.push(full);
    }
    let mut res = 0.0f64;
    for (k, v) in vectors.iter().enumerate() {
        res = res.max(linalg::vec_norm(&(h.apply(v) - v * linalg::r(levels[k].0))));
    }
    let vals = levels.iter().map(|l| l.0 + h.energy_offset).collect();
    Ok(SpectrumResult::finish(vals, vectors, Method::Dense, res, width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{assemble, ModelSpec};
    use crate::states::gauss;

    fn heisenberg_chain(n: usize, s: f64, cyclic: bool) -> ModelSpec {
        let mut m = ModelSpec::new(vec![s; n]);
        for i in 0..n {
            if i + 1 < n || cyclic {
                m.add_xyz(i, (i + 1) % n, 1.0, 1.0, 1.0);
            }
        }
        m
    }

    #[test]
    fn heisenberg_pair_dense() {
        let h = assemble(&heisenberg_chain(2, 0.5, false)).unwrap();
        let sp = dense_spectrum(&h).unwrap();
        let want = [-0.75, 0.25, 0.25, 0.25];
        for (a, b) in sp.eigenvalues.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(sp.degeneracy, 1);
        assert!((sp.gap.unwrap() - 1.0).abs() < 1e-12);
        assert!(eigen_residual(&h, &sp.vectors[0]).unwrap() < 1e-10);
    }

    #[test]
    fn diagonal_matrix_spectrum_and_offset() {
        let mut m = ModelSpec::new(vec![1.0]);
        m.add_field(0, [0.0, 0.0, 2.0]);
        m.constant = 0.5;
        let h = assemble(&m).unwrap();
        let sp = dense_spectrum(&h).unwrap();
        assert_eq!(sp.eigenvalues, vec![-1.5, 0.5, 2.5]);
    }

    #[test]
    fn identity_is_fully_degenerate() {
        let mut m = ModelSpec::new(vec![0.5, 0.5]);
        m.constant = 1.0;
        let h = assemble(&m).unwrap();
        let sp = dense_spectrum(&h).unwrap();
        assert_eq!(degeneracy(&sp, 1e-12), 4);
    }

    #[test]
    fn cap_is_enforced() {
        let h = assemble(&heisenberg_chain(4, 0.5, false)).unwrap();
        assert!(matches!(dense_spectrum_capped(&h, 8), Err(Error::CapExceeded { dim: 16, cap: 8 })));
    }

    #[test]
    fn lanczos_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (n, s) in [(8usize, 0.5), (5, 1.0), (10, 0.5)] {
            let mut m = heisenberg_chain(n, s, true);
            for i in 0..n {
                m.add_field(i, [0.1 * gauss(&mut rng), 0.0, 0.3 * gauss(&mut rng)]);
            }
            let h = assemble(&m).unwrap();
            let dense = dense_spectrum(&h).unwrap();
            let it = lowest_k(&h, 6, 11).unwrap();
            for k in 0..6 {
                assert!((dense.eigenvalues[k] - it.eigenvalues[k]).abs() < 1e-8, "{n} {s} {k}");
            }
            assert!(it.residual_bound < 1e-8 * h.matrix.norm_bound());
        }
    }

    #[test]
    fn lanczos_resolves_degenerate_levels() {
        // isotropic chain: every level is a spin multiplet
        let h = assemble(&heisenberg_chain(8, 0.5, true)).unwrap();
        let dense = dense_spectrum(&h).unwrap();
        let it = lowest_k(&h, 5, 1).unwrap();
        for k in 0..5 {
            assert!((dense.eigenvalues[k] - it.eigenvalues[k]).abs() < 1e-8);
        }
        // ground singlet then a triplet
        assert!((it.eigenvalues[1] - it.eigenvalues[3]).abs() < 1e-8);
    }

    #[test]
    fn lanczos_is_deterministic() {
        let h = assemble(&heisenberg_chain(6, 1.0, false)).unwrap();
        let a = lowest_k(&h, 3, 5).unwrap();
        let b = lowest_k(&h, 3, 5).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
    }

    #[test]
    fn rank_one_shift_of_identity() {
        // H = 1 - 2|u><u| with u the all-up state: lowest level -1, then 1
        let n = 4;
        let mut m = ModelSpec::new(vec![0.5; n]);
        m.constant = 1.0;
        let h0 = assemble(&m).unwrap();
        let mut t: Vec<_> = h0.matrix.triplets().collect();
        t.push((0, 0, linalg::r(-2.0)));
        let mut h = h0.clone();
        h.matrix = SparseManyBodyOperator::from_triplets(16, t);
        h.energy_offset = 1.0;
        let sp = lowest_k(&h, 1, 0).unwrap();
        assert!((sp.ground_energy + 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_of_random_vector_is_positive() {
        let h = assemble(&heisenberg_chain(4, 0.5, true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = CVec::from_fn(16, |_, _| C64::new(gauss(&mut rng), gauss(&mut rng)));
        let r = eigen_residual(&h, &v).unwrap();
        let var = crate::hamiltonian::global_variance(&h, &v.unscale(linalg::vec_norm(&v))).unwrap();
        assert!(r > 1e-3);
        assert!((r - var.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn sz_blocking_agrees() {
        let mut m = heisenberg_chain(6, 0.5, true);
        m.add_xyz(0, 3, 0.7, 0.7, -0.2);
        m.add_field(2, [0.0, 0.0, 0.4]);
        let h = assemble(&m).unwrap();
        let a = dense_spectrum(&h).unwrap();
        let b = blocked_dense_spectrum(&h, 64).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((x - y).abs() < 1e-10);
        }
        assert_eq!(a.degeneracy, b.degeneracy);
        m.add_field(1, [0.3, 0.0, 0.0]);
        assert!(blocked_dense_spectrum(&assemble(&m).unwrap(), 64).is_err());
    }

    #[test]
    fn spectrum_invariant_under_global_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 4;
        let mut m = ModelSpec::new(vec![0.5; n]);
        for i in 0..n {
            for j in i + 1..n {
                let jij = gauss(&mut rng);
                m.add_xyz(i, j, jij, jij, jij);
            }
        }
        let h = assemble(&m).unwrap();
        let [tx, ty, tz] = crate::spin_algebra::total_spin(&m.spins).unwrap();
        let gen = tx.scale(gauss(&mut rng)) + ty.scale(gauss(&mut rng)) + tz.scale(gauss(&mut rng));
        let u = linalg::unitary_exp(&gen, 1.0);
        let rotated = &u * h.matrix.to_dense() * u.adjoint();
        let a = linalg::eigvalsh(&h.matrix.to_dense());
        let b = linalg::eigvalsh(&rotated);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        // isotropic couplings commute with the rotation itself
        assert!(linalg::frobenius(&(rotated - h.matrix.to_dense())) < 1e-9);
    }
}
