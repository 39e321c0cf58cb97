//! Local trial states and product states.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{self, c, r, CMat, CVec, C64, ZERO};
use crate::spin_algebra::{self, clebsch_gordan, spin_dim, spin_xyz};

pub const NORM_TOL: f64 = 1e-12;

/// Default refusal threshold for cluster state dimensions.
pub const DEFAULT_CLUSTER_CAP: usize = 1 << 16;

/// Normalized state of one factor (a single spin or a cluster of spins).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    pub amplitudes: CVec,
    pub factor_spins: Vec<f64>,
}

impl LocalState {
    pub fn new(factor_spins: Vec<f64>, amplitudes: CVec) -> Result<Self> {
        let dim = dims_product(&factor_spins)?;
        if amplitudes.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: amplitudes.len() });
        }
        let norm = linalg::vec_norm(&amplitudes);
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized(norm));
        }
        Ok(LocalState { amplitudes, factor_spins })
    }

    /// Normalizes the amplitudes first.
    pub fn normalized(factor_spins: Vec<f64>, amplitudes: CVec) -> Result<Self> {
        let norm = linalg::vec_norm(&amplitudes);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NotNormalized(norm));
        }
        Self::new(factor_spins, amplitudes.unscale(norm))
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn spin_dims(&self) -> Vec<usize> {
        self.factor_spins.iter().map(|&s| spin_dim(s).expect("validated")).collect()
    }

    pub fn expectation(&self, op: &CMat) -> C64 {
        linalg::expectation(op, &self.amplitudes)
    }

    pub fn density(&self) -> CMat {
        &self.amplitudes * self.amplitudes.adjoint()
    }
}

fn dims_product(spins: &[f64]) -> Result<usize> {
    if spins.is_empty() {
        return Err(Error::InvalidArgument("a factor needs at least one spin".into()));
    }
    spins.iter().try_fold(1usize, |acc, &s| Ok(acc * spin_dim(s)?))
}

/// A local state placed on an explicit list of chain sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub sites: Vec<usize>,
    pub state: LocalState,
}

/// `|Ψ> = ⊗_p |ψ_p>`. Factors may own non-contiguous sites; the full vector
/// always uses site order with site 0 leftmost.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductState {
    pub factors: Vec<Factor>,
    pub total_dim: usize,
}

impl ProductState {
    /// Factors occupy consecutive sites in the given order.
    pub fn contiguous(states: Vec<LocalState>) -> Result<Self> {
        let mut next = 0;
        let factors = states
            .into_iter()
            .map(|state| {
                let n = state.factor_spins.len();
                let sites = (next..next + n).collect();
                next += n;
                Factor { sites, state }
            })
            .collect();
        Self::new(factors)
    }

    /// Site lists must partition `0..N`. The spins inside a factor follow its site list order.
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        let n: usize = factors.iter().map(|f| f.sites.len()).sum();
        let mut seen = vec![false; n];
        for f in &factors {
            if f.sites.len() != f.state.factor_spins.len() {
                return Err(Error::DimensionMismatch { expected: f.state.factor_spins.len(), found: f.sites.len() });
            }
            for &s in &f.sites {
                if s >= n {
                    return Err(Error::IndexOutOfRange { index: s, len: n });
                }
                if seen[s] {
                    return Err(Error::InvalidArgument(format!("site {s} belongs to two factors")));
                }
                seen[s] = true;
            }
        }
        let total_dim = factors.iter().map(|f| f.state.dim()).product();
        Ok(ProductState { factors, total_dim })
    }

    pub fn n_sites(&self) -> usize {
        self.factors.iter().map(|f| f.sites.len()).sum()
    }

    pub fn site_spins(&self) -> Vec<f64> {
        let mut spins = vec![0.0; self.n_sites()];
        for f in &self.factors {
            for (k, &s) in f.sites.iter().enumerate() {
                spins[s] = f.state.factor_spins[k];
            }
        }
        spins
    }

    pub fn site_dims(&self) -> Vec<usize> {
        self.site_spins().iter().map(|&s| spin_dim(s).expect("validated")).collect()
    }

    /// Factor index owning each site.
    pub fn site_owner(&self) -> Vec<usize> {
        let mut owner = vec![0; self.n_sites()];
        for (p, f) in self.factors.iter().enumerate() {
            for &s in &f.sites {
                owner[s] = p;
            }
        }
        owner
    }

    /// The full state vector in site order.
    pub fn full_vector(&self) -> CVec {
        let dims = self.site_dims();
        let n = dims.len();
        let mut strides = vec![1usize; n];
        for k in (0..n.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }
        // per factor: global offset contributed by each local basis index
        let offsets: Vec<Vec<usize>> = self
            .factors
            .iter()
            .map(|f| {
                let ld = f.state.spin_dims();
                (0..f.state.dim())
                    .map(|mut loc| {
                        let mut off = 0;
                        for k in (0..ld.len()).rev() {
                            off += (loc % ld[k]) * strides[f.sites[k]];
                            loc /= ld[k];
                        }
                        off
                    })
                    .collect()
            })
            .collect();
        let mut out = CVec::zeros(self.total_dim);
        let mut idx = vec![0usize; self.factors.len()];
        loop {
            let mut amp = C64::new(1.0, 0.0);
            let mut pos = 0;
            for (p, f) in self.factors.iter().enumerate() {
                amp *= f.state.amplitudes[idx[p]];
                pos += offsets[p][idx[p]];
            }
            out[pos] = amp;
            let mut p = self.factors.len();
            loop {
                if p == 0 {
                    return out;
                }
                p -= 1;
                idx[p] += 1;
                if idx[p] < self.factors[p].state.dim() {
                    break;
                }
                idx[p] = 0;
            }
        }
    }
}

/// Parameters of a generalized singlet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizedSingletSpec {
    pub s: f64,
    pub xi: f64,
    /// `-1`: weights on `|m,-m>`; `+1`: the partner rotated by π about x on spin 2.
    pub parity: i8,
}

impl GeneralizedSingletSpec {
    pub fn new(s: f64, xi: f64, parity: i8) -> Result<Self> {
        spin_dim(s)?;
        if !(0.0..=PI).contains(&xi) {
            return Err(Error::InvalidArgument(format!("xi = {xi} outside [0, pi]")));
        }
        if parity != 1 && parity != -1 {
            return Err(Error::InvalidArgument(format!("parity must be +1 or -1, got {parity}")));
        }
        Ok(GeneralizedSingletSpec { s, xi, parity })
    }
}

/// Maximal-spin state along `n = (sinθ cosφ, sinθ sinφ, cosθ)`.
pub fn spin_coherent(s: f64, theta: f64, phi: f64) -> Result<LocalState> {
    let d = spin_dim(s)?;
    let two_s = d - 1;
    let (ch, sh) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    let amps = CVec::from_fn(d, |k, _| {
        // k = s - m
        let m = s - k as f64;
        let binom = binomial(two_s, k);
        let mag = binom.sqrt() * ch.powi((two_s - k) as i32) * sh.powi(k as i32);
        C64::from_polar(mag, -m * phi)
    });
    LocalState::normalized(vec![s], amps)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn generalized_singlet(spec: &GeneralizedSingletSpec) -> Result<LocalState> {
    let d = spin_dim(spec.s)?;
    let (ch, sh) = ((spec.xi / 2.0).cos(), (spec.xi / 2.0).sin());
    let mut amps = CVec::zeros(d * d);
    for k in 0..d {
        // m = s - k, weight cos^{s+m} sin^{s-m} with sign (-1)^{s-m}
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let w = sign * ch.powi((d - 1 - k) as i32) * sh.powi(k as i32);
        let second = if spec.parity == -1 { d - 1 - k } else { k };
        amps[k * d + second] = r(w);
    }
    LocalState::normalized(vec![spec.s, spec.s], amps)
}

/// `(Q^+, Q^-, Q^z)` annihilating the generalized singlet of `spec`.
pub fn singlet_conserved_operators(spec: &GeneralizedSingletSpec) -> Result<[CMat; 3]> {
    let d = spin_dim(spec.s)?;
    let dims = [d, d];
    let (sx, sy, sz) = spin_xyz(spec.s)?;
    let sp = &sx + sy.map(|z| z * linalg::I);
    let sm = sp.adjoint();
    let e = |m: &CMat, i: usize| spin_algebra::embed_dense(m, i, &dims).expect("valid dims");
    let (ch, sh) = ((spec.xi / 2.0).cos(), (spec.xi / 2.0).sin());
    let (p2, m2, z2) = if spec.parity == -1 { (e(&sp, 1), e(&sm, 1), e(&sz, 1)) } else { (e(&sm, 1), e(&sp, 1), -e(&sz, 1)) };
    let qp = e(&sp, 0).scale(ch) + p2.scale(sh);
    let qm = e(&sm, 0).scale(sh) + m2.scale(ch);
    let qz = e(&sz, 0) + z2;
    Ok([qp, qm, qz])
}

/// Unique total-spin-0 state of `n_p` spins whose two halves carry maximal spin `n_p s / 2`.
pub fn cluster_spin0_state(n_p: usize, s: f64, cap: usize) -> Result<LocalState> {
    let d = spin_dim(s)?;
    if n_p < 2 || n_p % 2 != 0 {
        return Err(Error::InvalidArgument(format!("cluster size must be even and >= 2, got {n_p}")));
    }
    let total = (d as u128).checked_pow(n_p as u32).unwrap_or(u128::MAX);
    if total > cap as u128 {
        return Err(Error::CapExceeded { dim: total.min(usize::MAX as u128) as usize, cap });
    }
    let half = n_p / 2;
    let big_s = half as f64 * s;
    let multiplet = max_spin_multiplet(half, s)?;
    let hd = multiplet[0].len();
    let mut amps = CVec::zeros(hd * hd);
    let count = multiplet.len();
    for (k, a) in multiplet.iter().enumerate() {
        let m = big_s - k as f64;
        let b = &multiplet[count - 1 - k];
        let cg = clebsch_gordan(big_s, m, big_s, -m, 0.0, 0.0);
        amps += linalg::kron(&CMat::from_column_slice(hd, 1, a.as_slice()), &CMat::from_column_slice(hd, 1, b.as_slice()))
            .column(0)
            .map(|z| z * cg);
    }
    LocalState::normalized(vec![s; n_p], amps)
}

/// `|S, M>` for `M = S, S-1, ..., -S` with `S = n s`, built by lowering the fully polarized state.
fn max_spin_multiplet(n: usize, s: f64) -> Result<Vec<CVec>> {
    let spins = vec![s; n];
    let [sx, sy, _] = spin_algebra::total_spin(&spins)?;
    let lower = &sx - sy.map(|z| z * linalg::I);
    let dim = lower.nrows();
    let mut v = CVec::zeros(dim);
    v[0] = r(1.0);
    let count = (2.0 * n as f64 * s).round() as usize + 1;
    let mut out = vec![v.clone()];
    for _ in 1..count {
        let w = &lower * out.last().unwrap();
        let norm = linalg::vec_norm(&w);
        out.push(w.unscale(norm));
    }
    Ok(out)
}

/// Partial trace of a density matrix over the complement of `keep` (subsystem indices into `dims`).
pub fn partial_trace(rho: &CMat, dims: &[usize], keep: &[usize]) -> Result<CMat> {
    let total: usize = dims.iter().product();
    if rho.nrows() != total || rho.ncols() != total {
        return Err(Error::DimensionMismatch { expected: total, found: rho.nrows() });
    }
    let (kept, rest) = split_indices(dims, keep)?;
    let kd = kept.len();
    let mut out = CMat::zeros(kd, kd);
    for a in 0..kd {
        for b in 0..kd {
            let mut acc = ZERO;
            for &off in &rest {
                acc += rho[(kept[a] + off, kept[b] + off)];
            }
            out[(a, b)] = acc;
        }
    }
    Ok(out)
}

/// Global offsets of the kept subsystem indices and of the traced-out ones.
fn split_indices(dims: &[usize], keep: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if keep.is_empty() {
        return Err(Error::InvalidArgument("keep set is empty".into()));
    }
    for (k, &i) in keep.iter().enumerate() {
        if i >= dims.len() {
            return Err(Error::IndexOutOfRange { index: i, len: dims.len() });
        }
        if keep[..k].contains(&i) {
            return Err(Error::InvalidArgument(format!("index {i} repeated")));
        }
    }
    let n = dims.len();
    let mut strides = vec![1usize; n];
    for k in (0..n.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    let offsets = |set: &[usize]| -> Vec<usize> {
        let count: usize = set.iter().map(|&i| dims[i]).product();
        (0..count)
            .map(|mut loc| {
                let mut off = 0;
                for &i in set.iter().rev() {
                    off += (loc % dims[i]) * strides[i];
                    loc /= dims[i];
                }
                off
            })
            .collect()
    };
    let rest: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
    Ok((offsets(keep), offsets(&rest)))
}

/// Reduced density of the spins `keep` (indices into `factor_spins`, in the given order).
pub fn reduced_density(state: &LocalState, keep: &[usize]) -> Result<CMat> {
    let dims = state.spin_dims();
    let (kept, rest) = split_indices(&dims, keep)?;
    let m = CMat::from_fn(kept.len(), rest.len(), |a, b| state.amplitudes[kept[a] + rest[b]]);
    let rho = &m * m.adjoint();
    Ok((&rho + rho.adjoint()).scale(0.5))
}

/// Closed-form single-spin moments of the parity −1 generalized singlet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMoments {
    /// `<S^z_1>`, `<S^z_2>`.
    pub mean_z: [f64; 2],
    pub variance_z: f64,
    pub beta: f64,
}

/// `β = ln tan²(ξ/2)`; the reduced state of spin `i` is `∝ exp((-1)^i β S^z)`.
pub fn local_moments(s: f64, xi: f64) -> Result<LocalMoments> {
    let d = spin_dim(s)?;
    if !(0.0..=PI).contains(&xi) {
        return Err(Error::InvalidArgument(format!("xi = {xi} outside [0, pi]")));
    }
    let t = (xi / 2.0).tan();
    let beta = (t * t).ln();
    let h = s + 0.5;
    let (mean1, var) = if beta.is_finite() && beta.abs() > 0.05 && beta.abs() < 300.0 {
        let mean = -(h / (h * beta).tanh() - 0.5 / (0.5 * beta).tanh());
        let csch2 = |x: f64| 1.0 / x.sinh().powi(2);
        (mean, 0.25 * csch2(0.5 * beta) - h * h * csch2(h * beta))
    } else {
        // near the singlet point (and at the separable ends) sum the distribution directly
        let (ch, sh) = ((xi / 2.0).cos(), (xi / 2.0).sin());
        let w: Vec<f64> = (0..d).map(|k| (ch.powi((d - 1 - k) as i32) * sh.powi(k as i32)).powi(2)).collect();
        let z: f64 = w.iter().sum();
        let m1: f64 = (0..d).map(|k| w[k] * (s - k as f64)).sum::<f64>() / z;
        let m2: f64 = (0..d).map(|k| w[k] * (s - k as f64).powi(2)).sum::<f64>() / z;
        (m1, m2 - m1 * m1)
    };
    Ok(LocalMoments { mean_z: [mean1, -mean1], variance_z: var.max(0.0), beta })
}

/// Spin-`s` paramagnet density `exp(sign β S^z) / Z`.
pub fn paramagnet_density(s: f64, beta: f64, sign: f64) -> Result<CMat> {
    let (_, _, sz) = spin_xyz(s)?;
    let d = sz.nrows();
    let logs: Vec<f64> = (0..d).map(|k| sign * beta * sz[(k, k)].re).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(CMat::from_fn(d, d, |i, j| if i == j { r(w[i] / z) } else { ZERO }))
}

/// A random normalized vector with Gaussian-like components.
pub fn random_state<R: rand::Rng>(rng: &mut R, spins: Vec<f64>) -> Result<LocalState> {
    let d = dims_product(&spins)?;
    let amps = CVec::from_fn(d, |_, _| c(gauss(rng), gauss(rng)));
    LocalState::normalized(spins, amps)
}

/// Box-Muller standard normal deviate.
pub fn gauss<R: rand::Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().max(1e-300);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (2.0 * PI * v).cos()
}

/// A random two-spin state supported on total `S^z = 0`.
pub fn random_m0_pair<R: rand::Rng>(rng: &mut R, s: f64) -> Result<LocalState> {
    let d = spin_dim(s)?;
    let mut amps = CVec::zeros(d * d);
    for k in 0..d {
        amps[k * d + (d - 1 - k)] = c(gauss(rng), gauss(rng));
    }
    LocalState::normalized(vec![s, s], amps)
}
