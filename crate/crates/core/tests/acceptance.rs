//! One line per acceptance criterion. Run with
//! `cargo test -p spinfact --test acceptance -- --nocapture`.

use std::f64::consts::PI;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinfact::covariance::{self, block_covariance, covariance_matrix, singlet_blocks_closed_form, CovarianceMatrix};
use spinfact::diagonalize::{dense_spectrum, eigen_residual, lowest_k};
use spinfact::factorization::{check_conditions, coupling_space_basis};
use spinfact::hamiltonian::{
    assemble, compatible_hamiltonian, compatible_model, conserved_factor_operators, global_variance, real_coupling,
    CompatibleCouplingSpec, PsdForm,
};
use spinfact::linalg::{self, CMat, CVec, C64};
use spinfact::models::{self, locate_boundaries, sweep, MgXxzParams, SweepOptions};
use spinfact::spin_algebra::{cluster_operators, complete_hermitian_set, spin_xyz, SiteOperatorSet};
use spinfact::states::{
    self, generalized_singlet, local_moments, paramagnet_density, random_m0_pair, random_state, reduced_density,
    singlet_conserved_operators, spin_coherent, GeneralizedSingletSpec, LocalState, ProductState,
};

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: impl Into<String>) -> Line {
    Line { pass, detail: detail.into() }
}

fn run(tag: &str, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Line) -> bool {
    let t = Instant::now();
    let out = f();
    let dt = t.elapsed();
    let pass = out.pass && limit.is_none_or(|l| dt < l);
    // written to stderr directly so the lines survive libtest output capture
    let _ = writeln!(
        std::io::stderr(),
        "{tag} [{}] {name}: {} ({:.2} s{})",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        dt.as_secs_f64(),
        limit.map(|l| format!(", limit {} s", l.as_secs())).unwrap_or_default()
    );
    pass
}

fn tetramer_crossings() -> Line {
    let (jx, jy, jdx): (f64, f64, f64) = (1.0, 0.5, 1.5);
    let jzc = models::xyz_tetramer(jx, jy, jdx, 0.0).unwrap().jz_c;
    let want = 1.25f64.sqrt() * jx;
    let build = |jz: f64| models::xyz_tetramer(jx, jy, jdx, jz).map(|t| t.instance);
    let grid: Vec<f64> = (0..9).map(|k| -2.0 + 0.5 * k as f64).collect();
    let opts = SweepOptions::default();
    let pts = sweep(&build, &grid, &opts).unwrap();
    let b = locate_boundaries(&build, &pts, 1e-7 * jx, &opts).unwrap();
    let ok_formula = (jzc - want).abs() < 1e-14 && (jzc - 1.1180).abs() < 5e-5;
    let ok_b = b.len() == 2 && (b[0].value + want).abs() < 1e-6 * jx && (b[1].value - want).abs() < 1e-6 * jx;
    let err = b.iter().zip([-want, want]).map(|(x, w)| (x.value - w).abs()).fold(0.0, f64::max);
    line(
        ok_formula && ok_b,
        format!(
            "Jz_c = {jzc:.6} Jx; bisected crossings {} (max error {err:.1e} Jx)",
            b.iter().map(|x| format!("{:+.7}", x.value)).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn tetramer_exactness() -> Line {
    let (jx, jy, jdx): (f64, f64, f64) = (1.0, 0.5, 1.5);
    let jdy = (jdx * jdx - jx * jx + jy * jy).sqrt();
    let (mut worst_res, mut worst_e) = (0.0f64, 0.0f64);
    for k in 0..20 {
        let jz = -3.0 + 6.0 * k as f64 / 19.0;
        let t = models::xyz_tetramer(jx, jy, jdx, jz).unwrap();
        let h = assemble(&t.instance.model).unwrap();
        let closed = [
            ("plus", -0.5 * (jdx + jdy - jz)),
            ("minus", -0.5 * (jdx + jdy + jz)),
            ("horizontal", -0.5 * ((jdx * jdx - jx * jx).sqrt() + jdx + jdy)),
        ];
        for (label, e) in closed {
            let c = t.instance.candidate(label).unwrap();
            let v = c.state.full_vector();
            worst_res = worst_res.max(eigen_residual(&h, &v).unwrap());
            worst_e = worst_e.max((h.energy(&v) - e).abs() / e.abs());
        }
    }
    line(
        worst_res < 1e-10 && worst_e < 1e-12,
        format!("3 states x 20 Jz: max residual {worst_res:.1e}, max relative energy error {worst_e:.1e}"),
    )
}

fn mg_chain() -> Line {
    let mut notes = Vec::new();
    let mut ok = true;
    let inst = models::mg_xxz_chain(&MgXxzParams::dimerizing(4, 0.5, 1.0, 1.0, 0.5, true)).unwrap();
    let h = assemble(&inst.model).unwrap();
    let c = &inst.candidates[0];
    let v = c.state.full_vector();
    let sp = dense_spectrum(&h).unwrap();
    let r = eigen_residual(&h, &v).unwrap();
    ok &= r < 1e-10 && (h.energy(&v) + 3.0).abs() < 1e-10 && (sp.ground_energy + 3.0).abs() < 1e-10;
    ok &= sp.degeneracy == 2 && sp.ground_overlap(&v) > 1.0 - 1e-8;
    notes.push(format!("MG point E = {:.12}, degeneracy {}", sp.ground_energy, sp.degeneracy));
    let mut worst = 0.0f64;
    let mut min_gap = f64::INFINITY;
    for k in 1..=9 {
        let ratio = 0.1 * k as f64;
        let (j, je, jz) = (1.0, 1.0, 1.0);
        let jd = ratio * je / 2.0;
        let inst = models::mg_xxz_chain(&MgXxzParams::dimerizing(4, 0.5, j, je, jd, true)).unwrap();
        let h = assemble(&inst.model).unwrap();
        let v = inst.candidates[0].state.full_vector();
        let sp = dense_spectrum(&h).unwrap();
        let e_pair = -0.25 * (j * je / jd + jz);
        worst = worst.max((sp.ground_energy / 4.0 - e_pair).abs());
        min_gap = min_gap.min(sp.gap.unwrap_or(0.0));
        ok &= sp.degeneracy == 1 && sp.gap.unwrap_or(0.0) > 0.0 && sp.ground_overlap(&v) > 1.0 - 1e-8;
        ok &= eigen_residual(&h, &v).unwrap() < 1e-10;
    }
    ok &= worst < 1e-10;
    notes.push(format!("2JD/JE = 0.1..0.9: unique GS, min gap {min_gap:.3}, max per-pair energy error {worst:.1e}"));
    line(ok, notes.join("; "))
}

fn spin_one_chain() -> Line {
    let mut ok = true;
    let mut notes = Vec::new();
    // alternating-field points on the dimerizing line
    let mut worst_alt = 0.0f64;
    for jd in [0.2, 0.35] {
        let inst = models::mg_xxz_chain(&MgXxzParams::dimerizing(4, 1.0, 1.5, 1.0, jd, true)).unwrap();
        let h = assemble(&inst.model).unwrap();
        worst_alt = worst_alt.max(eigen_residual(&h, &inst.candidates[0].state.full_vector()).unwrap());
    }
    ok &= worst_alt < 1e-8;
    let p = MgXxzParams::dimerizing(4, 1.0, 1.5, 1.0, 0.5, true);
    let inst = models::mg_xxz_chain(&p).unwrap();
    let h = assemble(&inst.model).unwrap();
    let v = inst.candidates[0].state.full_vector();
    let r = eigen_residual(&h, &v).unwrap();
    let sp = lowest_k(&h, 2, 7).unwrap();
    let target = -8.0 * p.jz;
    ok &= r < 1e-8 && (sp.ground_energy - target).abs() < 1e-8 * target.abs() && sp.ground_overlap(&v) > 1.0 - 1e-8;
    notes.push(format!(
        "dim {}: residual {r:.1e} (alternating field {worst_alt:.1e}), iterative E0 = {:.10} vs -8Jz = {target}",
        h.dim(),
        sp.ground_energy
    ));
    let small = models::mg_xxz_chain(&MgXxzParams::dimerizing(3, 1.0, 1.5, 1.0, 0.5, true)).unwrap();
    let hs = assemble(&small.model).unwrap();
    let dense = dense_spectrum(&hs).unwrap();
    let it = lowest_k(&hs, 6, 3).unwrap();
    let diff = (0..6).map(|k| (dense.eigenvalues[k] - it.eigenvalues[k]).abs()).fold(0.0, f64::max);
    ok &= diff < 1e-8;
    notes.push(format!("dim {} dense vs iterative lowest 6: {diff:.1e}", hs.dim()));
    line(ok, notes.join("; "))
}

fn random_ops<R: Rng>(rng: &mut R, d: usize, count: usize) -> SiteOperatorSet {
    let mats: Vec<CMat> = (0..count)
        .map(|_| {
            let a = CMat::from_fn(d, d, |_, _| C64::new(states::gauss(rng), states::gauss(rng)));
            (&a + a.adjoint()).scale(0.5)
        })
        .collect();
    let labels = (0..count).map(|k| format!("O{k}")).collect();
    SiteOperatorSet::new(mats, labels).unwrap()
}

fn random_spins<R: Rng>(rng: &mut R) -> Vec<f64> {
    let n = rng.random_range(1..=3);
    (0..n).map(|_| [0.5, 1.0, 1.5][rng.random_range(0..3)]).collect()
}

/// Random product state of 2-4 factors mixing coherent sites, generalized singlets and random pairs.
fn random_product<R: Rng>(rng: &mut R) -> ProductState {
    let nf = rng.random_range(2..=4);
    let factors: Vec<LocalState> = (0..nf)
        .map(|_| match rng.random_range(0..3) {
            0 => spin_coherent([0.5, 1.0][rng.random_range(0..2)], rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI))
                .unwrap(),
            1 => generalized_singlet(
                &GeneralizedSingletSpec::new(0.5, rng.random_range(0.2..2.9), if rng.random_bool(0.5) { 1 } else { -1 })
                    .unwrap(),
            )
            .unwrap(),
            _ => random_state(rng, vec![0.5]).unwrap(),
        })
        .collect();
    ProductState::contiguous(factors).unwrap()
}

fn covariance_lemmas() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n_states = 600;
    let mut rank_ok = 0;
    let mut worst_h2 = 0.0f64;
    for k in 0..n_states {
        let spins = random_spins(&mut rng);
        let st = random_state(&mut rng, spins).unwrap();
        let d = st.dim();
        let ops = if k % 2 == 0 || d * d > 200 {
            if d * d - 1 <= 80 { complete_hermitian_set(d) } else { random_ops(&mut rng, d, 40) }
        } else {
            let m = rng.random_range(1..d * d);
            random_ops(&mut rng, d, m)
        };
        let c = covariance_matrix(&st, &ops).unwrap();
        if c.rank < d {
            rank_ok += 1;
        }
        // H = Σ J_μ O^μ with real J: <H²> - <H>² against J^T C J
        let j: Vec<f64> = (0..ops.len()).map(|_| states::gauss(&mut rng)).collect();
        let jc: Vec<C64> = j.iter().map(|&x| linalg::r(x)).collect();
        let h = ops.combination(&jc);
        let hv = &h * &st.amplitudes;
        let mean = linalg::inner(&st.amplitudes, &hv).re;
        let var = linalg::inner(&hv, &hv).re - mean * mean;
        let jv = CVec::from_vec(jc);
        let form = (jv.adjoint() * &c.entries * &jv)[(0, 0)].re;
        worst_h2 = worst_h2.max((var - form).abs() / form.abs().max(1e-300));
    }
    // verdict <=> variance on random 2-4 factor instances
    let mut agree = 0;
    let mut total = 0;
    let (mut n_true, mut n_false) = (0, 0);
    for k in 0..120 {
        let st = random_product(&mut rng);
        let mut ops = Vec::new();
        for p in 0..st.factors.len() {
            ops.extend(conserved_factor_operators(&st, p).unwrap());
        }
        let n = ops.len();
        let a = CMat::from_fn(n, n, |_, _| C64::new(states::gauss(&mut rng), states::gauss(&mut rng)));
        let spec = CompatibleCouplingSpec { psd: Some(PsdForm { ops, k: &a * a.adjoint() }), ..Default::default() };
        let mut model = compatible_model(&spec, &st).unwrap();
        if k % 2 == 1 {
            let (i, j) = (0, st.n_sites() - 1);
            let c = real_coupling(std::array::from_fn(|_| std::array::from_fn(|_| 0.3 * states::gauss(&mut rng))));
            model.add_bond(i, j, c);
        }
        let rep = check_conditions(&model, &st).unwrap();
        let h = assemble(&model).unwrap();
        let var = global_variance(&h, &st.full_vector()).unwrap();
        let zero = var.sqrt() <= 1e-9 * model.scale();
        total += 1;
        if rep.verdict == zero {
            agree += 1;
        }
        if rep.verdict {
            n_true += 1;
        } else {
            n_false += 1;
        }
    }
    line(
        rank_ok == n_states && worst_h2 < 1e-12 && agree == total && n_true > 0 && n_false > 0,
        format!(
            "{rank_ok}/{n_states} states with rank(C) <= D-1; H2 identity max relative error {worst_h2:.1e}; verdict<=>variance {agree}/{total} ({n_true} exact, {n_false} perturbed)"
        ),
    )
}

fn coupling_dimensions() -> Line {
    let singlet = generalized_singlet(&GeneralizedSingletSpec::new(0.5, PI / 2.0, -1).unwrap()).unwrap();
    let ops = cluster_operators(&[0.5, 0.5]).unwrap();
    let cs = covariance_matrix(&singlet, &ops).unwrap();
    let pair = coupling_space_basis(&cs, &cs);
    let coh = spin_coherent(0.5, 0.7, 1.3).unwrap();
    let other = spin_coherent(0.5, 2.1, -0.4).unwrap();
    let so = cluster_operators(&[0.5]).unwrap();
    let site = coupling_space_basis(&covariance_matrix(&coh, &so).unwrap(), &covariance_matrix(&other, &so).unwrap());
    let ok = pair.dimension == 27
        && pair.dim_p * pair.dim_q == 36
        && pair.brute_force_dimension == 27
        && site.dimension == 8
        && site.dim_p * site.dim_q == 9
        && site.brute_force_dimension == 8;
    line(
        ok,
        format!(
            "singlet pair {} of {} (brute force {}); coherent sites {} of {} (brute force {})",
            pair.dimension,
            pair.dim_p * pair.dim_q,
            pair.brute_force_dimension,
            site.dimension,
            site.dim_p * site.dim_q,
            site.brute_force_dimension
        ),
    )
}

fn generalized_singlets() -> Line {
    let (mut ann, mut dens, mut mom, mut blocks) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut ranks_ok = true;
    for s in [0.5, 1.0, 1.5, 2.0] {
        let (_, _, sz) = spin_xyz(s).unwrap();
        for k in 0..10 {
            let xi = PI * (k as f64 + 0.5) / 10.0;
            for parity in [-1i8, 1] {
                let spec = GeneralizedSingletSpec::new(s, xi, parity).unwrap();
                let st = generalized_singlet(&spec).unwrap();
                for q in singlet_conserved_operators(&spec).unwrap() {
                    ann = ann.max(linalg::vec_norm(&(q * &st.amplitudes)));
                }
            }
            let st = generalized_singlet(&GeneralizedSingletSpec::new(s, xi, -1).unwrap()).unwrap();
            let lm = local_moments(s, xi).unwrap();
            for (i, sign) in [(0usize, -1.0), (1, 1.0)] {
                let rho = reduced_density(&st, &[i]).unwrap();
                dens = dens.max(linalg::frobenius(&(&rho - paramagnet_density(s, lm.beta, sign).unwrap())));
                let m1 = (&rho * &sz).trace().re;
                let m2 = (&rho * &sz * &sz).trace().re;
                mom = mom.max((m1 - lm.mean_z[i]).abs()).max((m2 - m1 * m1 - lm.variance_z).abs());
            }
            let b = block_covariance(&st).unwrap();
            let [pp, mm, zz] = singlet_blocks_closed_form(s, xi).unwrap();
            blocks = blocks
                .max(linalg::frobenius(&(&b.plus_plus - pp)))
                .max(linalg::frobenius(&(&b.minus_minus - mm)))
                .max(linalg::frobenius(&(&b.zz - zz)));
            for blk in [b.plus_plus, b.minus_minus, b.zz] {
                ranks_ok &= CovarianceMatrix::from_entries(blk).unwrap().rank == 1;
            }
        }
    }
    // uniqueness: random M = 0 pairs keep a single linear conserved operator (total S^z)
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut unique = 0;
    let trials = 100;
    for k in 0..trials {
        let s = [1.0, 1.5, 2.0][k % 3];
        let st = random_m0_pair(&mut rng, s).unwrap();
        let c = covariance_matrix(&st, &cluster_operators(&[s, s]).unwrap()).unwrap();
        if covariance::nullspace(&c).count == 1 {
            unique += 1;
        }
    }
    let ok = ann < 1e-12 && dens < 1e-12 && mom < 1e-12 && blocks < 1e-12 && ranks_ok && unique == trials;
    line(
        ok,
        format!(
            "annihilation {ann:.1e}, reduced density {dens:.1e}, moments {mom:.1e}, blocks {blocks:.1e} (rank 1: {ranks_ok}); {unique}/{trials} random M=0 states (s >= 1) with one conserved operator"
        ),
    )
}

fn psd_parents() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut res, mut min_e, mut overlap, mut route) = (0.0f64, f64::INFINITY, f64::INFINITY, 0.0f64);
    let mut count = 0;
    for trial in 0..6 {
        let s = if trial < 4 { 0.5 } else { 1.0 };
        let pairs: Vec<LocalState> = (0..3)
            .map(|_| {
                let parity = if rng.random_bool(0.5) { 1 } else { -1 };
                generalized_singlet(&GeneralizedSingletSpec::new(s, rng.random_range(0.2..2.9), parity).unwrap()).unwrap()
            })
            .collect();
        let st = ProductState::contiguous(pairs).unwrap();
        let mut ops = Vec::new();
        for p in 0..3 {
            ops.extend(conserved_factor_operators(&st, p).unwrap());
        }
        let n = ops.len();
        let a = CMat::from_fn(n, n, |_, _| C64::new(states::gauss(&mut rng), states::gauss(&mut rng)));
        let k = &a * a.adjoint() + linalg::identity(n).scale(0.5);
        let spec = CompatibleCouplingSpec { psd: Some(PsdForm { ops, k }), ..Default::default() };
        let direct = compatible_hamiltonian(&spec, &st).unwrap();
        let via_model = assemble(&compatible_model(&spec, &st).unwrap()).unwrap();
        let dd = direct.matrix.to_dense() + linalg::identity(direct.dim()).scale(direct.energy_offset);
        let dm = via_model.matrix.to_dense() + linalg::identity(via_model.dim()).scale(via_model.energy_offset);
        route = route.max(linalg::frobenius(&(dd - dm)));
        let psi = st.full_vector();
        res = res.max(linalg::vec_norm(&direct.apply(&psi)));
        let sp = dense_spectrum(&via_model).unwrap();
        min_e = min_e.min(sp.ground_energy);
        overlap = overlap.min(sp.ground_overlap(&psi));
        count += 1;
    }
    line(
        res < 1e-10 && min_e >= -1e-9 && overlap > 1.0 - 1e-8 && route < 1e-10,
        format!(
            "{count} parents on 3 pairs: |H psi| {res:.1e}, min eigenvalue {min_e:.1e}, min GS overlap 1 - {:.1e}, route difference {route:.1e}",
            1.0 - overlap
        ),
    )
}

/// Figure-level thresholds of the N = 8 cyclic ladder, compared at two significant figures.
fn ladder_thresholds() -> Line {
    let jdy = 1.5f64.sqrt();
    let build = |jz: f64| {
        models::xyz_ladder(&models::XyzLadderParams {
            n_pairs: 4,
            jx: 1.0,
            jy: 0.5,
            jz,
            je: [1.0, 0.5],
            jd: [1.5, jdy],
            range: models::Range::Nearest { cyclic: true },
            fields: None,
            require_exact: true,
        })
    };
    let grid: Vec<f64> = (0..21).map(|k| -5.0 + 0.5 * k as f64).collect();
    let opts = SweepOptions::default();
    let pts = sweep(&build, &grid, &opts).unwrap();
    let b = locate_boundaries(&build, &pts, 1e-6, &opts).unwrap();
    let sig2 = |x: f64| {
        let e = 10f64.powi(x.abs().log10().floor() as i32 - 1);
        (x / e).round() * e
    };
    let ok = b.len() == 2 && (sig2(b[0].value) - sig2(-3.25)).abs() < 1e-9 && (sig2(b[1].value) - sig2(2.8)).abs() < 1e-9;
    line(
        ok,
        format!(
            "recomputed {} (quoted -3.25, 2.8)",
            b.iter().map(|x| format!("{:+.4}", x.value)).collect::<Vec<_>>().join(", ")
        ),
    )
}

#[test]
fn acceptance() {
    let s = |x| Some(Duration::from_secs(x));
    let results = [
        run("criterion 1", "tetramer critical coupling", s(1), tetramer_crossings),
        run("criterion 2", "tetramer exactness", s(1), tetramer_exactness),
        run("criterion 3", "MG chain N=8 s=1/2 cyclic", s(10), mg_chain),
        run("criterion 4", "spin-1 chain N=8", s(120), spin_one_chain),
        run("criterion 5", "covariance lemmas", None, covariance_lemmas),
        run("criterion 6", "coupling-space dimensions", None, coupling_dimensions),
        run("criterion 7", "generalized-singlet structure", None, generalized_singlets),
        run("criterion 8", "PSD parent hamiltonians", None, psd_parents),
    ];
    let note = run("note", "N=8 XYZ ladder thresholds", None, ladder_thresholds);
    assert!(results.iter().all(|&p| p), "an acceptance criterion failed");
    assert!(note, "ladder thresholds disagree at two significant figures");
}
