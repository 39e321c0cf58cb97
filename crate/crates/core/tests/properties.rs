use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinfact::covariance::covariance_matrix;
use spinfact::diagonalize::eigen_residual;
use spinfact::factorization::check_conditions;
use spinfact::hamiltonian::{
    assemble, compatible_hamiltonian, compatible_model, conserved_factor_operators, global_variance, real_coupling,
    CompatibleCouplingSpec, ModelSpec, PsdForm,
};
use spinfact::linalg::{self, CMat, CVec, C64};
use spinfact::spin_algebra::{cluster_operators, complete_hermitian_set};
use spinfact::states::{
    gauss, generalized_singlet, random_state, spin_coherent, GeneralizedSingletSpec, LocalState, ProductState,
};

const SPINS: [f64; 3] = [0.5, 1.0, 1.5];

fn spins_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::sample::select(SPINS.to_vec()), 1..=2)
}

fn factor(rng: &mut ChaCha8Rng) -> LocalState {
    match rng.random_range(0..3) {
        0 => spin_coherent([0.5, 1.0][rng.random_range(0..2)], rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI))
            .unwrap(),
        1 => {
            let parity = if rng.random_bool(0.5) { 1 } else { -1 };
            generalized_singlet(&GeneralizedSingletSpec::new(0.5, rng.random_range(0.1..3.0), parity).unwrap()).unwrap()
        }
        _ => random_state(rng, vec![0.5]).unwrap(),
    }
}

fn product(rng: &mut ChaCha8Rng, n: usize) -> ProductState {
    ProductState::contiguous((0..n).map(|_| factor(rng)).collect()).unwrap()
}

fn psd_spec(rng: &mut ChaCha8Rng, st: &ProductState, shift: f64) -> CompatibleCouplingSpec {
    let mut ops = Vec::new();
    for p in 0..st.factors.len() {
        ops.extend(conserved_factor_operators(st, p).unwrap());
    }
    let n = ops.len();
    let a = CMat::from_fn(n, n, |_, _| C64::new(gauss(rng), gauss(rng)));
    let k = &a * a.adjoint() + linalg::identity(n).scale(shift);
    CompatibleCouplingSpec { psd: Some(PsdForm { ops, k }), ..Default::default() }
}

fn random_model(rng: &mut ChaCha8Rng, spins: Vec<f64>) -> ModelSpec {
    let n = spins.len();
    let mut m = ModelSpec::new(spins);
    for i in 0..n {
        m.add_field(i, std::array::from_fn(|_| gauss(rng)));
        for j in i + 1..n {
            m.add_bond(i, j, real_coupling(std::array::from_fn(|_| std::array::from_fn(|_| gauss(rng)))));
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn covariance_rank_is_deficient(spins in spins_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let st = random_state(&mut rng, spins).unwrap();
        let c = covariance_matrix(&st, &complete_hermitian_set(st.dim())).unwrap();
        prop_assert!(c.rank < st.dim());
    }

    #[test]
    fn energy_variance_is_covariance_form(spins in spins_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let st = random_state(&mut rng, spins.clone()).unwrap();
        let ops = cluster_operators(&spins).unwrap();
        let j: Vec<C64> = (0..ops.len()).map(|_| linalg::r(gauss(&mut rng))).collect();
        let h = ops.combination(&j);
        let hv = &h * &st.amplitudes;
        let mean = linalg::inner(&st.amplitudes, &hv).re;
        let var = linalg::inner(&hv, &hv).re - mean * mean;
        let c = covariance_matrix(&st, &ops).unwrap();
        let jv = CVec::from_vec(j);
        let form = (jv.adjoint() * &c.entries * &jv)[(0, 0)].re;
        prop_assert!((var - form).abs() <= 1e-12 * form.abs().max(1e-12), "{var} vs {form}");
    }

    #[test]
    fn verdict_matches_variance(seed in any::<u64>(), n in 2usize..=4, perturb in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let st = product(&mut rng, n);
        let mut model = compatible_model(&psd_spec(&mut rng, &st, 0.0), &st).unwrap();
        if perturb {
            let c = real_coupling(std::array::from_fn(|_| std::array::from_fn(|_| 0.3 * gauss(&mut rng))));
            model.add_bond(0, st.n_sites() - 1, c);
        }
        let rep = check_conditions(&model, &st).unwrap();
        let var = global_variance(&assemble(&model).unwrap(), &st.full_vector()).unwrap();
        prop_assert_eq!(rep.verdict, var.sqrt() <= 1e-9 * model.scale());
    }

    #[test]
    fn assembly_is_linear(spins in spins_strategy(), seed in any::<u64>(), a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m1 = random_model(&mut rng, spins.clone());
        let m2 = random_model(&mut rng, spins);
        let combined = assemble(&m1.linear_combination(a, &m2).unwrap()).unwrap();
        let (h1, h2) = (assemble(&m1).unwrap(), assemble(&m2).unwrap());
        let v = CVec::from_fn(combined.dim(), |_, _| C64::new(gauss(&mut rng), gauss(&mut rng)));
        let lhs = combined.apply(&v);
        let rhs = h1.apply(&v).scale(a) + h2.apply(&v);
        prop_assert!(linalg::vec_norm(&(lhs - rhs)) <= 1e-10 * linalg::vec_norm(&v) * (1.0 + a.abs()));
    }

    #[test]
    fn compatible_parent_keeps_state(seed in any::<u64>(), n in 2usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let st = product(&mut rng, n);
        let spec = psd_spec(&mut rng, &st, 0.2);
        let h = compatible_hamiltonian(&spec, &st).unwrap();
        let model = compatible_model(&spec, &st).unwrap();
        let psi = st.full_vector();
        prop_assert!(eigen_residual(&h, &psi).unwrap() <= 1e-9);
        prop_assert!(check_conditions(&model, &st).unwrap().verdict);
    }
}
