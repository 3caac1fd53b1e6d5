use gic_urn::limits::LimitContext;
use gic_urn::linalg::{frobenius, min_hermitian_eigenvalue, real_part};
use gic_urn::sim::simulate_urn;
use gic_urn::spectral::{decompose, perron_frobenius, real_matrix, DEFAULT_TOL_JORDAN};
use gic_urn::suites::{random_atom_structure, random_balanced_structure};
use gic_urn::urn::{mean_matrix, total_mass, Fraction, ReplacementStructure, UrnSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn examples() -> Vec<ReplacementStructure> {
    vec![
        ReplacementStructure::friedman(2, 1),
        ReplacementStructure::friedman(5, 1),
        ReplacementStructure::friedman(3, 1),
        ReplacementStructure::matching(4),
        ReplacementStructure::identity(3, 1),
        random_atom_structure(),
    ]
}

fn random_structure(seed: u64) -> (ReplacementStructure, f64) {
    random_balanced_structure(&mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expm_semigroup(s in -10.0f64..10.0, t in -10.0f64..10.0) {
        for st in examples() {
            let dec = mean_matrix(&st).spectral().unwrap().clone();
            let lhs = dec.expm(s + t);
            let (es, et) = (dec.expm(s), dec.expm(t));
            let rhs = &es * &et;
            // roundoff of a product scales with the norms of its factors
            let err = (&lhs - &rhs).norm() / (es.norm() * et.norm()).max(1.0);
            prop_assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn balanced_spectrum_and_projectors(seed in any::<u64>()) {
        let (st, s) = random_structure(seed);
        let mm = mean_matrix(&st);
        let (lambda1, m1, _) = perron_frobenius(&mm);
        prop_assert!((lambda1 - s).abs() < 1e-8);
        prop_assert_eq!(m1, 1);
        let a = mm.matrix();
        let left = real_matrix(1, st.dim(), st.weights()) * a;
        for j in 0..st.dim() {
            prop_assert!((left[(0, j)] - s * st.weights()[j]).abs() < 1e-9);
        }
        // defective non-leading eigenvalues need a user basis and are out of scope
        if let Ok(dec) = decompose(&mm, DEFAULT_TOL_JORDAN) {
            dec.check_invariants().unwrap();
            for (j, b) in dec.blocks().iter().enumerate() {
                if let Some(k) = b.conjugate_partner {
                    let conj = b.projector.map(|z| z.conj());
                    prop_assert!(frobenius(&(conj - &dec.blocks()[k].projector)) < 1e-8, "block {}", j);
                }
            }
        }
    }

    #[test]
    fn mass_identity(seed in any::<u64>(), n0 in 1u64..30, draws in 1u64..300) {
        let st = random_atom_structure();
        let spec = UrnSpec::uniform(st.clone(), 2 * n0, draws).unwrap();
        let grid: Vec<u64> = (0..=draws).collect();
        let traj = simulate_urn(&spec, &grid, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let s = st.balance().unwrap();
        let m0 = total_mass(&spec.initial_composition(), st.weights());
        for (m, x) in grid.iter().zip(&traj.states) {
            if traj.extinct_at.is_some_and(|e| *m >= e) {
                break;
            }
            prop_assert!((total_mass(x, st.weights()) - (m0 + s * *m as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn w2_loewner_monotone(t1 in 0.0f64..1.5, dt in 0.01f64..1.0) {
        for st in [ReplacementStructure::friedman(2, 1), ReplacementStructure::friedman(5, 1)] {
            let ctx = LimitContext::new(&st, &[0.3, 0.7]).unwrap();
            let a = ctx.cov_w2(t1, t1).unwrap();
            let b = ctx.cov_w2(t1 + dt, t1 + dt).unwrap();
            let diff = &b.cov - &a.cov;
            let scale = frobenius(&b.cov).max(1.0);
            prop_assert!(min_hermitian_eigenvalue(&diff) >= -1e-8 * scale);
        }
    }

    #[test]
    fn ws_is_stationary(t1 in 0.0f64..2.0, lag in 0.0f64..2.0, shift in 0.0f64..3.0) {
        let ctx = LimitContext::new(&ReplacementStructure::friedman(2, 1), &[0.5, 0.5]).unwrap();
        let a = ctx.cov_ws(t1, t1 + lag).unwrap();
        let b = ctx.cov_ws(t1 + shift, t1 + lag + shift).unwrap();
        prop_assert!(frobenius(&(&a.cov - &b.cov)) < 1e-8);
    }

    #[test]
    fn covariances_are_hermitian_psd(t in 0.05f64..2.0) {
        let ctx = LimitContext::new(&ReplacementStructure::friedman(2, 1), &[0.25, 0.75]).unwrap();
        for c in [ctx.cov_w1(t, t).unwrap(), ctx.cov_w2(t, t).unwrap(), ctx.cov_ws(t, t).unwrap(), ctx.cov_y1(t.min(1.0), t.min(1.0)).unwrap()] {
            let h = &c.cov - c.cov.adjoint();
            prop_assert!(frobenius(&h) < 1e-9);
            prop_assert!(min_hermitian_eigenvalue(&c.cov) >= -1e-8);
            prop_assert!(c.cov.iter().all(|z| z.im.abs() < 1e-9));
        }
    }

    #[test]
    fn ws_and_wjk_independent_of_mu(p in 1u64..99) {
        // unit weights: beta_1 = 1 for every mu
        let mu = [p as f64 / 100.0, 1.0 - p as f64 / 100.0];
        let small = ReplacementStructure::friedman(2, 1);
        let base = LimitContext::new(&small, &[0.5, 0.5]).unwrap().cov_ws(0.2, 0.9).unwrap();
        let other = LimitContext::new(&small, &mu).unwrap().cov_ws(0.2, 0.9).unwrap();
        prop_assert!(frobenius(&(&base.cov - &other.cov)) < 1e-8);
        let critical = ReplacementStructure::friedman(3, 1);
        let c0 = LimitContext::new(&critical, &[0.5, 0.5]).unwrap();
        let c1 = LimitContext::new(&critical, &mu).unwrap();
        let j = (0..2).find(|&j| !c0.decomposition().is_lambda1(j)).unwrap();
        let a = c0.cov_wjk(j, 1, 0.3, 0.8).unwrap();
        let b = c1.cov_wjk(j, 1, 0.3, 0.8).unwrap();
        prop_assert!(frobenius(&(&a.cov - &b.cov)) < 1e-8 * frobenius(&a.cov).max(1.0));
    }
}

#[test]
fn quadrature_halving_within_error_estimate() {
    let small = LimitContext::new(&ReplacementStructure::friedman(2, 1), &[0.5, 0.5]).unwrap();
    let large = LimitContext::new(&ReplacementStructure::friedman(5, 1), &[0.3, 0.7]).unwrap();
    let j = (0..2).find(|&j| !large.decomposition().is_lambda1(j)).unwrap();
    for tol in [1e-6, 1e-8] {
        let pairs = [
            (small.clone().with_tolerance(tol).cov_w2(0.3, 1.2).unwrap(), small.clone().with_tolerance(tol / 2.0).cov_w2(0.3, 1.2).unwrap()),
            (large.clone().with_tolerance(tol).var_vj(j).unwrap(), large.clone().with_tolerance(tol / 2.0).var_vj(j).unwrap()),
        ];
        for (a, b) in pairs {
            let change = frobenius(&(&a.cov - &b.cov));
            assert!(change <= a.quad_error.max(1e-12), "tol {tol}: change {change}, estimate {}", a.quad_error);
        }
    }
}

#[test]
fn non_leading_growth_exponent() {
    // Friedman(5,1): ||(I - P_S) e^{A l(t)} mu|| grows like (1 + t)^{lambda2 / S}
    let st = ReplacementStructure::friedman(5, 1);
    let mu = [Fraction::new(1, 3).unwrap().value(), Fraction::new(2, 3).unwrap().value()];
    let ctx = LimitContext::new(&st, &mu).unwrap();
    let dec = ctx.decomposition();
    let s = ctx.balance().unwrap();
    let beta1 = ctx.beta1();
    let rest = real_part(&(gic_urn::linalg::CMat::identity(2, 2) - dec.p_lambda1()));
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 0..=60 {
        let t = 10f64.powf(3.0 * k as f64 / 60.0);
        let l = (1.0 + s * t / beta1).ln() / s;
        let v = &rest * dec.expm(l) * nalgebra::DVector::from_column_slice(&mu);
        xs.push((1.0 + t).ln());
        ys.push(v.norm().ln());
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    assert!((slope - 4.0 / 6.0).abs() < 0.05, "slope {slope}");
}
