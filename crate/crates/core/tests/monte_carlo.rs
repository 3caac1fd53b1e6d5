use gic_urn::limits::LimitContext;
use gic_urn::sim::{
    clock_stream, draw_stream, par_replicates, run_ensemble, simulate_mcbp, EnsembleSpec, Regime, TimeScale, DEFAULT_EVENT_CAP,
};
use gic_urn::spectral::{EigenClass, UrnSubcase};
use gic_urn::urn::{mean_matrix, ReplacementDistribution, ReplacementStructure, UrnSpec};
use gic_urn::verify::{component_projection, empirical_cov, fluctuation_samples, FluctuationParams};

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn mcbp_states(st: &ReplacementStructure, x0: &[i64], grid: &[f64], r: u64, seed: u64) -> Vec<Vec<Vec<f64>>> {
    par_replicates(r, threads(), |k| {
        let mut draws = draw_stream(seed, k);
        let mut clock = clock_stream(seed, k);
        simulate_mcbp(st, x0, grid, &mut draws, &mut clock, false, DEFAULT_EVENT_CAP)
            .map(|tr| tr.states.iter().map(|x| x.iter().map(|&v| v as f64).collect()).collect())
    })
    .unwrap()
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .unwrap()
}

fn mean_and_se(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let r = x.len() as f64;
    let d = x[0].len();
    let (cov, _) = empirical_cov(x, x).unwrap();
    let mean = (0..d).map(|i| x.iter().map(|v| v[i]).sum::<f64>() / r).collect();
    let se = (0..d).map(|i| (cov[(i, i)] / r).sqrt()).collect();
    (mean, se)
}

#[test]
fn discounted_mcbp_is_a_martingale() {
    let st = ReplacementStructure::friedman(2, 1);
    let dec = mean_matrix(&st).spectral().unwrap().clone();
    let grid = [0.5, 1.0];
    let states = mcbp_states(&st, &[5, 5], &grid, 100_000, 3);
    for (k, &t) in grid.iter().enumerate() {
        let back = dec.expm(-t);
        let y: Vec<Vec<f64>> = states
            .iter()
            .map(|s| {
                let v = &back * nalgebra::DVector::from_column_slice(&s[k]);
                v.iter().copied().collect()
            })
            .collect();
        let (mean, se) = mean_and_se(&y);
        for i in 0..2 {
            assert!((mean[i] - 5.0).abs() < 4.0 * se[i], "t {t}, colour {i}: {} +- {}", mean[i], se[i]);
        }
    }
}

#[test]
fn branching_property() {
    let st = ReplacementStructure::friedman(2, 1);
    let r = 20_000;
    let whole = mcbp_states(&st, &[4, 6], &[0.7], r, 5);
    let x = mcbp_states(&st, &[4, 0], &[0.7], r, 6);
    let y = mcbp_states(&st, &[0, 6], &[0.7], r, 7);
    let whole: Vec<Vec<f64>> = whole.into_iter().map(|s| s[0].clone()).collect();
    let sum: Vec<Vec<f64>> = x.iter().zip(&y).map(|(a, b)| a[0].iter().zip(&b[0]).map(|(p, q)| p + q).collect()).collect();
    let (m1, s1) = mean_and_se(&whole);
    let (m2, s2) = mean_and_se(&sum);
    let (c1, e1) = empirical_cov(&whole, &whole).unwrap();
    let (c2, e2) = empirical_cov(&sum, &sum).unwrap();
    for i in 0..2 {
        assert!((m1[i] - m2[i]).abs() < 4.0 * (s1[i].hypot(s2[i])), "mean {i}");
        for j in 0..2 {
            let z = (c1[(i, j)] - c2[(i, j)]).abs() / e1[(i, j)].hypot(e2[(i, j)]);
            assert!(z < 4.0, "cov ({i}, {j}): z = {z}");
        }
    }
}

#[test]
fn small_and_large_families_are_uncorrelated() {
    // eigenvalues 6, 4 (large) and 2 (small)
    let rules = vec![
        ReplacementDistribution::deterministic(0, vec![5, 1, 0]),
        ReplacementDistribution::deterministic(1, vec![1, 5, 0]),
        ReplacementDistribution::deterministic(2, vec![2, 2, 2]),
    ];
    let st = ReplacementStructure::new(vec![1.0; 3], rules, None).unwrap();
    let urn = UrnSpec::uniform(st.clone(), 30, 20_000).unwrap();
    let ctx = LimitContext::new(&st, &urn.mu()).unwrap();
    let dec = ctx.decomposition();
    let small = ctx.small_blocks();
    let large: Vec<usize> = (0..dec.blocks().len())
        .filter(|&j| dec.block_class(j) == EigenClass::Large && !dec.is_lambda1(j))
        .collect();
    assert_eq!((small.len(), large.len()), (1, 1));
    let spec = EnsembleSpec {
        urn,
        regime: Regime::Tsd,
        scale: TimeScale::Linear,
        replicates: 4000,
        grid_times: vec![1.0],
        base_seed: 9,
    };
    let ensemble = run_ensemble(&spec, threads()).unwrap();
    let ps = component_projection(dec, &small, 1).unwrap();
    let small_params = FluctuationParams::new(Regime::Tsd, Some(UrnSubcase::SmallUrn)).with_projection(ps, 0.0, 1);
    let pl = component_projection(dec, &large, 1).unwrap();
    let lambda = dec.blocks()[large[0]].lambda.re;
    let large_params = FluctuationParams::new(Regime::Tsd, Some(UrnSubcase::LargeUrnSimple)).with_projection(pl, lambda, 1);
    // at t = 1 the linear and geometric grids both sit at draw n
    let geometric = EnsembleSpec {
        scale: TimeScale::Geometric,
        ..spec.clone()
    };
    assert_eq!(spec.grid_indices(), geometric.grid_indices());
    let xs = fluctuation_samples(&ensemble, &spec, &ctx, &small_params).unwrap().at(0);
    let xl = fluctuation_samples(&ensemble, &geometric, &ctx, &large_params).unwrap().at(0);
    let (c, se) = empirical_cov(&xs, &xl).unwrap();
    let mut checked = 0;
    for i in 0..3 {
        for j in 0..3 {
            if se[(i, j)] > 0.0 {
                let z = c[(i, j)].abs() / se[(i, j)];
                assert!(z < 4.0, "({i}, {j}): z = {z}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}
