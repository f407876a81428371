use mambacsr::autodiff::central_difference;
use mambacsr::ssm::{
    contribution, decay_profile, selective_scan, selective_scan_backward, selective_scan_with, Discretization,
    KernelMatrix, ScanInputs, SsmCore,
};
use mambacsr::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

struct Problem {
    core: SsmCore<f64>,
    inp: ScanInputs<f64>,
}

fn problem(seed: u64, len: usize, din: usize, ds: usize, lti: bool) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let core = SsmCore::new(tensor(&mut rng, &[din, ds], -1.0, 1.5), tensor(&mut rng, &[din], -1.0, 1.0)).unwrap();
    let u = tensor(&mut rng, &[len, din], -1.0, 1.0);
    let (delta, b, c) = if lti {
        let rep = |row: Tensor<f64>| {
            let w = row.numel();
            Tensor::new(vec![len, w], row.data().repeat(len)).unwrap()
        };
        (
            rep(tensor(&mut rng, &[din], 0.01, 0.5)),
            rep(tensor(&mut rng, &[ds], -1.0, 1.0)),
            rep(tensor(&mut rng, &[ds], -1.0, 1.0)),
        )
    } else {
        (
            tensor(&mut rng, &[len, din], 0.01, 0.5),
            tensor(&mut rng, &[len, ds], -1.0, 1.0),
            tensor(&mut rng, &[len, ds], -1.0, 1.0),
        )
    };
    Problem {
        core,
        inp: ScanInputs::new(u, delta, b, c).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn time_invariant_scan_is_a_causal_convolution(seed in any::<u64>(), len in 1usize..=64, din in 1usize..4, ds in 1usize..=8) {
        let p = problem(seed, len, din, ds, true);
        let y = selective_scan(&p.core, &p.inp).unwrap();
        let k = KernelMatrix::from_inputs(&p.core, &p.inp).unwrap();
        let yk = k.apply(&p.inp.u, p.core.d()).unwrap();
        prop_assert!(y.max_abs_diff(&yk) <= 1e-10);
    }

    #[test]
    fn output_is_causal(seed in any::<u64>(), len in 2usize..30, cut in 0usize..29) {
        let cut = cut % (len - 1);
        let p = problem(seed, len, 2, 3, false);
        let y = selective_scan(&p.core, &p.inp).unwrap();
        let mut u2 = p.inp.u.clone();
        for v in &mut u2.data_mut()[(cut + 1) * 2..] {
            *v += 1.0;
        }
        let inp2 = ScanInputs::new(u2, p.inp.delta.clone(), p.inp.b.clone(), p.inp.c.clone()).unwrap();
        let y2 = selective_scan(&p.core, &inp2).unwrap();
        prop_assert_eq!(&y.data()[..(cut + 1) * 2], &y2.data()[..(cut + 1) * 2]);
    }

    #[test]
    fn scan_is_linear_in_u(seed in any::<u64>(), len in 1usize..20, alpha in -2.0f64..2.0) {
        let p = problem(seed, len, 2, 2, false);
        let q = problem(seed ^ 1, len, 2, 2, false);
        let mix = p.inp.u.data().iter().zip(q.inp.u.data()).map(|(a, b)| a + alpha * b).collect();
        let mixed = ScanInputs::new(Tensor::new(vec![len, 2], mix).unwrap(), p.inp.delta.clone(), p.inp.b.clone(), p.inp.c.clone()).unwrap();
        let other = ScanInputs::new(q.inp.u.clone(), p.inp.delta.clone(), p.inp.b.clone(), p.inp.c.clone()).unwrap();
        let y = selective_scan(&p.core, &mixed).unwrap();
        let ya = selective_scan(&p.core, &p.inp).unwrap();
        let yb = selective_scan(&p.core, &other).unwrap();
        for ((y, a), b) in y.data().iter().zip(ya.data()).zip(yb.data()) {
            prop_assert!((y - (a + alpha * b)).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn contribution_matches_jacobian_column() {
    let (len, din) = (12, 3);
    let p = problem(7, len, din, 4, false);
    for (pp, q) in [(0, 0), (0, 5), (3, 11), (7, 8), (11, 11)] {
        let analytic = contribution(&p.core, &p.inp, pp, q).unwrap();
        for d in 0..din {
            let fd = central_difference(&[p.inp.u.data()[pp * din + d]], 1e-6, |v| {
                let mut u = p.inp.u.clone();
                u.data_mut()[pp * din + d] = v[0];
                let inp = ScanInputs::new(u, p.inp.delta.clone(), p.inp.b.clone(), p.inp.c.clone()).unwrap();
                selective_scan(&p.core, &inp).unwrap().data()[q * din + d]
            })[0];
            let rel = (analytic[d] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel <= 1e-6, "p={pp} q={q} d={d}: {} vs {fd}", analytic[d]);
        }
    }
    assert!(contribution(&p.core, &p.inp, 5, 4).is_err());
    assert!(contribution(&p.core, &p.inp, 0, len).is_err());
}

#[test]
fn scalar_state_decay_is_non_increasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let len = 40;
    let core = SsmCore::new(Tensor::new(vec![1, 1], vec![0.3]).unwrap(), Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
    let inp = ScanInputs::new(
        tensor(&mut rng, &[len, 1], -1.0, 1.0),
        tensor(&mut rng, &[len, 1], 0.01, 0.4),
        Tensor::full(vec![len, 1], 0.8),
        Tensor::full(vec![len, 1], 1.1),
    )
    .unwrap();
    let prof = decay_profile(&core, &inp, 4).unwrap();
    assert_eq!(prof.len(), len - 4);
    for w in prof.windows(2) {
        assert!(w[1][0] <= w[0][0], "{} then {}", w[0][0], w[1][0]);
    }
    assert!(prof.last().unwrap()[0] < prof[0][0]);
}

#[test]
fn backward_matches_finite_differences_in_both_modes() {
    for mode in [Discretization::Zoh, Discretization::Euler] {
        let p = problem(11, 9, 2, 3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dy = tensor(&mut rng, &[9, 2], -1.0, 1.0);
        let g = selective_scan_backward(&p.core, &p.inp, &dy, mode).unwrap();
        let loss = |core: &SsmCore<f64>, inp: &ScanInputs<f64>| {
            let y = selective_scan_with(core, inp, mode).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd_delta = central_difference(p.inp.delta.data(), 1e-6, |v| {
            let inp = ScanInputs::new(p.inp.u.clone(), Tensor::new(vec![9, 2], v.to_vec()).unwrap(), p.inp.b.clone(), p.inp.c.clone())
                .unwrap();
            loss(&p.core, &inp)
        });
        let fd_alog = central_difference(p.core.a_log().data(), 1e-6, |v| {
            let core = SsmCore::new(Tensor::new(vec![2, 3], v.to_vec()).unwrap(), p.core.d().clone()).unwrap();
            loss(&core, &p.inp)
        });
        for (a, n) in g.delta.data().iter().zip(&fd_delta).chain(g.a_log.data().iter().zip(&fd_alog)) {
            assert!((a - n).abs() / n.abs().max(1.0) < 1e-7, "{mode:?}: {a} vs {n}");
        }
    }
}

#[test]
fn inputs_validate_shapes_and_delta() {
    let t = |s: &[usize], v: f64| Tensor::full(s.to_vec(), v);
    assert!(ScanInputs::new(t(&[4, 2], 1.0), t(&[4, 2], 0.0), t(&[4, 3], 1.0), t(&[4, 3], 1.0)).is_err());
    assert!(ScanInputs::new(t(&[4, 2], 1.0), t(&[4, 2], 0.1), t(&[4, 3], 1.0), t(&[4, 2], 1.0)).is_err());
    assert!(ScanInputs::new(t(&[4, 2], 1.0), t(&[3, 2], 0.1), t(&[4, 3], 1.0), t(&[4, 3], 1.0)).is_err());
    let ok = ScanInputs::new(t(&[4, 2], 1.0), t(&[4, 2], 0.1), t(&[4, 3], 1.0), t(&[4, 3], 1.0)).unwrap();
    assert!(selective_scan(&SsmCore::<f64>::s4d(3, 3), &ok).is_err());
}
