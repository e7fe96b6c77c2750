mod common;

use common::{dense, lambda_max, max_abs_diff, rng, vec_of};
use mlcsc_core::{Boundary, ConvDictionary, ConvGeometry, Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Geometry plus an input size it accepts.
fn geometry() -> impl Strategy<Value = (ConvGeometry, usize, usize)> {
    (
        1usize..=3,
        1usize..=4,
        1usize..=4,
        1usize..=3,
        0usize..=2,
        3usize..=10,
        3usize..=10,
        any::<bool>(),
    )
        .prop_filter_map("input too small", |(c, m, k, s, p, h, w, circ)| {
            let g = if circ {
                ConvGeometry::new(c, m, k, 1, 0).circular()
            } else {
                ConvGeometry::new(c, m, k, s, p)
            };
            g.output_hw(h, w).ok().map(|_| (g, h, w))
        })
}

fn dict_and_inputs(
    seed: u64,
    g: ConvGeometry,
    h: usize,
    w: usize,
) -> (ConvDictionary, Tensor, Tensor) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let dict = ConvDictionary::random(g, &mut r).unwrap();
    let u = Tensor::randn(&[g.in_channels, h, w], 1.0, &mut r);
    let code = g.code_shape(&[g.in_channels, h, w]).unwrap();
    let v = Tensor::randn(&code, 1.0, &mut r);
    (dict, u, v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn adjointness((g, h, w) in geometry(), seed in any::<u64>()) {
        let (dict, u, v) = dict_and_inputs(seed, g, h, w);
        let lhs = dict.analyze(&u).unwrap().dot(&v).unwrap();
        let rhs = u.dot(&dict.synthesize(&v, Some((h, w))).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * u.norm() * v.norm());
    }

    #[test]
    fn analysis_matches_dense_matrix((g, h, w) in geometry(), seed in any::<u64>()) {
        let (dict, u, v) = dict_and_inputs(seed, g, h, w);
        let a = dense(&dict, u.shape());
        prop_assert!(max_abs_diff(&(&a * vec_of(&u)), dict.analyze(&u).unwrap().data()) <= 1e-10);
        let synth = dict.synthesize(&v, Some((h, w))).unwrap();
        prop_assert!(max_abs_diff(&(a.transpose() * vec_of(&v)), synth.data()) <= 1e-10);
    }

    #[test]
    fn analysis_is_linear((g, h, w) in geometry(), seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (dict, u, _) = dict_and_inputs(seed, g, h, w);
        let other = Tensor::randn(u.shape(), 1.0, &mut rng(seed ^ 1));
        let combo = u.scale(a).add(&other.scale(b)).unwrap();
        let lhs = dict.analyze(&combo).unwrap();
        let rhs = dict.analyze(&u).unwrap().scale(a).add(&dict.analyze(&other).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }

    #[test]
    fn spectral_bound_dominates_dense_eigenvalue((g, h, w) in geometry(), seed in any::<u64>()) {
        let (dict, u, _) = dict_and_inputs(seed, g, h, w);
        let est = dict.estimate_spectral_bound(u.shape(), 500, 1e-10).unwrap();
        let exact = lambda_max(&dense(&dict, u.shape()));
        prop_assert!(est.bound >= (1.0 - 1e-3) * exact, "bound {} exact {}", est.bound, exact);
    }

    #[test]
    fn batch_rows_match_single_calls((g, h, w) in geometry(), seed in any::<u64>()) {
        let (dict, u, _) = dict_and_inputs(seed, g, h, w);
        let other = Tensor::randn(u.shape(), 1.0, &mut rng(seed ^ 2));
        let batch = Tensor::stack(&[u.clone(), other.clone()]).unwrap();
        let out = dict.analyze(&batch).unwrap();
        prop_assert_eq!(out.outer(0).unwrap(), dict.analyze(&u).unwrap());
        prop_assert_eq!(out.outer(1).unwrap(), dict.analyze(&other).unwrap());
    }
}

#[test]
fn random_three_channel_synthesis_matches_transpose() {
    let mut r = rng(5);
    let dict = ConvDictionary::random(ConvGeometry::new(3, 4, 3, 1, 1), &mut r).unwrap();
    let v = Tensor::randn(&[4, 5, 5], 1.0, &mut r);
    let a = dense(&dict, &[3, 5, 5]);
    let s = dict.synthesize(&v, Some((5, 5))).unwrap();
    assert!(max_abs_diff(&(a.transpose() * vec_of(&v)), s.data()) <= 1e-12);
}

#[test]
fn circular_rows_are_cyclic_shifts() {
    let n = 8;
    let k = 3;
    // A k×k kernel whose only nonzero row is the middle one acts on a
    // height-1 input exactly like a 1×k kernel.
    let mut taps = vec![0.0; k * k];
    taps[k..2 * k].copy_from_slice(&[0.7, -1.3, 2.1]);
    let w = Tensor::new(vec![1, 1, k, k], taps).unwrap();
    let dict = ConvDictionary::new(ConvGeometry::new(1, 1, k, 1, 0).circular(), w).unwrap();
    assert_eq!(dict.geometry().boundary, Boundary::Circular);
    let m = dict.materialize(&[1, 1, n]).unwrap();
    assert_eq!((m.rows, m.cols), (n, n));
    let first = m.row(0);
    assert_eq!(first.iter().filter(|v| **v != 0.0).count(), k);
    for r in 1..n {
        for c in 0..n {
            assert_eq!(m.get(r, c), first[(c + n - r) % n], "row {r} col {c}");
        }
    }
}

#[test]
fn spectral_bound_random_single_channel() {
    let dict = ConvDictionary::random(ConvGeometry::new(1, 1, 3, 1, 1), &mut rng(8)).unwrap();
    let est = dict
        .estimate_spectral_bound(&[1, 8, 8], 1000, 1e-12)
        .unwrap();
    let exact = lambda_max(&dense(&dict, &[1, 8, 8]));
    assert!(est.bound >= exact);
    assert!(
        est.bound <= 1.02 * exact,
        "bound {} exact {exact}",
        est.bound
    );
}

#[test]
fn invalid_inputs_are_rejected() {
    let dict = ConvDictionary::scalar(1.0);
    assert!(matches!(
        Tensor::new(vec![1, 1, 1], vec![f64::NAN]),
        Err(Error::Input(_))
    ));
    let z = Tensor::zeros(&[2, 3, 3]);
    assert!(matches!(dict.analyze(&z), Err(Error::Dimension(_))));
}
