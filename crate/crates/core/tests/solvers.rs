mod common;

use common::*;
use mlcsc_core::data::{synth_sparse_problem, SynthSpec};
use mlcsc_core::pursuit::{
    effective_dictionary_apply, layer_objective, lbp_forward, lbp_forward_warm, lta_forward,
    mlista_forward, nmse, reconstruct, shifted_relu, soft_threshold, wsebp_forward,
};
use mlcsc_core::{
    AnchorPolicy, ConvDictionary, ConvGeometry, Layer, LayerParams, MlcscModel, Shrinkage, Tensor,
};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

const ORACLE_TOL: f64 = 1e-8;

fn small_instance(seed: u64, depth: usize, shrinkage: Shrinkage) -> (MlcscModel, Tensor) {
    let mut r = rng(seed);
    let (model, shape) = random_model(&mut r, depth, 4, 8);
    let mut model = model.with_shrinkage(shrinkage);
    model.set_beta_from_spectrum(&shape, 200, 1e-8).unwrap();
    match shrinkage {
        Shrinkage::Soft => randomize_xi(&mut model, &mut r, 0.0, 0.1),
        Shrinkage::Relu => randomize_xi(&mut model, &mut r, -0.1, 0.05),
    }
    let x = Tensor::randn(&shape, 1.0, &mut r);
    (model, x)
}

fn assert_close(dense: &[DVector<f64>], reps: &[Tensor], what: &str) {
    assert_eq!(dense.len(), reps.len());
    for (i, (d, t)) in dense.iter().zip(reps).enumerate() {
        let err = max_abs_diff(d, t.data());
        assert!(
            err <= ORACLE_TOL,
            "{what}: layer {} differs by {err:e}",
            i + 1
        );
    }
}

#[test]
fn lbp_matches_dense_ista() {
    for seed in 0..20 {
        for s in [Shrinkage::Soft, Shrinkage::Relu] {
            let (model, x) = small_instance(seed, 3, s);
            let got = lbp_forward(&model, &x, 25).unwrap().representations;
            assert_close(
                &dense_lbp(&model, &x, 25),
                &got,
                &format!("LBP seed {seed} {s:?}"),
            );
        }
    }
}

#[test]
fn lbp_matches_dense_ista_iterate_for_iterate() {
    let (model, x) = small_instance(42, 1, Shrinkage::Soft);
    for k in 1..=25 {
        let got = lbp_forward(&model, &x, k).unwrap().representations;
        assert_close(&dense_lbp(&model, &x, k), &got, &format!("iterate {k}"));
    }
}

#[test]
fn mlista_matches_dense_global_iteration() {
    for seed in 0..20 {
        for s in [Shrinkage::Soft, Shrinkage::Relu] {
            let (model, x) = small_instance(100 + seed, 3, s);
            for k in [0, 1, 2, 5] {
                let got = mlista_forward(&model, &x, k).unwrap().representations;
                assert_close(
                    &dense_mlista(&model, &x, k),
                    &got,
                    &format!("ML-ISTA seed {seed} K={k}"),
                );
            }
        }
    }
}

#[test]
fn wsebp_matches_dense_analysis_anchor() {
    for seed in 0..20 {
        let (model, x) = small_instance(200 + seed, 3, Shrinkage::Relu);
        let got = wsebp_forward(&model, &x, AnchorPolicy::Analysis)
            .unwrap()
            .representations;
        assert_close(
            &dense_wsebp_analysis(&model, &x),
            &got,
            &format!("WSEBP seed {seed}"),
        );
    }
}

#[test]
fn wsebp_literal_matches_dense_transcription() {
    for seed in 0..20 {
        let mut r = rng(300 + seed);
        let c = r.random_range(1..=3);
        let geom = ConvGeometry::new(c, c, 3, 1, 1);
        let mut model = MlcscModel::new(vec![Layer {
            params: LayerParams::neutral(c),
            dict: ConvDictionary::random(geom, &mut r).unwrap(),
        }])
        .unwrap();
        model.set_beta_from_spectrum(&[c, 6, 6], 200, 1e-8).unwrap();
        randomize_xi(&mut model, &mut r, -0.1, 0.1);
        let x = Tensor::randn(&[c, 6, 6], 1.0, &mut r);
        let got = wsebp_forward(&model, &x, AnchorPolicy::Literal).unwrap();
        let err = max_abs_diff(&dense_wsebp_literal(&model, &x), got.last().data());
        assert!(err <= ORACLE_TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn mlista_single_layer_iteration_is_one_lbp_step() {
    let (model, x) = small_instance(7, 1, Shrinkage::Soft);
    let one = mlista_forward(&model, &x, 1).unwrap();
    let warm = lbp_forward_warm(&model, &x, 1).unwrap();
    assert_eq!(one.representations, warm.representations);
}

#[test]
fn effective_dictionary_is_matrix_product() {
    // Geometries whose minimal inverse sizes equal the forward sizes:
    // 8×8 → 8×8 → 4×4 → 2×2.
    let mut r = rng(9);
    let layers = [(2, 3, 3, 1, 1), (3, 4, 4, 2, 1), (4, 5, 3, 1, 0)]
        .into_iter()
        .map(|(c, m, k, s, p)| Layer {
            params: LayerParams::neutral(m),
            dict: ConvDictionary::random(ConvGeometry::new(c, m, k, s, p), &mut r).unwrap(),
        })
        .collect();
    let model = MlcscModel::new(layers).unwrap();
    let shape = [2, 8, 8];
    let ms = layer_matrices(&model, &shape);
    let code = model.code_shapes(&shape).unwrap();
    let g = Tensor::randn(&code[2], 1.0, &mut r);
    assert_eq!(effective_dictionary_apply(&model, 3, &g).unwrap(), g);
    for i in 0..3 {
        let mut expect = vec_of(&g);
        for m in ms[i..].iter().rev() {
            expect = m.transpose() * expect;
        }
        let got = effective_dictionary_apply(&model, i, &g).unwrap();
        assert!(max_abs_diff(&expect, got.data()) <= 1e-10, "D_({i},3)");
    }
    let reps: Vec<Tensor> = code.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
    let x_hat = reconstruct(&model, &reps, 3).unwrap();
    let mut expect = vec_of(&reps[2]);
    for m in ms.iter().rev() {
        expect = m.transpose() * expect;
    }
    assert!(max_abs_diff(&expect, x_hat.data()) <= 1e-10);
}

#[test]
fn layer_objective_matches_dense_evaluation() {
    let mut r = rng(10);
    let dict = ConvDictionary::random(ConvGeometry::new(2, 3, 3, 2, 1), &mut r).unwrap();
    let u = Tensor::randn(&[2, 7, 7], 1.0, &mut r);
    let code = dict.geometry().code_shape(&[2, 7, 7]).unwrap();
    let g = Tensor::randn(&code, 1.0, &mut r);
    let a = dense(&dict, &[2, 7, 7]);
    let resid = vec_of(&u) - a.transpose() * vec_of(&g);
    let expect = 0.5 * resid.norm_squared() + 0.3 * vec_of(&g).lp_norm(1);
    let got = layer_objective(&u, &dict, &g, 0.3).unwrap();
    assert!((got.value - expect).abs() <= 1e-10 * expect.max(1.0));
    assert_eq!(got.nonzeros, g.count_nonzero(1e-12));
}

#[test]
fn lta_composes_single_layer_calls() {
    let (model, x) = (11..)
        .map(|seed| small_instance(seed, 2, Shrinkage::Relu))
        .find(|(m, _)| m.depth() == 2)
        .unwrap();
    let whole = lta_forward(&model, &x).unwrap().representations;
    let first = MlcscModel::new(vec![model.layer(0).clone()]).unwrap();
    let second = MlcscModel::new(vec![model.layer(1).clone()]).unwrap();
    let g1 = lta_forward(&first, &x)
        .unwrap()
        .representations
        .pop()
        .unwrap();
    let g2 = lta_forward(&second, &g1)
        .unwrap()
        .representations
        .pop()
        .unwrap();
    assert_eq!(whole, vec![g1, g2]);
}

/// Random models with L ≤ 3, ≤ 16 atoms and inputs up to 16×16.
fn envelope_model(seed: u64) -> (MlcscModel, Tensor) {
    let mut r = rng(seed);
    let (model, shape) = random_model(&mut r, 3, 16, 16);
    let mut model = model.with_shrinkage(Shrinkage::Relu);
    randomize_xi(&mut model, &mut r, -0.3, 0.3);
    (model, Tensor::randn(&shape, 1.0, &mut r))
}

#[test]
fn zero_iteration_equivalence() {
    for seed in 0..50 {
        let (model, x) = envelope_model(seed);
        let lta = lta_forward(&model, &x).unwrap().representations;
        assert_eq!(
            lta,
            lbp_forward_warm(&model, &x, 0).unwrap().representations
        );
        assert_eq!(lta, mlista_forward(&model, &x, 0).unwrap().representations);
        assert_eq!(
            lta,
            wsebp_forward(&model, &x, AnchorPolicy::Zero)
                .unwrap()
                .representations
        );
        // Layer 1 of the cold LBP: one step from Γ⁰ = 0 with β = 1.
        let cold = lbp_forward(&model, &x, 1).unwrap().representations;
        assert_eq!(cold[0], lta[0]);
    }
}

#[test]
fn ista_descent_with_spectral_step() {
    for seed in 0..50 {
        for s in [Shrinkage::Soft, Shrinkage::Relu] {
            let mut r = rng(1000 + seed);
            let (model, shape) = random_model(&mut r, 3, 8, 12);
            let mut model = model.with_shrinkage(s);
            model.set_beta_from_spectrum(&shape, 300, 1e-9).unwrap();
            match s {
                Shrinkage::Soft => randomize_xi(&mut model, &mut r, 0.0, 0.2),
                Shrinkage::Relu => randomize_xi(&mut model, &mut r, -0.2, 0.0),
            }
            let x = Tensor::randn(&shape, 1.0, &mut r);
            for res in [
                lbp_forward(&model, &x, 30).unwrap(),
                lbp_forward_warm(&model, &x, 30).unwrap(),
            ] {
                for (i, trace) in res.objective_trace.iter().enumerate() {
                    for w in trace.windows(2) {
                        assert!(
                            w[1] <= w[0] + 1e-12,
                            "seed {seed} {s:?} layer {}: {} -> {}",
                            i + 1,
                            w[0],
                            w[1]
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn budget_monotonicity_on_recovery_suite() {
    let spec = SynthSpec {
        channels: vec![1, 4, 6],
        kernel: 3,
        stride: 1,
        padding: 1,
        spatial: (10, 10),
        sparsity: 4,
        sigma: 0.01,
    };
    let (mut lbp2, mut lbp20, mut ml2, mut ml20) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..10 {
        let p = synth_sparse_problem(&spec, seed).unwrap();
        let mut model = p.model.clone().with_shrinkage(Shrinkage::Relu);
        model
            .set_beta_from_spectrum(&[1, 10, 10], 200, 1e-9)
            .unwrap();
        for i in 0..model.depth() {
            let a = model.layer(i).params.alpha();
            model
                .layer_mut(i)
                .params
                .xi
                .iter_mut()
                .for_each(|v| *v = -1e-2 * a);
        }
        let last =
            |r: mlcsc_core::PursuitResult| *r.objective_trace.last().unwrap().last().unwrap();
        lbp2 += last(lbp_forward_warm(&model, &p.signal, 2).unwrap());
        lbp20 += last(lbp_forward_warm(&model, &p.signal, 20).unwrap());
        ml2 += last(mlista_forward(&model, &p.signal, 2).unwrap());
        ml20 += last(mlista_forward(&model, &p.signal, 20).unwrap());
    }
    assert!(lbp20 <= lbp2, "LBP {lbp20} > {lbp2}");
    assert!(ml20 <= ml2, "ML-ISTA {ml20} > {ml2}");
}

#[test]
fn synthetic_recovery_low_coherence() {
    let spec = SynthSpec {
        channels: vec![1, 4],
        kernel: 7,
        stride: 1,
        padding: 3,
        spatial: (16, 16),
        sparsity: 3,
        sigma: 0.0,
    };
    let p = synth_sparse_problem(&spec, 3).unwrap();
    assert!(p.model.layer(0).dict.mutual_coherence() < 0.3);
    let mut model = p.model.clone().with_shrinkage(Shrinkage::Relu);
    model
        .set_beta_from_spectrum(&[1, 16, 16], 200, 1e-9)
        .unwrap();
    model.set_xi(-1e-3);
    let res = lbp_forward(&model, &p.signal, 200).unwrap();
    let x_hat = reconstruct(&model, &res.representations, 1).unwrap();
    assert!(nmse(&p.signal, &x_hat).unwrap() < 1e-2);
    assert!(p.support.iter().all(|&s| res.last().data()[s] > 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn thresholding_outputs_are_nonnegative(seed in any::<u64>()) {
        let (model, x) = envelope_model(seed);
        for policy in [AnchorPolicy::Zero, AnchorPolicy::Analysis] {
            for g in wsebp_forward(&model, &x, policy).unwrap().representations {
                prop_assert!(g.data().iter().all(|&v| v >= 0.0));
            }
        }
        for g in lta_forward(&model, &x).unwrap().representations {
            prop_assert!(g.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn relu_and_soft_threshold_agree_on_nonnegatives(
        xs in proptest::collection::vec(0.0f64..10.0, 1..40),
        xi in 0.0f64..5.0,
    ) {
        let x = Tensor::from_vec(xs);
        prop_assert_eq!(shifted_relu(&x, &[-xi]).unwrap(), soft_threshold(&x, &[xi]).unwrap());
    }

    #[test]
    fn reconstruction_of_synthetic_codes_is_exact(seed in any::<u64>(), k in 0usize..6) {
        let spec = SynthSpec {
            channels: vec![2, 3, 5],
            kernel: 4,
            stride: 2,
            padding: 1,
            spatial: (12, 12),
            sparsity: k,
            sigma: 0.0,
        };
        let p = synth_sparse_problem(&spec, seed).unwrap();
        prop_assert_eq!(p.codes[1].count_nonzero(0.0), k);
        let mid = p.model.layer(1).dict.synthesize(&p.codes[1], Some((6, 6))).unwrap();
        prop_assert!(mid.max_abs_diff(&p.codes[0]).unwrap() <= 1e-10);
        let x = reconstruct(&p.model, &p.codes, 2).unwrap();
        prop_assert!(x.max_abs_diff(&p.signal).unwrap() <= 1e-10);
        prop_assert!(nmse(&p.signal, &x).unwrap() <= 1e-12);
    }
}
