mod common;

use common::{data, jittered, normal, small};
use era_core::data::{Dataset, Split};
use era_core::distill::EraModel;
use era_core::inference::{
    accuracy, evaluate_accuracy, evaluate_summary, infer, predict, InferenceMode, InferenceSpec,
};
use era_core::nn::{Graph, Mode};
use era_core::seed;
use era_core::{Error, Tensor};
use rand::Rng;

fn spec(mode: InferenceMode, mu: f64, branches: usize) -> InferenceSpec {
    InferenceSpec { mode, mu, branches }
}

#[test]
fn merged_mode_endpoints_are_the_single_modes() {
    let model = jittered(small(3), 2);
    let x = normal(4, "probe", 12, 5);
    for j in 0..=3 {
        let s = infer(&model, &x, &spec(InferenceMode::S, 0.5, j)).unwrap();
        let t = infer(&model, &x, &spec(InferenceMode::T, 0.5, j)).unwrap();
        let st1 = infer(&model, &x, &spec(InferenceMode::ST, 1.0, j)).unwrap();
        let st0 = infer(&model, &x, &spec(InferenceMode::ST, 0.0, j)).unwrap();
        assert!(st1.max_abs_diff(&s) <= 1e-12);
        assert!(st0.max_abs_diff(&t) <= 1e-12);
    }
}

/// `softmax(h_t(P_0 f_s))` composed directly from the layers.
fn first_projection_probs(model: &EraModel, x: &Tensor) -> Tensor {
    let net = &model.net;
    let mut g = Graph::read_only(&model.store);
    let xv = g.input(x.clone()).unwrap();
    let f_s = net.student.forward(&mut g, xv, Mode::Eval).unwrap();
    let p0 = net.projections[0].forward(&mut g, f_s).unwrap();
    let logits = net.head_t.forward(&mut g, p0).unwrap();
    let p = g.tape.softmax(logits, 1.0).unwrap();
    g.value(p).clone()
}

#[test]
fn teacher_mode_without_branches_reads_the_first_projection() {
    let x = normal(5, "probe", 9, 5);
    let trained = jittered(small(2), 3);
    let t0 = infer(&trained, &x, &spec(InferenceMode::T, 0.5, 0)).unwrap();
    assert!(t0.bit_eq(&first_projection_probs(&trained, &x)));
    let fresh = EraModel::new(small(2), 3).unwrap();
    let want = first_projection_probs(&fresh, &x);
    for j in 0..=2 {
        let t = infer(&fresh, &x, &spec(InferenceMode::T, 0.5, j)).unwrap();
        assert!(t.bit_eq(&want), "j = {j}");
    }
}

#[test]
fn probabilities_rows_sum_to_one() {
    let model = jittered(small(3), 4);
    let x = normal(6, "probe", 10, 5);
    for mode in [InferenceMode::S, InferenceMode::T, InferenceMode::ST] {
        let p = infer(&model, &x, &spec(mode, 0.3, 3)).unwrap();
        for i in 0..10 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn invalid_specs_are_parameter_errors() {
    let model = EraModel::new(small(2), 0).unwrap();
    let x = normal(0, "probe", 3, 5);
    for bad in [
        spec(InferenceMode::T, 0.5, 3),
        spec(InferenceMode::ST, 1.5, 1),
        spec(InferenceMode::ST, -0.1, 1),
    ] {
        assert!(matches!(infer(&model, &x, &bad), Err(Error::Parameter(_))));
    }
    assert!(matches!(predict(&model, &x, 5), Err(Error::Parameter(_))));
}

#[test]
fn empty_dataset_is_input_error() {
    let model = EraModel::new(small(1), 0).unwrap();
    let empty = Dataset::new(
        Tensor::new(vec![0, 5], vec![]).unwrap(),
        vec![],
        3,
        Split::Test,
    )
    .unwrap();
    let err = evaluate_accuracy(&model, &empty, &spec(InferenceMode::S, 0.5, 1)).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
    assert!(matches!(
        evaluate_summary(&model, &empty, 1, 0.5),
        Err(Error::Input(_))
    ));
}

#[test]
fn random_predictor_scores_chance() {
    // Binomial(1000, 1/4) has standard deviation 0.0137; ±0.05 is 3.6σ.
    let mut rng = seed::rng(21, "uniform-predictor");
    let n = 1000;
    let data: Vec<f64> = (0..n * 4).map(|_| rng.random::<f64>()).collect();
    let probs = Tensor::new(vec![n, 4], data).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let acc = accuracy(&probs, &labels);
    assert!((acc - 0.25).abs() <= 0.05, "{acc}");
}

#[test]
fn oracle_predictor_scores_one() {
    let labels = vec![2, 0, 1, 1, 3, 0];
    let mut probs = Tensor::zeros(vec![6, 4]);
    for (i, &y) in labels.iter().enumerate() {
        probs.data_mut()[i * 4 + y] = 1.0;
    }
    assert_eq!(accuracy(&probs, &labels), 1.0);
}

#[test]
fn summary_agrees_with_per_mode_accuracy() {
    let (_, test) = data(3, 5, 40, 2.0, 8);
    let model = jittered(small(2), 6);
    let s = evaluate_summary(&model, &test, 2, 0.4).unwrap();
    let acc = |mode| evaluate_accuracy(&model, &test, &spec(mode, 0.4, 2)).unwrap();
    assert_eq!(s.acc_s, acc(InferenceMode::S));
    assert_eq!(s.acc_t, acc(InferenceMode::T));
    assert_eq!(s.acc_st, acc(InferenceMode::ST));
    assert_eq!(evaluate_summary(&model, &test, 2, 0.4).unwrap(), s);
}

#[test]
fn modes_parse_case_insensitively() {
    assert_eq!("ST".parse::<InferenceMode>().unwrap(), InferenceMode::ST);
    assert_eq!("t".parse::<InferenceMode>().unwrap(), InferenceMode::T);
    assert!("x".parse::<InferenceMode>().is_err());
}
