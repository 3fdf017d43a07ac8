use super::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_input(seed: u64, h: usize) -> Vec<[f64; CHANNELS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..h).map(|_| std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal))).collect()
}

fn tensor<'a>(file: &'a ModelFile, name: &str) -> &'a [f64] {
    &file.tensors.iter().find(|t| t.name == name).unwrap().values
}

/// Straightforward nested-loop forward pass over `[h][w][c]` tensors built
/// from the serialized weights.
fn oracle_forward(model: &NetworkModel, x: &[[f64; CHANNELS]]) -> [f64; 2] {
    let file = model.to_file();
    let relu = |v: f64| if v > 0.0 { v } else { 0.0 };
    let conv = |input: &Vec<Vec<Vec<f64>>>, kernel: &[f64], bias: &[f64], cin: usize, cout: usize| {
        let rows = input.len() - 2;
        let mut out = vec![vec![vec![0.0; cout]; 3]; rows];
        for h in 0..rows {
            for w in 0..3 {
                for o in 0..cout {
                    let mut acc = bias[o];
                    for k in 0..3 {
                        for i in 0..cin {
                            acc += input[h + k][w][i] * kernel[(k * cin + i) * cout + o];
                        }
                    }
                    out[h][w][o] = relu(acc);
                }
            }
        }
        out
    };
    let pool = |input: &Vec<Vec<Vec<f64>>>| {
        (0..input.len() / 2)
            .map(|h| {
                (0..3)
                    .map(|w| (0..input[0][0].len()).map(|c| input[2 * h][w][c].max(input[2 * h + 1][w][c])).collect())
                    .collect()
            })
            .collect::<Vec<Vec<Vec<f64>>>>()
    };
    let x3: Vec<Vec<Vec<f64>>> = model.input_norm.apply(x).chunks(3).map(|r| r.iter().map(|&v| vec![v]).collect()).collect();
    let a1 = pool(&conv(&x3, tensor(&file, "conv1.kernel"), tensor(&file, "conv1.bias"), 1, 16));
    let a2 = pool(&conv(&a1, tensor(&file, "conv2.kernel"), tensor(&file, "conv2.bias"), 16, 32));
    let flat: Vec<f64> = a2.iter().flatten().flatten().copied().collect();
    let dense = |input: &[f64], w: &[f64], b: &[f64], n: usize| -> Vec<f64> {
        (0..n).map(|j| b[j] + input.iter().enumerate().map(|(i, v)| v * w[i * n + j]).sum::<f64>()).collect()
    };
    let h1: Vec<f64> =
        dense(&flat, tensor(&file, "dense1.kernel"), tensor(&file, "dense1.bias"), 16).into_iter().map(relu).collect();
    let z = dense(&h1, tensor(&file, "dense2.kernel"), tensor(&file, "dense2.bias"), 2);
    let e0 = z[0].exp();
    let e1 = z[1].exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

#[test]
fn parameter_count() {
    let m = NetworkModel::zeros(100).unwrap();
    assert_eq!(m.n_params(), 37_010);
    let flat = m.tensors().iter().find(|t| t.name == "dense1.kernel").unwrap().shape[0];
    assert_eq!(flat, 2208);
}

#[test]
fn zero_model_is_uniform() {
    let m = NetworkModel::zeros(100).unwrap();
    assert_eq!(m.forward(&random_input(1, 100)).unwrap(), [0.5, 0.5]);
}

#[test]
fn shape_mismatch_rejected() {
    let m = NetworkModel::zeros(100).unwrap();
    assert!(matches!(m.forward(&random_input(1, 99)), Err(Error::Shape { .. })));
    let mut x = random_input(1, 100);
    x[3][1] = f64::NAN;
    assert!(m.forward(&x).is_err());
}

#[test]
fn matches_independent_forward() {
    for seed in 0..5 {
        let mut m = NetworkModel::init(100, seed).unwrap();
        // Non-zero biases so every bias path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for spec in m.tensors().into_iter().filter(|t| t.kind == TensorKind::Bias) {
            for v in &mut m.params_mut()[spec.range] {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let x = random_input(seed, 100);
        let got = m.forward(&x).unwrap();
        let want = oracle_forward(&m, &x);
        for c in 0..2 {
            assert!((got[c] - want[c]).abs() <= 1e-9, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn loss_values() {
    assert!(df_loss(1.0, 1.0, 0.5).abs() < 1e-15);
    assert!((df_loss(0.0, 1.0, 0.5) - 1.718_281_828).abs() < 1e-8);
    assert_eq!(df_loss(0.0, 0.1, 0.5), 0.0);
    assert!((bce_loss(1, 0.5) - std::f64::consts::LN_2).abs() < 1e-8);
    assert!((bce_loss(0, 0.5) - bce_loss(1, 0.5)).abs() < 1e-15);
    assert!(bce_loss(1, 1.0 - 1e-7) < 1e-6);
    assert!(bce_loss(1, 0.0).is_finite());
    assert!((sample_loss(1, 0.5, 0.0, 1.0, 0.0) - bce_loss(1, 0.5)).abs() < 1e-15);
}

#[test]
fn total_loss_is_mean_of_terms() {
    let m = NetworkModel::zeros(100).unwrap();
    let x = vec![0.0; 300];
    let s = |y, f| PreparedSample { x: x.clone(), y, f_mag: f, threshold: 1.0 };
    let batch = [s(1, 2.0), s(0, 0.0)];
    let mut m1 = m.clone();
    m1.lambda = 1.0;
    let want = ((0.5f64.exp() - 1.0) * 2.0 + 2.0 * 2f64.ln()) / 2.0;
    assert!((m1.total_loss(&batch) - want).abs() < 1e-12);
    m1.lambda = 0.0;
    assert!((m1.total_loss(&batch) - 2f64.ln()).abs() < 1e-12);
}

fn random_batch(seed: u64, n: usize) -> Vec<PreparedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| PreparedSample {
            x: (0..300).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            y: (i % 2) as u8,
            f_mag: if i % 3 == 0 { 2.0 } else { 0.5 },
            threshold: 1.0,
        })
        .collect()
}

#[test]
fn gradient_matches_finite_differences() {
    let batch = random_batch(7, 4);
    for lambda in [0.0, 0.5, 2.0] {
        let mut m = NetworkModel::init(100, 3).unwrap();
        m.lambda = lambda;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for spec in m.tensors().into_iter().filter(|t| t.kind == TensorKind::Bias) {
            for v in &mut m.params_mut()[spec.range] {
                *v = rng.random_range(-0.05..0.05);
            }
        }
        let (_, grad) = m.loss_and_grad(&batch);
        for spec in m.tensors() {
            for _ in 0..20 {
                let i = rng.random_range(spec.range.clone());
                let h = 1e-6;
                let mut plus = m.clone();
                plus.params_mut()[i] += h;
                let mut minus = m.clone();
                minus.params_mut()[i] -= h;
                let numeric = (plus.total_loss(&batch) - minus.total_loss(&batch)) / (2.0 * h);
                let err = (grad[i] - numeric).abs();
                let scale = grad[i].abs().max(numeric.abs());
                assert!(err <= 1e-4 * scale + 1e-9, "{} [{i}] λ={lambda}: analytic {} numeric {numeric}", spec.name, grad[i]);
            }
        }
    }
}

#[test]
fn zero_epochs_leaves_model_unchanged() {
    let m = NetworkModel::init(100, 1).unwrap();
    let cfg = TrainConfig { epochs: 0, ..Default::default() };
    let (trained, history) = train(&m, &random_batch(1, 8), &cfg).unwrap();
    assert_eq!(trained.params(), m.params());
    assert!(history.epochs.is_empty());
}

/// Class 1 windows carry a ramp in channel 0; class 0 windows are flat noise.
fn separable(seed: u64, n: usize) -> Vec<PreparedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let y = (i % 2) as u8;
            let x = (0..300)
                .map(|k| {
                    let row = (k / 3) as f64;
                    let signal = if y == 1 && k % 3 == 0 { row / 50.0 } else { 0.0 };
                    signal + 0.3 * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            PreparedSample { x, y, f_mag: 0.0, threshold: 1.0 }
        })
        .collect()
}

#[test]
fn learns_separable_data_deterministically() {
    let data = separable(5, 128);
    let m = NetworkModel::init(100, 2).unwrap();
    let cfg = TrainConfig { epochs: 200, stop_at_accuracy: Some(0.95), ..Default::default() };
    let (a, ha) = train(&m, &data, &cfg).unwrap();
    let (b, hb) = train(&m, &data, &cfg).unwrap();
    assert!(ha.epochs_to_accuracy(0.95).is_some(), "{:?}", ha.epochs.last());
    assert_eq!(a.params(), b.params());
    assert_eq!(ha, hb);
    assert!(a.training.is_some());
}

#[test]
fn divergence_is_a_training_fault() {
    let m = NetworkModel::init(100, 1).unwrap();
    let cfg = TrainConfig { epochs: 50, lr: 1e200, ..Default::default() };
    assert!(matches!(train(&m, &separable(1, 64), &cfg), Err(Error::TrainingFault { .. })));
}

#[test]
fn masked_entries_stay_zero() {
    let m = NetworkModel::init(100, 1).unwrap();
    let keep: Vec<bool> = (0..m.n_params()).map(|i| i % 3 != 0).collect();
    let cfg = TrainConfig { epochs: 2, ..Default::default() };
    let (t, _) = train_masked(&m, &separable(2, 64), &cfg, Some(&keep)).unwrap();
    assert!(t.params().iter().zip(&keep).all(|(v, k)| *k || *v == 0.0));
}

#[test]
fn model_file_round_trip() {
    let mut m = NetworkModel::init(100, 9).unwrap();
    m.input_norm = InputNorm { log: true, eps: 1e-6, mean: [0.1, 0.2, 0.3], std: [1.5, 2.5, 3.5] };
    m.lambda = 0.25;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, m);
    let mut file = m.to_file();
    file.version = 99;
    assert!(NetworkModel::from_file(&file).is_err());
    let mut file = m.to_file();
    file.tensors[2].values.pop();
    assert!(NetworkModel::from_file(&file).is_err());
}

fn step_features(n: usize, step_at: usize) -> crate::spectral::FusedFeatureSeries {
    let c = (0..n).map(|i| if i >= step_at { [1.0, 0.0, 0.0] } else { [0.0; 3] }).collect();
    let frame_times = (0..n).map(|i| 1.0 + i as f64 * 0.01).collect();
    crate::spectral::FusedFeatureSeries { c, frame_times }
}

#[test]
fn detect_edges_translation_consistent() {
    // Hand-set weights: class 1 once enough of channel 0 inside the
    // receptive field is positive.
    let mut m = NetworkModel::zeros(20).unwrap();
    let range = |name: &str| m.tensors().into_iter().find(|t| t.name == name).unwrap().range;
    let (c1k, c2k, d1k, d2k, d2b) =
        (range("conv1.kernel"), range("conv2.kernel"), range("dense1.kernel"), range("dense2.kernel"), range("dense2.bias"));
    let p = m.params_mut();
    p[c1k.start] = 1.0;
    p[c2k.start] = 1.0;
    p[d1k].iter_mut().for_each(|v| *v = 1.0);
    p[d2k.start + 1] = 1.0;
    p[d2b.start] = 0.5;
    let a = detect_edges(&m, &step_features(120, 70), 1).unwrap();
    let b = detect_edges(&m, &step_features(127, 77), 1).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(b.len(), 1);
    assert!((b[0] - a[0] - 7.0 * 0.01).abs() < 1e-9);
    assert!(detect_edges(&m, &step_features(10, 5), 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn softmax_output_is_a_distribution(seed in 0u64..10_000, scale in 0.0..50.0f64) {
        let m = NetworkModel::init(100, seed).unwrap();
        let x: Vec<[f64; 3]> = random_input(seed, 100).into_iter().map(|r| r.map(|v| v * scale)).collect();
        let p = m.forward(&x).unwrap();
        prop_assert!((p[0] + p[1] - 1.0).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
    }

    #[test]
    fn df_loss_non_negative(y in 0.0..=1.0f64, f in 0.0..2.0f64, t in 0.0..2.0f64) {
        prop_assert!(df_loss(y, f, t) >= 0.0);
    }
}
