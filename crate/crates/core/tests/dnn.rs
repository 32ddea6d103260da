mod common;

use artictts::acoustic::{NormKind, NormalizationStats, StreamLayout, LF0_UNVOICED};
use artictts::dnn::{init_model, predict_utterance, train, Dataset, Layer, MlpModel, TrainingSchedule};
use common::{dense_solve, Lcg};
use ndarray::{Array1, Array2};

fn random_model(sizes: &[usize], seed: u64) -> MlpModel {
    let mut rng = Lcg(seed);
    let mut m = MlpModel::init(sizes, seed).unwrap();
    for l in &mut m.layers {
        l.bias.mapv_inplace(|_| rng.uniform(-0.5, 0.5));
    }
    m
}

/// Forward pass written with explicit loops.
fn loop_forward(model: &MlpModel, x: &Array2<f64>) -> Array2<f64> {
    let mut cur = x.clone();
    for (i, Layer { weights, bias }) in model.layers.iter().enumerate() {
        let (fan_in, fan_out) = weights.dim();
        let mut next = Array2::zeros((cur.nrows(), fan_out));
        for r in 0..cur.nrows() {
            for o in 0..fan_out {
                let mut z = bias[o];
                for k in 0..fan_in {
                    z += cur[[r, k]] * weights[[k, o]];
                }
                next[[r, o]] = if i + 1 < model.layers.len() { z.tanh() } else { z };
            }
        }
        cur = next;
    }
    cur
}

#[test]
fn forward_matches_loop_oracle() {
    let model = random_model(&[3, 4, 2], 9);
    let mut rng = Lcg(1);
    let x = Array2::from_shape_fn((6, 3), |_| rng.uniform(-2.0, 2.0));
    let fast = model.forward(x.view()).unwrap();
    let slow = loop_forward(&model, &x);
    for (a, b) in fast.iter().zip(slow.iter()) {
        assert!((a - b).abs() < 1e-10);
    }
}

/// Central finite differences on every parameter of a 5-8-3 network.
#[test]
fn gradients_match_finite_differences() {
    let model = random_model(&[5, 8, 3], 21);
    let mut rng = Lcg(5);
    let x = Array2::from_shape_fn((7, 5), |_| rng.uniform(-1.0, 1.0));
    let y = Array2::from_shape_fn((7, 3), |_| rng.uniform(-1.0, 1.0));
    let (_, grads) = model.backward(x.view(), y.view()).unwrap();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for li in 0..model.layers.len() {
        let n_w = model.layers[li].weights.len();
        let n_b = model.layers[li].bias.len();
        for p in 0..n_w + n_b {
            let bump = |delta: f64| {
                let mut m = model.clone();
                if p < n_w {
                    let cols = m.layers[li].weights.ncols();
                    m.layers[li].weights[[p / cols, p % cols]] += delta;
                } else {
                    m.layers[li].bias[p - n_w] += delta;
                }
                m.loss(x.view(), y.view()).unwrap()
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let g = if p < n_w {
                let cols = grads.layers[li].weights.ncols();
                grads.layers[li].weights[[p / cols, p % cols]]
            } else {
                grads.layers[li].bias[p - n_w]
            };
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn glorot_weights_have_expected_moments() {
    let model = MlpModel::init(&[1024, 1024], 77).unwrap();
    let w = &model.layers[0].weights;
    let limit = (6.0f64 / 2048.0).sqrt();
    let n = w.len() as f64;
    let var = limit * limit / 3.0;
    let mean = w.sum() / n;
    assert!(mean.abs() < 3.0 * (var / n).sqrt(), "mean {mean}");
    let sample_var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!((sample_var / var - 1.0).abs() < 0.01, "variance ratio {}", sample_var / var);
    assert!(w.iter().all(|v| v.abs() <= limit));
    assert!(model.layers[0].bias.iter().all(|&b| b == 0.0));
}

#[test]
fn default_schedule_constants() {
    let s = TrainingSchedule::default();
    assert_eq!((s.max_epochs, s.warmup_epochs, s.batch_size), (25, 10, 256));
    assert_eq!(s.base_lr, 0.002);
    assert_eq!(init_model(7, 0).unwrap().output_dim(), 199);
}

fn linear_task(n: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = Lcg(seed);
    let a = [[0.8, -0.3, 0.5, 0.1], [-0.2, 0.6, 0.0, -0.7], [0.3, 0.3, -0.4, 0.2]];
    let x = Array2::from_shape_fn((n, 4), |_| rng.uniform(-1.0, 1.0));
    let y = Array2::from_shape_fn((n, 3), |(i, o)| {
        (0..4).map(|k| a[o][k] * x[[i, k]]).sum::<f64>() + 0.1 * o as f64 + 0.01 * rng.normal()
    });
    (x, y)
}

#[test]
fn learns_a_linear_map() {
    let (xt, yt) = linear_task(400, 1);
    let (xv, yv) = linear_task(100, 2);
    let schedule = TrainingSchedule {
        max_epochs: 25,
        warmup_epochs: 10,
        base_lr: 0.05,
        decay: 0.5,
        batch_size: 16,
        patience: 5,
        seed: 3,
    };
    let model = MlpModel::init(&[4, 16, 3], 3).unwrap();
    let (best, history) = train(
        model,
        Dataset::new(xt.view(), yt.view()).unwrap(),
        Dataset::new(xv.view(), yv.view()).unwrap(),
        &schedule,
    )
    .unwrap();
    let first = history.epochs[0].valid_mse;
    let final_valid = best.loss(xv.view(), yv.view()).unwrap();
    assert!(final_valid < 0.1 * first, "{final_valid} vs {first}");
    // best-epoch selection is exact
    let min = history.epochs.iter().map(|e| e.valid_mse).fold(f64::INFINITY, f64::min);
    assert_eq!(final_valid, min);
    assert_eq!(history.best_valid(), min);
    assert!(best.loss(xt.view(), yt.view()).unwrap().is_finite());
    // bit-reproducible
    let (again, h2) = train(
        MlpModel::init(&[4, 16, 3], 3).unwrap(),
        Dataset::new(xt.view(), yt.view()).unwrap(),
        Dataset::new(xv.view(), yv.view()).unwrap(),
        &schedule,
    )
    .unwrap();
    assert_eq!(again, best);
    assert_eq!(h2, history);
    assert!(history.to_csv().starts_with("epoch,lr,train_mse,valid_mse\n0,"));
}

#[test]
fn zero_model_predicts_training_mean() {
    let layout = StreamLayout::new(2, 1);
    let width = layout.width();
    let mut rng = Lcg(4);
    let targets = Array2::from_shape_fn((30, width), |(i, c)| {
        if c == layout.vuv() {
            (i % 2) as f64
        } else {
            rng.uniform(-2.0, 2.0) + c as f64
        }
    });
    let stats = NormalizationStats::fit(targets.view(), NormKind::MeanVariance).unwrap();
    let mut model = MlpModel::init(&[3, 4, width], 0).unwrap();
    for l in &mut model.layers {
        l.weights.fill(0.0);
    }
    let x = Array2::from_shape_fn((5, 3), |_| rng.uniform(0.0, 1.0));
    let pred = predict_utterance(&model, x.view(), &stats, layout, 0.005).unwrap();
    let mean = targets.mean_axis(ndarray::Axis(0)).unwrap();
    for row in pred.denormalized.rows() {
        for (a, b) in row.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

/// Forward, denormalize, split, dense MLPG and voicing, composed by hand.
#[test]
fn prediction_matches_composition_oracle() {
    let layout = StreamLayout::new(2, 1);
    let width = layout.width();
    let mut rng = Lcg(12);
    let train_targets = Array2::from_shape_fn((40, width), |(i, c)| {
        if c == layout.vuv() {
            ((i / 3) % 2) as f64
        } else {
            rng.uniform(-1.0, 1.0) * (1.0 + c as f64)
        }
    });
    let stats = NormalizationStats::fit(train_targets.view(), NormKind::MeanVariance).unwrap();
    let model = random_model(&[4, 6, width], 8);
    let x = Array2::from_shape_fn((3, 4), |_| rng.uniform(0.0, 1.0));
    let pred = predict_utterance(&model, x.view(), &stats, layout, 0.005).unwrap();

    let norm_out = loop_forward(&model, &x);
    let mean = train_targets.mean_axis(ndarray::Axis(0)).unwrap();
    let std = train_targets.std_axis(ndarray::Axis(0), 0.0);
    let denorm = Array2::from_shape_fn(norm_out.dim(), |(r, c)| norm_out[[r, c]] * std[c] + mean[c]);
    for (a, b) in pred.denormalized.iter().zip(denorm.iter()) {
        assert!((a - b).abs() < 1e-8);
    }

    // dense MLPG per static dimension; statics at offsets 0..w of each block
    let n = 3;
    let w_mat = {
        let mut w = Array2::zeros((3 * n, n));
        for t in 0..n {
            let (p, q) = (t.saturating_sub(1), (t + 1).min(n - 1));
            w[[t, t]] += 1.0;
            w[[n + t, p]] -= 0.5;
            w[[n + t, q]] += 0.5;
            w[[2 * n + t, p]] += 1.0;
            w[[2 * n + t, t]] -= 2.0;
            w[[2 * n + t, q]] += 1.0;
        }
        w
    };
    let solve = |block_start: usize, dim: usize, d: usize| -> Array1<f64> {
        let cols = [block_start + d, block_start + dim + d, block_start + 2 * dim + d];
        let mut mu = Array1::zeros(3 * n);
        let mut prec = Array1::zeros(3 * n);
        for (k, &c) in cols.iter().enumerate() {
            for t in 0..n {
                mu[k * n + t] = denorm[[t, c]];
                prec[k * n + t] = 1.0 / (std[c] * std[c]);
            }
        }
        let pw = Array2::from_shape_fn(w_mat.dim(), |(r, c)| prec[r] * w_mat[[r, c]]);
        dense_solve(&w_mat.t().dot(&pw), &pw.t().dot(&mu))
    };
    for d in 0..2 {
        let want = solve(0, 2, d);
        for t in 0..n {
            assert!((pred.mlpg.mgc[[t, d]] - want[t]).abs() < 1e-8);
            assert!((pred.raw.mgc[[t, d]] - denorm[[t, d]]).abs() < 1e-12);
        }
    }
    let bap = solve(6, 1, 0);
    let lf0 = solve(9, 1, 0);
    for t in 0..n {
        assert!((pred.mlpg.bap[[t, 0]] - bap[t]).abs() < 1e-8);
        let voiced = denorm[[t, layout.vuv()]] > 0.5;
        assert_eq!(pred.vuv[t], if voiced { 1.0 } else { 0.0 });
        if voiced {
            assert!((pred.mlpg.lf0[t] - lf0[t]).abs() < 1e-8);
            assert!((pred.raw.lf0[t] - denorm[[t, 9]]).abs() < 1e-12);
        } else {
            assert_eq!(pred.mlpg.lf0[t], LF0_UNVOICED);
            assert_eq!(pred.raw.lf0[t], LF0_UNVOICED);
        }
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let model = random_model(&[3, 5, 5, 2], 4);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.bin");
    model.save(&p).unwrap();
    assert_eq!(MlpModel::load(&p).unwrap(), model);
}
