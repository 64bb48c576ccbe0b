use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::numerics::grad_check_sampled;
use crate::scene_graph::VehicleObservation;

fn small() -> HstanConfig {
    HstanConfig {
        sam_dim: 8,
        sam_heads: 2,
        sam_layers: 2,
        gru_hidden: 8,
        gru_layers: 2,
        tam_heads: 2,
        obs_steps: 4,
        pred_steps: 3,
        decoder_hidden: vec![8],
        ..HstanConfig::default()
    }
}

fn random_frames(rng: &mut ChaCha8Rng, n: usize, steps: usize) -> Vec<SceneFrame> {
    let base: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| (rng.gen_range(-20.0..20.0), rng.gen_range(-4.0..4.0), rng.gen_range(5.0..25.0)))
        .collect();
    (0..steps)
        .map(|t| SceneFrame {
            timestamp: t as f64 * 0.1,
            vehicles: base
                .iter()
                .enumerate()
                .map(|(i, &(x, y, v))| VehicleObservation {
                    id: i as u32 + 10,
                    x: x + v * 0.1 * t as f64 + rng.gen_range(-0.1..0.1),
                    y: y + rng.gen_range(-0.1..0.1),
                    vx: v,
                    vy: rng.gen_range(-0.5..0.5),
                    ax: rng.gen_range(-1.0..1.0),
                    ay: 0.0,
                    length: 4.5,
                    width: 1.8,
                })
                .collect(),
        })
        .collect()
}

fn random_window(rng: &mut ChaCha8Rng, n: usize, c: &HstanConfig) -> Window {
    let history = random_frames(rng, n, c.obs_steps);
    let mut future = Tensor2D::zeros(n, c.output_dim());
    let last = history.last().unwrap();
    for (i, v) in last.vehicles.iter().enumerate() {
        for k in 0..c.pred_steps {
            let t = (k + 1) as f64 * c.dt;
            future.set(i, 2 * k, v.x + v.vx * t + rng.gen_range(-0.3..0.3));
            future.set(i, 2 * k + 1, v.y + v.vy * t);
        }
    }
    Window {
        episode_id: 0,
        start: 0,
        history,
        future,
    }
}

/// Model with random non-trivial normalisation so the buffers are exercised.
fn model_with_norm(c: HstanConfig, seed: u64) -> HstanModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let windows: Vec<Window> = (0..3).map(|_| random_window(&mut rng, 3, &c)).collect();
    let mut m = HstanModel::new(c, seed).unwrap();
    m.norm = Normalizer::fit(&windows, m.config.output_dim()).unwrap();
    m
}

fn zero_params(m: &mut HstanModel, prefix: &str) {
    let paths: Vec<String> = m.params.paths().filter(|p| p.starts_with(prefix)).map(str::to_string).collect();
    for p in paths {
        m.params.get_mut(&p).unwrap().scale_in_place(0.0);
    }
}

#[test]
fn single_vehicle_produces_a_trajectory() {
    let c = small();
    let m = model_with_norm(c.clone(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames = random_frames(&mut rng, 1, c.obs_steps);
    let (ctx, p) = hstan_forward(&m, &frames).unwrap();
    assert_eq!(ctx.shape(), (1, c.gru_hidden));
    assert_eq!(p.point.shape(), (1, 2 * c.pred_steps));
    assert!(!p.calibrated);
}

#[test]
fn history_errors_are_reported() {
    let c = small();
    let m = HstanModel::new(c.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut frames = random_frames(&mut rng, 3, c.obs_steps);
    assert!(hstan_forward(&m, &frames[..2]).is_err());
    frames[2].vehicles.swap(0, 1);
    assert!(matches!(hstan_forward(&m, &frames), Err(Error::RosterMismatch { frame: 2 })));
    frames[2].vehicles.swap(0, 1);
    frames[1].vehicles.pop();
    assert!(matches!(hstan_forward(&m, &frames), Err(Error::RosterMismatch { frame: 1 })));
}

#[test]
fn permuting_vehicles_permutes_predictions() {
    let c = small();
    let m = model_with_norm(c.clone(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frames = random_frames(&mut rng, 4, c.obs_steps);
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<SceneFrame> = frames
        .iter()
        .map(|f| SceneFrame {
            timestamp: f.timestamp,
            vehicles: perm.iter().map(|&i| f.vehicles[i]).collect(),
        })
        .collect();
    let (_, a) = hstan_forward(&m, &frames).unwrap();
    let (_, b) = hstan_forward(&m, &permuted).unwrap();
    for (r, &i) in perm.iter().enumerate() {
        assert_eq!(b.ids[r], a.ids[i]);
        for col in 0..a.point.cols() {
            assert!((b.point.get(r, col) - a.point.get(i, col)).abs() < 1e-9);
            assert!((b.lower.get(r, col) - a.lower.get(i, col)).abs() < 1e-9);
            assert!((b.upper.get(r, col) - a.upper.get(i, col)).abs() < 1e-9);
        }
    }
}

#[test]
fn translating_the_scene_translates_predictions() {
    let c = small();
    let m = model_with_norm(c.clone(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let frames = random_frames(&mut rng, 3, c.obs_steps);
    let (dx, dy) = (137.25, -42.5);
    let shifted: Vec<SceneFrame> = frames
        .iter()
        .map(|f| {
            let mut f = f.clone();
            for v in &mut f.vehicles {
                v.x += dx;
                v.y += dy;
            }
            f
        })
        .collect();
    let (_, a) = hstan_forward(&m, &frames).unwrap();
    let (_, b) = hstan_forward(&m, &shifted).unwrap();
    for i in 0..3 {
        for k in 0..c.pred_steps {
            let (pa, pb) = (a.position(i, k), b.position(i, k));
            assert!((pb[0] - pa[0] - dx).abs() < 1e-9);
            assert!((pb[1] - pa[1] - dy).abs() < 1e-9);
        }
    }
}

/// Re-derives the forward pass from module-level operations: per-vehicle
/// GRU and unmasked self-attention instead of the batched, masked form.
#[test]
fn forward_equals_manual_composition() {
    use crate::scene_graph::build_adjacency;
    let c = small();
    let m = model_with_norm(c.clone(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frames = random_frames(&mut rng, 3, c.obs_steps);
    let (ctx, pred) = hstan_forward(&m, &frames).unwrap();

    let mut tape = Tape::new();
    let b = tape.bind(&m.params);
    let origin = frames[0].centroid();
    let mut per_frame = Vec::new();
    for f in &frames {
        let x = tape.leaf(m.norm.normalize(&f.features(origin)));
        let h = embed_frame(&mut tape, x, b.var(EMBED_W).unwrap(), b.var(EMBED_B).unwrap()).unwrap();
        let g = Arc::new(build_adjacency(f, c.radius).unwrap().neighbor_lists());
        let h = m.gat.forward(&mut tape, h, &g, &b).unwrap();
        let h = tape
            .linear(h, b.var(BRIDGE_W).unwrap(), Some(b.var(BRIDGE_B).unwrap()))
            .unwrap();
        per_frame.push(h);
    }
    for i in 0..3 {
        let steps: Vec<Var> = per_frame.iter().map(|&h| tape.select_rows(h, &[i]).unwrap()).collect();
        let hs = gru_encode(&mut tape, &steps, &m.gru, &b).unwrap();
        let seq = tape.concat_rows(&hs).unwrap();
        let att = multi_head_self_attention(&mut tape, seq, &m.mha, None, &b).unwrap();
        let hf = collapse_to_context(&mut tape, att, 1).unwrap();
        for col in 0..c.gru_hidden {
            assert!((tape.value(hf).get(0, col) - ctx.get(i, col)).abs() < 1e-12);
        }
        let z = m.point_head.forward(&mut tape, hf, &b).unwrap();
        let last = frames.last().unwrap().vehicles[i].position();
        for col in 0..c.output_dim() {
            let d = tape.value(z).get(0, col) * m.norm.target_std.get(0, col) + m.norm.target_mean.get(0, col);
            assert!((d + last[col % 2] - pred.point.get(i, col)).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_decoder_repeats_last_position() {
    let c = small();
    let mut m = HstanModel::new(c.clone(), 9).unwrap();
    zero_params(&mut m, "decoder/");
    let ctx = Tensor2D::zeros(2, c.gru_hidden);
    let last = [[1.0, 2.0], [-3.0, 5.5]];
    let out = decode_trajectories(&m, &ctx, &last).unwrap();
    for (i, p) in last.iter().enumerate() {
        for k in 0..c.pred_steps {
            assert_eq!([out.get(i, 2 * k), out.get(i, 2 * k + 1)], *p);
        }
    }
    assert!(decode_trajectories(&m, &Tensor2D::zeros(2, 3), &last).is_err());
}

#[test]
fn identical_context_gives_identical_displacements() {
    let c = small();
    let m = model_with_norm(c.clone(), 10);
    let row: Vec<f64> = (0..c.gru_hidden).map(|k| (k as f64 * 0.37).sin()).collect();
    let ctx = Tensor2D::from_rows(&[&row, &row]);
    let last = [[0.0, 0.0], [50.0, -3.5]];
    let out = decode_trajectories(&m, &ctx, &last).unwrap();
    for col in 0..c.output_dim() {
        let d0 = out.get(0, col) - last[0][col % 2];
        let d1 = out.get(1, col) - last[1][col % 2];
        assert!((d0 - d1).abs() < 1e-12);
    }
    assert_ne!(out.row(0), out.row(1));
}

#[test]
fn decoder_matches_hand_mlp() {
    let c = small();
    let m = model_with_norm(c.clone(), 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let row: Vec<f64> = (0..c.gru_hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ctx = Tensor2D::from_rows(&[&row]);
    let out = decode_trajectories(&m, &ctx, &[[3.0, 4.0]]).unwrap();
    let p = |s: &str| m.params.get(&format!("decoder/point/{s}")).unwrap();
    let mut h = row.clone();
    for (l, relu) in [(0, true), (1, false)] {
        let (w, b) = (p(&format!("layer{l}/w")), p(&format!("layer{l}/b")));
        h = (0..w.cols())
            .map(|j| {
                let s: f64 = b.get(0, j) + (0..w.rows()).map(|k| h[k] * w.get(k, j)).sum::<f64>();
                if relu {
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect();
    }
    for col in 0..c.output_dim() {
        let want = h[col] * m.norm.target_std.get(0, col) + m.norm.target_mean.get(0, col) + [3.0, 4.0][col % 2];
        assert!((out.get(0, col) - want).abs() < 1e-12);
    }
}

#[test]
fn zero_quantile_heads_collapse_onto_point() {
    let c = small();
    let mut m = HstanModel::new(c.clone(), 13).unwrap();
    zero_params(&mut m, "decoder/");
    let ctx = Tensor2D::filled(2, c.gru_hidden, 0.3);
    let last = [[1.0, 1.0], [2.0, 2.0]];
    let point = decode_trajectories(&m, &ctx, &last).unwrap();
    let (lo, hi) = quantile_forward(&m, &ctx, &last).unwrap();
    assert_eq!(lo, point);
    assert_eq!(hi, point);

    // Bias-only heads: ±1 m on every y column.
    for (head, off) in [("lower", -1.0), ("upper", 1.0)] {
        let bias = m.params.get_mut(&format!("decoder/{head}/layer1/b")).unwrap();
        for k in 0..c.pred_steps {
            bias.set(0, 2 * k + 1, off);
        }
    }
    let (lo, hi) = quantile_forward(&m, &ctx, &last).unwrap();
    for i in 0..2 {
        for k in 0..c.pred_steps {
            assert_eq!(hi.get(i, 2 * k + 1) - lo.get(i, 2 * k + 1), 2.0);
            assert_eq!(hi.get(i, 2 * k), lo.get(i, 2 * k));
        }
    }
}

#[test]
fn trained_quantile_head_beats_point_head_on_pinball() {
    // y = 2x + ε, ε ~ N(0, 0.5²); the lower head targets the 5% quantile.
    let q = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let xs: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + noise.sample(&mut rng)).collect();
    let x = Tensor2D::column_vector(&xs);
    let y = Tensor2D::column_vector(&ys);

    let mut store = ParameterStore::new();
    let point = Mlp::init(&mut store, &mut rng, "point", &[1, 8, 1]).unwrap();
    let lower = Mlp::init(&mut store, &mut rng, "lower", &[1, 8, 1]).unwrap();
    let mut opt = OptimizerState::new();
    for _ in 0..600 {
        store.zero_grads();
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let p = point.forward(&mut tape, xv, &b).unwrap();
        let e = tape.sub(p, yv).unwrap();
        let e = tape.square(e);
        let mse = tape.mean(e);
        let l = lower.forward(&mut tape, xv, &b).unwrap();
        let pin = pinball_on_tape(&mut tape, l, yv, q).unwrap();
        let total = tape.add(mse, pin).unwrap();
        let g = tape.backward(total).unwrap();
        store.accumulate(&b, &g, 1.0);
        adam_step(&mut store, &mut opt, 0.02);
    }

    let xt: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let yt: Vec<f64> = xt.iter().map(|x| 2.0 * x + noise.sample(&mut rng)).collect();
    let mut tape = Tape::new();
    let b = tape.bind(&store);
    let xv = tape.leaf(Tensor2D::column_vector(&xt));
    let yv = tape.leaf(Tensor2D::column_vector(&yt));
    let p = point.forward(&mut tape, xv, &b).unwrap();
    let l = lower.forward(&mut tape, xv, &b).unwrap();
    let pin_point = pinball_on_tape(&mut tape, p, yv, q).unwrap();
    let pin_lower = pinball_on_tape(&mut tape, l, yv, q).unwrap();
    let (a, bq) = (tape.value(pin_lower).item(), tape.value(pin_point).item());
    assert!(a < bq, "lower-head pinball {a} vs point-head pinball {bq}");
}

fn batch(point: Tensor2D, lower: Tensor2D, upper: Tensor2D) -> PredictionBatch {
    PredictionBatch {
        ids: (0..point.rows() as u32).collect(),
        steps: point.cols() / 2,
        point,
        lower,
        upper,
        calibrated: false,
    }
}

#[test]
fn loss_examples() {
    let c = HstanConfig {
        pinball_weight: 0.0,
        collision_weight: 0.0,
        ..small()
    };
    let truth = Tensor2D::from_rows(&[&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]);
    let l = training_loss(&batch(truth.clone(), truth.clone(), truth.clone()), &truth, &c).unwrap();
    assert_eq!(l.total, 0.0);

    // Pinball at level ½ is half the absolute error.
    let pred = truth.map(|v| v + 0.8);
    let mut tape = Tape::new();
    let (p, y) = (tape.leaf(pred), tape.leaf(truth.clone()));
    let pin = pinball_on_tape(&mut tape, p, y, 0.5).unwrap();
    assert!((tape.value(pin).item() - 0.4).abs() < 1e-12);

    // Two vehicles 1 m apart at every step with r = 2: each pair-step costs 1.
    let c = HstanConfig {
        pinball_weight: 0.0,
        collision_weight: 1.0,
        collision_radius: 2.0,
        ..small()
    };
    let two = Tensor2D::from_rows(&[&[0.0, 0.0, 1.0, 0.0, 2.0, 0.0], &[0.0, 1.0, 1.0, 1.0, 2.0, 1.0]]);
    let l = training_loss(&batch(two.clone(), two.clone(), two.clone()), &two, &c).unwrap();
    assert!((l.collision - 1.0).abs() < 1e-9);
    assert!((l.total - 1.0).abs() < 1e-9);
}

#[test]
fn loss_without_extra_weights_is_plain_mse() {
    let c = HstanConfig {
        pinball_weight: 0.0,
        collision_weight: 0.0,
        ..small()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = random_window(&mut rng, 3, &c);
    let m = model_with_norm(c.clone(), 15);
    let (_, pred) = hstan_forward(&m, &w.history).unwrap();
    let l = training_loss(&pred, &w.future, &c).unwrap();
    let mut sum = 0.0;
    for (a, b) in pred.point.data().iter().zip(w.future.data()) {
        sum += (a - b) * (a - b);
    }
    let mse = sum / pred.point.data().len() as f64;
    assert!((l.total - mse).abs() <= 1e-12 * mse.max(1.0));
    assert_eq!(l.total, l.mse);
}

#[test]
fn end_to_end_gradients_check_out() {
    let c = HstanConfig {
        pinball_weight: 0.5,
        collision_weight: 0.1,
        collision_radius: 30.0,
        ..small()
    };
    let m = model_with_norm(c.clone(), 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = random_window(&mut rng, 3, &c);
    let truth = w.future_displacements();
    let r = grad_check_sampled(
        |tape, b| {
            let f = forward_on_tape(&m, tape, b, &w.history)?;
            Ok(loss_on_tape(tape, &f, &truth, &c)?.total)
        },
        &m.params,
        1e-5,
        400,
        3,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

fn cv_windows(count: usize, c: &HstanConfig, seed: u64) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|e| {
            let n = 2;
            let speeds: Vec<f64> = (0..n).map(|_| rng.gen_range(10.0..25.0)).collect();
            let y0: Vec<f64> = (0..n).map(|i| i as f64 * 3.5).collect();
            let x0: Vec<f64> = (0..n).map(|i| i as f64 * 12.0 + rng.gen_range(0.0..5.0)).collect();
            let pos = |i: usize, t: usize| x0[i] + speeds[i] * t as f64 * c.dt;
            let history = (0..c.obs_steps)
                .map(|t| SceneFrame {
                    timestamp: t as f64 * c.dt,
                    vehicles: (0..n)
                        .map(|i| VehicleObservation {
                            id: i as u32,
                            x: pos(i, t),
                            y: y0[i],
                            vx: speeds[i],
                            vy: 0.0,
                            ax: 0.0,
                            ay: 0.0,
                            length: 4.5,
                            width: 1.8,
                        })
                        .collect(),
                })
                .collect();
            let mut future = Tensor2D::zeros(n, c.output_dim());
            for i in 0..n {
                for k in 0..c.pred_steps {
                    future.set(i, 2 * k, pos(i, c.obs_steps + k));
                    future.set(i, 2 * k + 1, y0[i]);
                }
            }
            Window {
                episode_id: e as u64,
                start: 0,
                history,
                future,
            }
        })
        .collect()
}

#[test]
fn zero_learning_rate_keeps_parameters_and_loss() {
    let c = small();
    let windows = cv_windows(6, &c, 18);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 4,
        lr: 0.0,
        min_lr: 0.0,
    };
    let init = TrainState::new(c.clone(), &windows, 5).unwrap();
    let s = train(&windows, &c, &tc, 5).unwrap();
    assert_eq!(s.model.params, init.model.params);
    assert_eq!(s.history.len(), 3);
    assert!(s.history.iter().all(|r| r.loss == s.history[0].loss));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let c = small();
    let windows = cv_windows(6, &c, 19);
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 4,
        lr: 5e-3,
        min_lr: 0.0,
    };
    let a = train(&windows, &c, &tc, 21).unwrap();
    let b = train(&windows, &c, &tc, 21).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);

    let mut half = TrainState::new(c.clone(), &windows, 21).unwrap();
    half.run_epoch(&windows, &tc).unwrap();
    half.run_epoch(&windows, &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    half.save(&path).unwrap();
    let mut resumed = TrainState::load(&path).unwrap();
    assert_eq!(resumed, half);
    resumed.train_until(&windows, &tc, |_| Ok(())).unwrap();
    assert_eq!(resumed.history, a.history);
    assert_eq!(resumed.model.params, a.model.params);
    assert_eq!(resumed.to_container().unwrap().to_bytes(), a.to_container().unwrap().to_bytes());
}

#[test]
fn empty_training_set_is_rejected() {
    assert!(train(&[], &small(), &TrainConfig::default(), 0).is_err());
}

#[test]
fn checkpoint_rejects_foreign_layout() {
    let c = small();
    let windows = cv_windows(2, &c, 20);
    let s = TrainState::new(c.clone(), &windows, 1).unwrap();
    let mut cont = s.to_container().unwrap();
    cont.entries.remove("param/bridge/b");
    assert!(TrainState::from_container(cont).is_err());
    let mut cont = s.to_container().unwrap();
    cont.metadata = "{}".into();
    assert!(TrainState::from_container(cont).is_err());
}

#[test]
fn config_validation() {
    assert!(HstanConfig::default().validate().is_ok());
    assert!(HstanConfig::desk().validate().is_ok());
    assert!(HstanConfig { alpha: 1.0, ..small() }.validate().is_err());
    assert!(HstanConfig { sam_dim: 9, ..small() }.validate().is_err());
    assert!(HstanConfig { pred_steps: 0, ..small() }.validate().is_err());
    let one = small().single_head();
    assert_eq!((one.sam_heads, one.tam_heads), (1, 1));
}
