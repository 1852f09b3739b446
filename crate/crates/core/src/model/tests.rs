use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::check::{finite_difference, relative_error};
use crate::autodiff::{ConvPadding, Tape, Tensor};
use crate::data::{extract_calendar_features, CalendarRow, HolidaySet, WindowSample};
use crate::Error;

fn tiny(wiring: AblationWiring, d: usize, heads: usize, layers: usize, input_len: usize, horizon: usize) -> ModelConfig {
    ModelConfig {
        d,
        heads,
        layers,
        input_len,
        horizon,
        wiring,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> WindowSample {
    let start = NaiveDate::from_ymd_opt(2017, 3, 4).unwrap().and_hms_opt(5, 30, 0).unwrap()
        + chrono::Duration::minutes(15 * rng.random_range(0..2000));
    let t = cfg.input_len;
    let calendar = (0..t)
        .map(|s| extract_calendar_features(start + chrono::Duration::minutes(15 * s as i64), 15, &HolidaySet::new()))
        .collect();
    WindowSample {
        location_id: "loc".into(),
        input_start: start,
        tm_input: (0..t).map(|_| rng.random_range(0.0..10.0)).collect(),
        sm_input: (0..t).map(|_| rng.random_range(0.0..10.0)).collect(),
        calendar,
        target: (0..cfg.horizon).map(|_| rng.random_range(0.0..10.0)).collect(),
        resolution_minutes: 15,
        is_coarse: false,
    }
}

/// MSE of the batch forecast against the targets, with every parameter
/// trainable.
fn loss_of(params: &ModelParams, samples: &[&WindowSample]) -> (Tape, BoundParams, f64, crate::autodiff::Var) {
    let cfg = &params.config;
    let batch = NormalizedBatch::from_samples(samples, cfg).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let f = forward_on_tape(&mut tape, &bound, cfg, &batch).unwrap();
    let target: Vec<f64> = samples.iter().flat_map(|s| s.target.iter().copied()).collect();
    let tv = tape.constant(Tensor::new(vec![samples.len(), cfg.horizon], target).unwrap());
    let loss = tape.mse_loss(f.forecast, tv).unwrap();
    let v = tape.value(loss).data()[0];
    (tape, bound, v, loss)
}

#[test]
fn parameter_count_matches_closed_form() {
    for wiring in AblationWiring::ALL {
        for (interval, te_sa, readout) in [(15, true, Readout::LastToken), (60, false, Readout::Flatten), (30, true, Readout::Flatten)] {
            let cfg = ModelConfig {
                interval_minutes: interval,
                use_te_self_attention: te_sa,
                readout,
                ..tiny(wiring, 8, 2, 3, 6, 4)
            };
            let p = ModelParams::init(&cfg).unwrap();
            assert_eq!(p.scalar_count(), cfg.parameter_count(), "{wiring:?} {interval} {te_sa}");
        }
    }
    let full = ModelConfig::default();
    assert_eq!(ModelParams::init(&full).unwrap().scalar_count(), full.parameter_count());
}

#[test]
fn config_validation_lists_every_problem() {
    let bad = ModelConfig {
        d: 10,
        heads: 4,
        layers: 0,
        kernel_size: 4,
        ..ModelConfig::default()
    };
    match bad.validate() {
        Err(Error::Config(msg)) => {
            assert!(msg.contains("heads") && msg.contains("layer") && msg.contains("kernel"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn init_is_seed_deterministic() {
    let cfg = tiny(AblationWiring::E4, 8, 2, 2, 8, 4);
    assert_eq!(ModelParams::init(&cfg).unwrap(), ModelParams::init(&cfg).unwrap());
    let other = ModelParams::init(&ModelConfig { seed: 6, ..cfg.clone() }).unwrap();
    assert_ne!(ModelParams::init(&cfg).unwrap().parameters(), other.parameters());
    let p = ModelParams::init(&cfg).unwrap();
    assert_eq!(p.get("layer0.norm.gamma").unwrap().value.data(), &[1.0; 8]);
    let w = p.get("layer1.self.wq").unwrap().value.data();
    assert!(w.iter().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
}

#[test]
fn positional_encoding_pattern() {
    let pe = positional_encoding(3, 6);
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!((pe.row(2)[0] - 2f64.sin()).abs() < 1e-15);
    assert!((pe.row(2)[3] - (2.0 * 10000f64.powf(-2.0 / 6.0)).cos()).abs() < 1e-15);
}

#[test]
fn zero_series_embeds_to_bias_plus_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let k = tape.constant(Tensor::new(vec![3, 1, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let b = tape.constant(Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]));
    let x = tape.constant(Tensor::zeros(&[5, 1]));
    let pe = positional_encoding(5, 4);
    let pev = tape.constant(pe.clone());
    let e = token_embed_with_position(&mut tape, x, (k, b), pev, ConvPadding::Circular, 1).unwrap();
    for t in 0..5 {
        for i in 0..4 {
            assert_eq!(tape.value(e).row(t)[i], [0.1, -0.2, 0.3, 0.4][i] + pe.row(t)[i]);
        }
    }
}

#[test]
fn periodic_shift_changes_only_positional_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kernel: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let series = [1.0, 4.0, 2.0, 1.0, 4.0, 2.0];
    let shifted = [4.0, 2.0, 1.0, 4.0, 2.0, 1.0];
    let pe = positional_encoding(6, 4);
    let embed = |x: &[f64]| {
        let mut tape = Tape::new();
        let k = tape.constant(Tensor::new(vec![3, 1, 4], kernel.clone()).unwrap());
        let b = tape.constant(Tensor::zeros(&[4]));
        let xv = tape.constant(Tensor::new(vec![6, 1], x.to_vec()).unwrap());
        let pev = tape.constant(pe.clone());
        let e = token_embed_with_position(&mut tape, xv, (k, b), pev, ConvPadding::Circular, 1).unwrap();
        tape.value(e).clone()
    };
    let (a, b) = (embed(&series), embed(&shifted));
    for t in 0..6 {
        for i in 0..4 {
            let ta = a.row((t + 1) % 6)[i] - pe.row((t + 1) % 6)[i];
            let tb = b.row(t)[i] - pe.row(t)[i];
            assert!((ta - tb).abs() < 1e-12);
        }
    }
}

fn calendar_rows(n: usize, rng: &mut ChaCha8Rng) -> Vec<CalendarRow> {
    (0..n)
        .map(|_| CalendarRow {
            month: rng.random_range(1..=12),
            day: rng.random_range(1..=31),
            hour: rng.random_range(0..24),
            minute_index: Some(rng.random_range(0..4)),
            weekday: rng.random_range(0..7),
            holiday: rng.random_bool(0.2),
        })
        .collect()
}

#[test]
fn temporal_embedding_is_token_order_invariant() {
    let cfg = tiny(AblationWiring::E4, 8, 2, 1, 4, 2);
    let params = ModelParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = calendar_rows(10, &mut rng);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let base = temporal_feature_embedding(&mut tape, &bound.te_tables, bound.te_attn.as_ref(), 2, &rows, 15, None).unwrap();
    let perm = [4, 0, 5, 2, 1, 3];
    let p = temporal_feature_embedding(&mut tape, &bound.te_tables, bound.te_attn.as_ref(), 2, &rows, 15, Some(&perm)).unwrap();
    for (a, b) in tape.value(base).data().iter().zip(tape.value(p).data()) {
        assert!((a - b).abs() < 1e-9);
    }
    let dup = [rows[0], rows[0]];
    let e = temporal_feature_embedding(&mut tape, &bound.te_tables, bound.te_attn.as_ref(), 2, &dup, 15, None).unwrap();
    assert_eq!(tape.value(e).row(0), tape.value(e).row(1));
    let bad = CalendarRow { month: 13, ..rows[0] };
    assert!(matches!(
        temporal_feature_embedding(&mut tape, &bound.te_tables, None, 2, &[bad], 15, None),
        Err(Error::Index { feature, .. }) if feature == "month"
    ));
}

#[test]
fn temporal_embedding_without_attention_sums_tables() {
    let cfg = ModelConfig {
        use_te_self_attention: false,
        ..tiny(AblationWiring::E4, 4, 1, 1, 4, 2)
    };
    let mut params = ModelParams::init(&cfg).unwrap();
    for (name, _) in calendar_tables(15) {
        if name != "month" {
            let p = params.get_mut(&format!("te.{name}")).unwrap();
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows = calendar_rows(3, &mut rng);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    assert!(bound.te_attn.is_none());
    let e = temporal_feature_embedding(&mut tape, &bound.te_tables, None, 1, &rows, 15, None).unwrap();
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(tape.value(e).row(i), params.get("te.month").unwrap().value.row(r.month as usize - 1));
    }
}

#[test]
fn single_token_self_attention() {
    let cfg = tiny(AblationWiring::E1, 4, 2, 1, 1, 1);
    let params = ModelParams::init(&cfg).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let e = tape.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
    let w = bound.layers[0].self_attn;
    let (out, probs) = masked_self_attention(&mut tape, e, &w, 2, 1).unwrap();
    assert_eq!(tape.value(probs).data(), &[1.0, 1.0]);
    let v = tape.linear(e, w.wv, w.bv).unwrap();
    let o = tape.linear(v, w.wo, w.bo).unwrap();
    let expect = tape.add(e, o).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(expect).data());
}

#[test]
fn attention_maps_are_causal_distributions() {
    let cfg = tiny(AblationWiring::E4, 8, 2, 2, 6, 3);
    let params = ModelParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = sample(&cfg, &mut rng);
    let b = model_forward(&params, &s).unwrap();
    assert_eq!(b.self_attention.len(), 2);
    assert_eq!(b.temporal_attention.len(), 2);
    for maps in b.self_attention.iter().chain(&b.temporal_attention) {
        assert_eq!(maps.len(), 2);
        for m in maps {
            for (i, row) in m.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row[i + 1..].iter().all(|&v| v < 1e-12));
            }
        }
    }
    let avg = b.head_averaged_temporal().unwrap();
    assert!(avg.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9));
}

#[test]
fn constant_calendar_queries_give_running_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = tiny(AblationWiring::E4, 4, 2, 1, 5, 1);
    let params = ModelParams::init(&cfg).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let w = bound.layers[0].second_attn.unwrap();
    let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let qk = tape.constant(Tensor::new(vec![5, 4], row.repeat(5)).unwrap());
    let sm = tape.constant(Tensor::new(vec![5, 4], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let (out, _) = masked_temporal_attention(&mut tape, qk, sm, &w, 2, 1).unwrap();
    let v = tape.linear(sm, w.wv, w.bv).unwrap();
    let (vv, wo, bo) = (tape.value(v).clone(), tape.value(w.wo).clone(), tape.value(w.bo).clone());
    for t in 0..5 {
        let mean: Vec<f64> = (0..4).map(|j| (0..=t).map(|s| vv.row(s)[j]).sum::<f64>() / (t + 1) as f64).collect();
        for o in 0..4 {
            let expect = bo.data()[o] + (0..4).map(|j| mean[j] * wo.row(j)[o]).sum::<f64>();
            assert!((tape.value(out).row(t)[o] - expect).abs() < 1e-12);
        }
    }
    let zero = tape.constant(Tensor::zeros(&[5, 4]));
    let (out, _) = masked_temporal_attention(&mut tape, qk, zero, &w, 2, 1).unwrap();
    let bv = tape.value(w.bv).clone();
    for o in 0..4 {
        let expect = bo.data()[o] + (0..4).map(|j| bv.data()[j] * wo.row(j)[o]).sum::<f64>();
        assert!((tape.value(out).row(4)[o] - expect).abs() < 1e-12);
    }
}

#[test]
fn e1_equals_e4_with_silenced_temporal_projection() {
    let cfg4 = tiny(AblationWiring::E4, 8, 2, 2, 8, 4);
    let mut p4 = ModelParams::init(&cfg4).unwrap();
    for c in 0..2 {
        for name in ["wo", "bo"] {
            let p = p4.get_mut(&format!("layer{c}.temporal.{name}")).unwrap();
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let cfg1 = ModelConfig {
        wiring: AblationWiring::E1,
        ..cfg4.clone()
    };
    let mut p1 = ModelParams::init(&cfg1).unwrap();
    for p in p1.parameters_mut() {
        p.value = p4.get(&p.name).unwrap().value.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let s = sample(&cfg4, &mut rng);
        assert_eq!(model_forward(&p1, &s).unwrap().forecast, model_forward(&p4, &s).unwrap().forecast);
    }
}

#[test]
fn perturbing_step_j_leaves_earlier_rows_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for wiring in AblationWiring::ALL {
        let cfg = ModelConfig {
            token_padding: ConvPadding::Causal,
            conv_padding: ConvPadding::Causal,
            ..tiny(wiring, 8, 2, 2, 7, 2)
        };
        let params = ModelParams::init(&cfg).unwrap();
        for _ in 0..10 {
            let s = sample(&cfg, &mut rng);
            let base = NormalizedBatch::from_samples(&[&s], &cfg).unwrap();
            let j = rng.random_range(0..7);
            let mut pert = base.clone();
            pert.tm[j] += rng.random_range(-3.0..3.0);
            if wiring.uses_support() {
                pert.sm[j] -= rng.random_range(-3.0..3.0);
            }
            pert.calendar[j].hour = (pert.calendar[j].hour + 5) % 24;
            let run = |b: &NormalizedBatch| {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, false);
                let e = encode(&mut tape, &bound, &cfg, b).unwrap();
                tape.value(e.output).clone()
            };
            let (a, b) = (run(&base), run(&pert));
            for i in 0..j {
                assert_eq!(a.row(i), b.row(i), "{wiring:?} j={j} i={i}");
            }
        }
    }
}

#[test]
fn constant_shift_moves_forecast_by_the_same_constant() {
    let cfg = tiny(AblationWiring::E4, 8, 2, 2, 8, 4);
    let params = ModelParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = sample(&cfg, &mut rng);
    let mut shifted = s.clone();
    for v in &mut shifted.tm_input {
        *v += 37.5;
    }
    let (a, b) = (model_forward(&params, &s).unwrap(), model_forward(&params, &shifted).unwrap());
    for (x, y) in a.forecast.iter().zip(&b.forecast) {
        assert!((y - x - 37.5).abs() < 1e-9);
    }
}

#[test]
fn forecast_lengths_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for horizon in [12, 24, 48] {
        for readout in [Readout::LastToken, Readout::Flatten] {
            let cfg = ModelConfig {
                readout,
                ..tiny(AblationWiring::E4, 8, 2, 2, 6, horizon)
            };
            let params = ModelParams::init(&cfg).unwrap();
            let s = sample(&cfg, &mut rng);
            let a = model_forward(&params, &s).unwrap();
            assert_eq!(a.forecast.len(), horizon);
            assert_eq!(a, model_forward(&params, &s).unwrap());
        }
    }
    let cfg = tiny(AblationWiring::E4, 8, 2, 2, 6, 3);
    let params = ModelParams::init(&cfg).unwrap();
    let mut s = sample(&cfg, &mut rng);
    s.sm_input.pop();
    assert!(matches!(model_forward(&params, &s), Err(Error::Dimension { .. })));
}

#[test]
fn batched_forward_equals_single_forward() {
    let cfg = tiny(AblationWiring::E4, 8, 2, 2, 6, 3);
    let params = ModelParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples: Vec<WindowSample> = (0..4).map(|_| sample(&cfg, &mut rng)).collect();
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let batch = predict(&params, &refs, 3).unwrap();
    for (s, f) in samples.iter().zip(&batch) {
        let single = model_forward(&params, s).unwrap().forecast;
        for (a, b) in single.iter().zip(f) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = tiny(AblationWiring::E4, 8, 2, 2, 8, 4);
    let params = ModelParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let samples: Vec<WindowSample> = (0..2).map(|_| sample(&cfg, &mut rng)).collect();
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let (mut tape, bound, _, loss) = loss_of(&params, &refs);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, p) in params.parameters().iter().enumerate() {
        let analytic = tape.grad(bound.all[i]).unwrap().to_vec();
        let numeric = finite_difference(p.value.data(), 1e-5, |probe| {
            let mut q = params.clone();
            q.parameters_mut()[i].value = Tensor::new(p.value.shape().to_vec(), probe.to_vec()).unwrap();
            loss_of(&q, &refs).2
        });
        // Key biases shift every score of a row equally, so softmax makes
        // their true gradient zero.
        if p.name.ends_with(".bk") {
            assert!(norm(&analytic) < 1e-10 && norm(&numeric) < 1e-6, "{}", p.name);
            continue;
        }
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-3, "{}: {err}", p.name);
        worst = worst.max(err);
    }
    assert!(worst < 1e-3);
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn every_wiring_gives_finite_losses_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for wiring in AblationWiring::ALL {
        for te_sa in [true, false] {
            let cfg = ModelConfig {
                use_te_self_attention: te_sa,
                ..tiny(wiring, 8, 2, 2, 8, 4)
            };
            let params = ModelParams::init(&cfg).unwrap();
            let samples: Vec<WindowSample> = (0..3).map(|_| sample(&cfg, &mut rng)).collect();
            let refs: Vec<&WindowSample> = samples.iter().collect();
            let (mut tape, bound, l, loss) = loss_of(&params, &refs);
            assert!(l.is_finite());
            tape.backward(loss).unwrap();
            for &v in &bound.all {
                assert!(tape.grad(v).unwrap().iter().all(|g| g.is_finite()));
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let cfg = tiny(AblationWiring::E3, 8, 2, 2, 6, 3);
    let params = ModelParams::init(&cfg).unwrap();
    let text = checkpoint_to_string(&params).unwrap();
    assert_eq!(checkpoint_from_str(&text).unwrap(), params);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs/x/stage_15/best.ckpt");
    save_checkpoint(&params, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), params);
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["config"]["d"] = serde_json::json!(16);
    v["config"]["heads"] = serde_json::json!(4);
    match checkpoint_from_str(&v.to_string()) {
        Err(Error::Config(msg)) => assert!(msg.contains("expects"), "{msg}"),
        other => panic!("{other:?}"),
    }
    v["version"] = serde_json::json!(99);
    assert!(matches!(checkpoint_from_str(&v.to_string()), Err(Error::Schema(_))));
}

// Independent scalar evaluation of the network: plain loops over nested
// vectors, no tape.

type M = Vec<Vec<f64>>;

fn param(p: &ModelParams, name: &str) -> Vec<f64> {
    p.get(name).unwrap().value.data().to_vec()
}

fn affine(x: &M, w: &[f64], b: &[f64]) -> M {
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i * out + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn attention(p: &ModelParams, prefix: &str, qk: &M, v: &M, heads: usize, causal: bool) -> M {
    let g = |n: &str| param(p, &format!("{prefix}.{n}"));
    let (q, k, vv) = (affine(qk, &g("wq"), &g("bq")), affine(qk, &g("wk"), &g("bk")), affine(v, &g("wv"), &g("bv")));
    let (t, d) = (q.len(), q[0].len());
    let dk = d / heads;
    let mut ctx = vec![vec![0.0; d]; t];
    for h in 0..heads {
        for i in 0..t {
            let visible = if causal { i + 1 } else { t };
            let s: Vec<f64> = (0..visible)
                .map(|j| (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..visible {
                for c in 0..dk {
                    ctx[i][h * dk + c] += e[j] / z * vv[j][h * dk + c];
                }
            }
        }
    }
    affine(&ctx, &g("wo"), &g("bo"))
}

fn conv(x: &M, kernel: &[f64], bias: &[f64], circular: bool) -> M {
    let (t, cin, cout) = (x.len(), x[0].len(), bias.len());
    (0..t)
        .map(|i| {
            (0..cout)
                .map(|o| {
                    let mut acc = bias[o];
                    for tap in 0..3 {
                        let src = if circular {
                            Some((i + t + tap - 1) % t)
                        } else {
                            (i + tap).checked_sub(2)
                        };
                        if let Some(s) = src {
                            for c in 0..cin {
                                acc += x[s][c] * kernel[(tap * cin + c) * cout + o];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn reference_forward(p: &ModelParams, s: &WindowSample) -> Vec<f64> {
    let cfg = &p.config;
    let (t, d) = (cfg.input_len, cfg.d);
    let stats = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
        (m, (var + 1e-5).sqrt())
    };
    let (g, b) = (param(p, "revin.gamma")[0], param(p, "revin.beta")[0]);
    let (mt, st) = stats(&s.tm_input);
    let (ms, ss) = stats(&s.sm_input);
    let tm: M = s.tm_input.iter().map(|v| vec![(v - mt) / st * g + b]).collect();
    let sm: M = s.sm_input.iter().map(|v| vec![(v - ms) / ss]).collect();
    let pe: M = (0..t)
        .map(|pos| {
            (0..d)
                .map(|i| {
                    let even = i - i % 2;
                    let a = pos as f64 / 10000f64.powf(even as f64 / d as f64);
                    if i % 2 == 0 {
                        a.sin()
                    } else {
                        a.cos()
                    }
                })
                .collect()
        })
        .collect();
    let mut e_tm = add(&conv(&tm, &param(p, "tm_embed.kernel"), &param(p, "tm_embed.bias"), true), &pe);
    let e_sm = add(&conv(&sm, &param(p, "sm_embed.kernel"), &param(p, "sm_embed.bias"), true), &pe);
    let e_t: M = s
        .calendar
        .iter()
        .map(|r| {
            let idx = [
                ("month", r.month as usize - 1),
                ("day", r.day as usize - 1),
                ("hour", r.hour as usize),
                ("minute", r.minute_index.unwrap() as usize),
                ("weekday", r.weekday as usize),
                ("holiday", r.holiday as usize),
            ];
            let tokens: M = idx
                .iter()
                .map(|(n, i)| param(p, &format!("te.{n}"))[i * d..(i + 1) * d].to_vec())
                .collect();
            let mixed = add(&tokens, &attention(p, "te.attn", &tokens, &tokens, cfg.heads, false));
            (0..d).map(|j| mixed.iter().map(|tok| tok[j]).sum()).collect()
        })
        .collect();
    for c in 0..cfg.layers {
        let sa = add(&e_tm, &attention(p, &format!("layer{c}.self"), &e_tm, &e_tm, cfg.heads, true));
        let ta = attention(p, &format!("layer{c}.temporal"), &e_t, &e_sm, cfg.heads, true);
        let comb = add(&sa, &ta);
        let (lg, lb) = (param(p, &format!("layer{c}.norm.gamma")), param(p, &format!("layer{c}.norm.beta")));
        let z: M = comb
            .iter()
            .map(|row| {
                let m = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
                row.iter().enumerate().map(|(j, v)| (v - m) / (var + 1e-5).sqrt() * lg[j] + lb[j]).collect()
            })
            .collect();
        let k = param(p, &format!("layer{c}.conv.kernel"));
        e_tm = add(&z, &conv(&z, &k, &param(p, &format!("layer{c}.conv.bias")), false));
    }
    let y = affine(&vec![e_tm[t - 1].clone()], &param(p, "head.w"), &param(p, "head.b"));
    y[0].iter().map(|v| (v - b) / g * st + mt).collect()
}

#[test]
fn hand_traced_tiny_forward() {
    let cfg = tiny(AblationWiring::E4, 4, 1, 1, 2, 2);
    let mut params = ModelParams::init(&cfg).unwrap();
    // A non-identity affine so that it is exercised too.
    params.get_mut("revin.gamma").unwrap().value = Tensor::vector(vec![1.3]);
    params.get_mut("revin.beta").unwrap().value = Tensor::vector(vec![-0.2]);
    params.get_mut("layer0.norm.beta").unwrap().value = Tensor::vector(vec![0.1, 0.0, -0.1, 0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..3 {
        let s = sample(&cfg, &mut rng);
        let got = model_forward(&params, &s).unwrap().forecast;
        let want = reference_forward(&params, &s);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }
    let deeper = tiny(AblationWiring::E4, 8, 2, 2, 6, 3);
    let params = ModelParams::init(&deeper).unwrap();
    let s = sample(&deeper, &mut rng);
    let got = model_forward(&params, &s).unwrap().forecast;
    for (a, b) in got.iter().zip(reference_forward(&params, &s)) {
        assert!((a - b).abs() < 1e-9);
    }
}
