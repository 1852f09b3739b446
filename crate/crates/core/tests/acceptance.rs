//! Acceptance suite: one PASS/FAIL line per criterion and a summary line.
//! With `XMTRANS_ACCEPTANCE_STRICT=1` any failure exits nonzero. Positional
//! arguments filter criteria by substring.

use std::collections::BTreeSet;
use std::time::Instant;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmtrans_core::autodiff::check::{finite_difference, relative_error};
use xmtrans_core::autodiff::{AdamConfig, ConvPadding, Tape, Tensor, Var};
use xmtrans_core::data::{
    aggregate_predictions, aggregate_space, aggregate_time, extract_calendar_features, kmeans, synthesize_lagged_pair,
    AggregationMode, CalendarRow, HolidaySet, RegionMap, SeriesGrid, SynthConfig, WindowSample,
};
use xmtrans_core::model::{
    checkpoint_to_string, encode, forward_on_tape, model_forward_batch, predict, revin_denormalize, revin_normalize,
    temporal_feature_embedding, AblationWiring, ModelConfig, ModelParams, NormalizedBatch,
};
use xmtrans_core::train::{
    mse, prepare_data, run_experiment, save_run, stage_loss, train_single_resolution, ExperimentSpec, PreparedData,
    SplitSpec, TrainConfig, WindowSpec,
};

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;
const GRAD_BUDGET_SECS: f64 = 120.0;
const CAUSALITY_TRIALS: usize = 1000;
const REVIN_TRIALS: usize = 1000;
const REVIN_TOL: f64 = 1e-9;
const TE_TRIALS: usize = 100;
const TE_TOL: f64 = 1e-9;
const TOY_TOL: f64 = 1e-12;
const KMEANS_SEEDS: u64 = 20;

// Lag recovery task.
const LAG_LOCATIONS: usize = 8;
const LAG_STEPS: usize = 4000;
const LAG_INTERVAL: u32 = 15;
const LAG: usize = 8;
const LAG_COUPLING: f64 = 0.9;
const LAG_NOISE_SD: f64 = 2.0;
const LAG_DATA_SEED: u64 = 7;
const LAG_INPUT_LEN: usize = 24;
const LAG_HORIZON: usize = 1;
const LAG_EPOCHS: usize = 10;
const LAG_LR: f64 = 1e-3;
const LAG_TRAIN_CAP: usize = 6000;
const LAG_VALID_CAP: usize = 1000;
const LAG_TEST_CAP: usize = 2000;
const LAG_SEEDS: [u64; 3] = [0, 1, 2];
const LAG_MSE_RATIO: f64 = 0.8;
const BAND_RATIO: f64 = 2.0;
const BAND_SAMPLES: usize = 200;
const LAG_BUDGET_SECS: f64 = 30.0 * 60.0;
const TIE_MARGIN: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn(&mut Shared) -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("causality", causality),
        ("revin round trip", revin_round_trip),
        ("calendar token permutation invariance", te_invariance),
        ("multi-resolution loss arithmetic", tmr_toy),
        ("aggregation oracles", aggregation_oracles),
        ("synthetic lag recovery", lag_recovery),
        ("ablation ordering", ablation_ordering),
        ("determinism", determinism),
    ];
    let mut shared = Shared::default();
    let (mut run, mut failed) = (0, 0);
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = f(&mut shared);
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        run += 1;
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of {run} criteria passed", run - failed);
    let strict = std::env::var("XMTRANS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

/// Lag-task runs reused by later criteria.
#[derive(Default)]
struct Shared {
    lag: Option<LagData>,
    /// `(wiring, seed, test mse, band ratio, seconds)`.
    runs: Vec<(AblationWiring, u64, f64, f64, f64)>,
}

struct LagData {
    spec: ExperimentSpec,
    data: PreparedData,
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst relative error between backward and central differences of
/// `mse(f(inputs), random target)` over every input.
fn grad_error(inputs: &[Tensor], seed: u64, f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let target = rand_tensor(&out_shape, &mut rng);
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let tv = tape.constant(target.clone());
        let loss = tape.mse_loss(out, tv).unwrap();
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = eval(inputs);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).unwrap().to_vec();
        let numeric = finite_difference(x.data(), 1e-5, |probe| {
            let mut xs = inputs.to_vec();
            xs[i] = Tensor::new(x.shape().to_vec(), probe.to_vec()).unwrap();
            let (tape, _, loss) = eval(&xs);
            tape.value(loss).data()[0]
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

type OpCase = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);

fn op_cases() -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = vec![
        ("add", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        (
            "div",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v| {
                let c = t.constant(Tensor::filled(&[3, 4], 3.0));
                let d = t.add(v[1], c).unwrap();
                t.div(v[0], d).unwrap()
            }),
        ),
        ("scale", vec![vec![2, 3]], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("batched matmul", vec![vec![2, 3, 4], vec![2, 4, 5]], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("linear", vec![vec![5, 3], vec![3, 4], vec![4]], Box::new(|t, v| t.linear(v[0], v[1], v[2]).unwrap())),
        ("transpose", vec![vec![2, 3, 4]], Box::new(|t, v| t.transpose_last2(v[0]).unwrap())),
        ("split heads", vec![vec![6, 4]], Box::new(|t, v| t.split_heads_grouped(v[0], 2, 2).unwrap())),
        (
            "merge heads",
            vec![vec![4, 3, 2]],
            Box::new(|t, v| t.merge_heads_grouped(v[0], 2).unwrap()),
        ),
        ("sum groups", vec![vec![6, 3]], Box::new(|t, v| t.sum_groups(v[0], 3).unwrap())),
        ("softmax", vec![vec![3, 5]], Box::new(|t, v| t.softmax_lastdim(v[0]))),
        (
            "masked softmax",
            vec![vec![2, 4, 4]],
            Box::new(|t, v| {
                let m = t.masked_fill(v[0]).unwrap();
                t.softmax_lastdim(m)
            }),
        ),
        (
            "layer norm",
            vec![vec![4, 5], vec![5], vec![5]],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()),
        ),
        (
            "grouped conv",
            vec![vec![10, 2], vec![3, 2, 3], vec![3]],
            Box::new(|t, v| t.conv1d_time_grouped(v[0], v[1], v[2], ConvPadding::Causal, 2).unwrap()),
        ),
        (
            "embedding gather",
            vec![vec![4, 3], vec![6, 3]],
            Box::new(|t, v| t.embedding_gather(&[v[0], v[1]], &[(0, 2), (1, 5), (0, 2), (1, 0)], &["a", "b"]).unwrap()),
        ),
        (
            "embedding lookup",
            vec![vec![4, 3]],
            Box::new(|t, v| t.embedding_lookup(v[0], 1, "a").unwrap()),
        ),
        ("gather rows", vec![vec![4, 3]], Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3]).unwrap())),
        ("sum axis0", vec![vec![3, 2, 2]], Box::new(|t, v| t.sum_axis0(v[0]).unwrap())),
        ("stack", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.stack(&[v[0], v[1]]).unwrap())),
        ("select", vec![vec![3, 2, 2]], Box::new(|t, v| t.select(v[0], 1).unwrap())),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| t.reshape(v[0], vec![3, 4]).unwrap())),
        ("block mean", vec![vec![2, 6]], Box::new(|t, v| t.block_reduce(v[0], 3, true).unwrap())),
        ("block sum", vec![vec![2, 6]], Box::new(|t, v| t.block_reduce(v[0], 2, false).unwrap())),
        (
            "mse",
            vec![vec![3, 2], vec![3, 2]],
            Box::new(|t, v| t.mse_loss(v[0], v[1]).unwrap()),
        ),
    ];
    for (name, pad) in [
        ("conv causal", ConvPadding::Causal),
        ("conv circular", ConvPadding::Circular),
        ("conv zero", ConvPadding::Zero),
    ] {
        cases.push((
            name,
            vec![vec![6, 2], vec![3, 2, 3], vec![3]],
            Box::new(move |t, v| t.conv1d_time(v[0], v[1], v[2], pad).unwrap()),
        ));
    }
    cases
}

fn tiny(wiring: AblationWiring, input_len: usize, horizon: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        layers: 2,
        input_len,
        horizon,
        wiring,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> WindowSample {
    let start = NaiveDate::from_ymd_opt(2017, 3, 4).unwrap().and_hms_opt(5, 30, 0).unwrap()
        + chrono::Duration::minutes(15 * rng.random_range(0..20000));
    let t = cfg.input_len;
    WindowSample {
        location_id: "loc".into(),
        input_start: start,
        tm_input: (0..t).map(|_| rng.random_range(0.0..10.0)).collect(),
        sm_input: (0..t).map(|_| rng.random_range(0.0..10.0)).collect(),
        calendar: (0..t)
            .map(|s| extract_calendar_features(start + chrono::Duration::minutes(15 * s as i64), 15, &HolidaySet::new()))
            .collect(),
        target: (0..cfg.horizon).map(|_| rng.random_range(0.0..10.0)).collect(),
        resolution_minutes: 15,
        is_coarse: false,
    }
}

fn model_loss(params: &ModelParams, samples: &[&WindowSample]) -> (Tape, Vec<Var>, Var) {
    let cfg = &params.config;
    let batch = NormalizedBatch::from_samples(samples, cfg).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let f = forward_on_tape(&mut tape, &bound, cfg, &batch).unwrap();
    let target: Vec<f64> = samples.iter().flat_map(|s| s.target.iter().copied()).collect();
    let tv = tape.constant(Tensor::new(vec![samples.len(), cfg.horizon], target).unwrap());
    let loss = tape.mse_loss(f.forecast, tv).unwrap();
    (tape, bound.all.clone(), loss)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_suite(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_op = ("", 0.0f64);
    for (i, (name, shapes, f)) in op_cases().into_iter().enumerate() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let e = grad_error(&inputs, i as u64, f.as_ref());
        if e > worst_op.1 {
            worst_op = (name, e);
        }
    }

    let mut worst_model = ("", 0.0f64);
    let mut zero_bias_ok = true;
    for wiring in AblationWiring::ALL {
        let cfg = tiny(wiring, 8, 4);
        let params = ModelParams::init(&cfg).unwrap();
        let samples: Vec<WindowSample> = (0..2).map(|_| random_sample(&cfg, &mut rng)).collect();
        let refs: Vec<&WindowSample> = samples.iter().collect();
        let (mut tape, vars, loss) = model_loss(&params, &refs);
        tape.backward(loss).unwrap();
        for (i, p) in params.parameters().iter().enumerate() {
            let analytic = tape.grad(vars[i]).unwrap().to_vec();
            let numeric = finite_difference(p.value.data(), 1e-5, |probe| {
                let mut q = params.clone();
                q.parameters_mut()[i].value = Tensor::new(p.value.shape().to_vec(), probe.to_vec()).unwrap();
                let (tape, _, loss) = model_loss(&q, &refs);
                tape.value(loss).data()[0]
            });
            // Key biases add the same amount to every score of a row, so
            // their true gradient is zero.
            if p.name.ends_with(".bk") {
                zero_bias_ok &= norm(&analytic) < 1e-10 && norm(&numeric) < 1e-6;
                continue;
            }
            let e = relative_error(&analytic, &numeric);
            if e > worst_model.1 {
                worst_model = (wiring.label(), e);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_op.1 < OP_TOL && worst_model.1 < MODEL_TOL && zero_bias_ok && secs < GRAD_BUDGET_SECS,
        format!(
            "worst op {:.2e} ({}) < {OP_TOL:e}, worst model {:.2e} ({}) < {MODEL_TOL:e}, key biases zero {zero_bias_ok}, {secs:.0}s < {GRAD_BUDGET_SECS}s",
            worst_op.1, worst_op.0, worst_model.1, worst_model.0
        ),
    )
}

fn causality(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let models: Vec<(ModelConfig, ModelParams)> = AblationWiring::ALL
        .iter()
        .map(|&w| {
            let cfg = ModelConfig {
                token_padding: ConvPadding::Causal,
                conv_padding: ConvPadding::Causal,
                ..tiny(w, 12, 2)
            };
            let p = ModelParams::init(&cfg).unwrap();
            (cfg, p)
        })
        .collect();
    let mut violations = 0;
    let mut changed_later = 0;
    for trial in 0..CAUSALITY_TRIALS {
        let (cfg, params) = &models[trial % models.len()];
        let s = random_sample(cfg, &mut rng);
        let base = NormalizedBatch::from_samples(&[&s], cfg).unwrap();
        let j = rng.random_range(0..cfg.input_len);
        let mut pert = base.clone();
        pert.tm[j] += rng.random_range(0.5..3.0);
        if !pert.sm.is_empty() {
            pert.sm[j] -= rng.random_range(0.5..3.0);
        }
        pert.calendar[j].hour = (pert.calendar[j].hour + rng.random_range(1..24)) % 24;
        let run = |b: &NormalizedBatch| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let e = encode(&mut tape, &bound, cfg, b).unwrap();
            tape.value(e.output).clone()
        };
        let (a, b) = (run(&base), run(&pert));
        violations += (0..j).filter(|&i| a.row(i) != b.row(i)).count();
        changed_later += usize::from(a.row(j) != b.row(j));
    }
    outcome(
        violations == 0 && changed_later == CAUSALITY_TRIALS,
        format!("{CAUSALITY_TRIALS} trials, {violations} earlier rows changed, perturbed row changed in {changed_later}"),
    )
}

fn revin_round_trip(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut constants = 0;
    for trial in 0..REVIN_TRIALS {
        let len = rng.random_range(1..64);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let x: Vec<f64> = if trial % 10 == 0 {
            constants += 1;
            vec![rng.random_range(-100.0..100.0); len]
        } else {
            (0..len).map(|_| rng.random_range(-1.0..1.0) * scale + rng.random_range(-50.0..50.0)).collect()
        };
        let gamma = rng.random_range(0.2..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let beta = rng.random_range(-2.0..2.0);
        let (y, state) = revin_normalize(&x, gamma, beta);
        let back = revin_denormalize(&y, &state, gamma, beta);
        for (a, b) in back.iter().zip(&x) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst <= REVIN_TOL,
        format!("{REVIN_TRIALS} windows ({constants} constant), worst error {worst:.2e} <= {REVIN_TOL:e}"),
    )
}

fn te_invariance(_: &mut Shared) -> Outcome {
    let cfg = tiny(AblationWiring::E4, 4, 2);
    let params = ModelParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<CalendarRow> = (0..TE_TRIALS)
        .map(|_| {
            let t = NaiveDate::from_ymd_opt(2017, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
                + chrono::Duration::minutes(15 * rng.random_range(0..35000));
            let mut h = HolidaySet::new();
            if rng.random_bool(0.3) {
                h.insert(t.date());
            }
            extract_calendar_features(t, 15, &h)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for chunk in rows.chunks(10) {
        let mut perm: Vec<usize> = (0..6).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let base = temporal_feature_embedding(&mut tape, &bound.te_tables, bound.te_attn.as_ref(), cfg.heads, chunk, 15, None).unwrap();
        let p = temporal_feature_embedding(&mut tape, &bound.te_tables, bound.te_attn.as_ref(), cfg.heads, chunk, 15, Some(&perm)).unwrap();
        for (a, b) in tape.value(base).data().iter().zip(tape.value(p).data()) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= TE_TOL, format!("{TE_TRIALS} rows, worst change {worst:.2e} <= {TE_TOL:e}"))
}

fn tmr_toy(_: &mut Shared) -> Outcome {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let target = vec![vec![1.0, 2.0, 3.0, 5.0]];
    let coarse = vec![vec![1.6, 3.4]];
    let loss = stage_loss(&mut tape, f, &target, Some((&[0], &coarse, 2, AggregationMode::Mean, 1.0))).unwrap();
    let v = tape.value(loss).data()[0];
    let err = (v - 0.26).abs();
    outcome(err <= TOY_TOL, format!("loss {v} vs 0.26, error {err:.1e} <= {TOY_TOL:e}"))
}

fn integer_grid(n: usize, t: usize, interval: u32, rng: &mut ChaCha8Rng) -> SeriesGrid {
    let start = NaiveDate::from_ymd_opt(2017, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    SeriesGrid::new(
        "tm",
        (0..n).map(|i| format!("loc{i}")).collect(),
        (0..n).map(|i| (i as f64, 0.0)).collect(),
        start,
        interval,
        (0..n).map(|_| (0..t).map(|_| rng.random_range(0..100) as f64).collect()).collect(),
    )
    .unwrap()
}

fn aggregation_oracles(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut temporal = 0;
    let mut prediction = 0;
    let mut conservation = 0;
    let trials = 50;
    for _ in 0..trials {
        for mode in [AggregationMode::Mean, AggregationMode::Sum] {
            let g = integer_grid(3, 240, 15, &mut rng);
            let direct = aggregate_time(&g, 60, mode).unwrap();
            let staged = aggregate_time(&aggregate_time(&g, 30, mode).unwrap(), 60, mode).unwrap();
            temporal += usize::from(direct.values() == staged.values());

            let p: Vec<f64> = (0..48).map(|_| rng.random_range(0..100) as f64).collect();
            let d = aggregate_predictions(&p, 15, 60, mode).unwrap();
            let s = aggregate_predictions(&aggregate_predictions(&p, 15, 30, mode).unwrap(), 30, 60, mode).unwrap();
            prediction += usize::from(d == s);
        }
        let n = rng.random_range(2..12);
        let g = integer_grid(n, 50, 15, &mut rng);
        let k = rng.random_range(1..=n);
        let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
        let regions = RegionMap::from_labels(g.location_ids(), &labels).unwrap();
        let coarse = aggregate_space(&g, &regions, AggregationMode::Sum).unwrap();
        let ok = (0..50).all(|t| {
            let fine: f64 = g.values().iter().map(|r| r[t]).sum();
            let c: f64 = coarse.values().iter().map(|r| r[t]).sum();
            fine == c
        });
        conservation += usize::from(ok);
    }

    let mut recovered = 0;
    for seed in 0..KMEANS_SEEDS {
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        let centers = [(0.0, 0.0), (50.0, 0.0), (0.0, 50.0), (50.0, 50.0)];
        let mut prng = ChaCha8Rng::seed_from_u64(100 + seed);
        for (c, &(x, y)) in centers.iter().enumerate() {
            for _ in 0..6 {
                pts.push((x + prng.random_range(-1.0..1.0), y + prng.random_range(-1.0..1.0)));
                truth.push(c);
            }
        }
        let res = kmeans(&pts, centers.len(), seed).unwrap();
        recovered += usize::from(same_partition(&res.labels, &truth));
    }
    let pairs = 2 * trials;
    outcome(
        temporal == pairs && prediction == pairs && conservation == trials && recovered == KMEANS_SEEDS as usize,
        format!(
            "temporal associativity {temporal}/{pairs}, prediction associativity {prediction}/{pairs}, sum conservation {conservation}/{trials}, k-means {recovered}/{KMEANS_SEEDS}"
        ),
    )
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let pairs: BTreeSet<(usize, usize)> = a.iter().copied().zip(b.iter().copied()).collect();
    let left: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let right: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    pairs.len() == left.len() && pairs.len() == right.len()
}

fn lag_data(shared: &mut Shared) -> &LagData {
    shared.lag.get_or_insert_with(|| {
        let (tm, sm) = synthesize_lagged_pair(&SynthConfig::new(
            LAG_LOCATIONS,
            LAG_STEPS,
            LAG_INTERVAL,
            LAG,
            LAG_COUPLING,
            LAG_NOISE_SD,
            LAG_DATA_SEED,
        ))
        .unwrap();
        let spec = ExperimentSpec {
            model: ModelConfig {
                d: 64,
                heads: 4,
                layers: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: LAG_EPOCHS,
                batch_size: 32,
                patience: 3,
                adam: AdamConfig {
                    lr: LAG_LR,
                    ..AdamConfig::default()
                },
                max_train_samples: Some(LAG_TRAIN_CAP),
                max_valid_samples: Some(LAG_VALID_CAP),
                ..TrainConfig::default()
            },
            window: WindowSpec::Steps {
                input_len: LAG_INPUT_LEN,
                horizon: LAG_HORIZON,
            },
            split: SplitSpec::default(),
            max_test_samples: Some(LAG_TEST_CAP),
            ..ExperimentSpec::default()
        };
        let data = prepare_data(&tm, &sm, &HolidaySet::new(), &spec, 0).unwrap().swap_remove(0);
        LagData { spec, data }
    })
}

/// Mass of the head-averaged last-layer temporal map on the final query row
/// within one step of the lag, over the uniform share of that band.
fn band_ratio(params: &ModelParams, test: &[&WindowSample]) -> f64 {
    let picked = &test[..BAND_SAMPLES.min(test.len())];
    let bundles = model_forward_batch(params, picked).unwrap();
    let t = params.config.input_len;
    let i = t - 1;
    let band: Vec<usize> = (0..t).filter(|&j| ((i - j) as i64 - LAG as i64).abs() <= 1).collect();
    let mass: f64 = bundles
        .iter()
        .map(|b| {
            let m = b.head_averaged_temporal().unwrap();
            band.iter().map(|&j| m[i][j]).sum::<f64>()
        })
        .sum::<f64>()
        / bundles.len() as f64;
    mass / (band.len() as f64 / t as f64)
}

fn lag_run(shared: &mut Shared, wiring: AblationWiring, seed: u64) -> (f64, f64, f64) {
    if let Some(r) = shared.runs.iter().find(|r| r.0 == wiring && r.1 == seed) {
        return (r.2, r.3, r.4);
    }
    let start = Instant::now();
    let lag = lag_data(shared);
    let d = &lag.data;
    let cfg = ModelConfig {
        input_len: d.shape.input_len,
        horizon: d.shape.horizon,
        interval_minutes: d.interval_minutes,
        seed,
        wiring,
        ..lag.spec.model.clone()
    };
    let out = train_single_resolution(ModelParams::init(&cfg).unwrap(), &d.train, &d.valid, &lag.spec.train, seed, None)
        .unwrap();
    let test: Vec<&WindowSample> = d.test.iter().collect();
    let preds = predict(&out.params, &test, 256).unwrap();
    let m = mse(&preds, &test);
    let band = if wiring.has_second_attention() {
        band_ratio(&out.params, &test)
    } else {
        f64::NAN
    };
    let secs = start.elapsed().as_secs_f64();
    shared.runs.push((wiring, seed, m, band, secs));
    (m, band, secs)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn lag_recovery(shared: &mut Shared) -> Outcome {
    let mut secs = 0.0;
    let mut e4 = Vec::new();
    let mut e2 = Vec::new();
    let mut bands = Vec::new();
    for &seed in &LAG_SEEDS {
        let (m, b, s) = lag_run(shared, AblationWiring::E4, seed);
        e4.push(m);
        bands.push(b);
        secs += s;
        let (m, _, s) = lag_run(shared, AblationWiring::E2, seed);
        e2.push(m);
        secs += s;
    }
    let ratio = mean(&e4) / mean(&e2);
    let band_hits = bands.iter().filter(|&&b| b > BAND_RATIO).count();
    let need = (2 * LAG_SEEDS.len()).div_ceil(3);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
    outcome(
        ratio <= LAG_MSE_RATIO && band_hits >= need && secs < LAG_BUDGET_SECS,
        format!(
            "e4 mse [{}] / e2 mse [{}] = {ratio:.3} <= {LAG_MSE_RATIO}; band/uniform [{}], {band_hits}/{} seeds > {BAND_RATIO} (need {need}); {secs:.0}s < {LAG_BUDGET_SECS}s",
            fmt(&e4),
            fmt(&e2),
            fmt(&bands),
            LAG_SEEDS.len()
        ),
    )
}

fn ablation_ordering(shared: &mut Shared) -> Outcome {
    let order = [AblationWiring::E4, AblationWiring::E3, AblationWiring::E1];
    let means: Vec<f64> = order
        .iter()
        .map(|&w| mean(&LAG_SEEDS.iter().map(|&s| lag_run(shared, w, s).0).collect::<Vec<_>>()))
        .collect();
    let ok = means.windows(2).all(|p| p[0] < p[1] * (1.0 - TIE_MARGIN));
    outcome(
        ok,
        format!(
            "mean test mse e4 {:.4}, e3 {:.4}, e1 {:.4}; each must beat the next by more than {}%",
            means[0],
            means[1],
            means[2],
            TIE_MARGIN * 100.0
        ),
    )
}

fn small_spec() -> ExperimentSpec {
    ExperimentSpec {
        model: ModelConfig {
            d: 16,
            heads: 2,
            layers: 2,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 16,
            max_train_samples: Some(96),
            max_valid_samples: Some(32),
            seeds: vec![3],
            resolutions: [15, 30, 60],
            ..TrainConfig::default()
        },
        window: WindowSpec::Hours { lookback: 4, horizon: 2 },
        tmr: true,
        smr: true,
        horizons: vec![1, 2],
        window_stride: 3,
        max_test_samples: Some(48),
        export_samples: 4,
        ..ExperimentSpec::default()
    }
}

fn determinism(_: &mut Shared) -> Outcome {
    let (tm, sm) = synthesize_lagged_pair(&SynthConfig::new(8, 1500, 15, 4, 0.9, 0.5, 11)).unwrap();
    let spec = small_spec();
    let holidays = HolidaySet::new();
    let mut runs = Vec::new();
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &dirs {
        let run = run_experiment(&tm, &sm, &holidays, &spec).unwrap();
        let data = prepare_data(&tm, &sm, &holidays, &spec, spec.train.seeds[0]).unwrap();
        let files = save_run(dir.path(), &run, &data[0].test, spec.export_samples).unwrap();
        let ckpts: Vec<String> = run.runs[0].stages.iter().map(|s| checkpoint_to_string(&s.params).unwrap()).collect();
        runs.push((files, ckpts));
    }
    let mut compared = 0;
    let mut differing = Vec::new();
    for f in &runs[0].0 {
        let rel = f.strip_prefix(dirs[0].path()).unwrap();
        let a = std::fs::read(f).unwrap();
        let b = std::fs::read(dirs[1].path().join(rel)).unwrap_or_default();
        compared += 1;
        if a != b {
            differing.push(rel.display().to_string());
        }
    }
    let ckpt_ok = runs[0].1 == runs[1].1 && runs[0].1.len() == 3;
    outcome(
        differing.is_empty() && ckpt_ok && compared > 0,
        format!(
            "{compared} run files and {} stage checkpoints compared, differing: [{}]",
            runs[0].1.len(),
            differing.join(", ")
        ),
    )
}
