use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Readout};
use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::{Error, Result};

/// Calendar token names in their default order, with table sizes. The minute
/// table has `60 / R` rows and exists only for sub-hourly intervals.
pub fn calendar_tables(interval_minutes: u32) -> Vec<(&'static str, usize)> {
    let mut t = vec![("month", 12), ("day", 31), ("hour", 24)];
    if interval_minutes < 60 {
        t.push(("minute", (60 / interval_minutes) as usize));
    }
    t.extend([("weekday", 7), ("holiday", 2)]);
    t
}

const ATTN: [&str; 8] = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];

/// All learnable tensors of one model, in a fixed canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("positive shape")
}

/// Names and shapes of every parameter for `cfg`, in canonical order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, k) = (cfg.d, cfg.kernel_size);
    let mut out: Vec<(String, Vec<usize>)> = vec![("revin.gamma".into(), vec![1]), ("revin.beta".into(), vec![1])];
    let attn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        for name in ATTN {
            let shape = if name.starts_with('w') { vec![d, d] } else { vec![d] };
            out.push((format!("{prefix}.{name}"), shape));
        }
    };
    out.push(("tm_embed.kernel".into(), vec![k, 1, d]));
    out.push(("tm_embed.bias".into(), vec![d]));
    if cfg.wiring.uses_support() {
        out.push(("sm_embed.kernel".into(), vec![k, 1, d]));
        out.push(("sm_embed.bias".into(), vec![d]));
    }
    if cfg.wiring.uses_calendar() {
        for (name, rows) in calendar_tables(cfg.interval_minutes) {
            out.push((format!("te.{name}"), vec![rows, d]));
        }
        if cfg.use_te_self_attention {
            attn(&mut out, "te.attn");
        }
    }
    for c in 0..cfg.layers {
        attn(&mut out, &format!("layer{c}.self"));
        if cfg.wiring.has_second_attention() {
            attn(&mut out, &format!("layer{c}.temporal"));
        }
        out.push((format!("layer{c}.norm.gamma"), vec![d]));
        out.push((format!("layer{c}.norm.beta"), vec![d]));
        out.push((format!("layer{c}.conv.kernel"), vec![k, d, d]));
        out.push((format!("layer{c}.conv.bias"), vec![d]));
    }
    let readin = match cfg.readout {
        Readout::LastToken => d,
        Readout::Flatten => d * cfg.input_len,
    };
    out.push(("head.w".into(), vec![readin, cfg.horizon]));
    out.push(("head.b".into(), vec![cfg.horizon]));
    out
}

impl ModelParams {
    /// Seed-deterministic initialisation: weights and biases uniform in
    /// `±1/sqrt(fan_in)`, embedding tables uniform in `±1`, norm gains 1 and
    /// shifts 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = parameter_layout(config)
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.starts_with("revin.gamma") || name.ends_with("norm.gamma") {
                    Tensor::filled(&shape, 1.0)
                } else if name.starts_with("revin.beta") || name.ends_with("norm.beta") {
                    Tensor::zeros(&shape)
                } else if name.starts_with("te.") && !name.starts_with("te.attn") {
                    uniform(&shape, 1.0, &mut rng)
                } else {
                    let fan_in = fan_in(&name, &shape, config);
                    uniform(&shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
                };
                Parameter::new(name, value)
            })
            .collect();
        Self::from_parameters(config.clone(), params)
    }

    /// Wraps existing tensors after checking names and shapes against the
    /// layout of `config`.
    pub fn from_parameters(config: ModelConfig, params: Vec<Parameter>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "config expects {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter mismatch: config expects {name} {shape:?}, got {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            if !p.value.is_finite() {
                return Err(Error::Numerical(format!("parameter {name} is not finite")));
            }
        }
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Self { config, params, index })
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let v = |name: &str| vars[self.index[name]];
        let attn = |prefix: &str| -> Option<AttnVars> {
            self.index.contains_key(&format!("{prefix}.wq")).then(|| AttnVars {
                wq: v(&format!("{prefix}.wq")),
                bq: v(&format!("{prefix}.bq")),
                wk: v(&format!("{prefix}.wk")),
                bk: v(&format!("{prefix}.bk")),
                wv: v(&format!("{prefix}.wv")),
                bv: v(&format!("{prefix}.bv")),
                wo: v(&format!("{prefix}.wo")),
                bo: v(&format!("{prefix}.bo")),
            })
        };
        let cfg = &self.config;
        let te_tables = if cfg.wiring.uses_calendar() {
            calendar_tables(cfg.interval_minutes)
                .iter()
                .map(|(name, _)| v(&format!("te.{name}")))
                .collect()
        } else {
            Vec::new()
        };
        let layers = (0..cfg.layers)
            .map(|c| LayerVars {
                self_attn: attn(&format!("layer{c}.self")).expect("self attention always present"),
                second_attn: attn(&format!("layer{c}.temporal")),
                norm_gamma: v(&format!("layer{c}.norm.gamma")),
                norm_beta: v(&format!("layer{c}.norm.beta")),
                conv_kernel: v(&format!("layer{c}.conv.kernel")),
                conv_bias: v(&format!("layer{c}.conv.bias")),
            })
            .collect();
        BoundParams {
            revin_gamma: v("revin.gamma"),
            revin_beta: v("revin.beta"),
            tm_embed: (v("tm_embed.kernel"), v("tm_embed.bias")),
            sm_embed: cfg
                .wiring
                .uses_support()
                .then(|| (v("sm_embed.kernel"), v("sm_embed.bias"))),
            te_tables,
            te_attn: attn("te.attn"),
            layers,
            head: (v("head.w"), v("head.b")),
            all: vars,
        }
    }

    /// Adds the gradients `tape` holds for `bound` into each parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.all) {
            let g = tape
                .grad(v)
                .ok_or_else(|| Error::Usage(format!("no gradient recorded for {}", p.name)))?;
            p.accumulate_grad(g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

fn fan_in(name: &str, shape: &[usize], cfg: &ModelConfig) -> usize {
    if name.ends_with("kernel") {
        shape[0] * shape[1]
    } else if shape.len() == 2 {
        shape[0]
    } else if name.starts_with("head.") {
        match cfg.readout {
            Readout::LastToken => cfg.d,
            Readout::Flatten => cfg.d * cfg.input_len,
        }
    } else if name.contains("embed") {
        cfg.kernel_size
    } else if name.contains(".conv.") {
        cfg.kernel_size * cfg.d
    } else {
        cfg.d
    }
}

/// Projections of one multi-head attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub self_attn: AttnVars,
    pub second_attn: Option<AttnVars>,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub conv_kernel: Var,
    pub conv_bias: Var,
}

/// Model parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub revin_gamma: Var,
    pub revin_beta: Var,
    pub tm_embed: (Var, Var),
    pub sm_embed: Option<(Var, Var)>,
    pub te_tables: Vec<Var>,
    pub te_attn: Option<AttnVars>,
    pub layers: Vec<LayerVars>,
    pub head: (Var, Var),
    /// Every variable, aligned with [`ModelParams::parameters`].
    pub all: Vec<Var>,
}
