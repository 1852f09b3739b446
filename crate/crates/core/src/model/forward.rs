use std::collections::HashMap;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::config::{AblationWiring, ModelConfig, Readout};
use super::params::{calendar_tables, AttnVars, BoundParams, LayerVars, ModelParams};
use super::revin::RevInState;
use crate::autodiff::{ConvPadding, Tape, Tensor, Var};
use crate::data::{CalendarRow, WindowSample};
use crate::{Error, Result};

/// Sinusoidal positions: `sin` on even latent indices, `cos` on odd ones.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf(-((i - i % 2) as f64) / d as f64);
            let angle = t as f64 * freq;
            data[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("positive shape")
}

/// Inputs of a batch of windows, standardised and flattened so that window
/// `g` occupies rows `g*T .. (g+1)*T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedBatch {
    pub groups: usize,
    pub input_len: usize,
    /// Standardised target-modality inputs, before the learnable affine.
    pub tm: Vec<f64>,
    pub sm: Vec<f64>,
    pub calendar: Vec<CalendarRow>,
    pub tm_state: Vec<RevInState>,
}

fn standardize(window: &[f64]) -> (Vec<f64>, RevInState) {
    let s = RevInState::of(window);
    (window.iter().map(|v| (v - s.mean) / s.std).collect(), s)
}

impl NormalizedBatch {
    pub fn from_samples(samples: &[&WindowSample], cfg: &ModelConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let t = cfg.input_len;
        let mut out = Self {
            groups: samples.len(),
            input_len: t,
            tm: Vec::with_capacity(samples.len() * t),
            sm: Vec::with_capacity(samples.len() * t),
            calendar: Vec::with_capacity(samples.len() * t),
            tm_state: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            if s.tm_input.len() != t || s.sm_input.len() != t || s.calendar.len() != t {
                return Err(Error::dims(
                    "model_forward",
                    &[s.tm_input.len(), s.sm_input.len(), s.calendar.len()],
                    &[t, t, t],
                ));
            }
            let (tm, state) = standardize(&s.tm_input);
            out.tm.extend(tm);
            out.tm_state.push(state);
            if cfg.wiring.uses_support() {
                out.sm.extend(standardize(&s.sm_input).0);
            }
            out.calendar.extend_from_slice(&s.calendar);
        }
        Ok(out)
    }
}

/// Multi-head scaled dot-product attention over `groups` independent
/// windows. Returns the output projection and the probabilities
/// `[groups*heads, T, T]`.
#[allow(clippy::too_many_arguments)]
pub fn mha(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &AttnVars,
    heads: usize,
    groups: usize,
    causal: bool,
) -> Result<(Var, Var)> {
    let d = tape.shape(q_in)[1];
    let dk = d / heads;
    let q = tape.linear(q_in, w.wq, w.bq)?;
    let k = tape.linear(k_in, w.wk, w.bk)?;
    let v = tape.linear(v_in, w.wv, w.bv)?;
    let q = tape.split_heads_grouped(q, heads, groups)?;
    let k = tape.split_heads_grouped(k, heads, groups)?;
    let v = tape.split_heads_grouped(v, heads, groups)?;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    if causal {
        scores = tape.masked_fill(scores)?;
    }
    let probs = tape.softmax_lastdim(scores);
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.merge_heads_grouped(ctx, groups)?;
    let out = tape.linear(ctx, w.wo, w.bo)?;
    Ok((out, probs))
}

/// Causal self-attention with a residual connection.
pub fn masked_self_attention(tape: &mut Tape, e: Var, w: &AttnVars, heads: usize, groups: usize) -> Result<(Var, Var)> {
    let (a, probs) = mha(tape, e, e, e, w, heads, groups, true)?;
    Ok((tape.add(e, a)?, probs))
}

/// Causal attention with queries and keys from `qk` and values from `v`, no
/// residual.
pub fn masked_temporal_attention(
    tape: &mut Tape,
    qk: Var,
    v: Var,
    w: &AttnVars,
    heads: usize,
    groups: usize,
) -> Result<(Var, Var)> {
    mha(tape, qk, qk, v, w, heads, groups, true)
}

/// Embeds a `[G*T, 1]` series with a `1 -> d` convolution and adds the
/// positional encoding `pe [G*T, d]`.
pub fn token_embed_with_position(
    tape: &mut Tape,
    series: Var,
    embed: (Var, Var),
    pe: Var,
    padding: ConvPadding,
    groups: usize,
) -> Result<Var> {
    let e = tape.conv1d_time_grouped(series, embed.0, embed.1, padding, groups)?;
    tape.add(e, pe)
}

/// Table index of every calendar token in default order.
pub fn calendar_indices(row: &CalendarRow, interval_minutes: u32) -> Result<Vec<usize>> {
    let below = |v: u8, base: u8, name: &str| {
        v.checked_sub(base).map(usize::from).ok_or_else(|| Error::Index {
            feature: name.to_string(),
            index: v as usize,
            size: 0,
        })
    };
    let mut out = vec![below(row.month, 1, "month")?, below(row.day, 1, "day")?, row.hour as usize];
    if interval_minutes < 60 {
        let m = row.minute_index.ok_or_else(|| {
            Error::Config(format!("calendar row has no minute index at a {interval_minutes}-minute interval"))
        })?;
        out.push(m as usize);
    }
    out.extend([row.weekday as usize, row.holiday as usize]);
    Ok(out)
}

/// One `d`-vector per calendar row: the feature tokens are embedded, mixed by
/// an unmasked self-attention with residual (when `attn` is given) and
/// summed. `order` permutes the token order.
pub fn temporal_feature_embedding(
    tape: &mut Tape,
    tables: &[Var],
    attn: Option<&AttnVars>,
    heads: usize,
    rows: &[CalendarRow],
    interval_minutes: u32,
    order: Option<&[usize]>,
) -> Result<Var> {
    let names: Vec<&str> = calendar_tables(interval_minutes).iter().map(|(n, _)| *n).collect();
    let f = names.len();
    if tables.len() != f {
        return Err(Error::Config(format!("expected {f} calendar tables, got {}", tables.len())));
    }
    let identity: Vec<usize> = (0..f).collect();
    let order = order.unwrap_or(&identity);
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != identity {
        return Err(Error::Usage(format!("{order:?} is not a permutation of {f} tokens")));
    }
    let mut picks = Vec::with_capacity(rows.len() * f);
    for row in rows {
        let idx = calendar_indices(row, interval_minutes)?;
        picks.extend(order.iter().map(|&j| (j, idx[j])));
    }
    let tokens = tape.embedding_gather(tables, &picks, &names)?;
    let mixed = match attn {
        Some(w) => {
            let (a, _) = mha(tape, tokens, tokens, tokens, w, heads, rows.len(), false)?;
            tape.add(tokens, a)?
        }
        None => tokens,
    };
    tape.sum_groups(mixed, f)
}

/// Calendar embedding for every row of the batch, computed once per
/// distinct calendar row.
fn batch_temporal_embedding(tape: &mut Tape, bound: &BoundParams, cfg: &ModelConfig, rows: &[CalendarRow]) -> Result<Var> {
    let mut unique: Vec<CalendarRow> = Vec::new();
    let mut seen: HashMap<CalendarRow, usize> = HashMap::new();
    let index: Vec<usize> = rows
        .iter()
        .map(|r| {
            *seen.entry(*r).or_insert_with(|| {
                unique.push(*r);
                unique.len() - 1
            })
        })
        .collect();
    let e = temporal_feature_embedding(
        tape,
        &bound.te_tables,
        bound.te_attn.as_ref(),
        cfg.heads,
        &unique,
        cfg.interval_minutes,
        None,
    )?;
    tape.gather_rows(e, &index)
}

/// Attention probabilities of one fusion layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerMaps {
    pub self_attention: Var,
    pub second_attention: Option<Var>,
}

/// Self-attention, the wiring's second attention, their sum through layer
/// norm, then a residual convolution.
#[allow(clippy::too_many_arguments)]
pub fn fusion_layer_forward(
    tape: &mut Tape,
    e_tm: Var,
    e_sm: Option<Var>,
    e_t: Option<Var>,
    layer: &LayerVars,
    cfg: &ModelConfig,
    groups: usize,
) -> Result<(Var, LayerMaps)> {
    let (sa, self_probs) = masked_self_attention(tape, e_tm, &layer.self_attn, cfg.heads, groups)?;
    let missing = |what: &str| Error::Usage(format!("wiring {} needs {what}", cfg.wiring));
    let (combined, second) = match (cfg.wiring, layer.second_attn.as_ref()) {
        (AblationWiring::E1, _) => (sa, None),
        (_, None) => return Err(missing("second attention parameters")),
        (wiring, Some(w)) => {
            let (qk, v) = match wiring {
                AblationWiring::E2 => (e_tm, e_tm),
                AblationWiring::E3 => (e_tm, e_sm.ok_or_else(|| missing("support embeddings"))?),
                _ => (
                    e_t.ok_or_else(|| missing("temporal embeddings"))?,
                    e_sm.ok_or_else(|| missing("support embeddings"))?,
                ),
            };
            let (ta, probs) = masked_temporal_attention(tape, qk, v, w, cfg.heads, groups)?;
            (tape.add(sa, ta)?, Some(probs))
        }
    };
    let z = tape.layer_norm(combined, layer.norm_gamma, layer.norm_beta)?;
    let c = tape.conv1d_time_grouped(z, layer.conv_kernel, layer.conv_bias, cfg.conv_padding, groups)?;
    let out = tape.add(z, c)?;
    Ok((
        out,
        LayerMaps {
            self_attention: self_probs,
            second_attention: second,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[G*T, d]` output of the last fusion layer.
    pub output: Var,
    pub maps: Vec<LayerMaps>,
}

/// Embeddings and all fusion layers on standardised inputs.
pub fn encode(tape: &mut Tape, bound: &BoundParams, cfg: &ModelConfig, batch: &NormalizedBatch) -> Result<Encoded> {
    let (g, t) = (batch.groups, batch.input_len);
    let pe = positional_encoding(t, cfg.d);
    let tiled: Vec<f64> = (0..g).flat_map(|_| pe.data().iter().copied()).collect();
    let pe = tape.constant(Tensor::new(vec![g * t, cfg.d], tiled)?);
    let tm = tape.constant(Tensor::new(vec![g * t, 1], batch.tm.clone())?);
    let tm = tape.mul(tm, bound.revin_gamma)?;
    let tm = tape.add(tm, bound.revin_beta)?;
    let mut e_tm = token_embed_with_position(tape, tm, bound.tm_embed, pe, cfg.token_padding, g)?;
    let e_sm = match bound.sm_embed {
        Some(embed) => {
            let sm = tape.constant(Tensor::new(vec![g * t, 1], batch.sm.clone())?);
            Some(token_embed_with_position(tape, sm, embed, pe, cfg.token_padding, g)?)
        }
        None => None,
    };
    let e_t = if cfg.wiring.uses_calendar() {
        Some(batch_temporal_embedding(tape, bound, cfg, &batch.calendar)?)
    } else {
        None
    };
    let mut maps = Vec::with_capacity(cfg.layers);
    for layer in &bound.layers {
        let (next, m) = fusion_layer_forward(tape, e_tm, e_sm, e_t, layer, cfg, g)?;
        e_tm = next;
        maps.push(m);
    }
    Ok(Encoded { output: e_tm, maps })
}

/// Projects the encoder output to `[G, L]` normalised forecasts.
pub fn readout(tape: &mut Tape, bound: &BoundParams, cfg: &ModelConfig, encoded: Var, groups: usize) -> Result<Var> {
    let t = cfg.input_len;
    let x = match cfg.readout {
        Readout::LastToken => {
            let last: Vec<usize> = (0..groups).map(|g| g * t + t - 1).collect();
            tape.gather_rows(encoded, &last)?
        }
        Readout::Flatten => tape.reshape(encoded, vec![groups, t * cfg.d])?,
    };
    tape.linear(x, bound.head.0, bound.head.1)
}

#[derive(Clone, Debug)]
pub struct BatchForward {
    /// `[G, L]` forecasts on the original scale.
    pub forecast: Var,
    pub encoded: Encoded,
}

/// Full forward pass: normalisation affine, encoder, readout and inverse
/// normalisation.
pub fn forward_on_tape(tape: &mut Tape, bound: &BoundParams, cfg: &ModelConfig, batch: &NormalizedBatch) -> Result<BatchForward> {
    let encoded = encode(tape, bound, cfg, batch)?;
    let y = readout(tape, bound, cfg, encoded.output, batch.groups)?;
    let l = cfg.horizon;
    let y = tape.sub(y, bound.revin_beta)?;
    let y = tape.div(y, bound.revin_gamma)?;
    let (mut std, mut mean) = (Vec::with_capacity(batch.groups * l), Vec::with_capacity(batch.groups * l));
    for s in &batch.tm_state {
        std.extend(std::iter::repeat_n(s.std, l));
        mean.extend(std::iter::repeat_n(s.mean, l));
    }
    let std = tape.constant(Tensor::new(vec![batch.groups, l], std)?);
    let mean = tape.constant(Tensor::new(vec![batch.groups, l], mean)?);
    let y = tape.mul(y, std)?;
    let forecast = tape.add(y, mean)?;
    Ok(BatchForward { forecast, encoded })
}

/// `[heads][T][T]` maps of window `g` from probabilities `[G*heads, T, T]`.
pub fn group_maps(tape: &Tape, probs: Var, g: usize, heads: usize) -> Vec<Vec<Vec<f64>>> {
    let t = tape.shape(probs)[1];
    let data = tape.value(probs).data();
    (0..heads)
        .map(|h| {
            let blk = &data[(g * heads + h) * t * t..(g * heads + h + 1) * t * t];
            blk.chunks(t).map(|r| r.to_vec()).collect()
        })
        .collect()
}

/// Forecast of one window with its attention maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub location_id: String,
    pub input_start: NaiveDateTime,
    pub resolution_minutes: u32,
    pub wiring: AblationWiring,
    pub input: Vec<f64>,
    pub forecast: Vec<f64>,
    /// `[layer][head][query][key]`.
    pub self_attention: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[layer][head][query][key]` of the second attention; empty for E1.
    pub temporal_attention: Vec<Vec<Vec<Vec<f64>>>>,
}

impl PredictionBundle {
    /// Head average of the last layer's second attention.
    pub fn head_averaged_temporal(&self) -> Option<Vec<Vec<f64>>> {
        let last = self.temporal_attention.last()?;
        let heads = last.len() as f64;
        let t = last[0].len();
        Some(
            (0..t)
                .map(|i| (0..t).map(|j| last.iter().map(|h| h[i][j]).sum::<f64>() / heads).collect())
                .collect(),
        )
    }
}

/// Forecasts only, in batches of `batch_size`.
pub fn predict(params: &ModelParams, samples: &[&WindowSample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let cfg = &params.config;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = NormalizedBatch::from_samples(chunk, cfg)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let f = forward_on_tape(&mut tape, &bound, cfg, &batch)?;
        out.extend(tape.value(f.forecast).data().chunks(cfg.horizon).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Forecasts with every attention map.
pub fn model_forward_batch(params: &ModelParams, samples: &[&WindowSample]) -> Result<Vec<PredictionBundle>> {
    let cfg = &params.config;
    let batch = NormalizedBatch::from_samples(samples, cfg)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let f = forward_on_tape(&mut tape, &bound, cfg, &batch)?;
    let forecast = tape.value(f.forecast).data();
    Ok(samples
        .iter()
        .enumerate()
        .map(|(g, s)| PredictionBundle {
            location_id: s.location_id.clone(),
            input_start: s.input_start,
            resolution_minutes: s.resolution_minutes,
            wiring: cfg.wiring,
            input: s.tm_input.clone(),
            forecast: forecast[g * cfg.horizon..(g + 1) * cfg.horizon].to_vec(),
            self_attention: f
                .encoded
                .maps
                .iter()
                .map(|m| group_maps(&tape, m.self_attention, g, cfg.heads))
                .collect(),
            temporal_attention: f
                .encoded
                .maps
                .iter()
                .filter_map(|m| m.second_attention)
                .map(|p| group_maps(&tape, p, g, cfg.heads))
                .collect(),
        })
        .collect())
}

pub fn model_forward(params: &ModelParams, sample: &WindowSample) -> Result<PredictionBundle> {
    Ok(model_forward_batch(params, &[sample])?.remove(0))
}
