//! Compact stochastic policy and value function over observations.
//!
//! One hidden tanh layer feeds a masked-softmax action head and a scalar
//! value head. Actions are target tokens plus three structural markers; the
//! mask keeps structurally illegal tokens (a close marker before anything
//! was opened, content outside an emission) at probability zero. All
//! gradients are written out by hand and checked against central finite
//! differences, which is the gating test for everything downstream.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::stream_env::{observe, ChunkEmission, Episode, Observation, TargetToken};
use crate::{Error, Result};

pub type ActionId = usize;

/// Model shape. Action ids are `0..target_vocab` for content tokens,
/// then WAIT, EMIT-OPEN, EMIT-CLOSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub hidden: usize,
}

impl PolicyDims {
    pub fn wait_action(&self) -> ActionId {
        self.target_vocab
    }

    pub fn open_action(&self) -> ActionId {
        self.target_vocab + 1
    }

    pub fn close_action(&self) -> ActionId {
        self.target_vocab + 2
    }

    pub fn action_count(&self) -> usize {
        self.target_vocab + 3
    }

    /// Input features: source-symbol counts, next-owed-token one-hot,
    /// previous-action one-hot, and nine scalar counters and flags.
    pub fn input_width(&self) -> usize {
        self.source_vocab + self.target_vocab + self.action_count() + 9
    }

    pub fn param_count(&self) -> usize {
        let (i, h, a) = (self.input_width(), self.hidden, self.action_count());
        h * i + h + a * h + a + h + 1
    }

    fn w1_off(&self) -> usize {
        0
    }

    fn b1_off(&self) -> usize {
        self.hidden * self.input_width()
    }

    fn w2_off(&self) -> usize {
        self.b1_off() + self.hidden
    }

    fn b2_off(&self) -> usize {
        self.w2_off() + self.action_count() * self.hidden
    }

    fn wv_off(&self) -> usize {
        self.b2_off() + self.action_count()
    }

    fn bv_off(&self) -> usize {
        self.wv_off() + self.hidden
    }
}

/// All parameters as one flat vector; the dims struct is the shape manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub flat: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> PolicyParams {
        PolicyParams {
            dims,
            flat: vec![0.0; dims.param_count()],
        }
    }

    /// Uniform weight init in `[-scale, scale]`, biases zero.
    pub fn init(dims: PolicyDims, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
        let mut flat = vec![0.0; dims.param_count()];
        let w1 = dims.w1_off()..dims.b1_off();
        let w2 = dims.w2_off()..dims.b2_off();
        let wv = dims.wv_off()..dims.bv_off();
        for range in [w1, w2, wv] {
            for p in &mut flat[range] {
                *p = rng.gen_range(-scale..=scale);
            }
        }
        PolicyParams { dims, flat }
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|p| p.is_finite())
    }
}

/// Within-chunk decoding state.
#[derive(Debug, Clone, Default)]
pub struct DecodeState {
    pub sampled: usize,
    pub in_emission: bool,
    pub content: Vec<TargetToken>,
    pub closed: bool,
    pub finished: bool,
}

impl DecodeState {
    pub fn legal_actions(&self, dims: &PolicyDims) -> Vec<ActionId> {
        if self.finished {
            return Vec::new();
        }
        if !self.in_emission {
            vec![dims.wait_action(), dims.open_action()]
        } else if self.content.is_empty() {
            (0..dims.target_vocab).collect()
        } else {
            let mut legal: Vec<ActionId> = (0..dims.target_vocab).collect();
            legal.push(dims.close_action());
            legal
        }
    }

    pub fn advance(&mut self, action: ActionId, dims: &PolicyDims) -> Result<()> {
        if self.finished {
            return Err(Error::Contract("action after chunk finished".into()));
        }
        let legal = self.legal_actions(dims);
        if !legal.contains(&action) {
            return Err(Error::Contract(format!(
                "action {action} is illegal in this decode state"
            )));
        }
        self.sampled += 1;
        if action == dims.wait_action() {
            self.finished = true;
        } else if action == dims.open_action() {
            self.in_emission = true;
        } else if action == dims.close_action() {
            self.closed = true;
            self.finished = true;
        } else {
            self.content.push(action as TargetToken);
        }
        Ok(())
    }

    pub fn into_emission(self, target_token_ms: u64, at_ms: u64) -> ChunkEmission {
        let closed = !self.in_emission || self.closed;
        ChunkEmission {
            duration_ms: self.content.len() as u64 * target_token_ms,
            tokens: self.content,
            emitted_at_ms: at_ms,
            closed,
        }
    }
}

/// Builds the fixed-width input vector for one decoding position.
pub fn featurize(obs: &Observation, state: &DecodeState, dims: &PolicyDims) -> Vec<f64> {
    let mut x = vec![0.0; dims.input_width()];
    let s = dims.source_vocab;
    let v = dims.target_vocab;
    let a = dims.action_count();
    for (i, &count) in obs.source_counts.iter().enumerate().take(s) {
        x[i] = f64::from(count) * 0.2;
    }
    let pointer = obs.emitted_tokens + state.content.len();
    if let Some(&next) = obs.owed_stream.get(pointer) {
        x[s + next as usize] = 1.0;
    }
    // Previous-action embedding slot; zero at the first position.
    // (filled by the caller via `set_prev_action`)
    let base = s + v + a;
    let remaining_completed = obs.completed_len.saturating_sub(pointer);
    let remaining_seen = obs.owed_stream.len().saturating_sub(pointer);
    x[base] = obs.chunk_index as f64 * 0.1;
    x[base + 1] = obs.tokens_seen as f64 * 0.05;
    x[base + 2] = obs.pending_units as f64 * 0.25;
    x[base + 3] = remaining_completed as f64 * 0.2;
    x[base + 4] = f64::from(remaining_completed > 0);
    x[base + 5] = remaining_seen as f64 * 0.2;
    x[base + 6] = f64::from(remaining_seen > 0);
    x[base + 7] = f64::from(state.in_emission);
    x[base + 8] = state.content.len() as f64 * 0.2;
    x
}

fn set_prev_action(x: &mut [f64], prev: Option<ActionId>, dims: &PolicyDims) {
    if let Some(p) = prev {
        x[dims.source_vocab + dims.target_vocab + p] = 1.0;
    }
}

/// Categorical distribution over the action space with structurally illegal
/// actions at probability zero.
#[derive(Debug, Clone)]
pub struct ActionDistribution {
    pub log_probs: Vec<f64>,
    pub legal: Vec<ActionId>,
}

impl ActionDistribution {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs
            .iter()
            .map(|&lp| if lp.is_finite() { lp.exp() } else { 0.0 })
            .collect()
    }
}

struct ForwardCache {
    x: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    legal: Vec<ActionId>,
    value: f64,
}

fn forward_from_features(params: &PolicyParams, x: Vec<f64>, legal: Vec<ActionId>) -> ForwardCache {
    let dims = &params.dims;
    let (iw, h, a) = (dims.input_width(), dims.hidden, dims.action_count());
    let flat = &params.flat;
    let w1 = dims.w1_off();
    let b1 = dims.b1_off();
    let w2 = dims.w2_off();
    let b2 = dims.b2_off();
    let wv = dims.wv_off();
    let bv = dims.bv_off();

    let mut hidden = vec![0.0; h];
    for j in 0..h {
        let row = w1 + j * iw;
        let mut z = flat[b1 + j];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                z += flat[row + i] * xi;
            }
        }
        hidden[j] = z.tanh();
    }

    let mut logits = vec![0.0; a];
    for k in 0..a {
        let row = w2 + k * h;
        let mut z = flat[b2 + k];
        for (j, &hj) in hidden.iter().enumerate() {
            z += flat[row + j] * hj;
        }
        logits[k] = z;
    }

    let max = legal
        .iter()
        .map(|&k| logits[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + legal
            .iter()
            .map(|&k| (logits[k] - max).exp())
            .sum::<f64>()
            .ln();
    let mut log_probs = vec![f64::NEG_INFINITY; a];
    let mut probs = vec![0.0; a];
    for &k in &legal {
        log_probs[k] = logits[k] - lse;
        probs[k] = log_probs[k].exp();
    }

    let mut value = flat[bv];
    for (j, &hj) in hidden.iter().enumerate() {
        value += flat[wv + j] * hj;
    }

    ForwardCache {
        x,
        hidden,
        probs,
        log_probs,
        legal,
        value,
    }
}

/// Accumulates the gradient of `dlogp * log_prob[action] + dvalue * value`
/// into `grad`.
fn backprop_token(
    params: &PolicyParams,
    cache: &ForwardCache,
    action: ActionId,
    dlogp: f64,
    dvalue: f64,
    grad: &mut [f64],
) {
    let dims = &params.dims;
    let (iw, h, a) = (dims.input_width(), dims.hidden, dims.action_count());
    let flat = &params.flat;

    let mut dlogits = vec![0.0; a];
    if dlogp != 0.0 {
        for &k in &cache.legal {
            let indicator = f64::from(k == action);
            dlogits[k] = dlogp * (indicator - cache.probs[k]);
        }
    }

    let mut dhidden = vec![0.0; h];
    for k in 0..a {
        let dk = dlogits[k];
        if dk == 0.0 {
            continue;
        }
        let row = dims.w2_off() + k * h;
        grad[dims.b2_off() + k] += dk;
        for j in 0..h {
            grad[row + j] += dk * cache.hidden[j];
            dhidden[j] += dk * flat[row + j];
        }
    }
    if dvalue != 0.0 {
        grad[dims.bv_off()] += dvalue;
        for j in 0..h {
            grad[dims.wv_off() + j] += dvalue * cache.hidden[j];
            dhidden[j] += dvalue * flat[dims.wv_off() + j];
        }
    }

    for j in 0..h {
        let dz = dhidden[j] * (1.0 - cache.hidden[j] * cache.hidden[j]);
        if dz == 0.0 {
            continue;
        }
        grad[dims.b1_off() + j] += dz;
        let row = dims.w1_off() + j * iw;
        for (i, &xi) in cache.x.iter().enumerate() {
            if xi != 0.0 {
                grad[row + i] += dz * xi;
            }
        }
    }
}

/// Masked distribution over the next action plus the state value, for one
/// decoding position.
pub fn forward(
    params: &PolicyParams,
    obs: &Observation,
    state: &DecodeState,
) -> (ActionDistribution, f64) {
    forward_with_prev(params, obs, state, None)
}

fn forward_with_prev(
    params: &PolicyParams,
    obs: &Observation,
    state: &DecodeState,
    prev: Option<ActionId>,
) -> (ActionDistribution, f64) {
    let mut x = featurize(obs, state, &params.dims);
    set_prev_action(&mut x, prev, &params.dims);
    let legal = state.legal_actions(&params.dims);
    let cache = forward_from_features(params, x, legal);
    (
        ActionDistribution {
            log_probs: cache.log_probs,
            legal: cache.legal,
        },
        cache.value,
    )
}

/// One chunk's sampled actions with their bookkeeping.
#[derive(Debug, Clone)]
pub struct ChunkSample {
    pub emission: ChunkEmission,
    pub actions: Vec<ActionId>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

/// Samples one chunk emission. Decoding stops at WAIT, at EMIT-CLOSE, or at
/// `max_len` sampled actions, whichever comes first.
pub fn sample_chunk_emission(
    params: &PolicyParams,
    obs: &Observation,
    rng: &mut ChaCha8Rng,
    max_len: usize,
    target_token_ms: u64,
) -> ChunkSample {
    decode_chunk(params, obs, max_len, target_token_ms, |dist, rng_opt| {
        let rng = rng_opt.expect("sampling rng");
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = *dist.legal.last().expect("non-empty legal set");
        for &k in &dist.legal {
            acc += dist.log_probs[k].exp();
            if draw < acc {
                chosen = k;
                break;
            }
        }
        chosen
    }, Some(rng))
}

/// Greedy variant of [`sample_chunk_emission`]: highest-probability legal
/// action, ties broken toward the smallest action id.
pub fn greedy_chunk_emission(
    params: &PolicyParams,
    obs: &Observation,
    max_len: usize,
    target_token_ms: u64,
) -> ChunkSample {
    decode_chunk(params, obs, max_len, target_token_ms, |dist, _| {
        let mut best = dist.legal[0];
        for &k in &dist.legal {
            if dist.log_probs[k] > dist.log_probs[best] {
                best = k;
            }
        }
        best
    }, None)
}

fn decode_chunk(
    params: &PolicyParams,
    obs: &Observation,
    max_len: usize,
    target_token_ms: u64,
    mut pick: impl FnMut(&ActionDistribution, Option<&mut ChaCha8Rng>) -> ActionId,
    mut rng: Option<&mut ChaCha8Rng>,
) -> ChunkSample {
    let mut state = DecodeState::default();
    let mut actions = Vec::new();
    let mut log_probs = Vec::new();
    let mut values = Vec::new();
    let mut prev = None;
    while !state.finished && state.sampled < max_len {
        let (dist, value) = forward_with_prev(params, obs, &state, prev);
        let action = pick(&dist, rng.as_deref_mut());
        log_probs.push(dist.log_probs[action]);
        values.push(value);
        actions.push(action);
        state.advance(action, &params.dims).expect("picked action is legal");
        prev = Some(action);
    }
    ChunkSample {
        emission: state.into_emission(target_token_ms, obs.chunk_end_ms),
        actions,
        log_probs,
        values,
    }
}

/// Replays a whole-episode trajectory, calling `visit` at every decoding
/// position with the forward cache. Errors on structurally illegal actions.
fn replay<F>(
    params: &PolicyParams,
    ep: &Episode,
    actions: &[Vec<ActionId>],
    target_token_ms: u64,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, usize, &ForwardCache, ActionId),
{
    if actions.len() != ep.num_chunks() {
        return Err(Error::Contract(format!(
            "trajectory has {} chunks, episode has {}",
            actions.len(),
            ep.num_chunks()
        )));
    }
    let mut history: Vec<ChunkEmission> = Vec::with_capacity(actions.len());
    for (t, chunk_actions) in actions.iter().enumerate() {
        let obs = observe(ep, t + 1, &history)?;
        let mut state = DecodeState::default();
        let mut prev = None;
        for (n, &action) in chunk_actions.iter().enumerate() {
            let mut x = featurize(&obs, &state, &params.dims);
            set_prev_action(&mut x, prev, &params.dims);
            let legal = state.legal_actions(&params.dims);
            if !legal.contains(&action) {
                return Err(Error::Contract(format!(
                    "illegal action {action} at chunk {} position {n}",
                    t + 1
                )));
            }
            let cache = forward_from_features(params, x, legal);
            visit(t, n, &cache, action);
            state.advance(action, &params.dims)?;
            prev = Some(action);
        }
        history.push(state.into_emission(target_token_ms, obs.chunk_end_ms));
    }
    Ok(())
}

/// Recomputes per-token log-probabilities and values for a realized
/// trajectory without sampling.
pub fn score(
    params: &PolicyParams,
    ep: &Episode,
    actions: &[Vec<ActionId>],
    target_token_ms: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut log_probs: Vec<Vec<f64>> = actions.iter().map(|c| Vec::with_capacity(c.len())).collect();
    let mut values = log_probs.clone();
    replay(params, ep, actions, target_token_ms, |t, _n, cache, action| {
        log_probs[t].push(cache.log_probs[action]);
        values[t].push(cache.value);
    })?;
    Ok((log_probs, values))
}

/// Scalar objectives whose gradients the policy can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpec {
    /// Negated clipped PPO surrogate.
    PpoSurrogate,
    /// Weighted squared error of the value head against its targets.
    ValueLoss,
    /// Surrogate plus value loss.
    Combined,
}

#[derive(Debug, Clone, Copy)]
pub struct PpoHyper {
    pub clip_epsilon: f64,
    pub value_loss_weight: f64,
}

/// One episode's contribution to a gradient batch.
pub struct GradItem<'a> {
    pub episode: &'a Episode,
    pub actions: &'a [Vec<ActionId>],
    pub old_log_probs: &'a [Vec<f64>],
    pub advantages: &'a [Vec<f64>],
    pub value_targets: &'a [Vec<f64>],
}

#[derive(Debug, Clone, Default)]
pub struct LossStats {
    pub loss: f64,
    /// Mean clipped surrogate (the maximized quantity, not negated).
    pub surrogate: f64,
    pub value_loss: f64,
    /// Fraction of tokens whose ratio left the clip interval.
    pub clip_fraction: f64,
    pub token_count: usize,
}

fn grid_shape_ok(item: &GradItem) -> bool {
    let n = item.actions.len();
    item.old_log_probs.len() == n
        && item.advantages.len() == n
        && item.value_targets.len() == n
        && (0..n).all(|t| {
            let len = item.actions[t].len();
            item.old_log_probs[t].len() == len
                && item.advantages[t].len() == len
                && item.value_targets[t].len() == len
        })
}

fn evaluate(
    params: &PolicyParams,
    spec: LossSpec,
    items: &[GradItem],
    hyper: PpoHyper,
    target_token_ms: u64,
    mut grad: Option<&mut [f64]>,
) -> Result<LossStats> {
    let total_tokens: usize = items
        .iter()
        .map(|it| it.actions.iter().map(Vec::len).sum::<usize>())
        .sum();
    if total_tokens == 0 {
        return Err(Error::Contract("empty gradient batch".into()));
    }
    let n = total_tokens as f64;
    let mut stats = LossStats {
        token_count: total_tokens,
        ..LossStats::default()
    };
    let mut clipped = 0usize;

    for item in items {
        if !grid_shape_ok(item) {
            return Err(Error::Contract(
                "trajectory grids disagree in shape".into(),
            ));
        }
        replay(
            params,
            item.episode,
            item.actions,
            target_token_ms,
            |t, i, cache, action| {
                let lp_new = cache.log_probs[action];
                let mut dlogp = 0.0;
                let mut dvalue = 0.0;
                if matches!(spec, LossSpec::PpoSurrogate | LossSpec::Combined) {
                    let adv = item.advantages[t][i];
                    let ratio = (lp_new - item.old_log_probs[t][i]).exp();
                    let clipped_ratio = ratio.clamp(1.0 - hyper.clip_epsilon, 1.0 + hyper.clip_epsilon);
                    let unclipped = ratio * adv;
                    let clamped = clipped_ratio * adv;
                    let term = unclipped.min(clamped);
                    stats.surrogate += term / n;
                    stats.loss -= term / n;
                    if (ratio - 1.0).abs() > hyper.clip_epsilon {
                        clipped += 1;
                    }
                    if unclipped <= clamped {
                        dlogp = -(ratio * adv) / n;
                    }
                }
                if matches!(spec, LossSpec::ValueLoss | LossSpec::Combined) {
                    let err = cache.value - item.value_targets[t][i];
                    stats.value_loss += err * err / n;
                    stats.loss += hyper.value_loss_weight * err * err / n;
                    dvalue = hyper.value_loss_weight * 2.0 * err / n;
                }
                if let Some(g) = grad.as_deref_mut() {
                    backprop_token(params, cache, action, dlogp, dvalue, g);
                }
            },
        )?;
    }
    stats.clip_fraction = clipped as f64 / n;
    if !stats.loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {} over {total_tokens} tokens",
            stats.loss
        )));
    }
    Ok(stats)
}

/// Exact analytical gradient of the requested loss over a batch.
pub fn loss_and_gradients(
    params: &PolicyParams,
    spec: LossSpec,
    items: &[GradItem],
    hyper: PpoHyper,
    target_token_ms: u64,
) -> Result<(LossStats, Vec<f64>)> {
    let mut grad = vec![0.0; params.dims.param_count()];
    let stats = evaluate(params, spec, items, hyper, target_token_ms, Some(&mut grad))?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((stats, grad))
}

/// Loss without gradient accumulation; pure in the parameters, which is what
/// the finite-difference oracle probes.
pub fn loss_value(
    params: &PolicyParams,
    spec: LossSpec,
    items: &[GradItem],
    hyper: PpoHyper,
    target_token_ms: u64,
) -> Result<f64> {
    Ok(evaluate(params, spec, items, hyper, target_token_ms, None)?.loss)
}

/// Reference action sequences for an episode: WAIT at silent chunks, an
/// open-content-close span where the reference emits.
pub fn reference_actions(ep: &Episode, dims: &PolicyDims) -> Vec<Vec<ActionId>> {
    ep.references
        .iter()
        .map(|r| {
            if r.is_empty() {
                vec![dims.wait_action()]
            } else {
                let mut seq = Vec::with_capacity(r.len() + 2);
                seq.push(dims.open_action());
                seq.extend(r.iter().map(|&tok| tok as ActionId));
                seq.push(dims.close_action());
                seq
            }
        })
        .collect()
}

fn reference_nll(
    params: &PolicyParams,
    data: &[(&Episode, Vec<Vec<ActionId>>)],
    target_token_ms: u64,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let total: usize = data
        .iter()
        .map(|(_, acts)| acts.iter().map(Vec::len).sum::<usize>())
        .sum();
    if total == 0 {
        return Err(Error::Contract("no reference tokens to fit".into()));
    }
    let n = total as f64;
    let mut nll = 0.0;
    for (ep, actions) in data {
        replay(params, ep, actions, target_token_ms, |_t, _i, cache, action| {
            nll -= cache.log_probs[action] / n;
            if let Some(g) = grad.as_deref_mut() {
                backprop_token(params, cache, action, -1.0 / n, 0.0, g);
            }
        })?;
    }
    Ok(nll)
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, param_count: usize) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct WarmStartResult {
    pub params: PolicyParams,
    /// Mean per-token negative log-likelihood at each checkpoint, first
    /// entry before any step.
    pub nll_trace: Vec<f64>,
    pub final_nll: f64,
}

/// Likelihood training on reference trajectories: the starting point every
/// reinforcement-learning run shares.
pub fn warm_start(
    params: &PolicyParams,
    episodes: &[Episode],
    steps: usize,
    learning_rate: f64,
    target_token_ms: u64,
) -> Result<WarmStartResult> {
    if episodes.is_empty() {
        return Err(Error::Contract("warm start needs at least one episode".into()));
    }
    let data: Vec<(&Episode, Vec<Vec<ActionId>>)> = episodes
        .iter()
        .map(|ep| (ep, reference_actions(ep, &params.dims)))
        .collect();
    let mut current = params.clone();
    let mut adam = Adam::new(learning_rate, current.dims.param_count());
    let checkpoint_every = (steps / 10).max(1);
    let mut nll_trace = vec![reference_nll(&current, &data, target_token_ms, None)?];
    for step in 0..steps {
        let mut grad = vec![0.0; current.dims.param_count()];
        let nll = reference_nll(&current, &data, target_token_ms, Some(&mut grad))?;
        if !nll.is_finite() {
            return Err(Error::Numeric(format!(
                "warm start diverged at step {step}: loss {nll}"
            )));
        }
        adam.step(&mut current.flat, &grad);
        if (step + 1) % checkpoint_every == 0 || step + 1 == steps {
            nll_trace.push(reference_nll(&current, &data, target_token_ms, None)?);
        }
    }
    let final_nll = *nll_trace.last().expect("trace non-empty");
    Ok(WarmStartResult {
        params: current,
        nll_trace,
        final_nll,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    dims: PolicyDims,
    seed: u64,
    step: u64,
    len: usize,
}

const CHECKPOINT_FORMAT: &str = "duplexsi-ckpt-v1";

/// Writes a checkpoint: one JSON header line, then the raw little-endian
/// parameter bytes. Round-trips bit-exactly.
pub fn save_checkpoint(path: &Path, params: &PolicyParams, seed: u64, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        dims: params.dims,
        seed,
        step,
        len: params.flat.len(),
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header_line = serde_json::to_string(&header)
        .map_err(|e| Error::Contract(format!("header does not serialize: {e}")))?;
    file.write_all(header_line.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(params.flat.len() * 8);
    for p in &params.flat {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, u64, u64)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let newline = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "checkpoint has no header line".into(),
        })?;
    let header: CheckpointHeader =
        serde_json::from_slice(&raw[..newline]).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad checkpoint header: {e}"),
        })?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported checkpoint format '{}'", header.format),
        });
    }
    let body = &raw[newline + 1..];
    if body.len() != header.len * 8 || header.len != header.dims.param_count() {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "checkpoint body has {} bytes, header promises {} parameters",
                body.len(),
                header.len
            ),
        });
    }
    let flat = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((
        PolicyParams {
            dims: header.dims,
            flat,
        },
        header.seed,
        header.step,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EnvConfig;
    use crate::stream_env::generate_episode;

    pub(crate) fn small_cfg() -> EnvConfig {
        EnvConfig {
            source_vocab: 4,
            tail_vocab: 2,
            units_min: 1,
            units_max: 2,
            unit_tokens_min: 2,
            unit_tokens_max: 3,
            ..EnvConfig::default()
        }
    }

    pub(crate) fn small_dims(cfg: &EnvConfig) -> PolicyDims {
        PolicyDims {
            source_vocab: cfg.source_vocab,
            target_vocab: cfg.target_vocab(),
            hidden: 6,
        }
    }

    #[test]
    fn distribution_sums_to_one() {
        let cfg = small_cfg();
        let dims = small_dims(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = PolicyParams::init(dims, 0.5, &mut rng);
        let ep = generate_episode(0, &cfg).unwrap();
        let obs = observe(&ep, 1, &[]).unwrap();
        for state in [
            DecodeState::default(),
            {
                let mut s = DecodeState::default();
                s.advance(dims.open_action(), &dims).unwrap();
                s
            },
        ] {
            let (dist, _) = forward(&params, &obs, &state);
            let total: f64 = dist.probs().iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "sum {total}");
        }
    }

    #[test]
    fn zero_params_give_uniform_distribution_over_legal_actions() {
        let cfg = small_cfg();
        let dims = small_dims(&cfg);
        let params = PolicyParams::zeros(dims);
        let ep = generate_episode(0, &cfg).unwrap();
        let obs = observe(&ep, 1, &[]).unwrap();
        let (dist, value) = forward(&params, &obs, &DecodeState::default());
        assert_eq!(dist.legal.len(), 2);
        for &k in &dist.legal {
            assert!((dist.log_probs[k].exp() - 0.5).abs() < 1e-12);
        }
        assert_eq!(value, 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_cfg();
        let dims = small_dims(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = PolicyParams::init(dims, 0.3, &mut rng);
        let ep = generate_episode(2, &cfg).unwrap();
        let obs = observe(&ep, 1, &[]).unwrap();
        let (d1, v1) = forward(&params, &obs, &DecodeState::default());
        let (d2, v2) = forward(&params, &obs, &DecodeState::default());
        assert_eq!(d1.log_probs, d2.log_probs);
        assert_eq!(v1, v2);
    }

    #[test]
    fn illegal_actions_have_zero_probability_and_fail_scoring() {
        let cfg = small_cfg();
        let dims = small_dims(&cfg);
        let params = PolicyParams::zeros(dims);
        let ep = generate_episode(1, &cfg).unwrap();
        let obs = observe(&ep, 1, &[]).unwrap();
        let (dist, _) = forward(&params, &obs, &DecodeState::default());
        // Content tokens and the close marker are illegal before opening.
        assert_eq!(dist.probs()[0], 0.0);
        assert_eq!(dist.probs()[dims.close_action()], 0.0);

        let mut actions = reference_actions(&ep, &dims);
        actions[0] = vec![dims.close_action()];
        assert!(matches!(
            score(&params, &ep, &actions, 200),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn wait_first_gives_empty_emission_with_one_log_prob() {
        let cfg = small_cfg();
        let dims = small_dims(&cfg);
        // Bias WAIT strongly so the first sample is WAIT.
        let mut params = PolicyParams::zeros(dims);
        params.flat[dims.b2_off() + dims.wait_action()] = 50.0;
        let ep = generate_episode(3, &cfg).unwrap();
        let obs = observe(&ep, 1, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sample = sample_chunk_emission(&params, &obs, &mut rng, 8, 200);
        assert!(sample.emission.tokens.is_empty());
        assert!(sample.emission.closed);
        assert_eq!(sample.log_probs.len(), 1);
        assert_eq!(sample.actions, vec![dims.wait_action()]);
    }

    #[test]
    fn sampled_log_probs_match_score_exactly() {
        let cfg = small_cfg();
        let dims = small_dims(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = PolicyParams::init(dims, 0.4, &mut rng);
        for seed in 0..10 {
            let ep = generate_episode(seed, &cfg).unwrap();
            let mut history = Vec::new();
            let mut all_actions = Vec::new();
            let mut recorded = Vec::new();
            for t in 1..=ep.num_chunks() {
                let obs = observe(&ep, t, &history).unwrap();
                let s = sample_chunk_emission(&params, &obs, &mut rng, 8, 200);
                history.push(s.emission.clone());
                all_actions.push(s.actions.clone());
                recorded.push(s.log_probs.clone());
            }
            let (scored, _values) = score(&params, &ep, &all_actions, 200).unwrap();
            for (a, b) in recorded.iter().flatten().zip(scored.iter().flatten()) {
                assert!((a - b).abs() < 1e-10, "recorded {a} vs scored {b}");
            }
        }
    }

    #[test]
    fn score_changes_under_perturbed_params() {
        let cfg = small_cfg();
        let dims = small_dims(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = PolicyParams::init(dims, 0.4, &mut rng);
        let ep = generate_episode(0, &cfg).unwrap();
        let actions = reference_actions(&ep, &dims);
        let (lp1, _) = score(&params, &ep, &actions, 200).unwrap();
        let mut perturbed = params.clone();
        perturbed.flat[0] += 0.05;
        let (lp2, _) = score(&perturbed, &ep, &actions, 200).unwrap();
        assert_ne!(lp1, lp2);
    }

    #[test]
    fn sampled_trajectories_always_parse_under_the_grammar() {
        let cfg = small_cfg();
        let dims = small_dims(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = PolicyParams::init(dims, 0.8, &mut rng);
        for seed in 0..30 {
            let ep = generate_episode(seed, &cfg).unwrap();
            let mut history = Vec::new();
            for t in 1..=ep.num_chunks() {
                let obs = observe(&ep, t, &history).unwrap();
                let s = sample_chunk_emission(&params, &obs, &mut rng, 6, 200);
                // Replaying through DecodeState re-validates legality.
                let mut state = DecodeState::default();
                for &a in &s.actions {
                    state.advance(a, &dims).unwrap();
                }
                history.push(s.emission);
            }
        }
    }

    #[test]
    fn warm_start_zero_steps_leaves_params_unchanged() {
        let cfg = small_cfg();
        let dims = small_dims(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = PolicyParams::init(dims, 0.2, &mut rng);
        let eps: Vec<Episode> = (0..4).map(|s| generate_episode(s, &cfg).unwrap()).collect();
        let out = warm_start(&params, &eps, 0, 0.01, 200).unwrap();
        assert_eq!(out.params.flat, params.flat);
    }

    #[test]
    fn warm_start_improves_and_never_regresses_much() {
        let cfg = small_cfg();
        let dims = small_dims(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = PolicyParams::init(dims, 0.2, &mut rng);
        let eps: Vec<Episode> = (0..8).map(|s| generate_episode(s, &cfg).unwrap()).collect();
        let out = warm_start(&params, &eps, 200, 0.01, 200).unwrap();
        assert!(out.final_nll < out.nll_trace[0]);
        for pair in out.nll_trace.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-3,
                "log-likelihood regressed: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = small_cfg();
        let dims = small_dims(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = PolicyParams::init(dims, 0.7, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&path, &params, 42, 17).unwrap();
        let (loaded, seed, step) = load_checkpoint(&path).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(step, 17);
        assert_eq!(loaded.dims, params.dims);
        for (a, b) in loaded.flat.iter().zip(&params.flat) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
