//! Recurrent dual attention.
//!
//! Starting from the pooled question `s_0 = q` and `d_0 = 0`, every step
//! `t = 1..=T` runs
//!
//! ```text
//! β   = softmax(p_β · tanh(W_v M_v + W_s s_{t-1} + W_d d_{t-1} + b_β))     v_t = M_v β
//! γ   = softmax(p_γ · tanh(W'_d M_d + W'_s s_{t-1} + W'_v v_t + b_γ))     d_t = M_d γ
//! z_t = MFB(v_t, d_t)
//! s_t = GRU(s_{t-1}, z_t)
//! ```
//!
//! and the context is `c = [MFB(s_T, v_T); MFB(s_T, d_T); MFB(v_T, d_T)]`.
//! All steps share one parameter set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::INIT_BOUND;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Axis, Dropout, Graph, Tensor, Var};
use crate::{Error, Result};

/// Additive attention of a query over the columns of a memory matrix.
#[derive(Clone, Debug)]
pub struct DualQueryAttention {
    pub w_memory: ParamId,
    pub w_state: ParamId,
    pub w_other: ParamId,
    pub bias: ParamId,
    pub probe: ParamId,
}

impl DualQueryAttention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, hidden: usize, rng: &mut R) -> Self {
        let mut square = |name: &str, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), Tensor::uniform(hidden, hidden, INIT_BOUND, rng), true)
        };
        let w_memory = square("w_memory", rng);
        let w_state = square("w_state", rng);
        let w_other = square("w_other", rng);
        Self {
            w_memory,
            w_state,
            w_other,
            bias: store.add(format!("{prefix}.bias"), Tensor::uniform(hidden, 1, INIT_BOUND, rng), true),
            probe: store.add(format!("{prefix}.probe"), Tensor::uniform(1, hidden, INIT_BOUND, rng), true),
        }
    }

    /// Returns the attended `n_h × 1` vector and the `1 × cols` weights.
    fn attend(&self, g: &mut Graph, store: &ParamStore, memory: Var, state: Var, other: Var) -> Result<(Var, Var)> {
        let w_m = g.param(store, self.w_memory);
        let w_s = g.param(store, self.w_state);
        let w_o = g.param(store, self.w_other);
        let b = g.param(store, self.bias);
        let p = g.param(store, self.probe);
        let proj = g.matmul(w_m, memory)?;
        let qs = g.matmul(w_s, state)?;
        let qo = g.matmul(w_o, other)?;
        let query = g.add(qs, qo)?;
        let query = g.add(query, b)?;
        let hidden = g.add(proj, query)?;
        let hidden = g.tanh(hidden)?;
        let logits = g.matmul(p, hidden)?;
        let weights = g.softmax_rows(logits)?;
        let wt = g.transpose(weights)?;
        let attended = g.matmul(memory, wt)?;
        Ok((attended, weights))
    }
}

/// One pair of MFB projections. They carry no bias so that a zero input
/// fuses to exactly zero.
#[derive(Clone, Debug)]
pub struct MfbPair {
    pub u_a: ParamId,
    pub u_b: ParamId,
}

impl MfbPair {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, hidden: usize, factors: usize, rng: &mut R) -> Self {
        Self {
            u_a: store.add(format!("{prefix}.u_a"), Tensor::uniform(hidden * factors, hidden, INIT_BOUND, rng), true),
            u_b: store.add(format!("{prefix}.u_b"), Tensor::uniform(hidden * factors, hidden, INIT_BOUND, rng), true),
        }
    }
}

/// GRU with reset-gated candidate; gate rows are `[reset, update]`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_gates: ParamId,
    pub u_gates: ParamId,
    pub b_gates: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
    pub hidden: usize,
}

impl GruParams {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, hidden: usize, rng: &mut R) -> Self {
        let h = hidden;
        Self {
            w_gates: store.add(format!("{prefix}.w_gates"), Tensor::uniform(2 * h, h, INIT_BOUND, rng), true),
            u_gates: store.add(format!("{prefix}.u_gates"), Tensor::uniform(2 * h, h, INIT_BOUND, rng), true),
            b_gates: store.add(format!("{prefix}.b_gates"), Tensor::zeros(2 * h, 1), true),
            w_cand: store.add(format!("{prefix}.w_cand"), Tensor::uniform(h, h, INIT_BOUND, rng), true),
            u_cand: store.add(format!("{prefix}.u_cand"), Tensor::uniform(h, h, INIT_BOUND, rng), true),
            b_cand: store.add(format!("{prefix}.b_cand"), Tensor::zeros(h, 1), true),
            hidden,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReasoningParams {
    pub image_attention: DualQueryAttention,
    pub history_attention: DualQueryAttention,
    /// Fuses `v_t` and `d_t` inside the loop.
    pub step_fusion: MfbPair,
    /// Final context blocks: `(s, v)`, `(s, d)`, `(v, d)`.
    pub context_fusion: [MfbPair; 3],
    pub gru: GruParams,
    pub hidden: usize,
    pub factors: usize,
    pub steps: usize,
}

impl ReasoningParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, factors: usize, steps: usize, rng: &mut R) -> Result<Self> {
        if steps == 0 || factors == 0 || hidden == 0 {
            return Err(Error::Invalid("reasoning needs T >= 1, k >= 1 and n_h >= 1".into()));
        }
        Ok(Self {
            image_attention: DualQueryAttention::new(store, "reason.image_att", hidden, rng),
            history_attention: DualQueryAttention::new(store, "reason.history_att", hidden, rng),
            step_fusion: MfbPair::new(store, "reason.mfb_step", hidden, factors, rng),
            context_fusion: [
                MfbPair::new(store, "reason.mfb_sv", hidden, factors, rng),
                MfbPair::new(store, "reason.mfb_sd", hidden, factors, rng),
                MfbPair::new(store, "reason.mfb_vd", hidden, factors, rng),
            ],
            gru: GruParams::new(store, "reason.gru", hidden, rng),
            hidden,
            factors,
            steps,
        })
    }

    pub fn context_width(&self) -> usize {
        3 * self.hidden
    }
}

/// Query and previous history context attending to the visual memory.
pub fn attend_image(
    g: &mut Graph,
    store: &ParamStore,
    params: &ReasoningParams,
    state: Var,
    history_prev: Var,
    visual_memory: Var,
) -> Result<(Var, Var)> {
    params.image_attention.attend(g, store, visual_memory, state, history_prev)
}

/// Query and current image context attending to the textual memory.
pub fn attend_history(
    g: &mut Graph,
    store: &ParamStore,
    params: &ReasoningParams,
    state: Var,
    image: Var,
    textual_memory: Var,
) -> Result<(Var, Var)> {
    params.history_attention.attend(g, store, textual_memory, state, image)
}

/// Factorized bilinear pooling: project both inputs to `n_h·k`, multiply,
/// sum-pool windows of `k`, then signed square root and l2 normalization.
pub fn mfb_fuse(g: &mut Graph, store: &ParamStore, pair: &MfbPair, factors: usize, a: Var, b: Var) -> Result<Var> {
    let u_a = g.param(store, pair.u_a);
    let u_b = g.param(store, pair.u_b);
    let rows = store.get(pair.u_a).value.rows();
    if factors == 0 || rows % factors != 0 {
        return Err(Error::Invalid(format!("factor count {factors} does not divide projection width {rows}")));
    }
    let pa = g.matmul(u_a, a)?;
    let pb = g.matmul(u_b, b)?;
    let joint = g.mul(pa, pb)?;
    let pooled = g.sum_pool(joint, factors)?;
    let rooted = g.signed_sqrt(pooled)?;
    Ok(g.l2_normalize(rooted)?)
}

/// `s' = u ∘ s + (1 - u) ∘ tanh(W z + U (r ∘ s) + b)`.
pub fn gru_update(g: &mut Graph, store: &ParamStore, gru: &GruParams, state: Var, input: Var) -> Result<Var> {
    let h = gru.hidden;
    let w = g.param(store, gru.w_gates);
    let u = g.param(store, gru.u_gates);
    let b = g.param(store, gru.b_gates);
    let wz = g.matmul(w, input)?;
    let us = g.matmul(u, state)?;
    let gates = g.add(wz, us)?;
    let gates = g.add(gates, b)?;
    let gates = g.sigmoid(gates)?;
    let reset = g.slice(gates, Axis::Rows, 0, h)?;
    let update = g.slice(gates, Axis::Rows, h, 2 * h)?;

    let w = g.param(store, gru.w_cand);
    let u = g.param(store, gru.u_cand);
    let b = g.param(store, gru.b_cand);
    let gated = g.mul(reset, state)?;
    let wz = g.matmul(w, input)?;
    let us = g.matmul(u, gated)?;
    let cand = g.add(wz, us)?;
    let cand = g.add(cand, b)?;
    let cand = g.tanh(cand)?;

    let keep = g.mul(update, state)?;
    let write_gate = g.affine(update, -1.0, 1.0)?;
    let write = g.mul(write_gate, cand)?;
    Ok(g.add(keep, write)?)
}

/// Graph handles recorded at one reasoning step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub beta: Var,
    pub gamma: Var,
    pub state: Var,
    pub image: Var,
    pub history: Var,
}

#[derive(Clone, Debug)]
pub struct ReasoningVars {
    pub context: Var,
    pub steps: Vec<StepVars>,
}

/// Numeric snapshot of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub state: Vec<f64>,
    pub image: Vec<f64>,
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub steps: Vec<StepTrace>,
    pub context: Vec<f64>,
}

impl ReasoningVars {
    pub fn snapshot(&self, g: &Graph) -> ReasoningTrace {
        let vals = |v: Var| g.value(v).data().to_vec();
        ReasoningTrace {
            steps: self
                .steps
                .iter()
                .map(|s| StepTrace {
                    beta: vals(s.beta),
                    gamma: vals(s.gamma),
                    state: vals(s.state),
                    image: vals(s.image),
                    history: vals(s.history),
                })
                .collect(),
            context: vals(self.context),
        }
    }
}

/// Runs `T` shared-parameter steps and builds the `3·n_h × 1` context.
/// Dropout, when enabled, is applied to `v_t`, `d_t` and `z_t`.
pub fn run_reasoning(
    g: &mut Graph,
    store: &ParamStore,
    params: &ReasoningParams,
    question: Var,
    visual_memory: Var,
    textual_memory: Var,
    dropout: &mut Dropout,
) -> Result<ReasoningVars> {
    let mut state = question;
    let mut history = g.constant(Tensor::zeros(params.hidden, 1));
    let mut image = history;
    let mut steps = Vec::with_capacity(params.steps);
    for _ in 0..params.steps {
        let (v, beta) = attend_image(g, store, params, state, history, visual_memory)?;
        image = dropout.apply(g, v)?;
        let (d, gamma) = attend_history(g, store, params, state, image, textual_memory)?;
        history = dropout.apply(g, d)?;
        let z = mfb_fuse(g, store, &params.step_fusion, params.factors, image, history)?;
        let z = dropout.apply(g, z)?;
        state = gru_update(g, store, &params.gru, state, z)?;
        steps.push(StepVars { beta, gamma, state, image, history });
    }
    let k = params.factors;
    let [sv, sd, vd] = &params.context_fusion;
    let c_sv = mfb_fuse(g, store, sv, k, state, image)?;
    let c_sd = mfb_fuse(g, store, sd, k, state, history)?;
    let c_vd = mfb_fuse(g, store, vd, k, image, history)?;
    let context = g.concat(&[c_sv, c_sd, c_vd], Axis::Rows)?;
    Ok(ReasoningVars { context, steps })
}
