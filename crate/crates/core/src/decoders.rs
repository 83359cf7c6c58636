//! Candidate scoring from the context vector.

use rand::Rng;

use crate::data::{BOS_ID, EOS_ID};
use crate::encoders::{embed, lstm_project_inputs, lstm_step, EmbeddingTable, LstmParams, LstmState, INIT_BOUND};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{softmax_in_place, Axis, Graph, Tensor, Var};
use crate::{Error, Result};

/// Projects the `3·n_h` context to `n_h` and scores candidates by dot product.
#[derive(Clone, Debug)]
pub struct DiscriminativeHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl DiscriminativeHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, context_width: usize, rng: &mut R) -> Self {
        Self {
            w: store.add("dis.w_context", Tensor::uniform(hidden, context_width, INIT_BOUND, rng), true),
            b: store.add("dis.b_context", Tensor::uniform(hidden, 1, INIT_BOUND, rng), true),
        }
    }
}

/// Scores `1 × N`: entry `j` is `(W_c c + b) · a_j`.
pub fn score_discriminative(
    g: &mut Graph,
    store: &ParamStore,
    head: &DiscriminativeHead,
    context: Var,
    candidates: &[Var],
) -> Result<Var> {
    if candidates.is_empty() {
        return Err(Error::Invalid("empty candidate set".into()));
    }
    let w = g.param(store, head.w);
    let b = g.param(store, head.b);
    let projected = g.linear(w, b, context)?;
    let projected = g.transpose(projected)?;
    let answers = g.concat(candidates, Axis::Cols)?;
    Ok(g.matmul(projected, answers)?)
}

/// `-log softmax(scores)[gt]` as a `1 × 1` node.
pub fn loss_discriminative(g: &mut Graph, scores: Var, gt: usize) -> Result<Var> {
    Ok(g.cross_entropy(scores, &[gt])?)
}

pub fn probabilities(scores: &[f64]) -> Vec<f64> {
    let mut p = scores.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Answer-generating LSTM. The context, projected to `n_h`, is the initial
/// hidden state; inputs are `<BOS>` followed by the teacher-forced tokens.
#[derive(Clone, Debug)]
pub struct GenerativeDecoder {
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub lstm: LstmParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub bos: usize,
    pub eos: usize,
}

impl GenerativeDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        input_width: usize,
        hidden: usize,
        context_width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            init_w: store.add("gen.init_w", Tensor::uniform(hidden, context_width, INIT_BOUND, rng), true),
            init_b: store.add("gen.init_b", Tensor::uniform(hidden, 1, INIT_BOUND, rng), true),
            lstm: LstmParams::new(store, "gen.lstm", input_width, hidden, rng),
            out_w: store.add("gen.out_w", Tensor::uniform(vocab_size, hidden, INIT_BOUND, rng), true),
            out_b: store.add("gen.out_b", Tensor::uniform(vocab_size, 1, INIT_BOUND, rng), true),
            bos: BOS_ID,
            eos: EOS_ID,
        }
    }

    pub fn initial_state(&self, g: &mut Graph, store: &ParamStore, context: Var) -> Result<LstmState> {
        let w = g.param(store, self.init_w);
        let b = g.param(store, self.init_b);
        let h = g.linear(w, b, context)?;
        let h = g.tanh(h)?;
        let c = g.constant(Tensor::zeros(self.lstm.hidden, 1));
        Ok(LstmState { h, c })
    }

    /// `Σ_t log P(token_t | prefix, c)` over `tokens` followed by `<EOS>`.
    pub fn log_likelihood(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        table: &EmbeddingTable,
        init: LstmState,
        tokens: &[usize],
    ) -> Result<Var> {
        let inputs: Vec<usize> = std::iter::once(self.bos).chain(tokens.iter().copied()).collect();
        let targets: Vec<usize> = tokens.iter().copied().chain(std::iter::once(self.eos)).collect();
        let x = embed(g, store, table, &inputs)?;
        let proj = lstm_project_inputs(g, store, &self.lstm, x)?;
        let mut state = init;
        let mut hs = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let xt = g.slice(proj, Axis::Cols, t, t + 1)?;
            state = lstm_step(g, store, &self.lstm, xt, state)?;
            hs.push(state.h);
        }
        let hs = g.concat(&hs, Axis::Cols)?;
        let w = g.param(store, self.out_w);
        let b = g.param(store, self.out_b);
        let logits = g.linear(w, b, hs)?;
        let logits = g.transpose(logits)?;
        let nll = g.cross_entropy(logits, &targets)?;
        let nll = g.sum(nll)?;
        Ok(g.affine(nll, -1.0, 0.0)?)
    }
}

/// Log-likelihood of every candidate, as `1 × 1` nodes.
pub fn score_generative(
    g: &mut Graph,
    store: &ParamStore,
    decoder: &GenerativeDecoder,
    table: &EmbeddingTable,
    context: Var,
    candidates: &[Vec<usize>],
) -> Result<Vec<Var>> {
    let init = decoder.initial_state(g, store, context)?;
    candidates.iter().map(|c| decoder.log_likelihood(g, store, table, init, c)).collect()
}

/// 1-based ranks: the highest score gets rank 1, ties go to the lower index.
pub fn rank_candidates(scores: &[f64]) -> Result<Vec<usize>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("cannot rank NaN scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = pos + 1;
    }
    Ok(ranks)
}
