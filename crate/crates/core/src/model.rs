//! Parameter layout of the full network and the per-dialog forward pass.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DialogExample, Truncation};
use crate::decoders::{loss_discriminative, score_discriminative, DiscriminativeHead, GenerativeDecoder};
use crate::encoders::{EmbeddingTable, GLOVE_DIM};
use crate::memory::{build_visual_memory, SequenceEncoder, VisualProjection};
use crate::params::ParamStore;
use crate::reasoning::{run_reasoning, ReasoningParams, ReasoningTrace, ReasoningVars};
use crate::tensor::{Axis, Dropout, Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Discriminative,
    Generative,
}

impl DecoderKind {
    pub fn short(self) -> &'static str {
        match self {
            DecoderKind::Discriminative => "dis",
            DecoderKind::Generative => "gen",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `n_h`: width of every memory column, state and attended vector.
    pub hidden: usize,
    pub d_learned: usize,
    /// Width of the frozen pretrained table, if one is attached.
    pub pretrained_dim: Option<usize>,
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// MFB factor count `k`.
    pub factors: usize,
    /// Reasoning steps `T`.
    pub steps: usize,
    pub decoder: DecoderKind,
    pub truncation: Truncation,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize, feature_dim: usize, decoder: DecoderKind) -> Self {
        Self {
            hidden: 16,
            d_learned: 8,
            pretrained_dim: None,
            vocab_size,
            feature_dim,
            factors: 2,
            steps: 2,
            decoder,
            truncation: Truncation::DESK,
        }
    }

    pub fn paper(vocab_size: usize, feature_dim: usize, decoder: DecoderKind, with_glove: bool) -> Self {
        Self {
            hidden: 512,
            d_learned: 300,
            pretrained_dim: with_glove.then_some(GLOVE_DIM),
            vocab_size,
            feature_dim,
            factors: 5,
            steps: 3,
            decoder,
            truncation: Truncation::PAPER,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Discriminative { candidates: SequenceEncoder, head: DiscriminativeHead },
    Generative(GenerativeDecoder),
}

#[derive(Clone, Debug)]
pub struct ReDan {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub question: SequenceEncoder,
    pub history: SequenceEncoder,
    pub visual: VisualProjection,
    pub reasoning: ReasoningParams,
    pub head: Head,
}

/// Scores of one turn in graph form.
#[derive(Clone, Debug)]
pub enum ScoreVars {
    /// `1 × N` dot-product scores.
    Row(Var),
    /// One log-likelihood node per candidate.
    PerCandidate(Vec<Var>),
}

impl ScoreVars {
    pub fn values(&self, g: &Graph) -> Vec<f64> {
        match self {
            ScoreVars::Row(v) => g.value(*v).data().to_vec(),
            ScoreVars::PerCandidate(vs) => vs.iter().map(|v| g.value(*v).data()[0]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TurnForward {
    /// Absent when only the loss was needed (generative training).
    pub scores: Option<ScoreVars>,
    pub loss: Var,
    pub reasoning: ReasoningVars,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// Builds only what the loss needs.
    Train,
    /// Scores every candidate.
    Eval,
}

/// Numeric result of one evaluated turn.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnResult {
    pub scores: Vec<f64>,
    pub loss: f64,
    pub trace: ReasoningTrace,
}

impl ReDan {
    /// Builds all parameters in a fixed order from `seed`.
    pub fn new(config: ModelConfig, pretrained: Option<Tensor>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        match (&pretrained, config.pretrained_dim) {
            (Some(t), Some(d)) if t.cols() == d => {}
            (None, None) => {}
            (Some(t), _) => {
                return Err(Error::Invalid(format!("pretrained table width {} does not match config", t.cols())))
            }
            (None, Some(d)) => {
                // Placeholder until a checkpoint or loader fills the table.
                return ReDan::new(config.clone(), Some(Tensor::zeros(config.vocab_size, d)), seed);
            }
        }
        let h = config.hidden;
        let embedding = EmbeddingTable::new(&mut store, config.vocab_size, config.d_learned, pretrained, &mut rng)?;
        let d_emb = embedding.width(&store);
        let question = SequenceEncoder::new(&mut store, "question", d_emb, h, &mut rng)?;
        let history = SequenceEncoder::new(&mut store, "history", d_emb, h, &mut rng)?;
        let visual = VisualProjection::new(&mut store, config.feature_dim, h, &mut rng);
        let reasoning = ReasoningParams::new(&mut store, h, config.factors, config.steps, &mut rng)?;
        let head = match config.decoder {
            DecoderKind::Discriminative => Head::Discriminative {
                candidates: SequenceEncoder::new(&mut store, "candidate", d_emb, h, &mut rng)?,
                head: DiscriminativeHead::new(&mut store, h, reasoning.context_width(), &mut rng),
            },
            DecoderKind::Generative => Head::Generative(GenerativeDecoder::new(
                &mut store,
                config.vocab_size,
                d_emb,
                h,
                reasoning.context_width(),
                &mut rng,
            )),
        };
        Ok(Self { config, store, embedding, question, history, visual, reasoning, head })
    }

    /// Records the first `turn_limit` turns of `example` on `g`.
    pub fn forward_dialog(
        &self,
        g: &mut Graph,
        example: &DialogExample,
        turn_limit: usize,
        pass: Pass,
        dropout: &mut Dropout,
    ) -> Result<Vec<TurnForward>> {
        let store = &self.store;
        let n_turns = example.turns.len().min(turn_limit);
        if example.features.rows() != self.config.feature_dim {
            return Err(Error::Invalid(format!(
                "image {} has {}-dim features, model expects {}",
                example.image_id,
                example.features.rows(),
                self.config.feature_dim
            )));
        }
        let features = g.constant(example.features.clone());
        let visual_memory = build_visual_memory(g, store, &self.visual, features)?;

        // Snippet j is shared by every turn after it.
        let snippets = example.history_snippets();
        let columns = snippets[..n_turns.max(1)]
            .iter()
            .map(|s| self.history.encode(g, store, &self.embedding, s).map(|(v, _)| v))
            .collect::<Result<Vec<_>>>()?;
        let full_history = g.concat(&columns, Axis::Cols)?;

        let mut candidate_cache: HashMap<Vec<usize>, Var> = HashMap::new();
        let mut out = Vec::with_capacity(n_turns);
        for (i, turn) in example.turns[..n_turns].iter().enumerate() {
            let textual_memory = if i + 1 == columns.len() {
                full_history
            } else {
                g.slice(full_history, Axis::Cols, 0, i + 1)?
            };
            let (q, _) = self.question.encode(g, store, &self.embedding, &turn.question)?;
            let reasoning = run_reasoning(g, store, &self.reasoning, q, visual_memory, textual_memory, dropout)?;
            let context = reasoning.context;
            let (scores, loss) = match &self.head {
                Head::Discriminative { candidates, head } => {
                    let mut encoded = Vec::with_capacity(turn.candidates.len());
                    for c in &turn.candidates {
                        let v = match candidate_cache.get(c) {
                            Some(v) => *v,
                            None => {
                                let (v, _) = candidates.encode(g, store, &self.embedding, c)?;
                                candidate_cache.insert(c.clone(), v);
                                v
                            }
                        };
                        encoded.push(v);
                    }
                    let row = score_discriminative(g, store, head, context, &encoded)?;
                    let loss = loss_discriminative(g, row, turn.gt)?;
                    (Some(ScoreVars::Row(row)), loss)
                }
                Head::Generative(dec) => {
                    let init = dec.initial_state(g, store, context)?;
                    match pass {
                        Pass::Train => {
                            let ll = dec.log_likelihood(g, store, &self.embedding, init, &turn.candidates[turn.gt])?;
                            (None, g.affine(ll, -1.0, 0.0)?)
                        }
                        Pass::Eval => {
                            let lls = turn
                                .candidates
                                .iter()
                                .map(|c| dec.log_likelihood(g, store, &self.embedding, init, c))
                                .collect::<Result<Vec<_>>>()?;
                            let loss = g.affine(lls[turn.gt], -1.0, 0.0)?;
                            (Some(ScoreVars::PerCandidate(lls)), loss)
                        }
                    }
                }
            };
            out.push(TurnForward { scores, loss, reasoning });
        }
        Ok(out)
    }

    /// Sum of per-turn losses over the first `turn_limit` turns.
    pub fn dialog_loss(
        &self,
        g: &mut Graph,
        example: &DialogExample,
        turn_limit: usize,
        dropout: &mut Dropout,
    ) -> Result<(Var, usize)> {
        let turns = self.forward_dialog(g, example, turn_limit, Pass::Train, dropout)?;
        let losses: Vec<Var> = turns.iter().map(|t| t.loss).collect();
        let stacked = g.concat(&losses, Axis::Rows)?;
        Ok((g.sum(stacked)?, losses.len()))
    }

    /// Scores every turn of `example` without dropout.
    pub fn evaluate_dialog(&self, example: &DialogExample) -> Result<Vec<TurnResult>> {
        let mut g = Graph::new();
        let turns = self.forward_dialog(&mut g, example, usize::MAX, Pass::Eval, &mut Dropout::Off)?;
        Ok(turns
            .iter()
            .map(|t| TurnResult {
                scores: t.scores.as_ref().map(|s| s.values(&g)).unwrap_or_default(),
                loss: g.value(t.loss).data()[0],
                trace: t.reasoning.snapshot(&g),
            })
            .collect())
    }
}
