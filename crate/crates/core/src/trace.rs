//! Per-turn attention traces in the exchange format read by the plotting
//! tools.

use serde::{Deserialize, Serialize};

use crate::data::DialogExample;
use crate::decoders::rank_candidates;
use crate::model::ReDan;
use crate::Result;

/// Candidates listed per turn.
pub const TOP_CANDIDATES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogTrace {
    pub dialog_id: u64,
    pub turns: Vec<TurnTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub turn: usize,
    pub question: String,
    pub steps: Vec<AttentionStep>,
    pub top_candidates: Vec<RankedCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStep {
    /// Weights over image regions.
    pub beta: Vec<f64>,
    /// Weights over history snippets, caption first.
    pub gamma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub text: String,
    pub score: f64,
    pub rank: usize,
}

pub fn trace_dialog(model: &ReDan, example: &DialogExample) -> Result<DialogTrace> {
    let results = model.evaluate_dialog(example)?;
    let mut turns = Vec::with_capacity(results.len());
    for (i, (res, turn)) in results.into_iter().zip(&example.turns).enumerate() {
        let ranks = rank_candidates(&res.scores)?;
        let mut top: Vec<RankedCandidate> = ranks
            .iter()
            .enumerate()
            .map(|(c, &rank)| RankedCandidate { text: turn.candidate_texts[c].clone(), score: res.scores[c], rank })
            .collect();
        top.sort_by_key(|c| c.rank);
        top.truncate(TOP_CANDIDATES);
        turns.push(TurnTrace {
            turn: i,
            question: turn.question_text.clone(),
            steps: res.trace.steps.into_iter().map(|s| AttentionStep { beta: s.beta, gamma: s.gamma }).collect(),
            top_candidates: top,
        });
    }
    Ok(DialogTrace { dialog_id: example.image_id, turns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_examples, generate_synthetic, SyntheticSpec, Truncation, Vocabulary};
    use crate::model::{DecoderKind, ModelConfig};

    #[test]
    fn trace_shape_and_order() {
        let (file, feats) = generate_synthetic(&SyntheticSpec::desk(1, 3)).unwrap();
        let vocab = Vocabulary::from_dialogs(&file, 1).unwrap();
        let ex = build_examples(&file, &feats, &vocab, Truncation::DESK).unwrap();
        let model = ReDan::new(ModelConfig::desk(vocab.len(), 12, DecoderKind::Discriminative), None, 1).unwrap();
        let trace = trace_dialog(&model, &ex[0]).unwrap();
        assert_eq!(trace.dialog_id, 1000);
        assert_eq!(trace.turns.len(), 10);
        for (i, t) in trace.turns.iter().enumerate() {
            assert_eq!(t.question, file.dialogs[0].dialog[i].question);
            assert_eq!(t.steps.len(), 2);
            assert_eq!(t.steps[0].gamma.len(), i + 1);
            let ranks: Vec<usize> = t.top_candidates.iter().map(|c| c.rank).collect();
            assert_eq!(ranks, vec![1, 2, 3, 4, 5]);
            assert!(t.top_candidates.windows(2).all(|w| w[0].score >= w[1].score));
        }
        let json = serde_json::to_value(&trace).unwrap();
        assert!(json["turns"][0]["steps"][0]["beta"].is_array());
        assert!(json["turns"][0]["top_candidates"][0]["text"].is_string());
    }
}
