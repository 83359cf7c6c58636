//! Visual memory from region features and textual memory from history snippets.

use rand::Rng;

use crate::data::UNK_ID;
use crate::encoders::{bilstm_encode, embed, self_attend, BiLstmEncoder, EmbeddingTable, SelfAttentionPool, INIT_BOUND};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Axis, Graph, Tensor, Var};
use crate::{Error, Result};

/// Single-layer perceptron applied to every region feature.
#[derive(Clone, Debug)]
pub struct VisualProjection {
    pub w: ParamId,
    pub b: ParamId,
}

impl VisualProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, feature_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w: store.add("visual.w", Tensor::uniform(hidden, feature_dim, INIT_BOUND, rng), true),
            b: store.add("visual.b", Tensor::uniform(hidden, 1, INIT_BOUND, rng), true),
        }
    }
}

/// `tanh(W F + b)`: an `n_h × M` matrix with one column per region.
pub fn build_visual_memory(g: &mut Graph, store: &ParamStore, proj: &VisualProjection, features: Var) -> Result<Var> {
    if g.value(features).cols() == 0 {
        return Err(Error::Invalid("image has no regions".into()));
    }
    let w = g.param(store, proj.w);
    let b = g.param(store, proj.b);
    let pre = g.linear(w, b, features)?;
    Ok(g.tanh(pre)?)
}

/// Text encoder used for one kind of sequence: a BiLSTM plus its own pool.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    pub lstm: BiLstmEncoder,
    pub pool: SelfAttentionPool,
}

impl SequenceEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            lstm: BiLstmEncoder::new(store, &format!("{prefix}.lstm"), input, hidden, rng)?,
            pool: SelfAttentionPool::new(store, &format!("{prefix}.pool"), hidden, rng),
        })
    }

    /// Embeds, encodes and pools `ids`, returning the `n_h × 1` vector and the
    /// pooling weights.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, table: &EmbeddingTable, ids: &[usize]) -> Result<(Var, Var)> {
        let ids: &[usize] = if ids.is_empty() { &[UNK_ID] } else { ids };
        let x = embed(g, store, table, ids)?;
        let m = bilstm_encode(g, store, &self.lstm, x, ids.len())?;
        self_attend(g, store, &self.pool, m, ids.len())
    }
}

/// `n_h × ℓ` matrix whose column `j` is the pooled encoding of snippet `j`
/// (snippet 0 is the caption).
pub fn build_textual_memory(
    g: &mut Graph,
    store: &ParamStore,
    table: &EmbeddingTable,
    encoder: &SequenceEncoder,
    snippets: &[Vec<usize>],
) -> Result<Var> {
    if snippets.is_empty() {
        return Err(Error::Invalid("history needs at least the caption".into()));
    }
    let columns = snippets
        .iter()
        .map(|s| encoder.encode(g, store, table, s).map(|(v, _)| v))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.concat(&columns, Axis::Cols)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_features_and_bias_give_zero_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let proj = VisualProjection::new(&mut store, 5, 4, &mut rng);
        store.get_mut(proj.b).value = Tensor::zeros(4, 1);
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(5, 2));
        let m = build_visual_memory(&mut g, &store, &proj, f).unwrap();
        assert_eq!(g.value(m).shape(), [4, 2]);
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn visual_memory_is_per_column_affine_tanh() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let proj = VisualProjection::new(&mut store, 5, 4, &mut rng);
        let feats = Tensor::uniform(5, 3, 1.0, &mut rng);
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let m = build_visual_memory(&mut g, &store, &proj, f).unwrap();
        let w = &store.get(proj.w).value;
        let b = &store.get(proj.b).value;
        for col in 0..3 {
            for i in 0..4 {
                let pre: f64 = b.get(i, 0) + (0..5).map(|j| w.get(i, j) * feats.get(j, col)).sum::<f64>();
                assert!((g.value(m).get(i, col) - pre.tanh()).abs() < 1e-14);
            }
        }
        let single = g.constant(Tensor::column(feats.column_values(0)));
        let m1 = build_visual_memory(&mut g, &store, &proj, single).unwrap();
        assert_eq!(g.value(m1).column_values(0), g.value(m).column_values(0));
    }

    fn text_setup() -> (ParamStore, EmbeddingTable, SequenceEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let table = EmbeddingTable::new(&mut store, 20, 4, None, &mut rng).unwrap();
        let enc = SequenceEncoder::new(&mut store, "history", 4, 6, &mut rng).unwrap();
        (store, table, enc)
    }

    #[test]
    fn textual_memory_has_one_column_per_snippet() {
        let (store, table, enc) = text_setup();
        let mut g = Graph::new();
        let m = build_textual_memory(&mut g, &store, &table, &enc, &[vec![5, 6]]).unwrap();
        assert_eq!(g.value(m).shape(), [6, 1]);
        let m = build_textual_memory(&mut g, &store, &table, &enc, &[vec![5, 6], vec![7], vec![5, 6]]).unwrap();
        assert_eq!(g.value(m).column_values(0), g.value(m).column_values(2));
        assert!(build_textual_memory(&mut g, &store, &table, &enc, &[]).is_err());
    }

    #[test]
    fn textual_columns_equal_independent_encodings() {
        let (store, table, enc) = text_setup();
        let snippets = vec![vec![5, 6, 7], vec![8, 4, 9, 10], vec![11]];
        let mut g = Graph::new();
        let m = build_textual_memory(&mut g, &store, &table, &enc, &snippets).unwrap();
        for (j, s) in snippets.iter().enumerate() {
            let mut g2 = Graph::new();
            let x = embed(&mut g2, &store, &table, s).unwrap();
            let h = bilstm_encode(&mut g2, &store, &enc.lstm, x, s.len()).unwrap();
            let (v, _) = self_attend(&mut g2, &store, &enc.pool, h, s.len()).unwrap();
            assert_eq!(g.value(m).column_values(j), g2.value(v).data());
        }
    }

    #[test]
    fn empty_snippet_becomes_unk() {
        let (store, table, enc) = text_setup();
        let mut g = Graph::new();
        let m = build_textual_memory(&mut g, &store, &table, &enc, &[vec![], vec![UNK_ID]]).unwrap();
        assert_eq!(g.value(m).column_values(0), g.value(m).column_values(1));
    }
}
