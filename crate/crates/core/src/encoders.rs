//! Word embeddings, bidirectional LSTM encoding and self-attention pooling.

use std::io::BufRead;

use rand::Rng;

use crate::data::{Vocabulary, PAD_ID};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Axis, Graph, Tensor, Var};
use crate::{Error, Result};

pub const INIT_BOUND: f64 = 0.08;
pub const GLOVE_DIM: usize = 300;
/// Additive logit for padded positions.
pub const PAD_LOGIT: f64 = -1e9;

/// Learned word vectors, optionally concatenated below frozen pretrained ones.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub learned: ParamId,
    pub pretrained: Option<ParamId>,
    pub vocab_size: usize,
    pub d_learned: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        d_learned: usize,
        pretrained: Option<Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        let pretrained = match pretrained {
            Some(t) if t.rows() != vocab_size => {
                return Err(Error::Invalid(format!(
                    "pretrained table has {} rows, vocabulary has {vocab_size}",
                    t.rows()
                )))
            }
            Some(t) => Some(store.add("embedding.pretrained", t, false)),
            None => None,
        };
        let learned = store.add("embedding.learned", Tensor::uniform(vocab_size, d_learned, INIT_BOUND, rng), true);
        Ok(Self { learned, pretrained, vocab_size, d_learned })
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        self.d_learned + self.pretrained.map_or(0, |p| store.get(p).value.cols())
    }
}

/// `d_emb × L` matrix whose column `i` embeds token `i`; `<PAD>` columns are zero.
pub fn embed(g: &mut Graph, store: &ParamStore, table: &EmbeddingTable, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Invalid("cannot embed an empty sequence".into()));
    }
    let learned = g.param(store, table.learned);
    let learned = g.embedding(learned, ids, Some(PAD_ID))?;
    match table.pretrained {
        Some(p) => {
            let glove = g.param(store, p);
            let glove = g.embedding(glove, ids, Some(PAD_ID))?;
            Ok(g.concat(&[glove, learned], Axis::Rows)?)
        }
        None => Ok(learned),
    }
}

/// Reads whitespace-separated `word v1 ... v300` lines into a `V × 300`
/// table. Words outside the vocabulary are skipped; vocabulary words absent
/// from the file keep a zero row.
pub fn load_glove<R: BufRead>(reader: R, vocab: &Vocabulary, dim: usize) -> Result<Tensor> {
    let mut table = Tensor::zeros(vocab.len(), dim);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("glove", e))?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let Some(id) = vocab.get(word) else { continue };
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("glove line {}: {e}", lineno + 1)))?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "glove line {}: expected {dim} values, found {}",
                lineno + 1,
                values.len()
            )));
        }
        for (j, v) in values.into_iter().enumerate() {
            table.set(id, j, v);
        }
    }
    Ok(table)
}

/// One LSTM direction. Gate rows are stacked as `[input, forget, cell, output]`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_ih = store.add(format!("{prefix}.w_ih"), Tensor::uniform(4 * hidden, input, INIT_BOUND, rng), true);
        let w_hh = store.add(format!("{prefix}.w_hh"), Tensor::uniform(4 * hidden, hidden, INIT_BOUND, rng), true);
        let mut b = Tensor::uniform(4 * hidden, 1, INIT_BOUND, rng);
        for r in hidden..2 * hidden {
            b.set(r, 0, 1.0);
        }
        let bias = store.add(format!("{prefix}.bias"), b, true);
        Self { w_ih, w_hh, bias, input, hidden }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        let h = g.constant(Tensor::zeros(hidden, 1));
        let c = g.constant(Tensor::zeros(hidden, 1));
        Self { h, c }
    }
}

/// Input projections `W_ih X + b` for all columns of `x` at once.
pub fn lstm_project_inputs(g: &mut Graph, store: &ParamStore, p: &LstmParams, x: Var) -> Result<Var> {
    let w = g.param(store, p.w_ih);
    let b = g.param(store, p.bias);
    Ok(g.linear(w, b, x)?)
}

/// One cell step given the already projected input column.
pub fn lstm_step(g: &mut Graph, store: &ParamStore, p: &LstmParams, x_proj: Var, state: LstmState) -> Result<LstmState> {
    let h = p.hidden;
    let w_hh = g.param(store, p.w_hh);
    let rec = g.matmul(w_hh, state.h)?;
    let gates = g.add(x_proj, rec)?;
    let i = g.slice(gates, Axis::Rows, 0, h)?;
    let f = g.slice(gates, Axis::Rows, h, 2 * h)?;
    let c_hat = g.slice(gates, Axis::Rows, 2 * h, 3 * h)?;
    let o = g.slice(gates, Axis::Rows, 3 * h, 4 * h)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let c_hat = g.tanh(c_hat)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, c_hat)?;
    let c = g.add(keep, write)?;
    let c_act = g.tanh(c)?;
    let h = g.mul(o, c_act)?;
    Ok(LstmState { h, c })
}

#[derive(Clone, Debug)]
pub struct BiLstmEncoder {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmEncoder {
    /// `output_width` is the concatenated width; each direction gets half.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if output_width % 2 != 0 {
            return Err(Error::Invalid(format!("BiLSTM width {output_width} is not even")));
        }
        let half = output_width / 2;
        Ok(Self {
            forward: LstmParams::new(store, &format!("{prefix}.fwd"), input, half, rng),
            backward: LstmParams::new(store, &format!("{prefix}.bwd"), input, half, rng),
        })
    }

    pub fn output_width(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }
}

/// Encodes `embedded` (`d_emb × L`) into `n_h × L`. Column `t` is the forward
/// state at `t` stacked over the backward state at `t`; the backward
/// direction starts at `valid_len - 1` and columns past `valid_len` are zero.
pub fn bilstm_encode(
    g: &mut Graph,
    store: &ParamStore,
    enc: &BiLstmEncoder,
    embedded: Var,
    valid_len: usize,
) -> Result<Var> {
    let len = g.value(embedded).cols();
    if valid_len == 0 || valid_len > len {
        return Err(Error::Invalid(format!("valid length {valid_len} outside 1..={len}")));
    }
    let x = if valid_len < len { g.slice(embedded, Axis::Cols, 0, valid_len)? } else { embedded };

    let proj = lstm_project_inputs(g, store, &enc.forward, x)?;
    let mut state = LstmState::zeros(g, enc.forward.hidden);
    let mut fwd = Vec::with_capacity(valid_len);
    for t in 0..valid_len {
        let xt = g.slice(proj, Axis::Cols, t, t + 1)?;
        state = lstm_step(g, store, &enc.forward, xt, state)?;
        fwd.push(state.h);
    }

    let proj = lstm_project_inputs(g, store, &enc.backward, x)?;
    let mut state = LstmState::zeros(g, enc.backward.hidden);
    let mut bwd = vec![state.h; valid_len];
    for t in (0..valid_len).rev() {
        let xt = g.slice(proj, Axis::Cols, t, t + 1)?;
        state = lstm_step(g, store, &enc.backward, xt, state)?;
        bwd[t] = state.h;
    }

    let fwd = g.concat(&fwd, Axis::Cols)?;
    let bwd = g.concat(&bwd, Axis::Cols)?;
    let out = g.concat(&[fwd, bwd], Axis::Rows)?;
    if valid_len < len {
        let pad = g.constant(Tensor::zeros(enc.output_width(), len - valid_len));
        Ok(g.concat(&[out, pad], Axis::Cols)?)
    } else {
        Ok(out)
    }
}

/// Additive attention pooling `softmax(p · tanh(W M + b))`.
#[derive(Clone, Debug)]
pub struct SelfAttentionPool {
    pub w: ParamId,
    pub b: ParamId,
    pub probe: ParamId,
}

impl SelfAttentionPool {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{prefix}.w"), Tensor::uniform(width, width, INIT_BOUND, rng), true),
            b: store.add(format!("{prefix}.b"), Tensor::uniform(width, 1, INIT_BOUND, rng), true),
            probe: store.add(format!("{prefix}.probe"), Tensor::uniform(1, width, INIT_BOUND, rng), true),
        }
    }
}

/// Pools `matrix` (`n_h × L`) to an `n_h × 1` vector; also returns the
/// `1 × L` attention weights, which are exactly zero past `valid_len`.
pub fn self_attend(
    g: &mut Graph,
    store: &ParamStore,
    pool: &SelfAttentionPool,
    matrix: Var,
    valid_len: usize,
) -> Result<(Var, Var)> {
    let len = g.value(matrix).cols();
    if valid_len == 0 || valid_len > len {
        return Err(Error::Invalid(format!("valid length {valid_len} outside 1..={len}")));
    }
    let w = g.param(store, pool.w);
    let b = g.param(store, pool.b);
    let probe = g.param(store, pool.probe);
    let hidden = g.linear(w, b, matrix)?;
    let hidden = g.tanh(hidden)?;
    let mut logits = g.matmul(probe, hidden)?;
    if valid_len < len {
        let mask = (0..len).map(|i| if i < valid_len { 0.0 } else { PAD_LOGIT }).collect();
        let mask = g.constant(Tensor::row(mask));
        logits = g.add(logits, mask)?;
    }
    let weights = g.softmax_rows(logits)?;
    let wt = g.transpose(weights)?;
    let vector = g.matmul(matrix, wt)?;
    Ok((vector, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UNK_ID;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn zero_params(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            p.value = Tensor::zeros(p.value.rows(), p.value.cols());
        }
    }

    #[test]
    fn pad_embeds_to_zero_and_unk_to_its_row() {
        let mut store = ParamStore::new();
        let table = EmbeddingTable::new(&mut store, 6, 3, None, &mut rng()).unwrap();
        assert_eq!(table.width(&store), 3);
        let mut g = Graph::new();
        let e = embed(&mut g, &store, &table, &[PAD_ID, UNK_ID]).unwrap();
        assert_eq!(g.value(e).column_values(0), vec![0.0; 3]);
        let unk_row: Vec<f64> = (0..3).map(|j| store.get(table.learned).value.get(UNK_ID, j)).collect();
        assert_eq!(g.value(e).column_values(1), unk_row);
        assert!(embed(&mut g, &store, &table, &[]).is_err());
        assert!(embed(&mut g, &store, &table, &[6]).is_err());
    }

    #[test]
    fn pretrained_rows_stack_above_learned() {
        let mut store = ParamStore::new();
        let glove = Tensor::new(3, 2, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let table = EmbeddingTable::new(&mut store, 3, 1, Some(glove), &mut rng()).unwrap();
        assert_eq!(table.width(&store), 3);
        assert!(!store.get(table.pretrained.unwrap()).trainable);
        let mut g = Graph::new();
        let e = embed(&mut g, &store, &table, &[2]).unwrap();
        let learned = store.get(table.learned).value.get(2, 0);
        assert_eq!(g.value(e).data(), &[3.0, 4.0, learned]);
    }

    #[test]
    fn glove_loader_skips_unknown_and_zero_fills_missing() {
        let vocab = Vocabulary::build([vec!["cat".to_string(), "dog".to_string()]], 1).unwrap();
        let text = "cat 1 2\nzebra 5 5\n";
        let table = load_glove(text.as_bytes(), &vocab, 2).unwrap();
        let cat = vocab.get("cat").unwrap();
        let dog = vocab.get("dog").unwrap();
        assert_eq!(table.get(cat, 1), 2.0);
        assert_eq!((table.get(dog, 0), table.get(dog, 1)), (0.0, 0.0));
        assert!(load_glove("cat 1\n".as_bytes(), &vocab, 2).is_err());
    }

    #[test]
    fn zero_lstm_gives_zero_output() {
        let mut store = ParamStore::new();
        let enc = BiLstmEncoder::new(&mut store, "enc", 3, 4, &mut rng()).unwrap();
        zero_params(&mut store);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(3, 5, 1.0, &mut rng()));
        let out = bilstm_encode(&mut g, &store, &enc, x, 5).unwrap();
        assert_eq!(g.value(out).shape(), [4, 5]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_sequence() {
        let mut store = ParamStore::new();
        let enc = BiLstmEncoder::new(&mut store, "enc", 3, 4, &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(3, 1, 1.0, &mut rng()));
        let out = bilstm_encode(&mut g, &store, &enc, x, 1).unwrap();
        // Both directions see the same single input from a zero state.
        let mut g2 = Graph::new();
        let x2 = g2.constant(g.value(x).clone());
        let proj = lstm_project_inputs(&mut g2, &store, &enc.forward, x2).unwrap();
        let s0 = LstmState::zeros(&mut g2, 2);
        let s1 = lstm_step(&mut g2, &store, &enc.forward, proj, s0).unwrap();
        assert_eq!(&g.value(out).data()[..2], g2.value(s1.h).data());
        assert!(bilstm_encode(&mut g, &store, &enc, x, 0).is_err());
    }

    #[test]
    fn reversed_sequence_swaps_directions_under_mirrored_parameters() {
        let mut store = ParamStore::new();
        let enc = BiLstmEncoder::new(&mut store, "enc", 3, 4, &mut rng()).unwrap();
        let mut mirrored = store.clone();
        for (a, b) in [
            (enc.forward.w_ih, enc.backward.w_ih),
            (enc.forward.w_hh, enc.backward.w_hh),
            (enc.forward.bias, enc.backward.bias),
        ] {
            let va = store.get(a).value.clone();
            let vb = store.get(b).value.clone();
            mirrored.get_mut(a).value = vb;
            mirrored.get_mut(b).value = va;
        }
        let input = Tensor::uniform(3, 4, 1.0, &mut rng());
        let reversed = {
            let mut t = Tensor::zeros(3, 4);
            for r in 0..3 {
                for c in 0..4 {
                    t.set(r, c, input.get(r, 3 - c));
                }
            }
            t
        };
        let mut g = Graph::new();
        let x = g.constant(input);
        let out = bilstm_encode(&mut g, &store, &enc, x, 4).unwrap();
        let mut g2 = Graph::new();
        let xr = g2.constant(reversed);
        let out_r = bilstm_encode(&mut g2, &mirrored, &enc, xr, 4).unwrap();
        for t in 0..4 {
            let a = g.value(out).column_values(t);
            let b = g2.value(out_r).column_values(3 - t);
            for k in 0..2 {
                assert!((a[k] - b[k + 2]).abs() < 1e-12);
                assert!((a[k + 2] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padded_columns_are_zero_and_content_invariant() {
        let mut store = ParamStore::new();
        let enc = BiLstmEncoder::new(&mut store, "enc", 3, 4, &mut rng()).unwrap();
        let pool = SelfAttentionPool::new(&mut store, "pool", 4, &mut rng());
        let mut r = rng();
        let base = Tensor::uniform(3, 5, 1.0, &mut r);
        let mut noisy = base.clone();
        for c in 3..5 {
            for row in 0..3 {
                noisy.set(row, c, r.gen_range(-5.0..5.0));
            }
        }
        let mut pooled = Vec::new();
        for input in [base, noisy] {
            let mut g = Graph::new();
            let x = g.constant(input);
            let m = bilstm_encode(&mut g, &store, &enc, x, 3).unwrap();
            assert!(g.value(m).column_values(4).iter().all(|&v| v == 0.0));
            let (v, w) = self_attend(&mut g, &store, &pool, m, 3).unwrap();
            assert_eq!(&g.value(w).data()[3..], &[0.0, 0.0]);
            pooled.push(g.value(v).clone());
        }
        assert_eq!(pooled[0], pooled[1]);
    }

    #[test]
    fn singleton_attention_returns_the_column() {
        let mut store = ParamStore::new();
        let pool = SelfAttentionPool::new(&mut store, "pool", 3, &mut rng());
        let mut g = Graph::new();
        let m = g.constant(Tensor::column(vec![0.1, -0.2, 0.3]));
        let (v, w) = self_attend(&mut g, &store, &pool, m, 1).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(v).data(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn identical_columns_share_weight() {
        let mut store = ParamStore::new();
        let pool = SelfAttentionPool::new(&mut store, "pool", 2, &mut rng());
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(2, 2, vec![0.4, 0.4, -0.7, -0.7]).unwrap());
        let (_, w) = self_attend(&mut g, &store, &pool, m, 2).unwrap();
        assert_eq!(g.value(w).data(), &[0.5, 0.5]);
    }

    #[test]
    fn pooled_vector_is_weighted_column_sum() {
        let mut store = ParamStore::new();
        let pool = SelfAttentionPool::new(&mut store, "pool", 3, &mut rng());
        let mut g = Graph::new();
        let matrix = Tensor::uniform(3, 4, 1.0, &mut rng());
        let m = g.constant(matrix.clone());
        let (v, w) = self_attend(&mut g, &store, &pool, m, 4).unwrap();

        // Oracle: explicit logits, softmax and weighted sum.
        let p = &store.get(pool.probe).value;
        let wm = &store.get(pool.w).value;
        let b = &store.get(pool.b).value;
        let mut logits = vec![0.0; 4];
        for (c, logit) in logits.iter_mut().enumerate() {
            for i in 0..3 {
                let mut h = b.get(i, 0);
                for j in 0..3 {
                    h += wm.get(i, j) * matrix.get(j, c);
                }
                *logit += p.get(0, i) * h.tanh();
            }
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let weights: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        for (a, b) in g.value(w).data().iter().zip(&weights) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in 0..3 {
            let expected: f64 = (0..4).map(|c| weights[c] * matrix.get(i, c)).sum();
            assert!((g.value(v).get(i, 0) - expected).abs() < 1e-12);
        }
    }
}
