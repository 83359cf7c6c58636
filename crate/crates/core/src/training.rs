//! Optimization: Adam, the learning-rate schedule, the epoch loop with early
//! stopping, and evaluation into ranking tables.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{DialogExample, Vocabulary};
use crate::model::ReDan;
use crate::params::ParamStore;
use crate::ranking::{metrics, Metrics, RankingRow, RankingTable};
use crate::tensor::{Dropout, Graph, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Dialogs per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    /// The rate halves after every this many epochs.
    pub lr_halving_period: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Global gradient norm cap.
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn paper(seed: u64) -> Self {
        Self {
            batch_size: 100,
            max_epochs: 20,
            lr: 4e-4,
            lr_halving_period: 10,
            dropout: 0.2,
            seed,
            patience: 5,
            clip_norm: 5.0,
        }
    }

    pub fn desk(seed: u64) -> Self {
        Self { batch_size: 4, ..Self::paper(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(format!("train config: {what}")));
        if self.batch_size == 0 || self.max_epochs == 0 || self.lr_halving_period == 0 {
            return bad("batch size, epochs and halving period must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let halvings = epoch.saturating_sub(1) / self.lr_halving_period;
        self.lr / 2f64.powi(halvings as i32)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; `None` means
    /// a zero gradient. Frozen parameters are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Invalid(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            let p = store.get(id);
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::Invalid(format!("gradient shape {:?} for {}", g.shape(), p.name)));
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.as_ref().map_or(0.0, |g| g.data()[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in grads.iter_mut().flatten().flat_map(|g| g.data_mut()) {
            *v *= scale;
        }
    }
    norm
}

/// Loss sum, turn count and parameter gradients of one dialog.
fn dialog_gradients(model: &ReDan, example: &DialogExample, dropout: &mut Dropout) -> Result<(f64, usize, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let (loss, turns) = model.dialog_loss(&mut g, example, usize::MAX, dropout)?;
    g.backward(loss)?;
    let mut grads = vec![None; model.store.len()];
    for (id, grad) in g.param_grads() {
        grads[id.index()] = Some(grad.clone());
    }
    Ok((g.value(loss).data()[0], turns, grads))
}

#[cfg(feature = "parallel")]
fn map_ordered<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_ordered<T, U>(items: &[T], f: impl Fn(usize, &T) -> U) -> Vec<U> {
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Scores every turn of every dialog, in input order.
pub fn evaluate(model: &ReDan, examples: &[DialogExample]) -> Result<RankingTable> {
    let per_dialog = map_ordered(examples, |_, ex| -> Result<Vec<RankingRow>> {
        model
            .evaluate_dialog(ex)?
            .into_iter()
            .zip(&ex.turns)
            .enumerate()
            .map(|(i, (res, turn))| RankingRow::from_scores(ex.image_id, i, res.scores, turn.gt, turn.relevance.clone()))
            .collect()
    });
    let mut rows = Vec::new();
    for r in per_dialog {
        rows.extend(r?);
    }
    RankingTable::new(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-turn training loss over the epoch.
    pub train_loss: f64,
    pub val: Metrics,
    pub improved: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation score.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Trains `model` in place and returns the best-validation checkpoint.
///
/// `on_epoch` sees every record as it is produced and may stop training by
/// returning `ControlFlow::Break`.
pub fn train(
    mut model: ReDan,
    vocab: &Vocabulary,
    train_set: &[DialogExample],
    val_set: &[DialogExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    let mut adam = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut turn_sum) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = map_ordered(batch, |_, &idx| {
                // One mask stream per (epoch, dialog) keeps parallel runs reproducible.
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(((epoch as u64) << 32) | idx as u64);
                let mut dropout = Dropout::On { p: cfg.dropout, rng };
                dialog_gradients(&model, &train_set[idx], &mut dropout)
            });
            let mut grads: Vec<Option<Tensor>> = vec![None; model.store.len()];
            let (mut batch_loss, mut batch_turns) = (0.0, 0usize);
            for r in results {
                let (loss, turns, gs) = r?;
                batch_loss += loss;
                batch_turns += turns;
                for (acc, g) in grads.iter_mut().zip(gs) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            let scale = 1.0 / batch_turns.max(1) as f64;
            grads.iter_mut().flatten().flat_map(|g| g.data_mut()).for_each(|v| *v *= scale);
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut model.store, &grads, lr)?;
            loss_sum += batch_loss;
            turn_sum += batch_turns;
        }

        let val = metrics(&evaluate(&model, val_set)?)?;
        let score = val.selection_score();
        let improved = best.as_ref().map_or(true, |b| score > b.val_metric.unwrap_or(f64::NEG_INFINITY));
        if improved {
            stale = 0;
            best = Some(Checkpoint { model: model.clone(), vocab: vocab.clone(), epoch, val_metric: Some(score) });
        } else {
            stale += 1;
        }
        let record = EpochRecord { epoch, lr, train_loss: loss_sum / turn_sum.max(1) as f64, val, improved };
        let flow = on_epoch(&record);
        history.push(record);
        if flow.is_break() || stale > cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome { checkpoint: best.expect("at least one epoch ran"), history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_examples, generate_synthetic, SyntheticSpec, Truncation};
    use crate::model::{DecoderKind, ModelConfig};

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x), true);
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = scalar_store(1.5);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[Some(Tensor::scalar(0.0))], 0.1).unwrap();
        adam.step(&mut s, &[None], 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e4] {
            let mut s = scalar_store(0.0);
            let mut adam = Adam::new(&s);
            adam.step(&mut s, &[Some(Tensor::scalar(g))], 1e-3).unwrap();
            let x = s.iter().next().unwrap().1.value.data()[0];
            assert!((x + 1e-3 * g.signum()).abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn quadratic_descent_matches_reference_adam() {
        // Independent transcription of the textbook update for f(x) = (x - 3)^2.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (0.0f64, 0.0, 0.0);
        let mut reference = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
            reference.push(x);
        }
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s);
        for want in reference {
            let x = s.iter().next().unwrap().1.value.data()[0];
            adam.step(&mut s, &[Some(Tensor::scalar(2.0 * (x - 3.0)))], lr).unwrap();
            let got = s.iter().next().unwrap().1.value.data()[0];
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s);
        let err = adam.step(&mut s, &[Some(Tensor::scalar(f64::NAN))], 0.1).unwrap_err();
        assert!(err.to_string().contains('x'));
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "x"));
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut s = ParamStore::new();
        s.add("frozen", Tensor::scalar(2.0), false);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[Some(Tensor::scalar(1.0))], 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 2.0);
    }

    #[test]
    fn halving_schedule() {
        let cfg = TrainConfig::paper(0);
        assert_eq!(cfg.learning_rate(1), 4e-4);
        assert_eq!(cfg.learning_rate(10), 4e-4);
        assert_eq!(cfg.learning_rate(11), 2e-4);
        assert_eq!(cfg.learning_rate(21), 1e-4);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Some(Tensor::column(vec![3.0, 0.0])), None, Some(Tensor::scalar(4.0))];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Some(Tensor::scalar(0.5))];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data()[0], 0.5);
    }

    fn tiny() -> (Vocabulary, Vec<DialogExample>) {
        let (file, feats) = generate_synthetic(&SyntheticSpec::desk(4, 2)).unwrap();
        let vocab = Vocabulary::from_dialogs(&file, 1).unwrap();
        let ex = build_examples(&file, &feats, &vocab, Truncation::DESK).unwrap();
        (vocab, ex)
    }

    #[test]
    fn patience_zero_stops_after_first_stale_epoch() {
        let (vocab, ex) = tiny();
        let model = ReDan::new(ModelConfig::desk(vocab.len(), 12, DecoderKind::Discriminative), None, 1).unwrap();
        // A zero learning rate never improves after epoch 1.
        let cfg = TrainConfig { lr: 1e-300, patience: 0, max_epochs: 10, ..TrainConfig::desk(1) };
        let out = train(model, &vocab, &ex, &ex, &cfg, |_| ControlFlow::Continue(())).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.history[0].improved && !out.history[1].improved);
        assert_eq!(out.checkpoint.epoch, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let (vocab, ex) = tiny();
        let run = || {
            let model = ReDan::new(ModelConfig::desk(vocab.len(), 12, DecoderKind::Generative), None, 4).unwrap();
            let cfg = TrainConfig { max_epochs: 2, ..TrainConfig::desk(7) };
            let out = train(model, &vocab, &ex, &ex, &cfg, |_| ControlFlow::Continue(())).unwrap();
            (out.history.iter().map(|r| r.train_loss).collect::<Vec<_>>(), out.checkpoint.model.store)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_keeps_dialog_order() {
        let (vocab, ex) = tiny();
        let model = ReDan::new(ModelConfig::desk(vocab.len(), 12, DecoderKind::Discriminative), None, 1).unwrap();
        let table = evaluate(&model, &ex).unwrap();
        assert_eq!(table.len(), 40);
        let ids: Vec<u64> = table.rows.iter().step_by(10).map(|r| r.dialog_id).collect();
        assert_eq!(ids, ex.iter().map(|e| e.image_id).collect::<Vec<_>>());
        assert!(table.has_relevance());
    }

    #[test]
    fn empty_sets_and_bad_configs_fail() {
        let (vocab, ex) = tiny();
        let model = ReDan::new(ModelConfig::desk(vocab.len(), 12, DecoderKind::Discriminative), None, 1).unwrap();
        let go = |_: &EpochRecord| ControlFlow::Continue(());
        assert!(train(model.clone(), &vocab, &[], &ex, &TrainConfig::desk(0), go).is_err());
        let cfg = TrainConfig { dropout: 1.0, ..TrainConfig::desk(0) };
        assert!(train(model, &vocab, &ex, &ex, &cfg, go).is_err());
    }
}
