//! Browser bindings. Each export takes and returns JSON strings; the plain
//! functions underneath are what the native tests exercise.

use std::ops::ControlFlow;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use redan::data::{build_examples, generate_synthetic, SyntheticSpec, Vocabulary};
use redan::model::{DecoderKind, ModelConfig, ReDan};
use redan::ranking::{aggregate_average, aggregate_reciprocal, metrics, Metrics, RankingTable};
use redan::trace::{trace_dialog, DialogTrace};
use redan::training::{evaluate, train, TrainConfig};

#[derive(Serialize)]
pub struct TraceDemo {
    pub epochs: Vec<f64>,
    pub metrics: Metrics,
    pub dialog: Vec<(String, String)>,
    pub trace: DialogTrace,
}

/// Trains a small model on synthetic dialogs for `epochs` epochs and traces
/// the first dialog. `epochs` = 0 traces the untrained model.
pub fn trace_demo(seed: u64, steps: usize, epochs: usize) -> Result<TraceDemo, String> {
    if steps == 0 || steps > 5 {
        return Err("steps must be between 1 and 5".into());
    }
    let spec = SyntheticSpec::desk(8, seed);
    let (file, features) = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::from_dialogs(&file, 1).map_err(|e| e.to_string())?;
    let mut config = ModelConfig::desk(vocab.len(), spec.feature_dim(), DecoderKind::Discriminative);
    config.steps = steps;
    let examples = build_examples(&file, &features, &vocab, config.truncation).map_err(|e| e.to_string())?;
    let mut model = ReDan::new(config, None, seed).map_err(|e| e.to_string())?;
    let mut losses = Vec::new();
    if epochs > 0 {
        let mut cfg = TrainConfig::desk(seed);
        cfg.max_epochs = epochs;
        cfg.patience = epochs;
        cfg.lr = 5e-3;
        cfg.lr_halving_period = epochs.max(1);
        let outcome = train(model, &vocab, &examples, &examples, &cfg, |r| {
            losses.push(r.train_loss);
            ControlFlow::Continue(())
        })
        .map_err(|e| e.to_string())?;
        model = outcome.checkpoint.model;
    }
    let table = evaluate(&model, &examples).map_err(|e| e.to_string())?;
    let trace = trace_dialog(&model, &examples[0]).map_err(|e| e.to_string())?;
    let d = &file.dialogs[0];
    let mut dialog = vec![("caption".to_string(), d.caption.clone())];
    dialog.extend(d.dialog.iter().map(|t| (t.question.clone(), t.answer.clone())));
    Ok(TraceDemo { epochs: losses, metrics: metrics(&table).map_err(|e| e.to_string())?, dialog, trace })
}

#[derive(Serialize)]
pub struct Fused {
    pub jsonl: String,
    pub metrics: Metrics,
}

/// Fuses ranking tables given as JSON Lines text.
pub fn fuse(method: &str, tables: &[String]) -> Result<Fused, String> {
    let parsed = tables
        .iter()
        .map(|t| RankingTable::parse_jsonl(t))
        .collect::<redan::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let refs: Vec<&RankingTable> = parsed.iter().collect();
    let fused = match method {
        "average" => aggregate_average(&refs),
        "reciprocal" => aggregate_reciprocal(&refs),
        other => return Err(format!("unknown method {other:?}")),
    }
    .map_err(|e| e.to_string())?;
    Ok(Fused { jsonl: fused.to_jsonl(), metrics: metrics(&fused).map_err(|e| e.to_string())? })
}

/// Metrics of one ranking table.
pub fn table_metrics(jsonl: &str) -> Result<Metrics, String> {
    let table = RankingTable::parse_jsonl(jsonl).map_err(|e| e.to_string())?;
    metrics(&table).map_err(|e| e.to_string())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = traceDemo)]
pub fn trace_demo_js(seed: u32, steps: u32, epochs: u32) -> Result<String, JsError> {
    to_js(trace_demo(seed as u64, steps as usize, epochs as usize))
}

#[wasm_bindgen(js_name = fuseRankings)]
pub fn fuse_js(method: &str, tables: Vec<String>) -> Result<String, JsError> {
    to_js(fuse(method, &tables))
}

#[wasm_bindgen(js_name = tableMetrics)]
pub fn table_metrics_js(jsonl: &str) -> Result<String, JsError> {
    to_js(table_metrics(jsonl))
}
