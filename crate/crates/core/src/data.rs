//! Vocabulary, tokenization, dataset files and the synthetic dialog task.
//!
//! Dialog files are VisDial-style JSON. Region features live in a separate
//! little-endian binary file:
//!
//! ```text
//! "RDNF" | u32 version = 1 | u32 image_count
//! per image: u64 image_id | u32 regions | u32 dim | regions * dim f32 (region-major)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const QA_ID: usize = 4;
pub const SPECIALS: [&str; 5] = ["<PAD>", "<UNK>", "<BOS>", "<EOS>", "<QA>"];

pub const FEATURE_MAGIC: &[u8; 4] = b"RDNF";
pub const FEATURE_VERSION: u32 = 1;

pub const DIALOG_FILE: &str = "dialogs.json";
pub const FEATURE_FILE: &str = "features.rdnf";

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            current.push(ch);
            continue;
        }
        if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    min_count: usize,
    words: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_words(r.words, r.min_count)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr { min_count: v.min_count, words: v.words }
    }
}

impl Vocabulary {
    /// Words seen at least `min_count` times get ids after the specials, in
    /// order of first occurrence.
    pub fn build<I, S, W>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = W>,
        W: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::Invalid("min_count must be at least 1".into()));
        }
        let mut order = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for stream in corpus {
            for w in stream {
                let w = w.as_ref();
                match counts.get_mut(w) {
                    Some(c) => *c += 1,
                    None => {
                        counts.insert(w.to_string(), 1);
                        order.push(w.to_string());
                    }
                }
            }
        }
        if order.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(order.into_iter().filter(|w| counts[w] >= min_count && !SPECIALS.contains(&w.as_str())))
            .collect();
        Ok(Self::from_words(words, min_count))
    }

    /// Restores a vocabulary from its id-ordered word list.
    pub fn from_words(words: Vec<String>, min_count: usize) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index, min_count }
    }

    pub fn from_dialogs(file: &DialogFile, min_count: usize) -> Result<Self> {
        let mut streams = Vec::new();
        for d in &file.dialogs {
            streams.push(tokenize(&d.caption));
            for t in &d.dialog {
                streams.push(tokenize(&t.question));
                streams.push(tokenize(&t.answer));
                streams.extend(t.answer_options.iter().map(|o| tokenize(o)));
            }
        }
        Self::build(streams, min_count)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or `<UNK>`.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<UNK>", String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Tokenizes, maps to ids and truncates to `max_len`. Never returns an
    /// empty sequence.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text).iter().take(max_len).map(|w| self.id(w)).collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Maximum token counts kept for captions, questions and answers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub caption: usize,
    pub question: usize,
    pub answer: usize,
}

impl Truncation {
    pub const PAPER: Truncation = Truncation { caption: 40, question: 20, answer: 20 };
    pub const DESK: Truncation = Truncation { caption: 10, question: 10, answer: 10 };

    /// Longest history snippet: question, separator, answer.
    pub fn max_snippet(&self) -> usize {
        self.question + 1 + self.answer
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogFile {
    pub dialogs: Vec<RawDialog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDialog {
    pub image_id: u64,
    pub caption: String,
    pub dialog: Vec<RawTurn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTurn {
    pub question: String,
    pub answer: String,
    pub answer_options: Vec<String>,
    pub gt_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Vec<f64>>,
}

impl DialogFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let offset = byte_offset(text, e.line(), e.column());
            Error::Format(format!("malformed dialog JSON at byte {offset}: {e}"))
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// serde_json reports 1-based lines and columns; column 0 means the error sits
/// at the end of the previous line.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub image_id: u64,
    pub regions: usize,
    pub dim: usize,
    /// Region-major: region `m` occupies `data[m * dim..(m + 1) * dim]`.
    pub data: Vec<f32>,
}

impl FeatureRecord {
    /// `dim × regions` matrix whose column `m` is region `m`.
    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(self.dim, self.regions);
        for m in 0..self.regions {
            for f in 0..self.dim {
                t.set(f, m, self.data[m * self.dim + f] as f64);
            }
        }
        t
    }
}

pub fn write_features(path: impl AsRef<Path>, records: &[FeatureRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        if r.data.len() != r.regions * r.dim {
            return Err(Error::Invalid(format!("image {} has a malformed feature block", r.image_id)));
        }
        buf.extend_from_slice(&r.image_id.to_le_bytes());
        buf.extend_from_slice(&(r.regions as u32).to_le_bytes());
        buf.extend_from_slice(&(r.dim as u32).to_le_bytes());
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_features(&bytes)
}

pub fn parse_features(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut cursor = ByteCursor { bytes, pos: 0 };
    if cursor.take(4)? != FEATURE_MAGIC {
        return Err(Error::Format("feature file magic mismatch (expected RDNF)".into()));
    }
    let version = cursor.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let count = cursor.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let image_id = cursor.u64()?;
        let regions = cursor.u32()? as usize;
        let dim = cursor.u32()? as usize;
        let raw = cursor.take(regions * dim * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("image {image_id} has non-finite features")));
        }
        records.push(FeatureRecord { image_id, regions, dim, data });
    }
    if cursor.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after feature records", bytes.len() - cursor.pos)));
    }
    Ok(records)
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("feature file truncated at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gt: usize,
    pub relevance: Option<Vec<f64>>,
    pub question_text: String,
    pub candidate_texts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialogExample {
    pub image_id: u64,
    /// `n_f × M`, one column per region.
    pub features: Tensor,
    pub caption: Vec<usize>,
    pub turns: Vec<Turn>,
}

impl DialogExample {
    /// Caption followed by `question <QA> answer` for every turn; turn `i`
    /// sees the first `i + 1` snippets.
    pub fn history_snippets(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.turns.len() + 1);
        out.push(self.caption.clone());
        for t in &self.turns {
            let mut s = t.question.clone();
            s.push(QA_ID);
            s.extend_from_slice(&t.answer);
            out.push(s);
        }
        out
    }

    pub fn candidate_count(&self) -> Option<usize> {
        self.turns.first().map(|t| t.candidates.len())
    }
}

/// Tokenizes, truncates and joins dialogs with their region features.
pub fn build_examples(
    file: &DialogFile,
    features: &[FeatureRecord],
    vocab: &Vocabulary,
    trunc: Truncation,
) -> Result<Vec<DialogExample>> {
    let by_id: HashMap<u64, &FeatureRecord> = features.iter().map(|r| (r.image_id, r)).collect();
    let missing: Vec<String> = file
        .dialogs
        .iter()
        .filter(|d| !by_id.contains_key(&d.image_id))
        .map(|d| d.image_id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("no features for image id(s): {}", missing.join(", "))));
    }
    let mut n_candidates = None;
    let mut out = Vec::with_capacity(file.dialogs.len());
    for d in &file.dialogs {
        let mut turns = Vec::with_capacity(d.dialog.len());
        for (i, t) in d.dialog.iter().enumerate() {
            let n = t.answer_options.len();
            let where_ = || format!("image {} turn {}", d.image_id, i + 1);
            if n == 0 {
                return Err(Error::Data(format!("{}: no answer options", where_())));
            }
            if *n_candidates.get_or_insert(n) != n {
                return Err(Error::Data(format!("{}: {n} answer options, expected {}", where_(), n_candidates.unwrap())));
            }
            if t.gt_index >= n {
                return Err(Error::Data(format!("{}: gt_index {} out of range", where_(), t.gt_index)));
            }
            if let Some(rel) = &t.relevance {
                if rel.len() != n {
                    return Err(Error::Data(format!("{}: relevance has {} entries for {n} options", where_(), rel.len())));
                }
            }
            turns.push(Turn {
                question: vocab.encode(&t.question, trunc.question),
                answer: vocab.encode(&t.answer, trunc.answer),
                candidates: t.answer_options.iter().map(|o| vocab.encode(o, trunc.answer)).collect(),
                gt: t.gt_index,
                relevance: t.relevance.clone(),
                question_text: t.question.clone(),
                candidate_texts: t.answer_options.clone(),
            });
        }
        out.push(DialogExample {
            image_id: d.image_id,
            features: by_id[&d.image_id].to_tensor(),
            caption: vocab.encode(&d.caption, trunc.caption),
            turns,
        });
    }
    Ok(out)
}

pub fn load_dataset(
    dialog_path: impl AsRef<Path>,
    feature_path: impl AsRef<Path>,
    vocab: &Vocabulary,
    trunc: Truncation,
) -> Result<Vec<DialogExample>> {
    let file = DialogFile::read(dialog_path)?;
    let features = read_features(feature_path)?;
    build_examples(&file, &features, vocab, trunc)
}

pub const OBJECTS: [&str; 6] = ["cube", "ball", "cone", "ring", "star", "box"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "white", "black"];
pub const NAMES: [&str; 8] = ["bob", "ann", "max", "kim", "tom", "eve", "sam", "liz"];
/// Answers to naming turns; the first is always correct.
pub const ACKS: [&str; 6] = ["ok", "yes", "sure", "no", "maybe", "never"];
const ACK_RELEVANCE: [f64; 6] = [1.0, 0.5, 0.5, 0.0, 0.0, 0.0];
const FEATURE_NOISE: f32 = 0.2;

/// Sizes for the synthetic naming-and-color task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub dialogs: usize,
    pub regions: usize,
    pub candidates: usize,
    pub turns: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn desk(dialogs: usize, seed: u64) -> Self {
        Self { dialogs, regions: 4, candidates: 5, turns: 10, seed }
    }

    pub fn feature_dim(&self) -> usize {
        OBJECTS.len() + COLORS.len()
    }
}

/// Generates dialogs about images of colored objects.
///
/// Each region carries a one-hot object and a one-hot color (plus bounded
/// noise). Half of the turns give an object a name ("call the cube bob"),
/// the other half ask the color of a previously named object ("what color is
/// bob"), so the answer depends on one history snippet and one image region.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DialogFile, Vec<FeatureRecord>)> {
    if spec.dialogs == 0 || spec.regions == 0 || spec.candidates == 0 || spec.turns == 0 {
        return Err(Error::Invalid("synthetic sizes must be at least 1".into()));
    }
    if spec.regions > OBJECTS.len() || spec.candidates > COLORS.len().min(ACKS.len()) {
        return Err(Error::Invalid(format!(
            "synthetic task supports at most {} regions and {} candidates",
            OBJECTS.len(),
            COLORS.len().min(ACKS.len())
        )));
    }
    let intros = spec.turns.div_ceil(2).min(NAMES.len());
    let queries = (spec.turns - intros).min(intros);
    if intros + queries != spec.turns {
        return Err(Error::Invalid(format!("synthetic task supports at most {} turns", 2 * NAMES.len())));
    }
    let dim = spec.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut dialogs = Vec::with_capacity(spec.dialogs);
    let mut records = Vec::with_capacity(spec.dialogs);
    for i in 0..spec.dialogs {
        let image_id = 1000 + i as u64;
        let mut objects: Vec<usize> = (0..OBJECTS.len()).collect();
        objects.shuffle(&mut rng);
        objects.truncate(spec.regions);
        let colors: Vec<usize> = (0..spec.regions).map(|_| rng.gen_range(0..COLORS.len())).collect();

        let mut data = Vec::with_capacity(spec.regions * dim);
        for m in 0..spec.regions {
            for f in 0..dim {
                let hot = f == objects[m] || f == OBJECTS.len() + colors[m];
                let noise = rng.gen_range(-FEATURE_NOISE..=FEATURE_NOISE);
                data.push(if hot { 1.0 } else { 0.0 } + noise);
            }
        }
        records.push(FeatureRecord { image_id, regions: spec.regions, dim, data });

        let mut names: Vec<usize> = (0..NAMES.len()).collect();
        names.shuffle(&mut rng);
        names.truncate(intros);
        let mut next_name = 0;
        let mut pending: Vec<(usize, usize)> = Vec::new();
        let mut turns = Vec::with_capacity(spec.turns);
        let mut queries_left = queries;
        for _ in 0..spec.turns {
            let intros_left = intros - next_name;
            let do_intro = pending.is_empty() || (intros_left > 0 && queries_left > 0 && rng.gen_bool(0.5)) || queries_left == 0;
            if do_intro {
                let name = names[next_name];
                next_name += 1;
                let region = rng.gen_range(0..spec.regions);
                pending.push((name, region));
                turns.push(candidate_turn(
                    format!("call the {} {}", OBJECTS[objects[region]], NAMES[name]),
                    0,
                    &ACKS,
                    Some(&ACK_RELEVANCE),
                    spec.candidates,
                    &mut rng,
                ));
            } else {
                let (name, region) = pending.swap_remove(rng.gen_range(0..pending.len()));
                queries_left -= 1;
                turns.push(candidate_turn(
                    format!("what color is {}", NAMES[name]),
                    colors[region],
                    &COLORS,
                    None,
                    spec.candidates,
                    &mut rng,
                ));
            }
        }
        dialogs.push(RawDialog { image_id, caption: "a photo of some things on a table".into(), dialog: turns });
    }
    Ok((DialogFile { dialogs }, records))
}

/// Picks `n - 1` distractors uniformly from `pool` and places the answer at a
/// uniformly random position.
fn candidate_turn(
    question: String,
    answer: usize,
    pool: &[&str],
    relevance: Option<&[f64]>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> RawTurn {
    let mut others: Vec<usize> = (0..pool.len()).filter(|&i| i != answer).collect();
    others.shuffle(rng);
    let mut options: Vec<usize> = std::iter::once(answer).chain(others.into_iter().take(n - 1)).collect();
    options.shuffle(rng);
    let gt_index = options.iter().position(|&o| o == answer).unwrap();
    let relevance = options
        .iter()
        .map(|&o| match relevance {
            Some(r) => r[o],
            None if o == answer => 1.0,
            None => 0.0,
        })
        .collect();
    RawTurn {
        question,
        answer: pool[answer].to_string(),
        answer_options: options.iter().map(|&o| pool[o].to_string()).collect(),
        gt_index,
        relevance: Some(relevance),
    }
}

/// Writes `dialogs.json` and `features.rdnf` under `dir`.
pub fn write_synthetic(dir: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (dialogs, features) = generate_synthetic(spec)?;
    dialogs.write(dir.join(DIALOG_FILE))?;
    write_features(dir.join(FEATURE_FILE), &features)
}

/// Reads `dialogs.json` and `features.rdnf` from a data directory.
pub fn read_data_dir(dir: impl AsRef<Path>) -> Result<(DialogFile, Vec<FeatureRecord>)> {
    let dir = dir.as_ref();
    Ok((DialogFile::read(dir.join(DIALOG_FILE))?, read_features(dir.join(FEATURE_FILE))?))
}

/// Answers a synthetic turn by reading the task's generating rule back out
/// of the text and features. Returns the chosen candidate index.
pub fn synthetic_rule_answer(dialog: &RawDialog, features: &FeatureRecord, turn: usize) -> Option<usize> {
    let t = &dialog.dialog[turn];
    let q = tokenize(&t.question);
    let answer = if q.first().map(String::as_str) == Some("call") {
        ACKS[0].to_string()
    } else {
        let name = q.last()?;
        let object = dialog.dialog[..turn].iter().find_map(|h| {
            let h = tokenize(&h.question);
            (h.first().map(String::as_str) == Some("call") && h.last() == Some(name)).then(|| h[2].clone())
        })?;
        let obj_dim = OBJECTS.iter().position(|o| *o == object)?;
        let region = (0..features.regions).max_by(|&a, &b| {
            let fa = features.data[a * features.dim + obj_dim];
            let fb = features.data[b * features.dim + obj_dim];
            fa.total_cmp(&fb)
        })?;
        let row = &features.data[region * features.dim..(region + 1) * features.dim];
        let color = (0..COLORS.len()).max_by(|&a, &b| row[OBJECTS.len() + a].total_cmp(&row[OBJECTS.len() + b]))?;
        COLORS[color].to_string()
    };
    t.answer_options.iter().position(|o| *o == answer)
}
