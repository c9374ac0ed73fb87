//! Dataset records, JSONL storage, a toy tokenizer, batching, and the
//! synthetic generator.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use dmlf_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{DmlfError, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// One line of a `{split}.jsonl` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub tokens: Vec<usize>,
    pub audio: Vec<Vec<f32>>,
    pub vision: Vec<Vec<f32>>,
    pub label: f32,
}

/// Contents of `meta.json`, shared by all splits in a directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub d_a_in: usize,
    pub d_v_in: usize,
    pub l_av: usize,
    pub l_t_max: usize,
    pub label_min: f32,
    pub label_max: f32,
    /// Word for each token id.
    pub vocab: Vec<String>,
}

impl DatasetMeta {
    /// Rejects a model whose input widths, AV length, vocabulary or
    /// positional range cannot take this dataset.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        let av = &cfg.av;
        let mut problems = Vec::new();
        if (self.d_a_in, self.d_v_in) != (av.d_a_in, av.d_v_in) {
            problems.push(format!(
                "feature widths ({}, {}) vs model ({}, {})",
                self.d_a_in, self.d_v_in, av.d_a_in, av.d_v_in
            ));
        }
        if self.l_av != av.l_av {
            problems.push(format!("l_av {} vs model {}", self.l_av, av.l_av));
        }
        if self.vocab.len() > cfg.mlm.vocab_size {
            problems.push(format!("{} words vs vocab_size {}", self.vocab.len(), cfg.mlm.vocab_size));
        }
        if self.l_t_max > cfg.mlm.max_len {
            problems.push(format!("l_t_max {} vs max_len {}", self.l_t_max, cfg.mlm.max_len));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DmlfError::Config(format!("dataset does not fit the model: {}", problems.join("; "))))
        }
    }
}

/// Word-level vocabulary. Unknown words map to `unk`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    unk: usize,
}

impl Vocab {
    /// Builds from words listed in id order; `unk_word` must be among them.
    pub fn from_words(words: Vec<String>, unk_word: &str) -> Result<Self> {
        let mut ids = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if ids.insert(w.clone(), i).is_some() {
                return Err(DmlfError::Data(format!("duplicate vocabulary word '{w}'")));
            }
        }
        let unk = *ids
            .get(unk_word)
            .ok_or_else(|| DmlfError::Data(format!("vocabulary lacks '{unk_word}'")))?;
        Ok(Self { words, ids, unk })
    }

    /// Explicit word -> id pairs; ids need not be contiguous.
    pub fn from_pairs(pairs: &[(&str, usize)], unk: usize) -> Result<Self> {
        let size = pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0).max(unk + 1);
        let mut words = vec![String::new(); size];
        let mut ids = HashMap::new();
        for &(w, i) in pairs {
            if ids.insert(w.to_string(), i).is_some() {
                return Err(DmlfError::Data(format!("duplicate vocabulary word '{w}'")));
            }
            words[i] = w.to_string();
        }
        Ok(Self { words, ids, unk })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// `<pad>` = 0, `<unk>` = 1, then every distinct word of `corpus` in sorted order.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocab {
    let mut seen: Vec<&str> = corpus.into_iter().flat_map(str::split_whitespace).collect();
    seen.sort_unstable();
    seen.dedup();
    let words = [PAD, UNK]
        .into_iter()
        .chain(seen.into_iter().filter(|w| *w != PAD && *w != UNK))
        .map(String::from)
        .collect();
    Vocab::from_words(words, UNK).expect("specials are present and unique")
}

pub fn tokenize_toy(text: &str, vocab: &Vocab) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| vocab.id(w).unwrap_or(vocab.unk()))
        .collect()
}

pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&i| vocab.word(i).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_meta(dir: &Path, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(dir.join("meta.json"), text)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let text = fs::read_to_string(dir.join("meta.json"))?;
    serde_json::from_str(&text).map_err(|e| DmlfError::Data(format!("meta.json: {e}")))
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| DmlfError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// A record turned into model inputs, aligned to the dataset's `L_av`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<usize>,
    pub audio: Tensor,
    pub vision: Tensor,
    pub label: f32,
}

fn align_frames(frames: &[Vec<f32>], width: usize, l_av: usize, what: &str, id: &str) -> Result<Tensor> {
    let mut data = vec![0.0; l_av * width];
    for (t, f) in frames.iter().take(l_av).enumerate() {
        if f.len() != width {
            return Err(DmlfError::Data(format!(
                "record {id}: {what} frame {t} has {} features, expected {width}",
                f.len()
            )));
        }
        data[t * width..(t + 1) * width].copy_from_slice(f);
    }
    Ok(Tensor::new(vec![l_av, width], data)?)
}

impl Sample {
    /// Validates a record against `meta`, truncating or zero-padding AV frames
    /// to `l_av` and truncating tokens to `l_t_max`.
    pub fn from_record(rec: &Record, meta: &DatasetMeta) -> Result<Self> {
        if rec.audio.len() != rec.vision.len() {
            return Err(DmlfError::Alignment(format!(
                "record {}: audio has {} frames, vision {}",
                rec.id,
                rec.audio.len(),
                rec.vision.len()
            )));
        }
        if rec.tokens.is_empty() {
            return Err(DmlfError::Data(format!("record {}: no tokens", rec.id)));
        }
        if let Some(&bad) = rec.tokens.iter().find(|&&t| t >= meta.vocab.len()) {
            return Err(DmlfError::Vocabulary {
                id: bad,
                vocab_size: meta.vocab.len(),
            });
        }
        if !(meta.label_min..=meta.label_max).contains(&rec.label) {
            return Err(DmlfError::Data(format!(
                "record {}: label {} outside [{}, {}]",
                rec.id, rec.label, meta.label_min, meta.label_max
            )));
        }
        let mut tokens = rec.tokens.clone();
        if tokens.len() > meta.l_t_max {
            log::warn!("record {}: truncating {} tokens to {}", rec.id, tokens.len(), meta.l_t_max);
            tokens.truncate(meta.l_t_max);
        }
        Ok(Self {
            id: rec.id.clone(),
            tokens,
            audio: align_frames(&rec.audio, meta.d_a_in, meta.l_av, "audio", &rec.id)?,
            vision: align_frames(&rec.vision, meta.d_v_in, meta.l_av, "vision", &rec.id)?,
            label: rec.label,
        })
    }
}

/// A split loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Reads `{dir}/{split}.jsonl` with `{dir}/meta.json`.
    pub fn load(dir: &Path, split: &str) -> Result<Self> {
        let meta = read_meta(dir)?;
        let records = read_records(&dir.join(format!("{split}.jsonl")))?;
        let samples = records
            .iter()
            .map(|r| Sample::from_record(r, &meta))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta, samples })
    }

    pub fn labels(&self) -> Vec<f32> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Padded token ids and masks for one batch; `indices` point into the sample list.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    /// `true` for real tokens, `false` for padding.
    pub pad_mask: Vec<Vec<bool>>,
    pub labels: Vec<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Real tokens of row `i`.
    pub fn unpadded(&self, i: usize) -> &[usize] {
        let n = self.pad_mask[i].iter().filter(|v| **v).count();
        &self.tokens[i][..n]
    }
}

/// Splits `samples` into batches, padding each to its longest member with id 0.
/// With `shuffle_seed`, the order is a seeded permutation; otherwise file order.
pub fn make_batches(samples: &[Sample], batch_size: usize, l_t_max: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(DmlfError::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    let mut out = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let lens: Vec<usize> = chunk
            .iter()
            .map(|&i| {
                let s = &samples[i];
                if s.tokens.len() > l_t_max {
                    log::warn!("sample {}: truncating {} tokens to {l_t_max}", s.id, s.tokens.len());
                }
                s.tokens.len().min(l_t_max)
            })
            .collect();
        let width = lens.iter().copied().max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(chunk.len());
        let mut pad_mask = Vec::with_capacity(chunk.len());
        for (&i, &n) in chunk.iter().zip(&lens) {
            let mut row = samples[i].tokens[..n].to_vec();
            row.resize(width, 0);
            tokens.push(row);
            pad_mask.push((0..width).map(|t| t < n).collect());
        }
        out.push(Batch {
            indices: chunk.to_vec(),
            tokens,
            pad_mask,
            labels: chunk.iter().map(|&i| samples[i].label).collect(),
        });
    }
    Ok(out)
}

/// Parameters of the synthetic generator.
///
/// `label = clip(scale * (w_t * s_t + w_av * s_av) + noise * N(0, 1), ±scale)`
/// with `s_t = (#positive - #negative) / L_t` and `s_av` the mean over time of
/// audio channel `av_channel`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub w_t: f32,
    pub w_av: f32,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_neutral: usize,
    /// Chance that a token carries sentiment at all.
    pub sentiment_rate: f32,
    pub l_t_min: usize,
    pub l_t_max: usize,
    pub d_a_in: usize,
    pub d_v_in: usize,
    pub l_av: usize,
    pub av_channel: usize,
    /// Per-frame spread of the designated channel around its sample mean.
    pub frame_noise: f32,
    pub noise: f32,
    pub scale: f32,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            w_t: 0.5,
            w_av: 0.5,
            n_positive: 6,
            n_negative: 6,
            n_neutral: 12,
            sentiment_rate: 0.8,
            l_t_min: 4,
            l_t_max: 10,
            d_a_in: 6,
            d_v_in: 6,
            l_av: 8,
            av_channel: 0,
            frame_noise: 0.25,
            noise: 0.1,
            scale: 3.0,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DmlfError::Config(format!("synthetic spec: {m}")));
        if !(self.w_t >= 0.0 && self.w_av >= 0.0) || (self.w_t + self.w_av - 1.0).abs() > 1e-6 {
            return bad("need w_t, w_av >= 0 with w_t + w_av = 1");
        }
        if self.l_t_min == 0 || self.l_t_min > self.l_t_max {
            return bad("need 1 <= l_t_min <= l_t_max");
        }
        if self.l_av == 0 || self.d_a_in == 0 || self.d_v_in == 0 || self.av_channel >= self.d_a_in {
            return bad("AV dims must be positive and av_channel < d_a_in");
        }
        if self.n_positive == 0 || self.n_negative == 0 {
            return bad("need at least one positive and one negative word");
        }
        if !(0.0..=1.0).contains(&self.sentiment_rate) || !(self.noise >= 0.0) || !(self.frame_noise >= 0.0) {
            return bad("sentiment_rate in [0, 1], noise levels >= 0");
        }
        if !(self.scale > 0.0) || self.n_train == 0 {
            return bad("scale and n_train must be positive");
        }
        Ok(())
    }

    /// `<pad>`, `<unk>`, then positive, negative and neutral words.
    pub fn vocab(&self) -> Vocab {
        let words = [PAD.to_string(), UNK.to_string()]
            .into_iter()
            .chain((0..self.n_positive).map(|i| format!("pos{i}")))
            .chain((0..self.n_negative).map(|i| format!("neg{i}")))
            .chain((0..self.n_neutral).map(|i| format!("neu{i}")))
            .collect();
        Vocab::from_words(words, UNK).expect("generated words are unique")
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            d_a_in: self.d_a_in,
            d_v_in: self.d_v_in,
            l_av: self.l_av,
            l_t_max: self.l_t_max,
            label_min: -self.scale,
            label_max: self.scale,
            vocab: self.vocab().words().to_vec(),
        }
    }
}

/// The two latent signals behind a synthetic label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Signals {
    pub s_t: f32,
    pub s_av: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplit {
    pub records: Vec<Record>,
    pub signals: Vec<Signals>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub meta: DatasetMeta,
    pub train: SyntheticSplit,
    pub val: SyntheticSplit,
    pub test: SyntheticSplit,
}

impl SyntheticData {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_meta(dir, &self.meta)?;
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            write_records(&dir.join(format!("{name}.jsonl")), &split.records)?;
        }
        Ok(())
    }

    pub fn samples(&self, split: &SyntheticSplit) -> Result<Vec<Sample>> {
        split.records.iter().map(|r| Sample::from_record(r, &self.meta)).collect()
    }
}

/// `s_t` recomputed from token ids under the generator's vocabulary layout.
pub fn text_signal(tokens: &[usize], spec: &SyntheticSpec) -> f32 {
    let pos = 2..2 + spec.n_positive;
    let neg = pos.end..pos.end + spec.n_negative;
    let score: i64 = tokens
        .iter()
        .map(|t| i64::from(pos.contains(t)) - i64::from(neg.contains(t)))
        .sum();
    score as f32 / tokens.len() as f32
}

/// `s_av` recomputed from audio frames.
pub fn av_signal(audio: &[Vec<f32>], channel: usize) -> f32 {
    let sum: f64 = audio.iter().map(|f| f64::from(f[channel])).sum();
    (sum / audio.len() as f64) as f32
}

fn generate_split(spec: &SyntheticSpec, name: &str, n: usize, rng: &mut Rng) -> SyntheticSplit {
    let neutral0 = 2 + spec.n_positive + spec.n_negative;
    let mut records = Vec::with_capacity(n);
    let mut signals = Vec::with_capacity(n);
    for i in 0..n {
        let polarity = 2.0 * rng.uniform() - 1.0;
        let len = spec.l_t_min + rng.below(spec.l_t_max - spec.l_t_min + 1);
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let tok = if rng.uniform() < spec.sentiment_rate {
                if rng.uniform() < (1.0 + polarity) / 2.0 {
                    2 + rng.below(spec.n_positive)
                } else {
                    2 + spec.n_positive + rng.below(spec.n_negative)
                }
            } else if spec.n_neutral > 0 {
                neutral0 + rng.below(spec.n_neutral)
            } else {
                1
            };
            tokens.push(tok);
        }
        let centre = 2.0 * rng.uniform() - 1.0;
        let mut audio = Vec::with_capacity(spec.l_av);
        for _ in 0..spec.l_av {
            let frame: Vec<f32> = (0..spec.d_a_in)
                .map(|c| {
                    if c == spec.av_channel {
                        centre + spec.frame_noise * rng.normal()
                    } else {
                        rng.normal()
                    }
                })
                .collect();
            audio.push(frame);
        }
        let vision: Vec<Vec<f32>> = (0..spec.l_av)
            .map(|_| (0..spec.d_v_in).map(|_| rng.normal()).collect())
            .collect();
        let s_t = text_signal(&tokens, spec);
        let s_av = av_signal(&audio, spec.av_channel);
        let clean = spec.scale * (spec.w_t * s_t + spec.w_av * s_av);
        let label = (clean + spec.noise * rng.normal()).clamp(-spec.scale, spec.scale);
        records.push(Record {
            id: format!("{name}-{i:05}"),
            tokens,
            audio,
            vision,
            label,
        });
        signals.push(Signals { s_t, s_av });
    }
    SyntheticSplit { records, signals }
}

/// Deterministic train/val/test splits drawn from independent streams of `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let split = |name: &str, n: usize| generate_split(spec, name, n, &mut root.fork(name));
    Ok(SyntheticData {
        meta: spec.meta(),
        train: split("train", spec.n_train),
        val: split("val", spec.n_val),
        test: split("test", spec.n_test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_train: 20,
            n_val: 5,
            n_test: 5,
            seed: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn toy_tokenizer_round_trips_known_words() {
        let v = build_vocab(["the movie was good", "the plot was thin"]);
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.unk(), 1);
        let ids = tokenize_toy("the movie was great", &v);
        assert_eq!(ids[3], v.unk());
        assert_eq!(detokenize(&ids, &v), "the movie was <unk>");
        assert!(Vocab::from_words(vec!["a".into(), "a".into()], "a").is_err());
        assert!(Vocab::from_words(vec!["a".into()], UNK).is_err());
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let data = generate_synthetic(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        assert_eq!(read_meta(dir.path()).unwrap(), data.meta);
        let back = read_records(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(back, data.train.records);
        let ds = Dataset::load(dir.path(), "val").unwrap();
        assert_eq!(ds.samples.len(), 5);
        assert!(Dataset::load(dir.path(), "nope").is_err());
    }

    #[test]
    fn malformed_lines_report_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"id\":\"a\"}\n").unwrap();
        let err = read_records(&p).unwrap_err();
        assert_eq!(err.category(), "data");
        assert!(err.to_string().contains(":1:"));
    }

    fn meta() -> DatasetMeta {
        DatasetMeta {
            d_a_in: 2,
            d_v_in: 1,
            l_av: 3,
            l_t_max: 4,
            label_min: -3.0,
            label_max: 3.0,
            vocab: vec![PAD.into(), UNK.into(), "a".into()],
        }
    }

    fn record(tokens: Vec<usize>, frames: usize) -> Record {
        Record {
            id: "r".into(),
            tokens,
            audio: vec![vec![1.0, 2.0]; frames],
            vision: vec![vec![3.0]; frames],
            label: 0.5,
        }
    }

    #[test]
    fn samples_are_aligned_to_l_av() {
        let s = Sample::from_record(&record(vec![2, 2, 2, 2, 2, 2], 2), &meta()).unwrap();
        assert_eq!(s.tokens.len(), 4);
        assert_eq!(s.audio.shape(), &[3, 2]);
        assert_eq!(s.audio.row(2), &[0.0, 0.0]);
        let s = Sample::from_record(&record(vec![2], 5), &meta()).unwrap();
        assert_eq!(s.vision.shape(), &[3, 1]);
    }

    #[test]
    fn bad_records_are_classified() {
        let m = meta();
        let mut r = record(vec![2], 3);
        r.vision.pop();
        assert!(matches!(Sample::from_record(&r, &m), Err(DmlfError::Alignment(_))));
        let r = record(vec![3], 3);
        assert!(matches!(Sample::from_record(&r, &m), Err(DmlfError::Vocabulary { id: 3, .. })));
        let mut r = record(vec![2], 3);
        r.label = 4.0;
        assert!(matches!(Sample::from_record(&r, &m), Err(DmlfError::Data(_))));
        let mut r = record(vec![2], 3);
        r.audio[1] = vec![1.0];
        assert!(matches!(Sample::from_record(&r, &m), Err(DmlfError::Data(_))));
    }

    #[test]
    fn batches_pad_with_zero_and_cover_every_sample() {
        let data = generate_synthetic(&small_spec()).unwrap();
        let samples = data.samples(&data.train).unwrap();
        let batches = make_batches(&samples, 6, 100, Some(9)).unwrap();
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        for b in &batches {
            for i in 0..b.len() {
                assert_eq!(b.unpadded(i), samples[b.indices[i]].tokens.as_slice());
                let n = b.unpadded(i).len();
                assert!(b.tokens[i][n..].iter().all(|&t| t == 0));
            }
        }
        let plain = make_batches(&samples, 6, 100, None).unwrap();
        assert_eq!(plain[0].indices, vec![0, 1, 2, 3, 4, 5]);
        assert!(make_batches(&samples, 0, 100, None).is_err());
    }

    #[test]
    fn labels_follow_the_generator_formula() {
        let spec = small_spec();
        let data = generate_synthetic(&spec).unwrap();
        for (r, s) in data.train.records.iter().zip(&data.train.signals) {
            assert_eq!(s.s_t, text_signal(&r.tokens, &spec));
            let clean = 3.0 * (0.5 * s.s_t + 0.5 * s.s_av);
            assert!((r.label - clean).abs() < 0.6, "{} vs {clean}", r.label);
            assert!(r.label.abs() <= 3.0);
            assert!((spec.l_t_min..=spec.l_t_max).contains(&r.tokens.len()));
        }
        assert_eq!(generate_synthetic(&spec).unwrap(), data);
        let other = generate_synthetic(&SyntheticSpec { seed: 5, ..spec }).unwrap();
        assert_ne!(other.train.records, data.train.records);
    }

    #[test]
    fn generator_spec_is_validated() {
        assert!(SyntheticSpec { w_t: 0.7, ..small_spec() }.validate().is_err());
        assert!(SyntheticSpec { l_t_min: 0, ..small_spec() }.validate().is_err());
        assert!(SyntheticSpec { av_channel: 6, ..small_spec() }.validate().is_err());
    }
}
