//! Synthetic vocal-burst corpus, manifest and signal files, and the
//! culture-block loss.
//!
//! # Signal file layout
//!
//! All integers little-endian.
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `BMSW` |
//! | 4 | `u32` format version (1) |
//! | 4 | `u32` entry count `n` |
//! | ... | `n` index entries: `u32` id byte length, UTF-8 id, `u64` offset, `u32` length |
//! | ... | data block: `f32` samples |
//!
//! Offsets and lengths count `f32` values from the start of the data block.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::heads::TaskDims;
use crate::metrics::ccc_loss;
use crate::scalar::Scalar;

pub const TYPE_NAMES: [&str; 8] = ["cry", "gasp", "groan", "grunt", "laugh", "pant", "scream", "other"];

pub const EMOTIONS: [&str; 10] = [
    "awe",
    "excitement",
    "amusement",
    "awkwardness",
    "fear",
    "horror",
    "distress",
    "triumph",
    "sadness",
    "surprise",
];

/// (arousal, valence) loading of each emotion in [`EMOTIONS`] order.
///
/// A hand-placed circumplex for the synthetic corpus only; it is not the
/// mapping used by any real annotation scheme.
pub const CIRCUMPLEX: [[f64; 2]; 10] = [
    [0.3, 0.5],
    [0.8, 0.6],
    [0.5, 0.8],
    [-0.1, -0.4],
    [0.7, -0.7],
    [0.8, -0.8],
    [0.4, -0.8],
    [0.7, 0.8],
    [-0.7, -0.7],
    [0.8, 0.1],
];

const SIGNAL_MAGIC: &[u8; 4] = b"BMSW";
const SIGNAL_VERSION: u32 = 1;
/// Templates (spectra, prototypes, culture offsets) do not depend on the
/// sampling seed, so corpora drawn with different seeds share one task.
const TEMPLATE_SEED: u64 = 0x7e3a_91c5_0b2d_4f68;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SIGNALS_FILE: &str = "signals.bin";
pub const SUMMARY_FILE: &str = "summary.json";

/// Maps a 10-dim emotion vector to (arousal, valence) in `[0,1]`.
///
/// Each axis is `0.5 + Σ wᵢ·highᵢ / (2·m)` with `m` the larger of the
/// positive and negative weight mass, so zero input lands on 0.5.
pub fn derive_two(high: &[f64]) -> Result<[f64; 2]> {
    if high.len() != CIRCUMPLEX.len() {
        return Err(Error::domain("derive_two", format!("expected {} emotions, got {}", CIRCUMPLEX.len(), high.len())));
    }
    if let Some(v) = high.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain("derive_two", format!("rating {v} outside [0,1]")));
    }
    let mut out = [0.0; 2];
    for (axis, o) in out.iter_mut().enumerate() {
        let pos: f64 = CIRCUMPLEX.iter().map(|w| w[axis].max(0.0)).sum();
        let neg: f64 = CIRCUMPLEX.iter().map(|w| (-w[axis]).max(0.0)).sum();
        let s: f64 = CIRCUMPLEX.iter().zip(high).map(|(w, h)| w[axis] * h).sum();
        *o = (0.5 + s / (2.0 * pos.max(neg))).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Truncates (keeping the head) or zero-pads (at the tail) to `target_len`.
pub fn fit_length(wave: &[f32], target_len: usize) -> Result<Vec<f32>> {
    if wave.is_empty() {
        return Err(Error::domain("fit_length", "empty signal"));
    }
    if target_len == 0 {
        return Err(Error::domain("fit_length", "target length must be positive"));
    }
    let mut out = wave[..wave.len().min(target_len)].to_vec();
    out.resize(target_len, 0.0);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub type_label: usize,
    pub high: Vec<f64>,
    /// (arousal, valence).
    pub two: [f64; 2],
    pub culture: usize,
    pub wave: Vec<f32>,
}

impl Sample {
    /// The `emotions × cultures` target vector and its supervision mask; only
    /// the sample's own culture block is marked.
    pub fn culture_targets(&self, cultures: usize) -> (Vec<f64>, Vec<bool>) {
        let e = self.high.len();
        let mut targets = vec![0.0; e * cultures];
        let mut mask = vec![false; e * cultures];
        targets[self.culture * e..(self.culture + 1) * e].copy_from_slice(&self.high);
        mask[self.culture * e..(self.culture + 1) * e].iter_mut().for_each(|m| *m = true);
        (targets, mask)
    }

    fn validate(&self, dims: &TaskDims, sample_len: usize) -> Result<()> {
        let bad = |detail: String| Err(Error::domain("sample", format!("{}: {detail}", self.id)));
        if self.type_label >= dims.type_classes {
            return bad(format!("type {} outside {} classes", self.type_label, dims.type_classes));
        }
        if self.culture >= dims.cultures {
            return bad(format!("culture {} outside {} cultures", self.culture, dims.cultures));
        }
        if self.high.len() != dims.emotions {
            return bad(format!("{} emotion ratings, expected {}", self.high.len(), dims.emotions));
        }
        if self.high.iter().chain(&self.two).any(|v| !(0.0..=1.0).contains(v)) {
            return bad("regression label outside [0,1]".into());
        }
        if self.wave.len() != sample_len {
            return bad(format!("signal length {} != {sample_len}", self.wave.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub classes: usize,
    pub emotions: usize,
    pub cultures: usize,
    pub sample_len: usize,
    pub sample_rate: f64,
    /// Half-width of the uniform noise added to emotion ratings.
    pub label_noise: f64,
    /// Half-width of the uniform noise added to signals.
    pub signal_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            seed: 0,
            classes: 8,
            emotions: 10,
            cultures: 4,
            sample_len: 4000,
            sample_rate: 16_000.0,
            label_noise: 0.05,
            signal_noise: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn dims(&self) -> TaskDims {
        TaskDims { type_classes: self.classes, emotions: self.emotions, cultures: self.cultures }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub dims: TaskDims,
    pub sample_len: usize,
}

struct Templates {
    /// Per type: fundamental, harmonic roll-off, amplitude-modulation rate,
    /// attack and decay time constants (seconds).
    voices: Vec<[f64; 5]>,
    prototypes: Vec<Vec<f64>>,
    directions: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
}

impl Templates {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
        let voices = (0..cfg.classes)
            .map(|t| {
                let f0 = 150.0 * 1.35f64.powi(t as i32);
                [f0, rng.gen_range(0.3..0.9), rng.gen_range(0.0..40.0), rng.gen_range(0.002..0.05), rng.gen_range(0.03..0.3)]
            })
            .collect();
        let mut table = |rows: usize, lo: f64, hi: f64| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cfg.emotions).map(|_| rng.gen_range(lo..hi)).collect()).collect()
        };
        let prototypes = table(cfg.classes, 0.1, 0.9);
        let directions = table(cfg.classes, -1.0, 1.0);
        let offsets = table(cfg.cultures, -0.1, 0.1);
        Self { voices, prototypes, directions, offsets }
    }

    fn signal(&self, cfg: &SynthConfig, t: usize, intensity: f64, rng: &mut impl Rng) -> Vec<f32> {
        let [f0, rolloff, am, attack, decay] = self.voices[t];
        let f0 = f0 * rng.gen_range(0.94..1.06);
        let onset = rng.gen_range(0.0..0.2) * cfg.sample_len as f64 / cfg.sample_rate;
        let phases: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let gain = 0.2 + 0.7 * intensity;
        let nyquist = cfg.sample_rate / 2.0;
        (0..cfg.sample_len)
            .map(|i| {
                let time = i as f64 / cfg.sample_rate;
                let local = time - onset;
                let env = if local < 0.0 {
                    0.0
                } else {
                    (1.0 - (-local / attack).exp()) * (-local / decay).exp()
                };
                let pulse = if am > 0.0 { 0.6 + 0.4 * (std::f64::consts::TAU * am * time).cos() } else { 1.0 };
                let tone: f64 = phases
                    .iter()
                    .enumerate()
                    .filter(|(h, _)| f0 * (*h as f64 + 1.0) < nyquist)
                    .map(|(h, p)| rolloff.powi(h as i32) * (std::f64::consts::TAU * f0 * (h as f64 + 1.0) * time + p).sin())
                    .sum();
                let noise = rng.gen_range(-cfg.signal_noise..=cfg.signal_noise);
                (gain * env * pulse * tone + noise) as f32
            })
            .collect()
    }
}

/// Draws a labelled corpus and assigns a 70/15/15 train/val/test split.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.cultures == 0 || cfg.sample_len == 0 {
        return Err(Error::Config("classes, cultures and sample_len must be positive".into()));
    }
    if cfg.n < cfg.classes {
        return Err(Error::Config(format!("n = {} is below the class count {}", cfg.n, cfg.classes)));
    }
    if cfg.emotions != CIRCUMPLEX.len() {
        return Err(Error::Config(format!("the circumplex mapping is defined for {} emotions", CIRCUMPLEX.len())));
    }
    if !(cfg.sample_rate > 0.0) || !(0.0..1.0).contains(&cfg.label_noise) || !(0.0..1.0).contains(&cfg.signal_noise) {
        return Err(Error::Config("sample_rate must be positive and noise levels in [0,1)".into()));
    }
    let templates = Templates::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // one guaranteed draw per class, the rest uniform
    let mut types: Vec<usize> = (0..cfg.classes).chain((cfg.classes..cfg.n).map(|_| rng.gen_range(0..cfg.classes))).collect();
    types.shuffle(&mut rng);
    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut rng);
    let n_train = (cfg.n as f64 * 0.7).round() as usize;
    let n_val = (cfg.n as f64 * 0.15).round() as usize;
    let mut splits = vec![Split::Test; cfg.n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = match rank {
            r if r < n_train => Split::Train,
            r if r < n_train + n_val => Split::Val,
            _ => Split::Test,
        };
    }
    let width = cfg.n.to_string().len();
    let mut samples = Vec::with_capacity(cfg.n);
    for (i, &t) in types.iter().enumerate() {
        let culture = rng.gen_range(0..cfg.cultures);
        let intensity: f64 = rng.gen_range(0.0..1.0);
        let high: Vec<f64> = (0..cfg.emotions)
            .map(|e| {
                let v = templates.prototypes[t][e]
                    + templates.offsets[culture][e]
                    + 0.35 * (intensity - 0.5) * templates.directions[t][e]
                    + rng.gen_range(-cfg.label_noise..=cfg.label_noise);
                v.clamp(0.0, 1.0)
            })
            .collect();
        let two = derive_two(&high)?;
        let wave = templates.signal(cfg, t, intensity, &mut rng);
        samples.push(Sample {
            id: format!("s{i:0width$}"),
            split: splits[i],
            type_label: t,
            high,
            two,
            culture,
            wave,
        });
    }
    Ok(Dataset { samples, dims: cfg.dims(), sample_len: cfg.sample_len })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub count: usize,
    pub sample_len: usize,
    pub dims: TaskDims,
    pub split_counts: BTreeMap<Split, usize>,
    pub type_counts: Vec<usize>,
    pub culture_counts: Vec<usize>,
    pub high_mean: Vec<f64>,
    pub high_std: Vec<f64>,
    pub two_mean: [f64; 2],
    pub two_std: [f64; 2],
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::domain("dataset", format!("duplicate id {}", s.id)));
            }
            s.validate(&self.dims, self.sample_len)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> LabelSummary {
        let mut split_counts = BTreeMap::new();
        let mut type_counts = vec![0; self.dims.type_classes];
        let mut culture_counts = vec![0; self.dims.cultures];
        for s in &self.samples {
            *split_counts.entry(s.split).or_insert(0) += 1;
            type_counts[s.type_label] += 1;
            culture_counts[s.culture] += 1;
        }
        let (high_mean, high_std) =
            (0..self.dims.emotions).map(|e| mean_std(self.samples.iter().map(move |s| s.high[e]))).unzip();
        let a = mean_std(self.samples.iter().map(|s| s.two[0]));
        let v = mean_std(self.samples.iter().map(|s| s.two[1]));
        LabelSummary {
            count: self.samples.len(),
            sample_len: self.sample_len,
            dims: self.dims,
            split_counts,
            type_counts,
            culture_counts,
            high_mean,
            high_std,
            two_mean: [a.0, v.0],
            two_std: [a.1, v.1],
        }
    }

    /// Writes manifest, signal file and summary into `dir`.
    pub fn save(&self, dir: &Path) -> Result<[PathBuf; 3]> {
        fs::create_dir_all(dir)?;
        let paths = [dir.join(MANIFEST_FILE), dir.join(SIGNALS_FILE), dir.join(SUMMARY_FILE)];
        write_manifest(&paths[0], &self.samples)?;
        write_signals(&paths[1], self.samples.iter().map(|s| (s.id.as_str(), s.wave.as_slice())))?;
        fs::write(&paths[2], serde_json::to_string_pretty(&self.summary())?)?;
        Ok(paths)
    }

    /// Joins a manifest with its signal file; signals are fitted to `sample_len`.
    pub fn load(manifest: &Path, signals: &Path, dims: TaskDims, sample_len: usize) -> Result<Self> {
        let rows = read_manifest(manifest)?;
        let mut waves: HashMap<String, Vec<f32>> = read_signals(signals)?.into_iter().collect();
        let mut samples = Vec::with_capacity(rows.len());
        for mut s in rows {
            let wave = waves.remove(&s.id).ok_or_else(|| Error::Format {
                path: signals.to_path_buf(),
                detail: format!("no signal for id {}", s.id),
            })?;
            s.wave = fit_length(&wave, sample_len)?;
            samples.push(s);
        }
        let ds = Dataset { samples, dims, sample_len };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn manifest_header(emotions: usize) -> Vec<String> {
    let mut h: Vec<String> = ["id", "split", "type"].iter().map(|s| s.to_string()).collect();
    h.extend((0..emotions).map(|e| format!("high_{e}")));
    h.extend(["arousal", "valence", "culture"].iter().map(|s| s.to_string()));
    h
}

/// Writes labels only; signals go to the sidecar file.
pub fn write_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    let emotions = samples.first().map_or(0, |s| s.high.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(manifest_header(emotions))?;
    for s in samples {
        let mut row = vec![s.id.clone(), s.split.to_string(), s.type_label.to_string()];
        row.extend(s.high.iter().chain(&s.two).map(|v| v.to_string()));
        row.push(s.culture.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads label rows; the returned samples carry empty signals.
pub fn read_manifest(path: &Path) -> Result<Vec<Sample>> {
    let fmt = |detail: String| Error::Format { path: path.to_path_buf(), detail };
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let emotions = header.len().checked_sub(6).ok_or_else(|| fmt("header too short".into()))?;
    if header != manifest_header(emotions) {
        return Err(fmt(format!("unexpected header {}", header.join(","))));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| fmt(format!("row {}: missing column {}", line + 2, header[i])));
        let num = |i: usize| -> Result<f64> {
            field(i)?.parse().map_err(|_| fmt(format!("row {}: bad number in {}", line + 2, header[i])))
        };
        let int = |i: usize| -> Result<usize> {
            field(i)?.parse().map_err(|_| fmt(format!("row {}: bad integer in {}", line + 2, header[i])))
        };
        out.push(Sample {
            id: field(0)?.to_string(),
            split: field(1)?.parse().map_err(|e: Error| fmt(format!("row {}: {e}", line + 2)))?,
            type_label: int(2)?,
            high: (0..emotions).map(|e| num(3 + e)).collect::<Result<_>>()?,
            two: [num(3 + emotions)?, num(4 + emotions)?],
            culture: int(5 + emotions)?,
            wave: Vec::new(),
        });
    }
    Ok(out)
}

pub fn write_signals<'a>(path: &Path, entries: impl Iterator<Item = (&'a str, &'a [f32])> + Clone) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let count = entries.clone().count();
    w.write_all(SIGNAL_MAGIC)?;
    w.write_all(&SIGNAL_VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(count).map_err(|_| Error::Config("too many signals".into()))?.to_le_bytes())?;
    let mut offset = 0u64;
    for (id, wave) in entries.clone() {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        w.write_all(&offset.to_le_bytes())?;
        w.write_all(&(wave.len() as u32).to_le_bytes())?;
        offset += wave.len() as u64;
    }
    for (_, wave) in entries {
        for v in wave {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_signals(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let fmt = |detail: &str| Error::Format { path: path.to_path_buf(), detail: detail.to_string() };
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| fmt("truncated file"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != SIGNAL_MAGIC {
        return Err(fmt("bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != SIGNAL_VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let id = String::from_utf8(take(len)?.to_vec()).map_err(|_| fmt("id is not UTF-8"))?;
        let offset = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let n = u32_at(take(4)?) as usize;
        index.push((id, offset, n));
    }
    let data = &bytes[pos..];
    index
        .into_iter()
        .map(|(id, offset, n)| {
            let raw = data.get(offset * 4..(offset + n) * 4).ok_or_else(|| fmt("signal extends past end of file"))?;
            let wave = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Ok((id, wave))
        })
        .collect()
}

/// Gathers each row's own culture block: `pred` is `(N, emotions·cultures)`,
/// the result `(N, emotions)`.
pub fn gather_culture_blocks<S: Scalar>(pred: &Tensor<S>, culture: &[usize], emotions: usize) -> Result<Tensor<S>> {
    let n = culture.len();
    if pred.ndim() != 2 || pred.shape()[0] != n || emotions == 0 || pred.shape()[1] % emotions != 0 {
        return Err(Error::shape("gather_culture_blocks", format!("pred {:?} for {n} rows", pred.shape())));
    }
    let cultures = pred.shape()[1] / emotions;
    if let Some(c) = culture.iter().find(|&&c| c >= cultures) {
        return Err(Error::domain("gather_culture_blocks", format!("culture {c} outside {cultures}")));
    }
    let rows: Vec<usize> = culture.iter().enumerate().map(|(i, &c)| i * cultures + c).collect();
    pred.reshape(&[n * cultures, emotions])?.select_rows(&rows)
}

/// CCC loss on each sample's own culture block, computed per culture and
/// averaged over cultures with at least two samples in the batch.
///
/// When no culture has two samples the rows are pooled into one group.
pub fn culture_masked_loss<S: Scalar>(pred: &Tensor<S>, high: &Tensor<S>, culture: &[usize]) -> Result<Tensor<S>> {
    let emotions = high.shape().get(1).copied().unwrap_or(0);
    let gathered = gather_culture_blocks(pred, culture, emotions)?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in culture.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let usable: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    if usable.is_empty() {
        log::warn!("culture loss: no culture has two samples in this batch, pooling {} rows", culture.len());
        return ccc_loss(&gathered, high);
    }
    let mut total: Option<Tensor<S>> = None;
    for rows in &usable {
        let l = ccc_loss(&gathered.select_rows(rows)?, &high.select_rows(rows)?)?;
        total = Some(match total {
            None => l,
            Some(t) => t.add(&l)?,
        });
    }
    Ok(total.expect("at least one group").scale(S::one() / S::from_usize_lossy(usable.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_two_examples() {
        assert_eq!(derive_two(&[0.0; 10]).unwrap(), [0.5, 0.5]);
        let mut excited = [0.0; 10];
        excited[1] = 1.0;
        let [a, v] = derive_two(&excited).unwrap();
        assert!(a > 0.5 && v > 0.5);
        let mut sad = [0.0; 10];
        sad[8] = 1.0;
        let [a, v] = derive_two(&sad).unwrap();
        assert!(a < 0.5 && v < 0.5);
        assert!(derive_two(&[1.5; 10]).is_err());
        assert!(derive_two(&[0.5; 9]).is_err());
        for corner in [[0.0; 10], [1.0; 10]] {
            let out = derive_two(&corner).unwrap();
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn fit_length_examples() {
        let long: Vec<f32> = (0..5000).map(|i| i as f32).collect();
        assert_eq!(fit_length(&long, 4000).unwrap(), long[..4000].to_vec());
        let short = vec![1.0f32; 1000];
        let out = fit_length(&short, 4000).unwrap();
        assert_eq!(&out[..1000], &short[..]);
        assert!(out[1000..].iter().all(|&v| v == 0.0));
        assert_eq!(fit_length(&long[..4000], 4000).unwrap(), long[..4000].to_vec());
        assert!(fit_length(&[], 4000).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let cfg = SynthConfig { n: 40, sample_len: 400, ..Default::default() };
        let a = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, generate_synthetic(&cfg).unwrap());
        a.validate().unwrap();
        let types: std::collections::HashSet<usize> = a.samples.iter().map(|s| s.type_label).collect();
        assert_eq!(types.len(), 8);
        assert!(generate_synthetic(&SynthConfig { n: 7, ..cfg.clone() }).is_err());
        let b = generate_synthetic(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn culture_targets_mark_one_block() {
        let cfg = SynthConfig { n: 8, sample_len: 100, ..Default::default() };
        let s = &generate_synthetic(&cfg).unwrap().samples[0];
        let (t, mask) = s.culture_targets(4);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 10);
        assert_eq!(&t[s.culture * 10..s.culture * 10 + 10], &s.high[..]);
    }

    fn block_pred(high: &[f64], culture: &[usize], garbage: f64) -> Tensor<f64> {
        let n = culture.len();
        let mut p = vec![garbage; n * 40];
        for i in 0..n {
            for e in 0..10 {
                p[i * 40 + culture[i] * 10 + e] = high[i * 10 + e];
            }
        }
        Tensor::new(p, &[n, 40]).unwrap()
    }

    fn ramp(n: usize) -> Vec<f64> {
        (0..n * 10).map(|i| ((i * 37) % 11) as f64 / 10.0).collect()
    }

    #[test]
    fn culture_loss_masking() {
        let culture = [0, 0, 1, 1, 2, 2];
        let high = ramp(6);
        let target = Tensor::new(high.clone(), &[6, 10]).unwrap();
        let loss = culture_masked_loss(&block_pred(&high, &culture, 7.0), &target, &culture).unwrap();
        assert!(loss.item().abs() < 1e-12);
        let permuted = [1, 1, 0, 0, 2, 2];
        let moved = culture_masked_loss(&block_pred(&high, &culture, 7.0), &target, &permuted).unwrap();
        assert!(moved.item() > 0.5);
    }

    #[test]
    fn single_culture_equals_plain_loss() {
        let culture = [3; 5];
        let target = Tensor::new(ramp(5), &[5, 10]).unwrap();
        let pred_vals: Vec<f64> = ramp(5).iter().map(|v| (v * 3.0).sin()).collect();
        let pred = block_pred(&pred_vals, &culture, 0.0);
        let masked = culture_masked_loss(&pred, &target, &culture).unwrap().item();
        let plain = ccc_loss(&Tensor::new(pred_vals, &[5, 10]).unwrap(), &target).unwrap().item();
        assert_eq!(masked, plain);
    }

    #[test]
    fn singleton_cultures_pool() {
        let culture = [0, 1, 2];
        let target = Tensor::new(ramp(3), &[3, 10]).unwrap();
        let pred = block_pred(&ramp(3), &culture, 0.0);
        assert!(culture_masked_loss(&pred, &target, &culture).unwrap().item().abs() < 1e-12);
    }
}
