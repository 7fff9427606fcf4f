//! Feature files, batching and the synthetic sequence-labelling task.
//!
//! # QFEA layout
//!
//! All integers little-endian:
//!
//! ```text
//! "QFEA" | version u32 = 1 | count u32
//! per utterance: id_len u32 | id (UTF-8) | T u32 | D u32 | T·D f32 (row-major) | T i32 labels
//! ```
//!
//! A CSV fallback with header `id,frame,label,f0,...,f{D-1}` and one row per
//! frame is accepted by [`read_features`] as well.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};

use crate::error::{QnnError, Result};

pub const QFEA_MAGIC: &[u8; 4] = b"QFEA";
pub const QFEA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `frames × dim`, row-major.
    pub features: Vec<f32>,
    pub dim: usize,
    pub labels: Vec<u32>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, features: Vec<f32>, dim: usize, labels: Vec<u32>) -> Result<Self> {
        let u = Utterance {
            id: id.into(),
            features,
            dim,
            labels,
        };
        u.validate()?;
        Ok(u)
    }

    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(QnnError::data(&self.id, "utterance has no frames"));
        }
        if self.dim == 0 || self.features.len() != self.labels.len() * self.dim {
            return Err(QnnError::data(
                &self.id,
                format!(
                    "{} feature values for {} frames of dim {}",
                    self.features.len(),
                    self.labels.len(),
                    self.dim
                ),
            ));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(QnnError::data(
                format!("utterance {} frame {} dim {}", self.id, i / self.dim, i % self.dim),
                "non-finite feature value",
            ));
        }
        Ok(())
    }
}

pub fn write_features(path: &Path, utts: &[Utterance]) -> Result<()> {
    fs::write(path, encode_qfea(utts)?)?;
    Ok(())
}

pub fn encode_qfea(utts: &[Utterance]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(QFEA_MAGIC);
    out.extend_from_slice(&QFEA_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(utts.len())?.to_le_bytes());
    for u in utts {
        u.validate()?;
        out.extend_from_slice(&u32_len(u.id.len())?.to_le_bytes());
        out.extend_from_slice(u.id.as_bytes());
        out.extend_from_slice(&u32_len(u.frames())?.to_le_bytes());
        out.extend_from_slice(&u32_len(u.dim)?.to_le_bytes());
        for v in &u.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &u.labels {
            let l = i32::try_from(l).map_err(|_| QnnError::data(&u.id, format!("label {l} exceeds i32")))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| QnnError::config(format!("{n} does not fit in a u32 field")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(QnnError::format(
                self.pos as u64,
                format!("truncated while reading {what} ({n} bytes wanted, {} left)", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_qfea(bytes: &[u8]) -> Result<Vec<Utterance>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != QFEA_MAGIC {
        return Err(QnnError::format(0, "bad magic, expected QFEA"));
    }
    let version = c.u32("version")?;
    if version != QFEA_VERSION {
        return Err(QnnError::format(4, format!("unsupported version {version}")));
    }
    let count = c.u32("utterance count")? as usize;
    let mut utts = Vec::with_capacity(count.min(1 << 16));
    for n in 0..count {
        let id_len = c.u32("id length")? as usize;
        let id_at = c.pos;
        let id = std::str::from_utf8(c.take(id_len, "id")?)
            .map_err(|_| QnnError::format(id_at as u64, format!("utterance {n}: id is not UTF-8")))?
            .to_string();
        let frames = c.u32("frame count")? as usize;
        let dim = c.u32("dimension")? as usize;
        let body_at = c.pos;
        let n_vals = frames
            .checked_mul(dim)
            .filter(|v| v.checked_mul(4).is_some())
            .ok_or_else(|| QnnError::format(body_at as u64, "frame block size overflows"))?;
        let raw = c.take(n_vals * 4, "features")?;
        let features: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let raw = c.take(frames * 4, "labels")?;
        let mut labels = Vec::with_capacity(frames);
        for (t, b) in raw.chunks_exact(4).enumerate() {
            let l = i32::from_le_bytes(b.try_into().expect("4 bytes"));
            if l < 0 {
                return Err(QnnError::data(format!("utterance {id} frame {t}"), format!("negative label {l}")));
            }
            labels.push(l as u32);
        }
        let u = Utterance {
            id,
            features,
            dim,
            labels,
        };
        u.validate()?;
        utts.push(u);
    }
    if c.pos != bytes.len() {
        return Err(QnnError::format(c.pos as u64, "trailing bytes after last utterance"));
    }
    Ok(utts)
}

/// Reads a QFEA file, or a CSV file when the content does not start with the
/// QFEA magic but does start with an `id,` header.
pub fn read_features(path: &Path) -> Result<Vec<Utterance>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(QFEA_MAGIC) {
        decode_qfea(&bytes)
    } else if bytes.starts_with(b"id,") {
        parse_csv(&bytes)
    } else {
        Err(QnnError::format(0, "bad magic, expected QFEA or a CSV header"))
    }
}

pub fn write_features_csv(path: &Path, utts: &[Utterance]) -> Result<()> {
    let dim = utts.first().map_or(0, |u| u.dim);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["id".to_string(), "frame".into(), "label".into()];
    header.extend((0..dim).map(|d| format!("f{d}")));
    w.write_record(&header).map_err(csv_err)?;
    for u in utts {
        if u.dim != dim {
            return Err(QnnError::data(&u.id, format!("dim {} differs from {dim}", u.dim)));
        }
        for t in 0..u.frames() {
            let mut row = vec![u.id.clone(), t.to_string(), u.labels[t].to_string()];
            row.extend(u.frame(t).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> QnnError {
    let offset = e.position().map_or(0, |p| p.byte());
    QnnError::format(offset, e)
}

fn parse_csv(bytes: &[u8]) -> Result<Vec<Utterance>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let expected_prefix = ["id", "frame", "label"];
    if header.len() < 4 || header.iter().take(3).ne(expected_prefix) {
        return Err(QnnError::format(0, "CSV header must be id,frame,label,f0,..."));
    }
    let dim = header.len() - 3;
    for (d, name) in header.iter().skip(3).enumerate() {
        if name != format!("f{d}") {
            return Err(QnnError::format(0, format!("CSV column {} should be f{d}, got {name}", d + 3)));
        }
    }
    let mut utts: Vec<Utterance> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let at = format!("csv row {}", line + 2);
        let id = rec.get(0).unwrap_or_default().to_string();
        let frame: usize = rec
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| QnnError::data(&at, "bad frame index"))?;
        let label: u32 = rec
            .get(2)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| QnnError::data(&at, "bad label"))?;
        let mut values = Vec::with_capacity(dim);
        for d in 0..dim {
            let v: f32 = rec
                .get(d + 3)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| QnnError::data(format!("{at} column f{d}"), "bad feature value"))?;
            values.push(v);
        }
        let starts_new = utts.last().is_none_or(|u| u.id != id);
        if starts_new {
            utts.push(Utterance {
                id,
                features: Vec::new(),
                dim,
                labels: Vec::new(),
            });
        }
        let u = utts.last_mut().expect("pushed");
        if frame != u.labels.len() {
            return Err(QnnError::data(&at, format!("expected frame {}, got {frame}", u.labels.len())));
        }
        u.features.extend(values);
        u.labels.push(label);
    }
    for u in &utts {
        u.validate()?;
    }
    Ok(utts)
}

/// Frames rearranged so that consecutive groups of four coefficients form
/// quaternions, stored in quarter-block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveQuatFrames {
    pub data: Vec<f32>,
    pub frames: usize,
    /// Padded width, a multiple of 4.
    pub width: usize,
    /// Zero columns appended to reach `width`.
    pub padding: usize,
}

/// Quaternion `k` of a frame is `(f[4k], f[4k+1], f[4k+2], f[4k+3])`, zero
/// padded when `dim` is not a multiple of 4.
pub fn naive_quat_compose(features: &[f32], dim: usize) -> NaiveQuatFrames {
    let width = dim.div_ceil(4) * 4;
    let q = width / 4;
    let frames = if dim == 0 { 0 } else { features.len() / dim };
    let mut data = vec![0.0f32; frames * width];
    for t in 0..frames {
        for (j, &v) in features[t * dim..(t + 1) * dim].iter().enumerate() {
            let (k, c) = (j / 4, j % 4);
            data[t * width + c * q + k] = v;
        }
    }
    NaiveQuatFrames {
        data,
        frames,
        width,
        padding: width - dim,
    }
}

/// Column permutation of [`naive_quat_compose`]: entry `j` is the output
/// column of input coefficient `j`.
pub fn naive_quat_columns(dim: usize) -> Vec<usize> {
    let q = dim.div_ceil(4);
    (0..dim).map(|j| (j % 4) * q + j / 4).collect()
}

/// Padded, time-major batch.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceBatch {
    /// `t_max × batch × dim`
    pub features: Vec<f32>,
    /// `t_max × batch`; zero on padded frames
    pub labels: Vec<u32>,
    /// `t_max × batch`
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub ids: Vec<String>,
    pub t_max: usize,
    pub dim: usize,
}

impl UtteranceBatch {
    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        let first = utts
            .first()
            .ok_or_else(|| QnnError::Contract("empty batch".into()))?;
        let dim = first.dim;
        let b = utts.len();
        let t_max = utts.iter().map(|u| u.frames()).max().unwrap_or(0);
        let mut features = vec![0.0f32; t_max * b * dim];
        let mut labels = vec![0u32; t_max * b];
        let mut mask = vec![false; t_max * b];
        for (bi, u) in utts.iter().enumerate() {
            if u.dim != dim {
                return Err(QnnError::data(&u.id, format!("dim {} differs from batch dim {dim}", u.dim)));
            }
            for t in 0..u.frames() {
                let at = t * b + bi;
                features[at * dim..(at + 1) * dim].copy_from_slice(u.frame(t));
                labels[at] = u.labels[t];
                mask[at] = true;
            }
        }
        Ok(UtteranceBatch {
            features,
            labels,
            mask,
            lengths: utts.iter().map(|u| u.frames()).collect(),
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            t_max,
            dim,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn valid_frames(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn padded_frames(&self) -> usize {
        self.t_max * self.batch_size() - self.valid_frames()
    }
}

/// Utterance indices of each batch.
///
/// With `rng`, utterance order (and, when bucketing, batch order) is
/// shuffled. With `sort_by_length`, utterances of similar length share a
/// batch to limit padding.
pub fn batch_groups<R: Rng + ?Sized>(
    utts: &[Utterance],
    batch_size: usize,
    mut rng: Option<&mut R>,
    sort_by_length: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(QnnError::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    if let Some(r) = rng.as_deref_mut() {
        order.shuffle(r);
    }
    if sort_by_length {
        order.sort_by_key(|&i| utts[i].frames());
    }
    let mut groups: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if sort_by_length {
        if let Some(r) = rng.as_deref_mut() {
            groups.shuffle(r);
        }
    }
    Ok(groups)
}

pub fn batch_from_indices(utts: &[Utterance], group: &[usize]) -> Result<UtteranceBatch> {
    let members: Vec<&Utterance> = group.iter().map(|&i| &utts[i]).collect();
    UtteranceBatch::from_utterances(&members)
}

/// Groups utterances into padded batches; see [`batch_groups`].
pub fn make_batches<R: Rng + ?Sized>(
    utts: &[Utterance],
    batch_size: usize,
    rng: Option<&mut R>,
    sort_by_length: bool,
) -> Result<Vec<UtteranceBatch>> {
    batch_groups(utts, batch_size, rng, sort_by_length)?
        .iter()
        .map(|g| batch_from_indices(utts, g))
        .collect()
}

/// Parameters of the synthetic frame-labelling task.
///
/// Utterances are runs of segments; every segment belongs to one class. A
/// static class emits its own spectral template plus noise. Delta-coded
/// classes come in pairs that share one mean template and differ only in
/// the sign of a linear ramp across the segment, so a single frame carries
/// no information about which member of the pair produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    /// Number of delta-coded classes (even; the last classes are used).
    pub delta_classes: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    /// Class priors; uniform when `None`.
    pub priors: Option<Vec<f64>>,
    pub noise: f64,
    /// Ramp increment per frame, along a ±1 direction vector.
    pub slope: f64,
    pub train_utterances: usize,
    pub valid_utterances: usize,
    pub test_utterances: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            dim: 40,
            delta_classes: 2,
            min_segment: 6,
            max_segment: 14,
            min_segments: 4,
            max_segments: 8,
            priors: None,
            noise: 0.3,
            slope: 0.15,
            train_utterances: 200,
            valid_utterances: 50,
            test_utterances: 50,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTemplates {
    /// One mean spectrum per class; delta pairs share theirs.
    pub means: Vec<Vec<f64>>,
    /// Per-class ramp sign (0 for static classes).
    pub ramp_sign: Vec<f64>,
    pub direction: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub templates: SynthTemplates,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(QnnError::config(m.to_string()));
        if self.classes < 2 {
            return fail("synthetic task needs at least 2 classes");
        }
        if self.dim < 4 {
            return fail("synthetic task needs dim >= 4");
        }
        if self.delta_classes % 2 != 0 || self.delta_classes > self.classes {
            return fail("delta_classes must be even and at most classes");
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return fail("segment length range is empty");
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return fail("segment count range is empty");
        }
        if let Some(p) = &self.priors {
            if p.len() != self.classes || p.iter().any(|&v| !(v.is_finite() && v >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
                return fail("priors must be non-negative, one per class, with positive sum");
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0 && self.slope.is_finite()) {
            return fail("noise must be non-negative and slope finite");
        }
        Ok(())
    }

    pub fn priors(&self) -> Vec<f64> {
        let raw = self.priors.clone().unwrap_or_else(|| vec![1.0; self.classes]);
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    pub fn templates(&self) -> SynthTemplates {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        let normal = Normal::new(0.0, 1.0).expect("valid");
        let n_static = self.classes - self.delta_classes;
        let mut means = Vec::with_capacity(self.classes);
        let mut ramp_sign = Vec::with_capacity(self.classes);
        let mut direction = Vec::with_capacity(self.classes);
        for _ in 0..n_static {
            means.push((0..self.dim).map(|_| normal.sample(&mut rng)).collect());
            ramp_sign.push(0.0);
            direction.push(vec![0.0; self.dim]);
        }
        for _ in 0..self.delta_classes / 2 {
            let mean: Vec<f64> = (0..self.dim).map(|_| normal.sample(&mut rng)).collect();
            let dir: Vec<f64> = (0..self.dim)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            for sign in [1.0, -1.0] {
                means.push(mean.clone());
                ramp_sign.push(sign);
                direction.push(dir.clone());
            }
        }
        SynthTemplates {
            means,
            ramp_sign,
            direction,
        }
    }

    fn split(&self, name: &str, count: usize, stream: u64, templates: &SynthTemplates) -> Vec<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let noise = Normal::new(0.0, self.noise.max(0.0)).expect("valid");
        let pick = WeightedIndex::new(self.priors()).expect("validated priors");
        (0..count)
            .map(|n| {
                let segments = rng.random_range(self.min_segments..=self.max_segments);
                let mut features = Vec::new();
                let mut labels = Vec::new();
                for _ in 0..segments {
                    let class = pick.sample(&mut rng);
                    let len = rng.random_range(self.min_segment..=self.max_segment);
                    let centre = (len as f64 - 1.0) / 2.0;
                    let ramp = templates.ramp_sign[class] * self.slope;
                    for k in 0..len {
                        let offset = (k as f64 - centre) * ramp;
                        for d in 0..self.dim {
                            let mut v = templates.means[class][d] + offset * templates.direction[class][d];
                            if self.noise > 0.0 {
                                v += noise.sample(&mut rng);
                            }
                            features.push(v as f32);
                        }
                        labels.push(class as u32);
                    }
                }
                Utterance {
                    id: format!("{name}-{n:05}"),
                    features,
                    dim: self.dim,
                    labels,
                }
            })
            .collect()
    }
}

/// Generates train/valid/test splits; each split draws from its own RNG
/// stream so changing one split's size leaves the others untouched.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let templates = spec.templates();
    Ok(SynthData {
        train: spec.split("train", spec.train_utterances, 1, &templates),
        valid: spec.split("valid", spec.valid_utterances, 2, &templates),
        test: spec.split("test", spec.test_utterances, 3, &templates),
        templates,
    })
}

/// Per-class frame counts.
pub fn label_counts(utts: &[Utterance], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for u in utts {
        for &l in &u.labels {
            if (l as usize) < classes {
                counts[l as usize] += 1;
            }
        }
    }
    counts
}

/// Writes the three synthetic splits as `train.qfea`, `valid.qfea`, `test.qfea`.
pub fn write_synthetic(dir: &Path, data: &SynthData) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, utts) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        write_features(&dir.join(format!("{name}.qfea")), utts)?;
    }
    Ok(())
}
