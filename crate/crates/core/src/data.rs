//! Datasets of precomputed region and word features.
//!
//! On disk a split is three files: a JSON manifest, a binary feature blob and
//! a JSON-lines annotation file. In memory the phrase annotations live apart
//! from the image/caption pairs so that training code, which only ever sees
//! [`TrainingPair`]s, cannot read them.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::{CaptionTokens, Pos, RegionSet, DEFAULT_MAX_REGIONS};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::TrainBatch;
use crate::math::checkpoint::write_atomic;
use crate::math::Matrix;
use crate::rng::{indexed_substream, STREAM_SHUFFLE};

pub const BLOB_MAGIC: &[u8; 4] = b"IGFB";
pub const BLOB_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A phrase span `[start, end)` and the boxes it refers to. No boxes means
/// the phrase has no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub span: (usize, usize),
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub regions: RegionSet,
    pub caption: CaptionTokens,
}

/// Evaluation-only phrase annotations, one list per pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotations {
    pub phrases: Vec<Vec<Phrase>>,
}

/// One pair together with its phrases.
#[derive(Debug, Clone, Copy)]
pub struct GroundingExample<'a> {
    pub image_id: &'a str,
    pub regions: &'a RegionSet,
    pub caption: &'a CaptionTokens,
    pub phrases: &'a [Phrase],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub d_r: usize,
    pub d_w: usize,
    pub pairs: Vec<TrainingPair>,
    pub annotations: Annotations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub d_r: usize,
    pub d_w: usize,
    pub count: usize,
    /// Relative paths resolve against the manifest's directory.
    pub features: PathBuf,
    pub annotations: PathBuf,
}

/// One line of the annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: String,
    tokens: Vec<String>,
    pos: Vec<Pos>,
    phrases: Vec<Phrase>,
}

impl Dataset {
    pub fn empty(name: impl Into<String>, split: Split, d_r: usize, d_w: usize) -> Self {
        Dataset {
            name: name.into(),
            split,
            d_r,
            d_w,
            pairs: Vec::new(),
            annotations: Annotations::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn push(&mut self, pair: TrainingPair, phrases: Vec<Phrase>) -> Result<()> {
        let index = self.pairs.len();
        validate_record(&pair, &phrases, self.d_r, self.d_w).map_err(|msg| Error::Record { index, msg })?;
        self.pairs.push(pair);
        self.annotations.phrases.push(phrases);
        Ok(())
    }

    pub fn example(&self, i: usize) -> GroundingExample<'_> {
        let p = &self.pairs[i];
        GroundingExample {
            image_id: &p.regions.image_id,
            regions: &p.regions,
            caption: &p.caption,
            phrases: &self.annotations.phrases[i],
        }
    }

    pub fn examples(&self) -> impl Iterator<Item = GroundingExample<'_>> {
        (0..self.len()).map(|i| self.example(i))
    }

    pub fn image_ids(&self) -> HashSet<&str> {
        self.pairs.iter().map(|p| p.regions.image_id.as_str()).collect()
    }

    /// Writes `<stem>.manifest.json`, `<stem>.igfb` and `<stem>.jsonl` into
    /// `dir`, returning the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let features = PathBuf::from(format!("{stem}.igfb"));
        let annotations = PathBuf::from(format!("{stem}.jsonl"));
        write_atomic(&dir.join(&features), &encode_blob(&self.pairs))?;
        let mut lines = Vec::new();
        for (p, phrases) in self.pairs.iter().zip(&self.annotations.phrases) {
            let rec = AnnotationRecord {
                image_id: p.regions.image_id.clone(),
                tokens: p.caption.tokens.clone(),
                pos: p.caption.pos.clone(),
                phrases: phrases.clone(),
            };
            serde_json::to_writer(&mut lines, &rec)?;
            lines.push(b'\n');
        }
        write_atomic(&dir.join(&annotations), &lines)?;
        let manifest = DatasetManifest {
            name: self.name.clone(),
            split: self.split,
            d_r: self.d_r,
            d_w: self.d_w,
            count: self.len(),
            features,
            annotations,
        };
        let path = dir.join(format!("{stem}.manifest.json"));
        write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }
}

fn validate_record(pair: &TrainingPair, phrases: &[Phrase], d_r: usize, d_w: usize) -> std::result::Result<(), String> {
    let (r, c) = (&pair.regions, &pair.caption);
    if r.features.cols() != d_r {
        return Err(format!("region features are {} wide, manifest says d_r = {d_r}", r.features.cols()));
    }
    if c.features.cols() != d_w {
        return Err(format!("word features are {} wide, manifest says d_w = {d_w}", c.features.cols()));
    }
    r.validate(DEFAULT_MAX_REGIONS).map_err(|e| e.to_string())?;
    if r.features.rows() != r.boxes.len() {
        return Err("region feature rows do not match box count".into());
    }
    if c.features.rows() != c.tokens.len() || c.pos.len() != c.tokens.len() {
        return Err("caption tokens, features and POS flags differ in length".into());
    }
    for p in phrases {
        if p.span.0 >= p.span.1 || p.span.1 > c.tokens.len() {
            return Err(format!("phrase span {:?} outside caption of {} tokens", p.span, c.tokens.len()));
        }
        if let Some(b) = p.boxes.iter().find(|b| !b.is_well_formed()) {
            return Err(format!("malformed ground-truth box {b:?}"));
        }
    }
    Ok(())
}

// ---- feature blob ----

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Feature blob bytes. Values are stored as f32.
pub fn encode_blob(pairs: &[TrainingPair]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(pairs.len() as u64).to_le_bytes());
    for p in pairs {
        let id = p.regions.image_id.as_bytes();
        put_u32(&mut out, id.len());
        out.extend_from_slice(id);
        put_u32(&mut out, p.regions.len());
        put_u32(&mut out, p.regions.features.cols());
        put_f32s(&mut out, p.regions.boxes.iter().flat_map(|b| <[f64; 4]>::from(*b)));
        put_f32s(&mut out, p.regions.features.as_slice().iter().copied());
        put_u32(&mut out, p.caption.features.rows());
        put_u32(&mut out, p.caption.features.cols());
        put_f32s(&mut out, p.caption.features.as_slice().iter().copied());
    }
    out
}

/// Decoded blob record.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobRecord {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    pub region_features: Matrix,
    pub word_features: Matrix,
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format("feature blob is truncated".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("blob size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn decode_blob(bytes: &[u8]) -> Result<Vec<BlobRecord>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut r = Reader { bytes };
    if r.take(4)? != BLOB_MAGIC {
        return Err(Error::Format("not a feature blob (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != BLOB_VERSION {
        return Err(Error::Format(format!("unsupported blob version {version}")));
    }
    let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let rec = (|| -> Result<BlobRecord> {
            let id_len = r.u32()?;
            let image_id = String::from_utf8(r.take(id_len)?.to_vec())
                .map_err(|_| Error::Format("image id is not UTF-8".into()))?;
            let m = r.u32()?;
            let d_r = r.u32()?;
            let boxes = r
                .f32s(4 * m)?
                .chunks_exact(4)
                .map(|c| BBox::new(c[0], c[1], c[2], c[3]))
                .collect();
            let region_features = Matrix::from_vec(m, d_r, r.f32s(m * d_r)?)?;
            let n = r.u32()?;
            let d_w = r.u32()?;
            let word_features = Matrix::from_vec(n, d_w, r.f32s(n * d_w)?)?;
            Ok(BlobRecord {
                image_id,
                boxes,
                region_features,
                word_features,
            })
        })()
        .map_err(|e| Error::Record {
            index,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    if !r.bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after last record", r.bytes.len())));
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Loads and validates a split from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&read_bytes(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let blob = decode_blob(&read_bytes(&base.join(&manifest.features))?)?;
    let ann_path = base.join(&manifest.annotations);
    let ann_file = File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut records = Vec::new();
    for (index, line) in BufReader::new(ann_file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            index,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    if blob.len() != records.len() {
        return Err(Error::Format(format!(
            "feature blob has {} records, annotations have {}",
            blob.len(),
            records.len()
        )));
    }
    if blob.len() != manifest.count {
        return Err(Error::Format(format!(
            "manifest declares {} records, files hold {}",
            manifest.count,
            blob.len()
        )));
    }
    let mut ds = Dataset::empty(manifest.name, manifest.split, manifest.d_r, manifest.d_w);
    for (index, (b, a)) in blob.into_iter().zip(records).enumerate() {
        let rec_err = |msg: String| Error::Record { index, msg };
        if b.image_id != a.image_id {
            return Err(rec_err(format!("image id {:?} in blob, {:?} in annotations", b.image_id, a.image_id)));
        }
        if let Some(bad) = b.boxes.iter().find(|x| !x.is_well_formed()) {
            return Err(rec_err(format!("malformed region box {bad:?}")));
        }
        if b.region_features.cols() != ds.d_r && b.region_features.rows() > 0 {
            return Err(rec_err(format!(
                "region features are {} wide, manifest says d_r = {}",
                b.region_features.cols(),
                ds.d_r
            )));
        }
        let regions = RegionSet::new(b.image_id, b.boxes, b.region_features).map_err(|e| rec_err(e.to_string()))?;
        let caption = CaptionTokens::new(a.tokens, b.word_features, a.pos).map_err(|e| rec_err(e.to_string()))?;
        ds.push(TrainingPair { regions, caption }, a.phrases)?;
    }
    Ok(ds)
}

/// Fails if the two splits share an image id.
pub fn check_disjoint(a: &Dataset, b: &Dataset) -> Result<()> {
    let ids = a.image_ids();
    match b.image_ids().into_iter().find(|id| ids.contains(id)) {
        Some(id) => Err(Error::Invalid(format!("image {id:?} appears in both {:?} and {:?}", a.split, b.split))),
        None => Ok(()),
    }
}

/// Index batches for one epoch: a seeded shuffle cut into `batch_size`
/// chunks, dropping a final chunk smaller than 2.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Invalid(format!("batch size must be at least 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut indexed_substream(seed, STREAM_SHUFFLE, epoch));
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Batches of pairs for one epoch.
pub fn batch_iterator(
    pairs: &[TrainingPair],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = TrainBatch<'_>>> {
    let batches = epoch_batches(pairs.len(), batch_size, seed, epoch)?;
    Ok(batches.into_iter().map(move |idx| {
        TrainBatch::new(
            idx.iter()
                .map(|&i| (&pairs[i].regions, &pairs[i].caption))
                .collect(),
        )
    }))
}

/// Writes one JSON value per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}
