//! Word-to-region attention and the compatibility score between a set of
//! regions and one contextualized word.
//!
//! For a word `w` and regions `r_1..r_m`:
//!
//! ```text
//! s_i = q_w(w) · k_r(r_i) / sqrt(d)
//! a_i = softmax_i(s)
//! phi = v_w(w) · Σ_i a_i v_r(r_i)
//! ```
//!
//! Attention runs per word over regions only. `phi` is accumulated as
//! `Σ_i a_i (v_w(w) · v_r(r_i))` with the terms summed in sorted order, which
//! makes it bit-identical under any permutation of the regions.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::math::checkpoint::{self, Tensor};
use crate::math::{dot, ForwardCache, Matrix, MlpGrads, MlpParams, Mode, NormMode};
use crate::rng::Rng;

/// Score assigned to padded regions before the softmax.
pub const MASKED_SCORE: f64 = -1e30;
pub const DEFAULT_MAX_REGIONS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pos {
    Noun,
    Adjective,
    Other,
}

/// Detected regions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    pub features: Matrix,
}

impl RegionSet {
    pub fn new(image_id: impl Into<String>, boxes: Vec<BBox>, features: Matrix) -> Result<Self> {
        let rs = RegionSet {
            image_id: image_id.into(),
            boxes,
            features,
        };
        rs.validate(DEFAULT_MAX_REGIONS)?;
        Ok(rs)
    }

    pub fn validate(&self, max_regions: usize) -> Result<()> {
        let m = self.boxes.len();
        if m == 0 || m > max_regions {
            return Err(Error::Invalid(format!(
                "image {}: {m} regions, expected 1..={max_regions}",
                self.image_id
            )));
        }
        if self.features.rows() != m {
            return Err(Error::shape("RegionSet", format!("{m} feature rows"), self.features.rows()));
        }
        if let Some(i) = self.boxes.iter().position(|b| !b.is_well_formed()) {
            return Err(Error::Invalid(format!(
                "image {}: malformed box {i}: {:?}",
                self.image_id, self.boxes[i]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// A tokenized caption with one contextualized feature row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTokens {
    pub tokens: Vec<String>,
    pub features: Matrix,
    pub pos: Vec<Pos>,
}

impl CaptionTokens {
    pub fn new(tokens: Vec<String>, features: Matrix, pos: Vec<Pos>) -> Result<Self> {
        if features.rows() != tokens.len() || pos.len() != tokens.len() {
            return Err(Error::shape(
                "CaptionTokens",
                format!("{} feature rows and POS tags", tokens.len()),
                format!("{} / {}", features.rows(), pos.len()),
            ));
        }
        Ok(CaptionTokens {
            tokens,
            features,
            pos,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn noun_indices(&self) -> Vec<usize> {
        self.positions(|p| p == Pos::Noun)
    }

    /// Tokens that take part in the image-contrastive loss: nouns and adjectives.
    pub fn counted_indices(&self) -> Vec<usize> {
        self.positions(|p| matches!(p, Pos::Noun | Pos::Adjective))
    }

    fn positions(&self, keep: impl Fn(Pos) -> bool) -> Vec<usize> {
        self.pos
            .iter()
            .enumerate()
            .filter(|(_, &p)| keep(p))
            .map(|(i, _)| i)
            .collect()
    }
}

/// The four learnable maps: region keys and values, word queries and values.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingModel {
    pub k_r: MlpParams,
    pub v_r: MlpParams,
    pub q_w: MlpParams,
    pub v_w: MlpParams,
}

/// Gradients for every trainable tensor of a [`GroundingModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub k_r: MlpGrads,
    pub v_r: MlpGrads,
    pub q_w: MlpGrads,
    pub v_w: MlpGrads,
}

const MAP_NAMES: [&str; 4] = ["k_r", "v_r", "q_w", "v_w"];

impl GroundingModel {
    pub fn new(d_r: usize, d_w: usize, d: usize, norm: NormMode, rng: &mut Rng) -> Self {
        GroundingModel {
            k_r: MlpParams::init(d_r, d, norm, rng),
            v_r: MlpParams::init(d_r, d, norm, rng),
            q_w: MlpParams::init(d_w, d, norm, rng),
            v_w: MlpParams::init(d_w, d, norm, rng),
        }
    }

    pub fn from_parts(k_r: MlpParams, v_r: MlpParams, q_w: MlpParams, v_w: MlpParams) -> Result<Self> {
        let m = GroundingModel { k_r, v_r, q_w, v_w };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for map in self.maps() {
            map.validate()?;
        }
        let d = self.d();
        if self.maps().iter().any(|m| m.out_dim() != d) {
            return Err(Error::Invalid("all four maps must share the output dimension".into()));
        }
        if self.v_r.in_dim() != self.k_r.in_dim() || self.v_w.in_dim() != self.q_w.in_dim() {
            return Err(Error::Invalid("key/value maps disagree on input dimension".into()));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.k_r.out_dim()
    }

    pub fn d_r(&self) -> usize {
        self.k_r.in_dim()
    }

    pub fn d_w(&self) -> usize {
        self.q_w.in_dim()
    }

    pub fn norm(&self) -> NormMode {
        self.k_r.norm
    }

    pub fn mode(&self) -> Mode {
        self.k_r.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for m in self.maps_mut() {
            m.mode = mode;
        }
    }

    /// Copy of the model switched to eval mode.
    pub fn eval_copy(&self) -> Self {
        let mut m = self.clone();
        m.set_mode(Mode::Eval);
        m
    }

    pub fn maps(&self) -> [&MlpParams; 4] {
        [&self.k_r, &self.v_r, &self.q_w, &self.v_w]
    }

    pub fn maps_mut(&mut self) -> [&mut MlpParams; 4] {
        [&mut self.k_r, &mut self.v_r, &mut self.q_w, &mut self.v_w]
    }

    /// Keys and values for a block of region feature rows.
    pub fn project_regions(&self, features: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.k_r.forward(features)?.0, self.v_r.forward(features)?.0))
    }

    /// Queries and values for a block of word feature rows.
    pub fn project_words(&self, features: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.q_w.forward(features)?.0, self.v_w.forward(features)?.0))
    }

    pub fn trainable(&self) -> Vec<&[f64]> {
        self.maps().into_iter().flat_map(|m| m.trainable()).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        self.maps_mut().into_iter().flat_map(|m| m.trainable_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.trainable().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("set_flat_params", self.param_count(), flat.len()));
        }
        let mut off = 0;
        for t in self.trainable_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let norm_flag = [match self.norm() {
            NormMode::Batch => 0.0,
            NormMode::Affine => 1.0,
        }];
        let mut names = Vec::new();
        let mut entries: Vec<(Vec<usize>, &[f64])> = Vec::new();
        for (prefix, map) in MAP_NAMES.iter().zip(self.maps()) {
            for (suffix, dims, data) in map.named_tensors() {
                names.push(format!("{prefix}.{suffix}"));
                entries.push((dims, data));
            }
        }
        names.push("meta.norm_affine".to_string());
        entries.push((Vec::new(), &norm_flag));
        checkpoint::encode(
            names
                .iter()
                .zip(&entries)
                .map(|(n, (dims, data))| (n.as_str(), dims.as_slice(), *data)),
        )
    }

    /// Rebuilds a model from checkpoint bytes. The result is in eval mode.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let tensors = checkpoint::decode(bytes)?;
        let find = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
        };
        let norm = match find("meta.norm_affine")?.data.first() {
            Some(&v) if v == 1.0 => NormMode::Affine,
            _ => NormMode::Batch,
        };
        let matrix = |name: &str| -> Result<Matrix> {
            let t = find(name)?;
            match t.dims.as_slice() {
                [r, c] => Matrix::from_vec(*r, *c, t.data.clone()),
                _ => Err(Error::Format(format!("{name} is not rank 2"))),
            }
        };
        let vector = |name: &str| -> Result<Vec<f64>> { Ok(find(name)?.data.clone()) };
        let mut maps = Vec::new();
        for prefix in MAP_NAMES {
            let p = |s: &str| format!("{prefix}.{s}");
            let map = MlpParams {
                w1: matrix(&p("w1"))?,
                b1: vector(&p("b1"))?,
                norm_gain: vector(&p("norm_gain"))?,
                norm_bias: vector(&p("norm_bias"))?,
                norm_running_mean: vector(&p("norm_running_mean"))?,
                norm_running_var: vector(&p("norm_running_var"))?,
                w2: matrix(&p("w2"))?,
                b2: vector(&p("b2"))?,
                mode: Mode::Eval,
                norm,
            };
            maps.push(map);
        }
        let mut it = maps.into_iter();
        let mut next = || it.next().expect("four maps");
        GroundingModel::from_parts(next(), next(), next(), next())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, &self.to_checkpoint_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

impl ModelGrads {
    pub fn zeros_like(model: &GroundingModel) -> Self {
        ModelGrads {
            k_r: MlpGrads::zeros_like(&model.k_r),
            v_r: MlpGrads::zeros_like(&model.v_r),
            q_w: MlpGrads::zeros_like(&model.q_w),
            v_w: MlpGrads::zeros_like(&model.v_w),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        [&self.k_r, &self.v_r, &self.q_w, &self.v_w]
            .into_iter()
            .flat_map(|g| g.slices())
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        self.k_r.add_assign(&other.k_r);
        self.v_r.add_assign(&other.v_r);
        self.q_w.add_assign(&other.q_w);
        self.v_w.add_assign(&other.v_w);
    }

    pub fn scale(&mut self, s: f64) {
        for g in [&mut self.k_r, &mut self.v_r, &mut self.q_w, &mut self.v_w] {
            g.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Per-word attention over one image's regions.
#[derive(Debug, Clone, PartialEq)]
pub struct WordAttention {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    /// `v_w(w) · v_r(r_i)` for every region.
    pub region_dots: Vec<f64>,
    pub phi: f64,
}

/// Sum that does not depend on the order of `terms` (sorts them first).
fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Softmax over regions with max-subtraction.
pub fn attend(scores: &[f64]) -> Result<Vec<f64>> {
    attend_masked(scores, None)
}

/// Softmax where `mask[i] == false` marks a padded region: its score is replaced
/// by [`MASKED_SCORE`] and its weight comes out exactly zero.
pub fn attend_masked(scores: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Invalid("attention over an empty region set".into()));
    }
    if let Some(mask) = mask {
        if mask.len() != scores.len() {
            return Err(Error::shape("attend_masked", scores.len(), mask.len()));
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::Invalid("every region is masked".into()));
        }
    }
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    let mut s = Vec::with_capacity(scores.len());
    for (i, &x) in scores.iter().enumerate() {
        if !live(i) {
            s.push(MASKED_SCORE);
        } else if x.is_finite() {
            s.push(x);
        } else {
            return Err(Error::NonFinite(format!("attention score {i} = {x}")));
        }
    }
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
    let z = order_free_sum(&mut e.clone());
    e.iter_mut().for_each(|x| *x /= z);
    Ok(e)
}

/// Attention and compatibility of one projected word against one image's
/// projected regions.
pub fn word_attention(
    keys: &Matrix,
    region_values: &Matrix,
    query: &[f64],
    word_value: &[f64],
    mask: Option<&[bool]>,
) -> Result<WordAttention> {
    let d = keys.cols();
    if query.len() != d || word_value.len() != d || region_values.cols() != d {
        return Err(Error::shape("word_attention", d, query.len()));
    }
    if region_values.rows() != keys.rows() {
        return Err(Error::shape("word_attention", keys.rows(), region_values.rows()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = keys.iter_rows().map(|k| dot(query, k) * scale).collect();
    let weights = attend_masked(&scores, mask)?;
    let region_dots: Vec<f64> = region_values.iter_rows().map(|v| dot(word_value, v)).collect();
    let mut terms: Vec<f64> = weights.iter().zip(&region_dots).map(|(a, g)| a * g).collect();
    let phi = order_free_sum(&mut terms);
    Ok(WordAttention {
        scores,
        weights,
        region_dots,
        phi,
    })
}

/// Accumulates `dphi · ∂phi/∂(keys, values, query, word value)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn word_attention_backward(
    keys: &Matrix,
    region_values: &Matrix,
    query: &[f64],
    word_value: &[f64],
    wa: &WordAttention,
    dphi: f64,
    dkeys: &mut [f64],
    dregion_values: &mut [f64],
    dquery: &mut [f64],
    dword_value: &mut [f64],
) {
    if dphi == 0.0 {
        return;
    }
    let d = keys.cols();
    let scale = 1.0 / (d as f64).sqrt();
    // phi = Σ a_i g_i with g_i = u·v_i
    let da: Vec<f64> = wa.region_dots.iter().map(|g| dphi * g).collect();
    let mean_da: f64 = wa.weights.iter().zip(&da).map(|(a, x)| a * x).sum();
    for i in 0..keys.rows() {
        let a = wa.weights[i];
        let ds = a * (da[i] - mean_da) * scale;
        let k = keys.row(i);
        let v = region_values.row(i);
        let dk = &mut dkeys[i * d..(i + 1) * d];
        let dv = &mut dregion_values[i * d..(i + 1) * d];
        let dg = dphi * a;
        for c in 0..d {
            dquery[c] += ds * k[c];
            dk[c] += ds * query[c];
            dword_value[c] += dg * v[c];
            dv[c] += dg * word_value[c];
        }
    }
}

/// `s(r_i, w)` for every region of the image.
pub fn attention_scores(model: &GroundingModel, regions: &RegionSet, word_feature: &[f64]) -> Result<Vec<f64>> {
    let (keys, _) = model.project_regions(&regions.features)?;
    let w = Matrix::from_vec(1, word_feature.len(), word_feature.to_vec())?;
    let query = model.q_w.forward(&w)?.0;
    let scale = 1.0 / (model.d() as f64).sqrt();
    Ok(keys.iter_rows().map(|k| dot(query.row(0), k) * scale).collect())
}

/// Full attention readout for every word of a caption against one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// `m × n` pre-softmax scores.
    pub scores: Matrix,
    /// `m × n`; each column sums to one.
    pub weights: Matrix,
    /// `n × d` attended region value per word.
    pub attended: Matrix,
    pub compat: Vec<f64>,
}

pub fn compatibility_batch(model: &GroundingModel, regions: &RegionSet, caption: &CaptionTokens) -> Result<AttentionResult> {
    let (keys, values) = model.project_regions(&regions.features)?;
    let (queries, word_values) = model.project_words(&caption.features)?;
    let (m, n, d) = (regions.len(), caption.len(), model.d());
    let mut scores = Matrix::zeros(m, n);
    let mut weights = Matrix::zeros(m, n);
    let mut attended = Matrix::zeros(n, d);
    let mut compat = Vec::with_capacity(n);
    for j in 0..n {
        let wa = word_attention(&keys, &values, queries.row(j), word_values.row(j), None)?;
        for i in 0..m {
            scores.set(i, j, wa.scores[i]);
            weights.set(i, j, wa.weights[i]);
            crate::math::axpy(wa.weights[i], values.row(i), attended.row_mut(j));
        }
        compat.push(wa.phi);
    }
    Ok(AttentionResult {
        scores,
        weights,
        attended,
        compat,
    })
}

pub fn compatibility(model: &GroundingModel, regions: &RegionSet, caption: &CaptionTokens, word_index: usize) -> Result<f64> {
    if word_index >= caption.len() {
        return Err(Error::OutOfRange {
            index: word_index,
            len: caption.len(),
        });
    }
    Ok(compatibility_batch(model, regions, caption)?.compat[word_index])
}

/// Stacked projections of a block of regions and a block of words, with the
/// caches needed to backpropagate into the four maps.
pub struct Projection {
    pub keys: Matrix,
    pub region_values: Matrix,
    pub queries: Matrix,
    pub word_values: Matrix,
    caches: [ForwardCache; 4],
}

/// Gradient buffers shaped like a [`Projection`].
pub struct ProjectionGrads {
    pub keys: Matrix,
    pub region_values: Matrix,
    pub queries: Matrix,
    pub word_values: Matrix,
}

impl Projection {
    pub fn new(model: &GroundingModel, region_features: &Matrix, word_features: &Matrix) -> Result<Self> {
        let (keys, ck) = model.k_r.forward(region_features)?;
        let (region_values, cv) = model.v_r.forward(region_features)?;
        let (queries, cq) = model.q_w.forward(word_features)?;
        let (word_values, cu) = model.v_w.forward(word_features)?;
        Ok(Projection {
            keys,
            region_values,
            queries,
            word_values,
            caches: [ck, cv, cq, cu],
        })
    }

    pub fn zero_grads(&self) -> ProjectionGrads {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ProjectionGrads {
            keys: z(&self.keys),
            region_values: z(&self.region_values),
            queries: z(&self.queries),
            word_values: z(&self.word_values),
        }
    }

    pub fn backward(&self, model: &GroundingModel, g: &ProjectionGrads) -> Result<ModelGrads> {
        let [ck, cv, cq, cu] = &self.caches;
        Ok(ModelGrads {
            k_r: model.k_r.backward(ck, &g.keys)?.0,
            v_r: model.v_r.backward(cv, &g.region_values)?.0,
            q_w: model.q_w.backward(cq, &g.queries)?.0,
            v_w: model.v_w.backward(cu, &g.word_values)?.0,
        })
    }

    /// Folds batch-norm statistics of this forward pass into `model`.
    pub fn absorb_batch_stats(&self, model: &mut GroundingModel) {
        for (map, cache) in model.maps_mut().into_iter().zip(&self.caches) {
            map.absorb_batch_stats(cache);
        }
    }

    /// Region rows `start..start+len` as owned keys and values.
    pub fn image_block(&self, start: usize, len: usize) -> (Matrix, Matrix) {
        let idx: Vec<usize> = (start..start + len).collect();
        (self.keys.select_rows(&idx), self.region_values.select_rows(&idx))
    }
}

/// Gradient of `Σ_j grad_compat[j] · phi_j` for one image/caption pair.
pub fn compatibility_backward(
    model: &GroundingModel,
    regions: &RegionSet,
    caption: &CaptionTokens,
    grad_compat: &[f64],
) -> Result<ModelGrads> {
    if grad_compat.len() != caption.len() {
        return Err(Error::shape("compatibility_backward", caption.len(), grad_compat.len()));
    }
    let proj = Projection::new(model, &regions.features, &caption.features)?;
    let mut g = proj.zero_grads();
    for (j, &dphi) in grad_compat.iter().enumerate() {
        let (q, u) = (proj.queries.row(j), proj.word_values.row(j));
        let wa = word_attention(&proj.keys, &proj.region_values, q, u, None)?;
        let mut dq = vec![0.0; model.d()];
        let mut du = vec![0.0; model.d()];
        word_attention_backward(
            &proj.keys,
            &proj.region_values,
            q,
            u,
            &wa,
            dphi,
            g.keys.as_mut_slice(),
            g.region_values.as_mut_slice(),
            &mut dq,
            &mut du,
        );
        crate::math::axpy(1.0, &dq, g.queries.row_mut(j));
        crate::math::axpy(1.0, &du, g.word_values.row_mut(j));
    }
    proj.backward(model, &g)
}

/// One line of an attention dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub image_id: String,
    pub token: String,
    pub token_index: usize,
    pub region_index: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub weight: f64,
}

/// Attention of the selected tokens (all tokens when `tokens` is `None`) over
/// the image's regions, sorted by weight descending.
pub fn attention_dump(
    model: &GroundingModel,
    regions: &RegionSet,
    caption: &CaptionTokens,
    tokens: Option<&[usize]>,
) -> Result<Vec<AttentionRecord>> {
    let res = compatibility_batch(model, regions, caption)?;
    let all: Vec<usize> = (0..caption.len()).collect();
    let tokens = tokens.unwrap_or(&all);
    let mut out = Vec::new();
    for &j in tokens {
        if j >= caption.len() {
            return Err(Error::OutOfRange {
                index: j,
                len: caption.len(),
            });
        }
        for i in 0..regions.len() {
            out.push(AttentionRecord {
                image_id: regions.image_id.clone(),
                token: caption.tokens[j].clone(),
                token_index: j,
                region_index: i,
                bbox: regions.boxes[i],
                weight: res.weights.get(i, j),
            });
        }
    }
    out.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then(a.token_index.cmp(&b.token_index))
            .then(a.region_index.cmp(&b.region_index))
    });
    Ok(out)
}

pub fn write_attention_jsonl<W: Write>(mut out: W, records: &[AttentionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<attention dump>", e))?;
    }
    Ok(())
}
