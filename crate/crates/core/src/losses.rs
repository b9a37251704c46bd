//! InfoNCE objectives.
//!
//! * image loss: each counted word of a caption is contrasted across the
//!   regions of every image in the batch (its own image is the positive);
//! * language loss: one noun of each caption is contrasted against the same
//!   image paired with substituted nouns.
//!
//! `log k - L_img` is the per-word lower bound on mutual information between
//! region sets and words. The language loss samples negatives that are not
//! drawn from the marginal, so `log k - L_lang` is not a bound on anything and
//! is never reported as one.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{
    word_attention, word_attention_backward, CaptionTokens, GroundingModel, ModelGrads, Projection,
    RegionSet, WordAttention,
};
use crate::error::{Error, Result};
use crate::math::Matrix;

/// How per-token image losses are combined within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Average over every counted token in the batch.
    #[default]
    Mean,
    /// Sum over a caption's tokens, average over captions.
    Sum,
}

/// Image/caption pairs contrasted against each other.
#[derive(Debug, Clone)]
pub struct TrainBatch<'a> {
    pub examples: Vec<(&'a RegionSet, &'a CaptionTokens)>,
}

impl<'a> TrainBatch<'a> {
    pub fn new(examples: Vec<(&'a RegionSet, &'a CaptionTokens)>) -> Self {
        TrainBatch { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Substituted-noun features for one caption's language loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LangNegatives {
    /// Position of the noun being replaced.
    pub noun_index: usize,
    /// One contextualized feature row per negative word.
    pub features: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_img: f64,
    pub l_lang: f64,
    pub total: f64,
    pub mi_bound_per_word: f64,
    pub words_counted: usize,
    /// Captions without a noun or adjective.
    pub skipped_img: usize,
    /// Captions without a language term (no noun, or no negatives).
    pub skipped_lang: usize,
    pub k: usize,
}

/// `-log(e^{pos} / (e^{pos} + Σ e^{neg}))`, computed in max-centered form.
pub fn infonce(positive: f64, negatives: &[f64]) -> f64 {
    let max = negatives.iter().cloned().fold(positive, f64::max);
    let z: f64 = std::iter::once(positive)
        .chain(negatives.iter().cloned())
        .map(|x| (x - max).exp())
        .sum();
    z.ln() - (positive - max)
}

/// [`infonce`] over a contrast set given as one slice with the positive at
/// `pos`, together with `∂loss/∂logits`.
pub fn infonce_with_grad(logits: &[f64], pos: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let loss = z.ln() - (logits[pos] - max);
    let mut grad: Vec<f64> = e.iter().map(|x| x / z).collect();
    grad[pos] -= 1.0;
    (loss, grad)
}

/// `log k - L`.
pub fn mi_lower_bound(l_value: f64, k: usize) -> f64 {
    (k.max(1) as f64).ln() - l_value
}

/// Compatibility of one caption token against every image of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiRow {
    pub example: usize,
    pub token: usize,
    /// `phi[a]` is the score against image `a`; `phi[example]` is the positive.
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImgLoss {
    pub value: f64,
    /// Sum of per-token losses before reduction.
    pub token_sum: f64,
    pub words_counted: usize,
    pub skipped: usize,
    pub table: Vec<PhiRow>,
}

/// Options for [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub reduction: Reduction,
    pub use_lang: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            reduction: Reduction::Mean,
            use_lang: true,
        }
    }
}

/// Loss value, gradients and the forward pass they came from.
pub struct Objective {
    pub report: LossReport,
    pub grads: Option<ModelGrads>,
    pub projection: Projection,
}

struct Layout {
    region_offsets: Vec<usize>,
    word_offsets: Vec<usize>,
    /// First stacked word row of each example's negatives.
    neg_offsets: Vec<Option<usize>>,
}

fn stack_inputs(batch: &TrainBatch<'_>, lang: &[Option<&LangNegatives>]) -> Result<(Matrix, Matrix, Layout)> {
    let mut region_offsets = Vec::with_capacity(batch.len());
    let mut word_offsets = Vec::with_capacity(batch.len());
    let mut neg_offsets = Vec::with_capacity(batch.len());
    let (mut r, mut w) = (0, 0);
    let mut region_parts = Vec::new();
    let mut word_parts = Vec::new();
    for (regions, caption) in &batch.examples {
        region_offsets.push(r);
        r += regions.len();
        region_parts.push(&regions.features);
        word_offsets.push(w);
        w += caption.len();
        word_parts.push(&caption.features);
    }
    for neg in lang {
        match neg {
            Some(n) => {
                neg_offsets.push(Some(w));
                w += n.features.rows();
                word_parts.push(&n.features);
            }
            None => neg_offsets.push(None),
        }
    }
    Ok((
        Matrix::vstack(&region_parts)?,
        Matrix::vstack(&word_parts)?,
        Layout {
            region_offsets,
            word_offsets,
            neg_offsets,
        },
    ))
}

/// Combined objective `L_img + L_lang` with optional analytic gradients.
///
/// `lang[b]` supplies the language-loss negatives of example `b`; pass an empty
/// slice (or `use_lang = false`) to train on the image loss alone.
pub fn total_loss(
    model: &GroundingModel,
    batch: &TrainBatch<'_>,
    lang: &[Option<&LangNegatives>],
    config: LossConfig,
    want_grads: bool,
) -> Result<Objective> {
    let k = batch.len();
    if k < 2 {
        return Err(Error::Invalid(format!(
            "image contrast needs at least 2 examples per batch, got {k}"
        )));
    }
    let lang: Vec<Option<&LangNegatives>> = if config.use_lang && !lang.is_empty() {
        if lang.len() != k {
            return Err(Error::shape("total_loss negatives", k, lang.len()));
        }
        lang.iter()
            .map(|n| n.filter(|n| n.features.rows() > 0))
            .collect()
    } else {
        vec![None; k]
    };
    for (b, neg) in lang.iter().enumerate() {
        if let Some(n) = neg {
            let caption = batch.examples[b].1;
            if n.noun_index >= caption.len() {
                return Err(Error::OutOfRange {
                    index: n.noun_index,
                    len: caption.len(),
                });
            }
            if n.features.cols() != caption.features.cols() {
                return Err(Error::shape("negative features", caption.features.cols(), n.features.cols()));
            }
        }
    }

    let (regions, words, layout) = stack_inputs(batch, &lang)?;
    let proj = Projection::new(model, &regions, &words)?;
    let d = model.d();
    let images: Vec<(Matrix, Matrix)> = batch
        .examples
        .iter()
        .zip(&layout.region_offsets)
        .map(|((r, _), &off)| proj.image_block(off, r.len()))
        .collect();
    let mut g = want_grads.then(|| proj.zero_grads());

    // image loss
    let counted: Vec<Vec<usize>> = batch.examples.iter().map(|(_, c)| c.counted_indices()).collect();
    let words_counted: usize = counted.iter().map(Vec::len).sum();
    let skipped_img = counted.iter().filter(|c| c.is_empty()).count();
    let captions_counted = k - skipped_img;
    let mut token_sum = 0.0;
    for (b, tokens) in counted.iter().enumerate() {
        let token_weight = match config.reduction {
            Reduction::Mean => 1.0 / words_counted.max(1) as f64,
            Reduction::Sum => 1.0 / captions_counted.max(1) as f64,
        };
        for &j in tokens {
            let row = layout.word_offsets[b] + j;
            let (q, u) = (proj.queries.row(row), proj.word_values.row(row));
            let atts: Vec<WordAttention> = images
                .iter()
                .map(|(keys, vals)| word_attention(keys, vals, q, u, None))
                .collect::<Result<_>>()?;
            let phi: Vec<f64> = atts.iter().map(|a| a.phi).collect();
            let (loss, dphi) = infonce_with_grad(&phi, b);
            token_sum += loss;
            if let Some(g) = g.as_mut() {
                let mut dq = vec![0.0; d];
                let mut du = vec![0.0; d];
                for (a, wa) in atts.iter().enumerate() {
                    let (keys, vals) = &images[a];
                    let off = layout.region_offsets[a] * d;
                    let len = keys.rows() * d;
                    word_attention_backward(
                        keys,
                        vals,
                        q,
                        u,
                        wa,
                        dphi[a] * token_weight,
                        &mut g.keys.as_mut_slice()[off..off + len],
                        &mut g.region_values.as_mut_slice()[off..off + len],
                        &mut dq,
                        &mut du,
                    );
                }
                crate::math::axpy(1.0, &dq, g.queries.row_mut(row));
                crate::math::axpy(1.0, &du, g.word_values.row_mut(row));
            }
        }
    }
    let l_img = match config.reduction {
        Reduction::Mean => token_sum / words_counted.max(1) as f64,
        Reduction::Sum => token_sum / captions_counted.max(1) as f64,
    };

    // language loss
    let lang_count = lang.iter().filter(|n| n.is_some()).count();
    let mut lang_sum = 0.0;
    for (b, neg) in lang.iter().enumerate() {
        let (Some(neg), Some(neg_off)) = (neg, layout.neg_offsets[b]) else {
            continue;
        };
        let (keys, vals) = &images[b];
        let rows: Vec<usize> = std::iter::once(layout.word_offsets[b] + neg.noun_index)
            .chain(neg_off..neg_off + neg.features.rows())
            .collect();
        let atts: Vec<WordAttention> = rows
            .iter()
            .map(|&r| word_attention(keys, vals, proj.queries.row(r), proj.word_values.row(r), None))
            .collect::<Result<_>>()?;
        let phi: Vec<f64> = atts.iter().map(|a| a.phi).collect();
        let (loss, dphi) = infonce_with_grad(&phi, 0);
        lang_sum += loss;
        if let Some(g) = g.as_mut() {
            let off = layout.region_offsets[b] * d;
            let len = keys.rows() * d;
            let weight = 1.0 / lang_count as f64;
            for ((&r, wa), dp) in rows.iter().zip(&atts).zip(&dphi) {
                let mut dq = vec![0.0; d];
                let mut du = vec![0.0; d];
                word_attention_backward(
                    keys,
                    vals,
                    proj.queries.row(r),
                    proj.word_values.row(r),
                    wa,
                    dp * weight,
                    &mut g.keys.as_mut_slice()[off..off + len],
                    &mut g.region_values.as_mut_slice()[off..off + len],
                    &mut dq,
                    &mut du,
                );
                crate::math::axpy(1.0, &dq, g.queries.row_mut(r));
                crate::math::axpy(1.0, &du, g.word_values.row_mut(r));
            }
        }
    }
    let l_lang = if lang_count > 0 { lang_sum / lang_count as f64 } else { 0.0 };

    let report = LossReport {
        l_img,
        l_lang,
        total: l_img + l_lang,
        mi_bound_per_word: mi_lower_bound(token_sum / words_counted.max(1) as f64, k),
        words_counted,
        skipped_img,
        skipped_lang: k - lang_count,
        k,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {report:?}")));
    }
    let grads = match g {
        Some(g) => Some(proj.backward(model, &g)?),
        None => None,
    };
    Ok(Objective {
        report,
        grads,
        projection: proj,
    })
}

/// Image loss and its compatibility table, without gradients.
pub fn infonce_img(model: &GroundingModel, batch: &TrainBatch<'_>, reduction: Reduction) -> Result<ImgLoss> {
    let k = batch.len();
    if k < 2 {
        return Err(Error::Invalid(format!(
            "image contrast needs at least 2 examples per batch, got {k}"
        )));
    }
    let projected: Vec<((Matrix, Matrix), (Matrix, Matrix))> = batch
        .examples
        .iter()
        .map(|(r, c)| Ok((model.project_regions(&r.features)?, model.project_words(&c.features)?)))
        .collect::<Result<_>>()?;
    let mut table = Vec::new();
    let mut token_sum = 0.0;
    let mut skipped = 0;
    let mut captions = 0;
    for (b, (_, caption)) in batch.examples.iter().enumerate() {
        let tokens = caption.counted_indices();
        if tokens.is_empty() {
            skipped += 1;
            continue;
        }
        captions += 1;
        let (q, u) = &projected[b].1;
        for j in tokens {
            let phi: Vec<f64> = projected
                .iter()
                .map(|((keys, vals), _)| word_attention(keys, vals, q.row(j), u.row(j), None).map(|a| a.phi))
                .collect::<Result<_>>()?;
            let negatives: Vec<f64> = phi.iter().enumerate().filter(|(a, _)| *a != b).map(|(_, p)| *p).collect();
            token_sum += infonce(phi[b], &negatives);
            table.push(PhiRow {
                example: b,
                token: j,
                phi,
            });
        }
    }
    let words_counted = table.len();
    let value = match reduction {
        Reduction::Mean => token_sum / words_counted.max(1) as f64,
        Reduction::Sum => token_sum / captions.max(1) as f64,
    };
    Ok(ImgLoss {
        value,
        token_sum,
        words_counted,
        skipped,
        table,
    })
}

/// Language loss for one caption; `None` when there is nothing to contrast.
pub fn infonce_lang(
    model: &GroundingModel,
    regions: &RegionSet,
    caption: &CaptionTokens,
    negatives: &LangNegatives,
) -> Result<Option<f64>> {
    if caption.noun_indices().is_empty() || negatives.features.rows() == 0 {
        return Ok(None);
    }
    if negatives.noun_index >= caption.len() {
        return Err(Error::OutOfRange {
            index: negatives.noun_index,
            len: caption.len(),
        });
    }
    let (keys, vals) = model.project_regions(&regions.features)?;
    let (q, u) = model.project_words(&caption.features.select_rows(&[negatives.noun_index]))?;
    let (nq, nu) = model.project_words(&negatives.features)?;
    let pos = word_attention(&keys, &vals, q.row(0), u.row(0), None)?.phi;
    let neg: Vec<f64> = (0..nq.rows())
        .map(|l| word_attention(&keys, &vals, nq.row(l), nu.row(l), None).map(|a| a.phi))
        .collect::<Result<_>>()?;
    Ok(Some(infonce(pos, &neg)))
}

/// Appends `step,l_img,l_lang,total,mi_bound_per_word,wall_ms` rows.
pub struct MetricsCsv<W: Write> {
    out: W,
}

impl<W: Write> MetricsCsv<W> {
    pub const HEADER: &'static str = "step,l_img,l_lang,total,mi_bound_per_word,wall_ms";

    pub fn new(mut out: W, write_header: bool) -> Result<Self> {
        if write_header {
            writeln!(out, "{}", Self::HEADER).map_err(|e| Error::io("<metrics csv>", e))?;
        }
        Ok(MetricsCsv { out })
    }

    pub fn append(&mut self, step: u64, r: &LossReport, wall_ms: u128) -> Result<()> {
        writeln!(
            self.out,
            "{step},{},{},{},{},{wall_ms}",
            r.l_img, r.l_lang, r.total, r.mi_bound_per_word
        )
        .map_err(|e| Error::io("<metrics csv>", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Pos;
    use crate::geometry::BBox;
    use crate::math::gradcheck::{finite_diff_grad, max_relative_error};
    use crate::math::{MlpParams, NormMode};
    use crate::rng::{substream, Rng};
    use rand::Rng as _;

    #[test]
    fn closed_forms() {
        assert!((infonce(1.0, &[0.0]) - (-(1f64.exp() / (1f64.exp() + 1.0)).ln())).abs() < 1e-15);
        assert!((infonce(1.0, &[0.0]) - 0.3133).abs() < 5e-5);
        assert!((infonce(2.0, &[0.0]) - 0.1269).abs() < 5e-5);
        assert!((infonce(0.3, &[0.3]) - 2f64.ln()).abs() < 1e-15);
        assert!((infonce(0.7, &[0.7; 25]) - 26f64.ln()).abs() < 1e-14);
        assert!(infonce(1e4, &[0.0, 1.0]) < 1e-300);
    }

    #[test]
    fn shift_invariance_is_exact_for_exact_shifts() {
        let base = [0.5, 1.25, -0.75, 2.0];
        let shifted: Vec<f64> = base.iter().map(|x| x + 4.0).collect();
        assert_eq!(infonce(base[0], &base[1..]), infonce(shifted[0], &shifted[1..]));
        let mut rng = substream(1, "shift");
        for _ in 0..100 {
            let xs: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c = rng.random_range(-50.0..50.0);
            let ys: Vec<f64> = xs.iter().map(|x| x + c).collect();
            assert!((infonce(xs[0], &xs[1..]) - infonce(ys[0], &ys[1..])).abs() < 1e-12);
        }
    }

    #[test]
    fn bound_arithmetic() {
        assert_eq!(mi_lower_bound(3f64.ln(), 3), 0.0);
        assert_eq!(mi_lower_bound(0.0, 1), 0.0);
        assert!((mi_lower_bound(2.0, 50) - 1.912).abs() < 5e-4);
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn toy(seed: u64, k: usize, m: usize, n: usize) -> (GroundingModel, Vec<RegionSet>, Vec<CaptionTokens>, Rng) {
        let mut rng = substream(seed, "loss-toy");
        let mut model = GroundingModel::new(4, 3, 3, NormMode::Affine, &mut rng);
        for t in model.trainable_mut() {
            t.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
        }
        let regions = (0..k)
            .map(|i| {
                let boxes = (0..m).map(|r| BBox::new(r as f64, 0.0, r as f64 + 0.5, 1.0)).collect();
                RegionSet::new(format!("i{i}"), boxes, random_matrix(m, 4, &mut rng)).unwrap()
            })
            .collect();
        let captions = (0..k)
            .map(|_| {
                let pos = (0..n)
                    .map(|j| match j % 3 {
                        0 => Pos::Noun,
                        1 => Pos::Other,
                        _ => Pos::Adjective,
                    })
                    .collect();
                CaptionTokens::new((0..n).map(|j| format!("w{j}")).collect(), random_matrix(n, 3, &mut rng), pos).unwrap()
            })
            .collect();
        (model, regions, captions, rng)
    }

    fn batch<'a>(r: &'a [RegionSet], c: &'a [CaptionTokens]) -> TrainBatch<'a> {
        TrainBatch::new(r.iter().zip(c).collect())
    }

    #[test]
    fn uninformative_critic_gives_log_k() {
        let (model, r, c, _) = toy(1, 4, 3, 4);
        let mut zero = model.clone();
        for map in zero.maps_mut() {
            *map = MlpParams::zeros(map.in_dim(), map.out_dim(), NormMode::Affine);
        }
        let b = batch(&r, &c);
        let obj = total_loss(&zero, &b, &[], LossConfig::default(), false).unwrap();
        assert_eq!(obj.report.l_img, 4f64.ln());
        assert_eq!(obj.report.mi_bound_per_word, 0.0);
        let img = infonce_img(&zero, &b, Reduction::Mean).unwrap();
        assert_eq!(img.value, 4f64.ln());
        assert_eq!(img.words_counted, 4 * 3);
    }

    #[test]
    fn image_loss_agrees_between_paths_and_is_nonnegative() {
        let (model, r, c, _) = toy(2, 3, 4, 5);
        let b = batch(&r, &c);
        for reduction in [Reduction::Mean, Reduction::Sum] {
            let cfg = LossConfig { reduction, use_lang: false };
            let obj = total_loss(&model, &b, &[], cfg, false).unwrap();
            let img = infonce_img(&model, &b, reduction).unwrap();
            assert!((obj.report.l_img - img.value).abs() < 1e-12);
            assert!(img.value >= 0.0);
            assert!(obj.report.mi_bound_per_word <= 3f64.ln());
        }
        let img = infonce_img(&model, &b, Reduction::Mean).unwrap();
        for row in &img.table {
            assert_eq!(row.phi.len(), 3);
            let neg: Vec<f64> = row.phi.iter().enumerate().filter(|(a, _)| *a != row.example).map(|(_, p)| *p).collect();
            assert!(infonce(row.phi[row.example], &neg) >= 0.0);
        }
    }

    #[test]
    fn captions_without_counted_tokens_are_skipped() {
        let (model, r, mut c, _) = toy(3, 3, 3, 4);
        c[1].pos = vec![Pos::Other; 4];
        let b = batch(&r, &c);
        let obj = total_loss(&model, &b, &[], LossConfig::default(), true).unwrap();
        assert_eq!(obj.report.skipped_img, 1);
        assert_eq!(obj.report.words_counted, 2 * 3);
    }

    #[test]
    fn rejects_single_example_batches() {
        let (model, r, c, _) = toy(4, 1, 3, 4);
        let b = batch(&r, &c);
        assert!(total_loss(&model, &b, &[], LossConfig::default(), false).is_err());
        assert!(infonce_img(&model, &b, Reduction::Mean).is_err());
    }

    #[test]
    fn lang_loss_symmetry_and_skip() {
        let (model, r, c, _) = toy(5, 2, 3, 4);
        let noun = c[0].features.select_rows(&[0]);
        let same = LangNegatives {
            noun_index: 0,
            features: noun.clone(),
        };
        let v = infonce_lang(&model, &r[0], &c[0], &same).unwrap().unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let many = LangNegatives {
            noun_index: 0,
            features: Matrix::vstack(&vec![&noun; 25]).unwrap(),
        };
        let v = infonce_lang(&model, &r[0], &c[0], &many).unwrap().unwrap();
        assert!((v - 26f64.ln()).abs() < 1e-13);
        let empty = LangNegatives {
            noun_index: 0,
            features: Matrix::zeros(0, 3),
        };
        assert_eq!(infonce_lang(&model, &r[0], &c[0], &empty).unwrap(), None);
        let mut no_noun = c[0].clone();
        no_noun.pos = vec![Pos::Other; 4];
        assert_eq!(infonce_lang(&model, &r[0], &no_noun, &same).unwrap(), None);
    }

    #[test]
    fn lang_term_matches_single_caption_path() {
        let (model, r, c, mut rng) = toy(6, 3, 4, 4);
        let negs: Vec<LangNegatives> = (0..3)
            .map(|_| LangNegatives {
                noun_index: 3,
                features: random_matrix(5, 3, &mut rng),
            })
            .collect();
        let lang: Vec<Option<&LangNegatives>> = vec![Some(&negs[0]), None, Some(&negs[2])];
        let b = batch(&r, &c);
        let obj = total_loss(&model, &b, &lang, LossConfig::default(), false).unwrap();
        let want = (infonce_lang(&model, &r[0], &c[0], &negs[0]).unwrap().unwrap()
            + infonce_lang(&model, &r[2], &c[2], &negs[2]).unwrap().unwrap())
            / 2.0;
        assert!((obj.report.l_lang - want).abs() < 1e-12);
        assert_eq!(obj.report.skipped_lang, 1);
        assert!((obj.report.total - obj.report.l_img - obj.report.l_lang).abs() == 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let (model, r, c, mut rng) = toy(100 + seed, 2, 3, 4);
            let negs: Vec<LangNegatives> = (0..2)
                .map(|_| LangNegatives {
                    noun_index: 0,
                    features: random_matrix(3, 3, &mut rng),
                })
                .collect();
            let lang: Vec<Option<&LangNegatives>> = negs.iter().map(Some).collect();
            let b = batch(&r, &c);
            for reduction in [Reduction::Mean, Reduction::Sum] {
                let cfg = LossConfig { reduction, use_lang: true };
                let analytic = total_loss(&model, &b, &lang, cfg, true).unwrap().grads.unwrap();
                let fd = finite_diff_grad(
                    |theta| {
                        let mut m = model.clone();
                        m.set_flat_params(theta)?;
                        Ok(total_loss(&m, &b, &lang, cfg, false)?.report.total)
                    },
                    &model.flat_params(),
                    1e-5,
                )
                .unwrap();
                let err = max_relative_error(&analytic.flatten(), &fd.grads, &fd.nonsmooth);
                assert!(err <= 1e-5, "seed {seed} {reduction:?}: {err}");
            }
        }
    }

    #[test]
    fn scaling_a_winning_critic_lowers_the_loss() {
        // positive phi is strictly largest for every token; scaling v_w's output scales phi
        let (mut model, r, c, _) = toy(7, 2, 1, 3);
        let b = batch(&r, &c);
        let mut losses = Vec::new();
        let img = infonce_img(&model, &b, Reduction::Mean).unwrap();
        let winning = img.table.iter().all(|row| {
            row.phi
                .iter()
                .enumerate()
                .all(|(a, p)| a == row.example || *p < row.phi[row.example])
        });
        if !winning {
            // flip the sign of the word values so the positives win
            model.v_w.w2.scale(-1.0);
            model.v_w.b2.iter_mut().for_each(|x| *x = -*x);
        }
        for s in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let mut m = model.clone();
            m.v_w.w2.scale(s);
            m.v_w.b2.iter_mut().for_each(|x| *x *= s);
            losses.push(infonce_img(&m, &b, Reduction::Mean).unwrap().value);
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn metrics_csv_rows() {
        let mut buf = Vec::new();
        {
            let mut csv = MetricsCsv::new(&mut buf, true).unwrap();
            let r = LossReport {
                l_img: 1.0,
                l_lang: 0.5,
                total: 1.5,
                mi_bound_per_word: 0.25,
                words_counted: 3,
                skipped_img: 0,
                skipped_lang: 0,
                k: 2,
            };
            csv.append(7, &r, 12).unwrap();
        }
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "step,l_img,l_lang,total,mi_bound_per_word,wall_ms\n7,1,0.5,1.5,0.25,12\n");
    }
}
