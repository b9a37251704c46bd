//! Training loop, run log and the gradient-check suite.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::{CaptionTokens, GroundingModel, Pos, RegionSet};
use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::geometry::BBox;
use crate::losses::{infonce_img, mi_lower_bound, total_loss, LangNegatives, LossConfig, Reduction, TrainBatch};
use crate::math::checkpoint::write_atomic;
use crate::math::gradcheck::{finite_diff_grad, max_relative_error};
use crate::math::{AdamState, Matrix, Mode, NormMode};
use crate::negcap::NegativeCache;
use crate::rng::{substream, Rng, STREAM_INIT, STREAM_NOUN};

/// Where language-loss negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSource {
    /// Context-preserving sets from a precomputed cache.
    #[default]
    Cache,
    /// Nouns taken from randomly drawn training captions, in their own context.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Steps between validation passes.
    pub eval_every: usize,
    /// Validation passes without improvement before stopping; `None` never stops early.
    pub patience: Option<usize>,
    pub seed: u64,
    pub use_lang: bool,
    pub reduction: Reduction,
    pub norm: NormMode,
    pub d: usize,
    pub n_cand: usize,
    pub n_keep: usize,
    pub negatives: NegativeSource,
    pub allow_missing_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            learning_rate: 1e-5,
            max_epochs: 30,
            eval_every: 10,
            patience: Some(5),
            seed: 0,
            use_lang: true,
            reduction: Reduction::Mean,
            norm: NormMode::Batch,
            d: 16,
            n_cand: crate::negcap::DEFAULT_N_CAND,
            n_keep: crate::negcap::DEFAULT_N_KEEP,
            negatives: NegativeSource::Cache,
            allow_missing_negatives: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Invalid("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Invalid("learning_rate must be finite and nonnegative".into()));
        }
        if self.n_keep > self.n_cand {
            return Err(Error::Invalid("n_keep must not exceed n_cand".into()));
        }
        if self.eval_every == 0 || self.d == 0 {
            return Err(Error::Invalid("eval_every and d must be at least 1".into()));
        }
        Ok(())
    }
}

/// One validation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub epoch: usize,
    /// Mean of the training batches' `log k - L_img` per word since the previous row.
    pub mi_bound_per_word: f64,
    /// The same bound on validation batches, eval mode.
    pub val_mi_bound_per_word: f64,
    pub val_recall_1: f64,
    pub val_recall_5: f64,
    pub val_recall_10: f64,
    pub val_pointing_accuracy: f64,
    /// Mean training losses since the previous row.
    pub train_l_img: f64,
    pub train_l_lang: f64,
    pub train_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
}

impl RunLog {
    pub const HEADER: &'static str = "step,epoch,mi_bound_per_word,val_mi_bound_per_word,val_recall@1,val_recall@5,val_recall@10,val_pointing_accuracy,train_l_img,train_l_lang,train_total";

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let err = |e| Error::io("<run log>", e);
        writeln!(out, "{}", Self::HEADER).map_err(err)?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.mi_bound_per_word,
                r.val_mi_bound_per_word,
                r.val_recall_1,
                r.val_recall_5,
                r.val_recall_10,
                r.val_pointing_accuracy,
                r.train_l_img,
                r.train_l_lang,
                r.train_total
            )
            .map_err(err)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }

    /// Row with the highest validation pointing accuracy, earliest on ties.
    pub fn best(&self) -> Option<&RunRow> {
        self.rows.iter().fold(None, |best: Option<&RunRow>, r| match best {
            Some(b) if b.val_pointing_accuracy >= r.val_pointing_accuracy => Some(b),
            _ => Some(r),
        })
    }
}

/// Trailing mean over up to `window` values ending at each index.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// The bound-versus-accuracy shape of a run: where smoothed accuracy peaks
/// and how the smoothed bound there compares with its final value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePattern {
    pub peak_accuracy_step: usize,
    pub final_step: usize,
    pub bound_at_peak: f64,
    pub bound_at_start: f64,
    pub bound_at_final: f64,
}

impl CurvePattern {
    /// Accuracy peaks no later than the end while the bound keeps its level
    /// after the peak and ends above where it started.
    pub fn holds(&self) -> bool {
        self.peak_accuracy_step <= self.final_step
            && self.bound_at_final >= self.bound_at_peak
            && self.bound_at_final >= self.bound_at_start
    }
}

impl RunLog {
    /// `None` for an empty log. Ties in smoothed accuracy go to the earliest row.
    pub fn curve_pattern(&self, window: usize) -> Option<CurvePattern> {
        let last = self.rows.len().checked_sub(1)?;
        let acc = moving_average(&self.rows.iter().map(|r| r.val_pointing_accuracy).collect::<Vec<_>>(), window);
        let bound = moving_average(&self.rows.iter().map(|r| r.mi_bound_per_word).collect::<Vec<_>>(), window);
        let peak = (0..acc.len()).fold(0, |best, i| if acc[i] > acc[best] { i } else { best });
        Some(CurvePattern {
            peak_accuracy_step: self.rows[peak].step,
            final_step: self.rows[last].step,
            bound_at_peak: bound[peak],
            bound_at_start: bound[0],
            bound_at_final: bound[last],
        })
    }
}

pub struct TrainOutcome {
    /// Model at the best validation pass, in eval mode.
    pub best_model: GroundingModel,
    pub best_step: usize,
    pub final_model: GroundingModel,
    pub log: RunLog,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Optional on-disk outputs of a run.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        TrainOutputs { dir: Some(dir.into()) }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

pub const BEST_CHECKPOINT: &str = "best.igck";
pub const LAST_CHECKPOINT: &str = "last.igck";
pub const RUN_LOG: &str = "runlog.csv";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.json";
pub const STEP_METRICS: &str = "steps.csv";
pub const STEP_METRICS_HEADER: &str = "step,l_img,l_lang,total,mi_bound_per_word,wall_ms";

/// Language negatives of one example, indexed by noun position.
type ExampleNegatives = Vec<(usize, Option<LangNegatives>)>;

fn cached_negatives(train: &Dataset, cache: &NegativeCache, allow_missing: bool) -> Result<Vec<ExampleNegatives>> {
    train
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.caption
                .noun_indices()
                .into_iter()
                .map(|pos| match cache.get(&p.caption.tokens, pos) {
                    Some(set) => Ok((pos, Some(set.to_lang_negatives()?))),
                    None if allow_missing => Ok((pos, None)),
                    None => Err(Error::Invalid(format!(
                        "no cached negatives for record {i} ({}) at noun {pos}; run make-negatives or allow missing negatives",
                        p.regions.image_id
                    ))),
                })
                .collect()
        })
        .collect()
}

/// `n` nouns from other training captions, each in its own caption's context.
fn random_negatives(train: &Dataset, own: usize, noun_index: usize, n: usize, rng: &mut Rng) -> LangNegatives {
    let d_w = train.d_w;
    let mut rows = Vec::with_capacity(n * d_w);
    let mut count = 0;
    let mut attempts = 0;
    while count < n && attempts < 100 * n.max(1) {
        attempts += 1;
        let e = rng.random_range(0..train.len());
        if e == own {
            continue;
        }
        let cap = &train.pairs[e].caption;
        let nouns = cap.noun_indices();
        if nouns.is_empty() {
            continue;
        }
        let j = nouns[rng.random_range(0..nouns.len())];
        rows.extend_from_slice(cap.features.row(j));
        count += 1;
    }
    LangNegatives {
        noun_index,
        features: Matrix::from_vec(count, d_w, rows).expect("row count"),
    }
}

/// `log k - L_img` per word on the validation set, in eval mode, over
/// consecutive batches of `batch_size` (a trailing batch under 2 is dropped).
pub fn validation_bound(model: &GroundingModel, val: &Dataset, batch_size: usize) -> Result<f64> {
    let mut weighted = 0.0;
    let mut words = 0usize;
    for chunk in val.pairs.chunks(batch_size).filter(|c| c.len() >= 2) {
        let batch = TrainBatch::new(chunk.iter().map(|p| (&p.regions, &p.caption)).collect());
        let img = infonce_img(model, &batch, Reduction::Mean)?;
        weighted += mi_lower_bound(img.value, chunk.len()) * img.words_counted as f64;
        words += img.words_counted;
    }
    Ok(if words == 0 { 0.0 } else { weighted / words as f64 })
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: usize,
    epoch: usize,
    image_ids: Vec<&'a str>,
    message: String,
}

/// Trains a grounding model, evaluating every `eval_every` steps and keeping
/// the model with the best validation pointing accuracy.
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    negatives: Option<&NegativeCache>,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Invalid("training set needs at least 2 examples".into()));
    }
    if (train_set.d_r, train_set.d_w) != (val_set.d_r, val_set.d_w) {
        return Err(Error::Invalid("train and validation feature dims differ".into()));
    }
    let lang_table = match (config.use_lang, config.negatives) {
        (true, NegativeSource::Cache) => {
            let cache = match negatives {
                Some(c) => c,
                None if config.allow_missing_negatives => &NegativeCache::new(),
                None => return Err(Error::Invalid("language loss needs a negative cache".into())),
            };
            Some(cached_negatives(train_set, cache, config.allow_missing_negatives)?)
        }
        _ => None,
    };

    let mut init_rng = substream(config.seed, STREAM_INIT);
    let mut model = GroundingModel::new(train_set.d_r, train_set.d_w, config.d, config.norm, &mut init_rng);
    let mut adam = AdamState::for_tensors(&model.trainable(), config.learning_rate);
    let mut noun_rng = substream(config.seed, STREAM_NOUN);
    let mut random_neg_rng = substream(config.seed, "random-negatives");
    let loss_cfg = LossConfig {
        reduction: config.reduction,
        use_lang: config.use_lang,
    };

    let mut log = RunLog::default();
    let mut best: Option<(f64, usize, GroundingModel)> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;
    let mut acc = [0.0f64; 4];
    let mut acc_n = 0usize;
    let mut stopped_early = false;
    // (writer, start time); no clock is read without an output directory
    let mut step_csv = match outputs.path(STEP_METRICS) {
        Some(path) => {
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            writeln!(w, "{STEP_METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((w, std::time::Instant::now()))
        }
        None => None,
    };

    'epochs: for epoch in 0..config.max_epochs {
        for idx in epoch_batches(train_set.len(), config.batch_size, config.seed, epoch as u64)? {
            let batch = TrainBatch::new(
                idx.iter()
                    .map(|&i| (&train_set.pairs[i].regions, &train_set.pairs[i].caption))
                    .collect(),
            );
            let picks: Vec<Option<usize>> = if config.use_lang {
                idx.iter()
                    .map(|&i| {
                        let nouns = train_set.pairs[i].caption.noun_indices();
                        (!nouns.is_empty()).then(|| nouns[noun_rng.random_range(0..nouns.len())])
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let owned: Vec<Option<LangNegatives>> = match (&lang_table, config.use_lang) {
                (None, true) => idx
                    .iter()
                    .zip(&picks)
                    .map(|(&i, pick)| pick.map(|pos| random_negatives(train_set, i, pos, config.n_keep, &mut random_neg_rng)))
                    .collect(),
                _ => Vec::new(),
            };
            let borrowed: Vec<Option<&LangNegatives>> = match &lang_table {
                Some(table) => idx
                    .iter()
                    .zip(&picks)
                    .map(|(&i, pick)| {
                        pick.and_then(|pos| table[i].iter().find(|(p, _)| *p == pos).and_then(|(_, n)| n.as_ref()))
                    })
                    .collect(),
                None => owned.iter().map(Option::as_ref).collect(),
            };

            let objective = total_loss(&model, &batch, &borrowed, loss_cfg, true).and_then(|o| {
                if o.grads.as_ref().is_some_and(|g| g.is_finite()) {
                    Ok(o)
                } else {
                    Err(Error::NonFinite(format!("non-finite gradient at step {step}")))
                }
            });
            let objective = match objective {
                Ok(o) => o,
                Err(Error::NonFinite(msg)) => {
                    if let Some(path) = outputs.path(NONFINITE_DUMP) {
                        let dump = NonFiniteDump {
                            step,
                            epoch,
                            image_ids: batch.examples.iter().map(|(r, _)| r.image_id.as_str()).collect(),
                            message: msg.clone(),
                        };
                        write_atomic(&path, &serde_json::to_vec_pretty(&dump)?)?;
                    }
                    return Err(Error::NonFinite(format!("step {step}, epoch {epoch}: {msg}")));
                }
                Err(e) => return Err(e),
            };
            if config.norm == NormMode::Batch {
                objective.projection.absorb_batch_stats(&mut model);
            }
            let grads = objective.grads.expect("requested");
            adam.step(&mut model.trainable_mut(), &grads.slices())?;
            step += 1;
            let r = objective.report;
            acc[0] += r.l_img;
            acc[1] += r.l_lang;
            acc[2] += r.total;
            acc[3] += r.mi_bound_per_word;
            acc_n += 1;
            if let Some((w, started)) = step_csv.as_mut() {
                writeln!(
                    w,
                    "{step},{},{},{},{},{}",
                    r.l_img,
                    r.l_lang,
                    r.total,
                    r.mi_bound_per_word,
                    started.elapsed().as_millis()
                )
                .map_err(|e| Error::io(STEP_METRICS, e))?;
            }

            if step % config.eval_every == 0 {
                let eval_model = model.eval_copy();
                let report: EvalReport = evaluate(&eval_model, val_set)?;
                let row = RunRow {
                    step,
                    epoch,
                    mi_bound_per_word: acc[3] / acc_n as f64,
                    val_mi_bound_per_word: validation_bound(&eval_model, val_set, config.batch_size)?,
                    val_recall_1: report.recall(1),
                    val_recall_5: report.recall(5),
                    val_recall_10: report.recall(10),
                    val_pointing_accuracy: report.pointing_accuracy,
                    train_l_img: acc[0] / acc_n as f64,
                    train_l_lang: acc[1] / acc_n as f64,
                    train_total: acc[2] / acc_n as f64,
                };
                acc = [0.0; 4];
                acc_n = 0;
                log::info!(
                    "step {step} epoch {epoch}: bound {:.4} pointing {:.4} loss {:.4}",
                    row.mi_bound_per_word,
                    row.val_pointing_accuracy,
                    row.train_total
                );
                if let Some(path) = outputs.path(LAST_CHECKPOINT) {
                    eval_model.save(&path)?;
                }
                let improved = best.as_ref().is_none_or(|(a, _, _)| row.val_pointing_accuracy > *a);
                if improved {
                    if let Some(path) = outputs.path(BEST_CHECKPOINT) {
                        eval_model.save(&path)?;
                    }
                    best = Some((row.val_pointing_accuracy, step, eval_model));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                log.rows.push(row);
                if let Some(path) = outputs.path(RUN_LOG) {
                    write_atomic(&path, log.to_csv_string().as_bytes())?;
                }
                if config.patience.is_some_and(|p| since_best > p) {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }

    if let Some((w, _)) = step_csv.as_mut() {
        w.flush().map_err(|e| Error::io(STEP_METRICS, e))?;
    }
    let final_model = model.eval_copy();
    let (best_step, best_model) = match best {
        Some((_, s, m)) => (s, m),
        None => (step, final_model.clone()),
    };
    Ok(TrainOutcome {
        best_model,
        best_step,
        final_model,
        log,
        steps: step,
        stopped_early,
    })
}

/// Result of the finite-difference suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub max_relative_error: f64,
    pub worst_instance: usize,
    pub parameters_checked: usize,
    /// Coordinates skipped because a ReLU kink fell inside the stencil.
    pub nonsmooth_skipped: usize,
}

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;
const GRAD_CHECK_EPS: f64 = 1e-5;

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape")
}

/// Random affine-mode instance: 2–4 examples, 3–8 regions, 4–10 tokens, with
/// language negatives on the first noun of each caption.
fn grad_check_instance(rng: &mut Rng) -> (GroundingModel, Vec<RegionSet>, Vec<CaptionTokens>, Vec<LangNegatives>) {
    let (d_r, d_w, d) = (4, 3, 3);
    let mut model = GroundingModel::new(d_r, d_w, d, NormMode::Affine, rng);
    for t in model.trainable_mut() {
        t.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
    }
    model.set_mode(Mode::Train);
    let k = rng.random_range(2..=4);
    let mut regions = Vec::new();
    let mut captions = Vec::new();
    let mut negatives = Vec::new();
    for e in 0..k {
        let m = rng.random_range(3..=8);
        let boxes = (0..m).map(|i| BBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0)).collect();
        regions.push(RegionSet::new(format!("gc-{e}"), boxes, random_matrix(m, d_r, rng)).expect("valid"));
        let n = rng.random_range(4..=10);
        let mut pos: Vec<Pos> = (0..n)
            .map(|_| match rng.random_range(0..3) {
                0 => Pos::Noun,
                1 => Pos::Adjective,
                _ => Pos::Other,
            })
            .collect();
        pos[0] = Pos::Noun;
        let tokens = (0..n).map(|j| format!("t{j}")).collect();
        captions.push(CaptionTokens::new(tokens, random_matrix(n, d_w, rng), pos).expect("valid"));
        let n_neg = rng.random_range(1..=4);
        negatives.push(LangNegatives {
            noun_index: 0,
            features: random_matrix(n_neg, d_w, rng),
        });
    }
    (model, regions, captions, negatives)
}

/// Compares analytic gradients of `L_img + L_lang` with central differences
/// over `instances` random instances.
pub fn check_grad_suite(seed: u64, instances: usize) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        instances,
        max_relative_error: 0.0,
        worst_instance: 0,
        parameters_checked: 0,
        nonsmooth_skipped: 0,
    };
    for i in 0..instances {
        let mut rng = crate::rng::indexed_substream(seed, "check-grad", i as u64);
        let (model, regions, captions, negs) = grad_check_instance(&mut rng);
        let batch = TrainBatch::new(regions.iter().zip(&captions).collect());
        let lang: Vec<Option<&LangNegatives>> = negs.iter().map(Some).collect();
        let cfg = LossConfig::default();
        let analytic = total_loss(&model, &batch, &lang, cfg, true)?
            .grads
            .expect("requested")
            .flatten();
        let fd = finite_diff_grad(
            |theta| {
                let mut m = model.clone();
                m.set_flat_params(theta)?;
                Ok(total_loss(&m, &batch, &lang, cfg, false)?.report.total)
            },
            &model.flat_params(),
            GRAD_CHECK_EPS,
        )?;
        let err = max_relative_error(&analytic, &fd.grads, &fd.nonsmooth);
        report.parameters_checked += analytic.len() - fd.nonsmooth_count();
        report.nonsmooth_skipped += fd.nonsmooth_count();
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_instance = i;
        }
    }
    Ok(report)
}

/// Writes the model to `path` atomically.
pub fn save_checkpoint(model: &GroundingModel, path: &Path) -> Result<()> {
    model.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, SynthConfig};

    fn tiny() -> (Dataset, Dataset) {
        let out = synth_generate(&SynthConfig {
            num_images: 24,
            num_val_images: 8,
            d_r: 8,
            d_w: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        (out.train, out.val)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-2,
            max_epochs: 2,
            eval_every: 3,
            patience: None,
            use_lang: false,
            norm: NormMode::Affine,
            d: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (tr, va) = tiny();
        let c = TrainConfig { learning_rate: 0.0, ..cfg() };
        let out = train(&c, &tr, &va, None, &TrainOutputs::default()).unwrap();
        let init = GroundingModel::new(8, 8, 4, NormMode::Affine, &mut substream(c.seed, STREAM_INIT));
        assert_eq!(out.final_model.flat_params(), init.flat_params());
        assert_eq!(out.steps, 6);
    }

    #[test]
    fn runs_are_reproducible() {
        let (tr, va) = tiny();
        let a = train(&cfg(), &tr, &va, None, &TrainOutputs::default()).unwrap();
        let b = train(&cfg(), &tr, &va, None, &TrainOutputs::default()).unwrap();
        assert_eq!(a.log.to_csv_string(), b.log.to_csv_string());
        assert_eq!(a.log.rows.len(), 2);
        assert!(a.log.rows.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn best_is_earliest_argmax() {
        let row = |step, acc| RunRow {
            step,
            epoch: 0,
            mi_bound_per_word: 0.0,
            val_mi_bound_per_word: 0.0,
            val_recall_1: 0.0,
            val_recall_5: 0.0,
            val_recall_10: 0.0,
            val_pointing_accuracy: acc,
            train_l_img: 0.0,
            train_l_lang: 0.0,
            train_total: 0.0,
        };
        let log = RunLog {
            rows: vec![row(1, 0.2), row(2, 0.5), row(3, 0.5), row(4, 0.1)],
        };
        assert_eq!(log.best().unwrap().step, 2);
    }

    #[test]
    fn missing_negatives_are_refused() {
        let (tr, va) = tiny();
        let c = TrainConfig { use_lang: true, ..cfg() };
        assert!(train(&c, &tr, &va, Some(&NegativeCache::new()), &TrainOutputs::default()).is_err());
        let c = TrainConfig {
            allow_missing_negatives: true,
            ..c
        };
        assert!(train(&c, &tr, &va, None, &TrainOutputs::default()).is_ok());
    }

    #[test]
    fn checkpoints_are_written() {
        let (tr, va) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg(), &tr, &va, None, &TrainOutputs::in_dir(dir.path())).unwrap();
        let best = GroundingModel::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
        assert_eq!(best.flat_params(), out.best_model.flat_params());
        let csv = std::fs::read_to_string(dir.path().join(RUN_LOG)).unwrap();
        assert_eq!(csv, out.log.to_csv_string());
    }

    #[test]
    fn grad_suite_small() {
        let r = check_grad_suite(7, 3).unwrap();
        assert!(r.max_relative_error <= GRAD_CHECK_TOLERANCE, "{r:?}");
    }
}
