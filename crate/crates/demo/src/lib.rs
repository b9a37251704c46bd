//! Browser demo: an InfoNCE bound explorer, a negative-caption re-rank
//! explorer, and attention heatmaps of a model trained in the page.
//!
//! Every export returns a JSON string; errors come back as strings.

use infoground::attention::{compatibility_batch, GroundingModel};
use infoground::math::{Matrix, NormMode};
use infoground::mi::{infonce_bound, random_critic, DiscreteJoint};
use infoground::negcap::{rerank_and_keep, top_candidates, MaskedCaption, NegParams, NegativeCache};
use infoground::rng::substream;
use infoground::synth::{synth_generate, SynthConfig, SynthOutput};
use infoground::train::{train, TrainConfig, TrainOutputs};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Exact MI and sampled `log k - L` for the 2×2 joint `[[a, 1/2-a], [1/2-a, a]]`.
/// `critic` is `"random"` or `"ratio"`.
#[wasm_bindgen]
pub fn mi_bound(diagonal: f64, k: usize, batches: usize, seed: u32, critic: &str) -> Result<String, String> {
    if !(0.0..=0.5).contains(&diagonal) {
        return Err("diagonal mass must lie in [0, 0.5]".into());
    }
    let off = 0.5 - diagonal;
    let joint = DiscreteJoint::new(Matrix::from_rows(&[[diagonal, off], [off, diagonal]]).map_err(err)?).map_err(err)?;
    let table = match critic {
        "random" => random_critic(2, 2, &mut substream(seed as u64, "mi-critic")),
        "ratio" => {
            let mut c = joint.log_density_ratio();
            c.as_mut_slice().iter_mut().for_each(|v| *v = v.max(-50.0));
            c
        }
        other => return Err(format!("unknown critic {other:?}")),
    };
    let est = infonce_bound(&joint, &table, k, batches, &mut substream(seed as u64, "mi-samples")).map_err(err)?;
    Ok(json!({
        "exact_mi": est.exact_mi,
        "mean_bound": est.mean_bound,
        "std_err": est.std_err,
        "log_k": (k as f64).ln(),
    })
    .to_string())
}

#[wasm_bindgen]
pub struct Demo {
    data: SynthOutput,
    cache: NegativeCache,
    model: GroundingModel,
}

#[wasm_bindgen]
impl Demo {
    /// Generates a small synthetic world and an untrained model.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, String> {
        let cfg = SynthConfig {
            num_images: 200,
            num_val_images: 40,
            d_r: 16,
            d_w: 16,
            seed: seed as u64,
            ..SynthConfig::default()
        };
        let data = synth_generate(&cfg).map_err(err)?;
        let cache = NegativeCache::build(data.train.pairs.iter().map(|p| &p.caption), &data.lm, NegParams::default())
            .map_err(err)?;
        let model = GroundingModel::new(16, 16, 16, NormMode::Affine, &mut substream(seed as u64, "init"));
        Ok(Demo { data, cache, model })
    }

    pub fn train_count(&self) -> usize {
        self.data.train.len()
    }

    pub fn val_count(&self) -> usize {
        self.data.val.len()
    }

    /// Tokens of training caption `index` and the positions of its nouns.
    pub fn caption(&self, index: usize) -> Result<String, String> {
        let pair = self.data.train.pairs.get(index).ok_or("caption index out of range")?;
        Ok(json!({
            "tokens": pair.caption.tokens,
            "nouns": pair.caption.noun_indices(),
        })
        .to_string())
    }

    /// Candidates for the noun at `position` of training caption `index`, in
    /// masked-probability order, with their re-rank scores and whether they
    /// survive into the kept set.
    pub fn negatives(&self, index: usize, position: usize, n_cand: usize, n_keep: usize) -> Result<String, String> {
        let pair = self.data.train.pairs.get(index).ok_or("caption index out of range")?;
        let masked = MaskedCaption::new(pair.caption.tokens.clone(), position).map_err(err)?;
        let cands = top_candidates(&masked, &self.data.lm, n_cand).map_err(err)?;
        let kept = rerank_and_keep(&cands, &masked, &self.data.lm, n_keep).map_err(err)?;
        let rows: Vec<_> = cands
            .iter()
            .map(|c| {
                let pos = kept.negatives.iter().position(|n| n.word == c.word);
                let q = pos.map(|i| kept.negatives[i].q_given_sc);
                json!({
                    "word": c.word,
                    "p": c.p_given_c,
                    "q": q,
                    "score": pos.map(|i| kept.negatives[i].rank_score),
                    "kept_rank": pos,
                    "original": c.word == masked.original_noun,
                })
            })
            .collect();
        Ok(json!({ "context": masked.context_signature().replace('\u{1}', " "), "candidates": rows }).to_string())
    }

    /// Trains from scratch with both losses and keeps the best model; returns
    /// the run log rows.
    pub fn train(&mut self, epochs: usize, learning_rate: f64, use_lang: bool) -> Result<String, String> {
        let cfg = TrainConfig {
            batch_size: 50,
            learning_rate,
            max_epochs: epochs,
            eval_every: 4,
            patience: None,
            use_lang,
            norm: NormMode::Affine,
            d: 16,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &self.data.train, &self.data.val, Some(&self.cache), &TrainOutputs::default())
            .map_err(err)?;
        self.model = out.best_model;
        let rows: Vec<_> = out
            .log
            .rows
            .iter()
            .map(|r| json!({ "step": r.step, "bound": r.mi_bound_per_word, "pointing": r.val_pointing_accuracy }))
            .collect();
        Ok(json!({ "best_step": out.best_step, "rows": rows }).to_string())
    }

    /// Attention weights (regions × tokens) of the current model on
    /// validation image `index`, with boxes and ground-truth boxes per noun.
    pub fn attention(&self, index: usize) -> Result<String, String> {
        let ex = (index < self.data.val.len())
            .then(|| self.data.val.example(index))
            .ok_or("validation index out of range")?;
        let res = compatibility_batch(&self.model.eval_copy(), ex.regions, ex.caption).map_err(err)?;
        let weights: Vec<Vec<f64>> = res.weights.iter_rows().map(|r| r.to_vec()).collect();
        let truth: Vec<_> = ex
            .phrases
            .iter()
            .map(|p| json!({ "token": p.span.0, "box": p.boxes[0] }))
            .collect();
        Ok(json!({
            "tokens": ex.caption.tokens,
            "boxes": ex.regions.boxes,
            "weights": weights,
            "truth": truth,
        })
        .to_string())
    }
}
