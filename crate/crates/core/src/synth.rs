//! Synthetic grounding data with planted word-region correspondences.
//!
//! Concepts are grouped into scenes. Every image belongs to one scene and holds
//! a few salient concepts from it plus clutter from other scenes, each in its
//! own grid cell. A caption names some of the salient concepts (possibly by a
//! synonym) and the scene. Region features are noisy concept prototypes; word
//! features come from a table language model whose embeddings mix in the rest
//! of the caption, plus noise. The same table model carries masked and
//! conditioned distributions for every caption noun, so negative captions can
//! be built for the generated data.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{CaptionTokens, Pos, RegionSet};
use crate::data::{Dataset, Phrase, Split, TrainingPair};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::math::Matrix;
use crate::negcap::{conditioned_key, LmScorer, MaskedCaption, TableLm, WordDist};
use crate::rng::{substream, Rng};

const CONCEPT_NAMES: [&str; 24] = [
    "dog", "frisbee", "bench", "tree", "kite", "ball", "bicycle", "fountain", //
    "cup", "plate", "knife", "oven", "sink", "bowl", "kettle", "spoon", //
    "car", "bus", "sign", "truck", "lamp", "person", "hydrant", "taxi",
];
const SYNONYMS: [(&str, &str); 8] = [
    ("dog", "puppy"),
    ("cup", "mug"),
    ("car", "automobile"),
    ("person", "pedestrian"),
    ("plate", "dish"),
    ("bus", "coach"),
    ("bicycle", "bike"),
    ("tree", "oak"),
];
const SCENE_NAMES: [&str; 3] = ["park", "kitchen", "street"];
const FILLERS: [&str; 6] = ["with", "near", "on", "by", "beside", "next"];

const IMAGE_SIZE: f64 = 400.0;
/// Masked probability weight for words outside the caption's scene.
const OFF_SCENE_WEIGHT: f64 = 0.02;
/// Conditioned probability weight for words of another concept than the original.
const OTHER_CONCEPT_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_images: usize,
    pub num_val_images: usize,
    pub regions_per_image: usize,
    /// Distinct noun words, synonyms included.
    pub vocab_size: usize,
    pub caption_length: usize,
    pub noun_fraction: f64,
    pub d_r: usize,
    pub d_w: usize,
    pub alignment_noise: f64,
    pub seed: u64,
    pub num_scenes: usize,
    pub synonym_pairs: usize,
    /// Regions drawn from the image's own scene; the rest are clutter.
    pub salient_per_image: usize,
    /// Grid side; images hold at most `grid * grid` regions.
    pub grid: usize,
    pub context_mix: f64,
    /// Distance of a synonym's embedding from its base word's.
    pub synonym_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 500,
            num_val_images: 100,
            regions_per_image: 8,
            vocab_size: 30,
            caption_length: 8,
            noun_fraction: 0.25,
            d_r: 32,
            d_w: 32,
            alignment_noise: 0.1,
            seed: 0,
            num_scenes: 3,
            synonym_pairs: 6,
            salient_per_image: 4,
            grid: 4,
            context_mix: 0.5,
            synonym_spread: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_images", self.num_images),
            ("regions_per_image", self.regions_per_image),
            ("vocab_size", self.vocab_size),
            ("caption_length", self.caption_length),
            ("d_r", self.d_r),
            ("d_w", self.d_w),
            ("num_scenes", self.num_scenes),
            ("salient_per_image", self.salient_per_image),
            ("grid", self.grid),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be at least 1")));
        }
        if !(self.alignment_noise >= 0.0) || !(self.synonym_spread >= 0.0) || !self.context_mix.is_finite() {
            return Err(Error::Invalid("noise, spread and context mix must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.noun_fraction) {
            return Err(Error::Invalid("noun_fraction must lie in [0, 1]".into()));
        }
        let m = self.regions_per_image;
        if m > self.grid * self.grid {
            return Err(Error::Invalid(format!(
                "{m} regions do not fit a {0}x{0} grid",
                self.grid
            )));
        }
        if self.vocab_size < m {
            return Err(Error::Invalid(format!(
                "vocabulary of {} cannot fill {m} distinct regions",
                self.vocab_size
            )));
        }
        if self.num_scenes > self.concepts() {
            return Err(Error::Invalid("more scenes than concepts".into()));
        }
        Ok(())
    }

    fn synonym_count(&self) -> usize {
        self.synonym_pairs.min(self.vocab_size - self.regions_per_image.min(self.vocab_size))
    }

    fn concepts(&self) -> usize {
        self.vocab_size - self.synonym_count()
    }
}

/// Where a caption noun truly is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub image_id: String,
    pub token_index: usize,
    pub region_index: usize,
    pub concept: usize,
}

/// The generator's hidden state, kept for oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub concept_names: Vec<String>,
    /// Noun word → concept.
    pub word_concept: BTreeMap<String, usize>,
    pub scene_of_concept: Vec<usize>,
    pub scene_names: Vec<String>,
    /// One row per concept, in region-feature space.
    pub region_prototypes: Matrix,
}

impl SynthWorld {
    pub fn concept_words(&self, concept: usize) -> Vec<&str> {
        self.word_concept
            .iter()
            .filter(|(_, &c)| c == concept)
            .map(|(w, _)| w.as_str())
            .collect()
    }

    /// Index of the prototype nearest to `feature`.
    pub fn nearest_concept(&self, feature: &[f64]) -> usize {
        self.region_prototypes
            .iter_rows()
            .map(|p| p.iter().zip(feature).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("at least one concept")
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Dataset,
    pub val: Dataset,
    pub oracle: Vec<OracleEntry>,
    pub lm: TableLm,
    pub world: SynthWorld,
}

fn gaussian_vec(rng: &mut Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * normal(rng)).collect()
}

fn normal(rng: &mut Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Rounds through f32 so features survive the blob format bit-exactly.
fn f32_round(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

fn build_world(cfg: &SynthConfig, rng: &mut Rng) -> (SynthWorld, BTreeMap<String, Vec<f64>>) {
    let n_concepts = cfg.concepts();
    let concept_names: Vec<String> = (0..n_concepts)
        .map(|i| CONCEPT_NAMES.get(i).map_or_else(|| format!("thing{i}"), |s| s.to_string()))
        .collect();
    let scene_names: Vec<String> = (0..cfg.num_scenes)
        .map(|i| SCENE_NAMES.get(i).map_or_else(|| format!("place{i}"), |s| s.to_string()))
        .collect();
    let scene_of_concept = (0..n_concepts).map(|c| c * cfg.num_scenes / n_concepts).collect();

    let mut word_concept: BTreeMap<String, usize> =
        concept_names.iter().enumerate().map(|(c, w)| (w.clone(), c)).collect();
    let mut embeddings = BTreeMap::new();
    for w in &concept_names {
        embeddings.insert(w.clone(), gaussian_vec(rng, cfg.d_w, 1.0));
    }
    // synonyms go to the concepts named in SYNONYMS first, then in order
    let mut syn_targets: Vec<(usize, String)> = SYNONYMS
        .iter()
        .filter_map(|(base, syn)| concept_names.iter().position(|c| c == base).map(|c| (c, syn.to_string())))
        .collect();
    let named: BTreeSet<usize> = syn_targets.iter().map(|(c, _)| *c).collect();
    syn_targets.extend(
        (0..n_concepts)
            .filter(|c| !named.contains(c))
            .map(|c| (c, format!("{}-alt", concept_names[c]))),
    );
    for (c, syn) in syn_targets.into_iter().take(cfg.synonym_count()) {
        let mut e = embeddings[&concept_names[c]].clone();
        for (x, n) in e.iter_mut().zip(gaussian_vec(rng, cfg.d_w, cfg.synonym_spread)) {
            *x += n;
        }
        embeddings.insert(syn.clone(), e);
        word_concept.insert(syn, c);
    }
    for w in scene_names.iter().map(String::as_str).chain(FILLERS).chain(["a", "and", "in", "the"]) {
        embeddings.insert(w.to_string(), gaussian_vec(rng, cfg.d_w, 1.0));
    }
    let region_prototypes = Matrix::from_vec(
        n_concepts,
        cfg.d_r,
        (0..n_concepts).flat_map(|_| gaussian_vec(rng, cfg.d_r, 1.0)).collect(),
    )
    .expect("prototype shape");
    (
        SynthWorld {
            concept_names,
            word_concept,
            scene_of_concept,
            scene_names,
            region_prototypes,
        },
        embeddings,
    )
}

struct Caption {
    tokens: Vec<String>,
    pos: Vec<Pos>,
    /// (token index, concept)
    nouns: Vec<(usize, usize)>,
}

fn build_caption(cfg: &SynthConfig, world: &SynthWorld, scene: usize, salient: &[usize], rng: &mut Rng) -> Caption {
    let k = ((cfg.caption_length as f64 * cfg.noun_fraction).round() as usize).clamp(1, salient.len());
    let chosen: Vec<usize> = salient.choose_multiple(rng, k).copied().collect();
    let mut tokens = Vec::new();
    let mut pos = Vec::new();
    let mut nouns = Vec::new();
    let push = |tokens: &mut Vec<String>, pos: &mut Vec<Pos>, t: &str, p: Pos| {
        tokens.push(t.to_string());
        pos.push(p);
    };
    for (i, &c) in chosen.iter().enumerate() {
        if i > 0 {
            push(&mut tokens, &mut pos, "and", Pos::Other);
        }
        push(&mut tokens, &mut pos, "a", Pos::Other);
        let words = world.concept_words(c);
        let w = *words.choose(rng).expect("concept has a word");
        nouns.push((tokens.len(), c));
        push(&mut tokens, &mut pos, w, Pos::Noun);
    }
    for t in ["in", "the", world.scene_names[scene].as_str()] {
        push(&mut tokens, &mut pos, t, Pos::Other);
    }
    // pad with fillers placed before the scene phrase
    while tokens.len() < cfg.caption_length {
        let at = tokens.len() - 3;
        tokens.insert(at, FILLERS.choose(rng).unwrap().to_string());
        pos.insert(at, Pos::Other);
    }
    Caption { tokens, pos, nouns }
}

fn normalize(weights: BTreeMap<String, f64>) -> WordDist {
    let z: f64 = weights.values().sum();
    weights.into_iter().map(|(w, p)| (w, p / z)).collect()
}

/// `p(s'|c)`: words of the caption's scene are likely unless their concept is
/// already named elsewhere in the caption.
fn masked_table(world: &SynthWorld, scene: usize, other_concepts: &[usize]) -> WordDist {
    normalize(
        world
            .word_concept
            .iter()
            .map(|(w, &c)| {
                let likely = world.scene_of_concept[c] == scene && !other_concepts.contains(&c);
                (w.clone(), if likely { 1.0 } else { OFF_SCENE_WEIGHT })
            })
            .collect(),
    )
}

/// `q(s'|s,c)`: concentrated on the original noun's concept.
fn conditioned_table(world: &SynthWorld, concept: usize) -> WordDist {
    normalize(
        world
            .word_concept
            .iter()
            .map(|(w, &c)| (w.clone(), if c == concept { 1.0 } else { OTHER_CONCEPT_WEIGHT }))
            .collect(),
    )
}

/// Generates train and validation splits, the oracle alignment table and the
/// matching table language model.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut world_rng = substream(cfg.seed, "synth-world");
    let (world, embeddings) = build_world(cfg, &mut world_rng);
    let mut lm = TableLm {
        vocab: world.word_concept.keys().cloned().collect(),
        embeddings,
        masked: BTreeMap::new(),
        conditioned: BTreeMap::new(),
        context_mix: cfg.context_mix,
    };
    let n_concepts = world.concept_names.len();
    let cell = IMAGE_SIZE / cfg.grid as f64;
    let m = cfg.regions_per_image;

    let mut oracle = Vec::new();
    let mut splits = Vec::new();
    for (split, count, tag) in [(Split::Train, cfg.num_images, "train"), (Split::Val, cfg.num_val_images, "val")] {
        let mut rng = substream(cfg.seed, &format!("synth-{tag}"));
        let mut ds = Dataset::empty(format!("synth-{tag}"), split, cfg.d_r, cfg.d_w);
        for i in 0..count {
            let image_id = format!("{tag}-{i:06}");
            let scene = rng.random_range(0..cfg.num_scenes);
            let (mut own, mut others): (Vec<usize>, Vec<usize>) =
                (0..n_concepts).partition(|&c| world.scene_of_concept[c] == scene);
            own.shuffle(&mut rng);
            others.shuffle(&mut rng);
            let n_salient = cfg.salient_per_image.min(own.len()).min(m);
            let salient: Vec<usize> = own[..n_salient].to_vec();
            // clutter from other scenes, topped up from the own scene if needed
            let mut concepts = salient.clone();
            concepts.extend(others.iter().chain(&own[n_salient..]).take(m - n_salient));
            concepts.shuffle(&mut rng);

            let mut cells: Vec<usize> = (0..cfg.grid * cfg.grid).collect();
            cells.shuffle(&mut rng);
            let boxes: Vec<BBox> = cells[..m]
                .iter()
                .map(|&c| {
                    let (cx, cy) = ((c % cfg.grid) as f64 * cell, (c / cfg.grid) as f64 * cell);
                    let inset = |rng: &mut Rng| (cell * rng.random_range(0.05..0.2)).round();
                    BBox::new(cx + inset(&mut rng), cy + inset(&mut rng), cx + cell - inset(&mut rng), cy + cell - inset(&mut rng))
                })
                .collect();
            let mut feats = Vec::with_capacity(m * cfg.d_r);
            for &c in &concepts {
                let mut f = world.region_prototypes.row(c).to_vec();
                for (x, n) in f.iter_mut().zip(gaussian_vec(&mut rng, cfg.d_r, cfg.alignment_noise)) {
                    *x += n;
                }
                feats.extend(f);
            }
            f32_round(&mut feats);
            let regions = RegionSet::new(image_id.clone(), boxes.clone(), Matrix::from_vec(m, cfg.d_r, feats)?)?;

            let cap = build_caption(cfg, &world, scene, &salient, &mut rng);
            let mut words = lm.embed(&cap.tokens)?;
            for x in words.as_mut_slice() {
                *x += cfg.alignment_noise * normal(&mut rng);
            }
            f32_round(words.as_mut_slice());
            let caption = CaptionTokens::new(cap.tokens.clone(), words, cap.pos)?;

            let mut phrases = Vec::new();
            for &(t, c) in &cap.nouns {
                let r = concepts.iter().position(|&x| x == c).expect("named concepts are present");
                oracle.push(OracleEntry {
                    image_id: image_id.clone(),
                    token_index: t,
                    region_index: r,
                    concept: c,
                });
                phrases.push(Phrase {
                    span: (t, t + 1),
                    boxes: vec![boxes[r]],
                });
                let others: Vec<usize> = cap.nouns.iter().filter(|(u, _)| *u != t).map(|(_, c)| *c).collect();
                let masked = MaskedCaption::new(cap.tokens.clone(), t)?;
                lm.masked
                    .insert(masked.context_signature(), masked_table(&world, scene, &others));
                lm.conditioned
                    .insert(conditioned_key(&cap.tokens, t), conditioned_table(&world, c));
            }
            ds.push(TrainingPair { regions, caption }, phrases)?;
        }
        splits.push(ds);
    }
    let val = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(SynthOutput {
        train,
        val,
        oracle,
        lm,
        world,
    })
}

/// Accuracy of recovering the oracle alignment by classifying every region
/// to its nearest prototype and matching the caption word's concept.
pub fn nearest_prototype_accuracy(out: &SynthOutput) -> f64 {
    let by_id: BTreeMap<&str, &TrainingPair> = out
        .train
        .pairs
        .iter()
        .chain(&out.val.pairs)
        .map(|p| (p.regions.image_id.as_str(), p))
        .collect();
    let hits = out
        .oracle
        .iter()
        .filter(|e| {
            let pair = by_id[e.image_id.as_str()];
            let word = &pair.caption.tokens[e.token_index];
            let concept = out.world.word_concept[word];
            let guess = pair
                .regions
                .features
                .iter_rows()
                .position(|f| out.world.nearest_concept(f) == concept);
            guess == Some(e.region_index)
        })
        .count();
    hits as f64 / out.oracle.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_images: 40,
            num_val_images: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.oracle, b.oracle);
        assert_eq!(a.lm, b.lm);
        let c = synth_generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn structure() {
        let cfg = small();
        let out = synth_generate(&cfg).unwrap();
        assert_eq!(out.lm.vocab.len(), cfg.vocab_size);
        assert_eq!(out.world.concept_names.len(), 24);
        crate::data::check_disjoint(&out.train, &out.val).unwrap();
        for ex in out.train.examples() {
            assert_eq!(ex.regions.len(), 8);
            assert_eq!(ex.caption.len(), cfg.caption_length);
            assert_eq!(ex.caption.noun_indices().len(), 2);
            for (i, a) in ex.regions.boxes.iter().enumerate() {
                for b in &ex.regions.boxes[i + 1..] {
                    assert_eq!(a.iou(b), 0.0);
                }
            }
            assert_eq!(ex.phrases.len(), 2);
        }
    }

    #[test]
    fn tables_are_distributions() {
        let out = synth_generate(&small()).unwrap();
        for d in out.lm.masked.values().chain(out.lm.conditioned.values()) {
            assert!((d.values().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.values().all(|&p| p > 0.0));
        }
        out.lm.validate().unwrap();
    }

    #[test]
    fn noiseless_prototypes_are_exact() {
        let cfg = SynthConfig {
            alignment_noise: 0.0,
            vocab_size: 8,
            ..small()
        };
        let out = synth_generate(&cfg).unwrap();
        assert_eq!(nearest_prototype_accuracy(&out), 1.0);
        let ex = out.train.example(0);
        for row in ex.regions.features.iter_rows() {
            let c = out.world.nearest_concept(row);
            let proto: Vec<f64> = out.world.region_prototypes.row(c).iter().map(|&x| x as f32 as f64).collect();
            assert_eq!(row, proto.as_slice());
        }
    }

    #[test]
    fn grid_capacity() {
        let cfg = SynthConfig {
            regions_per_image: 17,
            ..small()
        };
        assert!(synth_generate(&cfg).is_err());
    }
}
