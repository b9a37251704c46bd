//! Context-preserving negative captions.
//!
//! One noun of a caption is masked, a language model proposes the words most
//! likely to fill the slot given the rest of the caption, and the proposals are
//! re-ranked by `p(s'|c) / q(s'|s,c)` so that words the model also finds likely
//! given the original noun (synonyms, hypernyms) sink to the bottom.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{CaptionTokens, Pos};
use crate::error::{Error, Result};
use crate::losses::LangNegatives;
use crate::math::Matrix;
use crate::rng::{substream, STREAM_NOUN};

pub const DEFAULT_N_CAND: usize = 30;
pub const DEFAULT_N_KEEP: usize = 25;
/// Smallest `q(s'|s,c)` used in a rank score.
pub const Q_FLOOR: f64 = 1e-8;
pub const MASK_TOKEN: &str = "[MASK]";
const SIGNATURE_SEP: &str = "\u{1}";

/// Word → probability.
pub type WordDist = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedCaption {
    pub tokens: Vec<String>,
    pub mask_position: usize,
    pub original_noun: String,
}

impl MaskedCaption {
    pub fn new(tokens: Vec<String>, mask_position: usize) -> Result<Self> {
        let original_noun = tokens
            .get(mask_position)
            .cloned()
            .ok_or(Error::OutOfRange {
                index: mask_position,
                len: tokens.len(),
            })?;
        Ok(MaskedCaption {
            tokens,
            mask_position,
            original_noun,
        })
    }

    /// Tokens joined by U+0001 with `[MASK]` in the masked slot.
    pub fn context_signature(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| if i == self.mask_position { MASK_TOKEN } else { t.as_str() })
            .collect::<Vec<_>>()
            .join(SIGNATURE_SEP)
    }

    /// Caption with `word` in the masked slot.
    pub fn substitute(&self, word: &str) -> Vec<String> {
        let mut tokens = self.tokens.clone();
        tokens[self.mask_position] = word.to_string();
        tokens
    }
}

pub fn caption_signature(tokens: &[String]) -> String {
    tokens.join(SIGNATURE_SEP)
}

/// Key of a conditioned-distribution entry.
pub fn conditioned_key(tokens: &[String], position: usize) -> String {
    format!("{}#{position}", caption_signature(tokens))
}

/// Hex SHA-256 of the caption signature.
pub fn caption_hash(tokens: &[String]) -> String {
    let digest = Sha256::digest(caption_signature(tokens).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Masked-word scorer and contextual embedder.
pub trait LmScorer: Sync {
    /// `p(s'|c)` for the masked slot.
    fn masked_distribution(&self, masked: &MaskedCaption) -> Result<WordDist>;
    /// `q(s'|s,c)` at `position` of the unmasked caption.
    fn conditioned_distribution(&self, tokens: &[String], position: usize) -> Result<WordDist>;
    /// One contextualized feature row per token.
    fn embed(&self, tokens: &[String]) -> Result<Matrix>;
}

/// Lookup-table language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableLm {
    pub vocab: Vec<String>,
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub masked: BTreeMap<String, WordDist>,
    pub conditioned: BTreeMap<String, WordDist>,
    /// Weight of the mean of the other tokens' embeddings added to each token.
    #[serde(default)]
    pub context_mix: f64,
}

impl TableLm {
    pub fn from_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let lm: TableLm = serde_json::from_reader(BufReader::new(file))?;
        lm.validate()?;
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        crate::math::checkpoint::write_atomic(path, &bytes)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.values().next().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.is_empty() {
            return Err(Error::Format("table LM has an empty vocabulary".into()));
        }
        let d = self.dim();
        if let Some((w, e)) = self.embeddings.iter().find(|(_, e)| e.len() != d) {
            return Err(Error::Format(format!("embedding of {w:?} has {} dims, expected {d}", e.len())));
        }
        for (key, dist) in self.masked.iter().chain(&self.conditioned) {
            if dist.values().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Format(format!("entry {key:?} has a probability outside [0, 1]")));
            }
            if dist.values().sum::<f64>() > 1.0 + 1e-9 {
                return Err(Error::Format(format!("entry {key:?} sums above 1")));
            }
        }
        Ok(())
    }

    fn uniform(&self) -> WordDist {
        let p = 1.0 / self.vocab.len() as f64;
        self.vocab.iter().map(|w| (w.clone(), p)).collect()
    }
}

impl LmScorer for TableLm {
    fn masked_distribution(&self, masked: &MaskedCaption) -> Result<WordDist> {
        let key = masked.context_signature();
        Ok(match self.masked.get(&key) {
            Some(d) => d.clone(),
            None => {
                log::warn!("no masked entry for {key:?}; using uniform");
                self.uniform()
            }
        })
    }

    fn conditioned_distribution(&self, tokens: &[String], position: usize) -> Result<WordDist> {
        if position >= tokens.len() {
            return Err(Error::OutOfRange {
                index: position,
                len: tokens.len(),
            });
        }
        let key = conditioned_key(tokens, position);
        Ok(match self.conditioned.get(&key) {
            Some(d) => d.clone(),
            None => {
                log::warn!("no conditioned entry for {key:?}; using uniform");
                self.uniform()
            }
        })
    }

    fn embed(&self, tokens: &[String]) -> Result<Matrix> {
        let d = self.dim();
        let rows: Vec<&Vec<f64>> = tokens
            .iter()
            .map(|t| {
                self.embeddings
                    .get(t)
                    .ok_or_else(|| Error::Invalid(format!("token {t:?} has no embedding")))
            })
            .collect::<Result<_>>()?;
        let mut total = vec![0.0; d];
        for r in &rows {
            crate::math::axpy(1.0, r, &mut total);
        }
        let n = rows.len();
        let mut out = Matrix::zeros(n, d);
        for (j, r) in rows.iter().enumerate() {
            let row = out.row_mut(j);
            row.copy_from_slice(r);
            if n > 1 && self.context_mix != 0.0 {
                let w = self.context_mix / (n - 1) as f64;
                for ((o, t), own) in row.iter_mut().zip(&total).zip(r.iter()) {
                    *o += w * (t - own);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub word: String,
    pub p_given_c: f64,
    /// Filled in by the re-rank step.
    pub q_given_sc: Option<f64>,
}

impl Candidate {
    /// `p / max(q, Q_FLOOR)` once `q` is known.
    pub fn rank_score(&self) -> Option<f64> {
        self.q_given_sc.map(|q| self.p_given_c / q.max(Q_FLOOR))
    }
}

/// Descending by score, ascending by word on ties.
fn by_score_then_word(a: (f64, &str), b: (f64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// The `n_cand` most likely fillers of the masked slot. The original noun may
/// be among them; zero-probability words are not candidates.
pub fn top_candidates(masked: &MaskedCaption, lm: &dyn LmScorer, n_cand: usize) -> Result<Vec<Candidate>> {
    if n_cand == 0 {
        return Err(Error::Invalid("n_cand must be at least 1".into()));
    }
    let dist = lm.masked_distribution(masked)?;
    let mut ranked: Vec<(&String, f64)> = dist.iter().map(|(w, &p)| (w, p)).filter(|(_, p)| *p > 0.0).collect();
    if ranked.is_empty() {
        return Err(Error::Invalid(format!(
            "empty masked distribution for {:?}",
            masked.context_signature()
        )));
    }
    ranked.sort_by(|a, b| by_score_then_word((a.1, a.0), (b.1, b.0)));
    Ok(ranked
        .into_iter()
        .take(n_cand)
        .map(|(w, p)| Candidate {
            word: w.clone(),
            p_given_c: p,
            q_given_sc: None,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeCaption {
    pub word: String,
    pub p_given_c: f64,
    pub q_given_sc: f64,
    pub rank_score: f64,
    pub tokens: Vec<String>,
    /// Contextualized feature of `word` inside `tokens`.
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeCaptionSet {
    pub caption_hash: String,
    pub original: MaskedCaption,
    pub negatives: Vec<NegativeCaption>,
}

impl NegativeCaptionSet {
    pub fn words(&self) -> Vec<&str> {
        self.negatives.iter().map(|n| n.word.as_str()).collect()
    }

    pub fn to_lang_negatives(&self) -> Result<LangNegatives> {
        Ok(LangNegatives {
            noun_index: self.original.mask_position,
            features: Matrix::from_rows(&self.negatives.iter().map(|n| n.feature.as_slice()).collect::<Vec<_>>())
                .unwrap_or_else(|_| Matrix::zeros(0, 0)),
        })
    }
}

/// Scores candidates by `p / q`, drops the original noun and keeps the best
/// `n_keep`, each with its substituted caption's contextual feature.
pub fn rerank_and_keep(
    candidates: &[Candidate],
    masked: &MaskedCaption,
    lm: &dyn LmScorer,
    n_keep: usize,
) -> Result<NegativeCaptionSet> {
    let q = lm.conditioned_distribution(&masked.tokens, masked.mask_position)?;
    let mut scored: Vec<Candidate> = candidates
        .iter()
        .filter(|c| c.word != masked.original_noun)
        .map(|c| Candidate {
            q_given_sc: Some(q.get(&c.word).copied().unwrap_or(0.0)),
            ..c.clone()
        })
        .collect();
    scored.sort_by(|a, b| {
        by_score_then_word(
            (a.rank_score().unwrap_or(0.0), &a.word),
            (b.rank_score().unwrap_or(0.0), &b.word),
        )
    });
    scored.truncate(n_keep);
    let negatives = scored
        .into_iter()
        .map(|c| {
            let tokens = masked.substitute(&c.word);
            let feats = lm.embed(&tokens)?;
            Ok(NegativeCaption {
                rank_score: c.rank_score().unwrap_or(0.0),
                q_given_sc: c.q_given_sc.unwrap_or(0.0),
                p_given_c: c.p_given_c,
                feature: feats.row(masked.mask_position).to_vec(),
                word: c.word,
                tokens,
            })
        })
        .collect::<Result<_>>()?;
    Ok(NegativeCaptionSet {
        caption_hash: caption_hash(&masked.tokens),
        original: masked.clone(),
        negatives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegParams {
    pub n_cand: usize,
    pub n_keep: usize,
}

impl Default for NegParams {
    fn default() -> Self {
        NegParams {
            n_cand: DEFAULT_N_CAND,
            n_keep: DEFAULT_N_KEEP,
        }
    }
}

/// Negative set for the noun at `position`.
pub fn negatives_at(tokens: &[String], position: usize, lm: &dyn LmScorer, params: NegParams) -> Result<NegativeCaptionSet> {
    if params.n_keep > params.n_cand {
        return Err(Error::Invalid(format!(
            "n_keep {} exceeds n_cand {}",
            params.n_keep, params.n_cand
        )));
    }
    let masked = MaskedCaption::new(tokens.to_vec(), position)?;
    let cands = top_candidates(&masked, lm, params.n_cand)?;
    rerank_and_keep(&cands, &masked, lm, params.n_keep)
}

/// Draws one noun uniformly and builds its negatives. `None` when the caption
/// has no noun.
pub fn make_negatives(
    caption: &CaptionTokens,
    lm: &dyn LmScorer,
    seed: u64,
    params: NegParams,
) -> Result<Option<(usize, NegativeCaptionSet)>> {
    let nouns = caption.noun_indices();
    if nouns.is_empty() {
        return Ok(None);
    }
    let mut rng = substream(seed, STREAM_NOUN);
    let pos = nouns[rng.random_range(0..nouns.len())];
    Ok(Some((pos, negatives_at(&caption.tokens, pos, lm, params)?)))
}

/// Negative sets keyed by (caption hash, noun position).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativeCache {
    entries: BTreeMap<(String, usize), NegativeCaptionSet>,
}

impl NegativeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, set: NegativeCaptionSet) {
        self.entries
            .insert((set.caption_hash.clone(), set.original.mask_position), set);
    }

    pub fn get(&self, tokens: &[String], position: usize) -> Option<&NegativeCaptionSet> {
        self.entries.get(&(caption_hash(tokens), position))
    }

    pub fn iter(&self) -> impl Iterator<Item = &NegativeCaptionSet> {
        self.entries.values()
    }

    /// Builds sets for every noun position of every caption.
    pub fn build<'a>(
        captions: impl IntoIterator<Item = &'a CaptionTokens>,
        lm: &dyn LmScorer,
        params: NegParams,
    ) -> Result<Self> {
        let mut cache = NegativeCache::new();
        for c in captions {
            for (pos, _) in c.pos.iter().enumerate().filter(|(_, p)| **p == Pos::Noun) {
                if cache.get(&c.tokens, pos).is_none() {
                    cache.insert(negatives_at(&c.tokens, pos, lm, params)?);
                }
            }
        }
        Ok(cache)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for set in self.entries.values() {
            serde_json::to_writer(&mut out, set)?;
            out.write_all(b"\n").map_err(|e| Error::io("<negative cache>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        crate::math::checkpoint::write_atomic(path, &buf)
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut cache = NegativeCache::new();
        for (index, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<negative cache>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let set: NegativeCaptionSet = serde_json::from_str(&line).map_err(|e| Error::Record {
                index,
                msg: e.to_string(),
            })?;
            if set.caption_hash != caption_hash(&set.original.tokens) {
                return Err(Error::Record {
                    index,
                    msg: "caption hash does not match its tokens".into(),
                });
            }
            cache.insert(set);
        }
        Ok(cache)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn dist(pairs: &[(&str, f64)]) -> WordDist {
        pairs.iter().map(|(w, p)| (w.to_string(), *p)).collect()
    }

    fn toy_lm(masked: WordDist, conditioned: WordDist) -> (TableLm, MaskedCaption) {
        let tokens = toks("a dog runs");
        let m = MaskedCaption::new(tokens.clone(), 1).unwrap();
        let mut words: Vec<String> = masked.keys().chain(conditioned.keys()).cloned().collect();
        words.extend(tokens.iter().cloned());
        words.sort();
        words.dedup();
        let embeddings = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), vec![i as f64, 1.0]))
            .collect();
        let lm = TableLm {
            vocab: masked.keys().cloned().collect(),
            embeddings,
            masked: [(m.context_signature(), masked)].into(),
            conditioned: [(conditioned_key(&tokens, 1), conditioned)].into(),
            context_mix: 0.0,
        };
        (lm, m)
    }

    #[test]
    fn signature_format() {
        let m = MaskedCaption::new(toks("a dog runs"), 1).unwrap();
        assert_eq!(m.context_signature(), "a\u{1}[MASK]\u{1}runs");
        assert_eq!(m.original_noun, "dog");
        assert_eq!(conditioned_key(&m.tokens, 1), "a\u{1}dog\u{1}runs#1");
        assert!(MaskedCaption::new(toks("a"), 3).is_err());
    }

    #[test]
    fn top_candidates_by_probability() {
        let (lm, m) = toy_lm(dist(&[("a", 0.5), ("b", 0.3), ("c", 0.2)]), dist(&[]));
        let words = |n| {
            top_candidates(&m, &lm, n)
                .unwrap()
                .into_iter()
                .map(|c| c.word)
                .collect::<Vec<_>>()
        };
        assert_eq!(words(2), ["a", "b"]);
        assert_eq!(words(10), ["a", "b", "c"]);
    }

    #[test]
    fn uniform_ties_break_lexicographically() {
        let (lm, m) = toy_lm(dist(&[("zebra", 0.25), ("ant", 0.25), ("moose", 0.25), ("cat", 0.25)]), dist(&[]));
        let words: Vec<String> = top_candidates(&m, &lm, 3).unwrap().into_iter().map(|c| c.word).collect();
        assert_eq!(words, ["ant", "cat", "moose"]);
    }

    #[test]
    fn rerank_demotes_high_q() {
        let (lm, m) = toy_lm(dist(&[("x", 0.4), ("y", 0.2)]), dist(&[("x", 0.4), ("y", 0.05)]));
        let cands = top_candidates(&m, &lm, 2).unwrap();
        let set = rerank_and_keep(&cands, &m, &lm, 2).unwrap();
        assert_eq!(set.words(), ["y", "x"]);
        assert!((set.negatives[0].rank_score - 4.0).abs() < 1e-12);
        assert!((set.negatives[1].rank_score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn original_is_dropped_and_q_floored() {
        let (lm, m) = toy_lm(dist(&[("dog", 0.6), ("cat", 0.3), ("cow", 0.1)]), dist(&[("dog", 0.9), ("cat", 0.1)]));
        let cands = top_candidates(&m, &lm, 3).unwrap();
        assert_eq!(cands[0].word, "dog");
        let set = rerank_and_keep(&cands, &m, &lm, 5).unwrap();
        assert_eq!(set.words(), ["cow", "cat"]);
        assert_eq!(set.negatives[0].rank_score, 0.1 / Q_FLOOR);
        assert_eq!(set.negatives[0].tokens, toks("a cow runs"));
    }

    #[test]
    fn synonym_is_not_kept() {
        // "puppy" is likely in context and also likely given "dog"
        let (lm, m) = toy_lm(
            dist(&[("puppy", 0.5), ("cat", 0.3), ("dog", 0.2)]),
            dist(&[("dog", 0.6), ("puppy", 0.35), ("cat", 0.05)]),
        );
        let set = negatives_at(&m.tokens, 1, &lm, NegParams { n_cand: 3, n_keep: 1 }).unwrap();
        assert_eq!(set.words(), ["cat"]);
    }

    #[test]
    fn missing_entries_fall_back_to_uniform() {
        let (lm, _) = toy_lm(dist(&[("a", 0.5), ("b", 0.5)]), dist(&[]));
        let other = MaskedCaption::new(toks("the b sits"), 1).unwrap();
        let d = lm.masked_distribution(&other).unwrap();
        assert_eq!(d, dist(&[("a", 0.5), ("b", 0.5)]));
        let q = lm.conditioned_distribution(&other.tokens, 1).unwrap();
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn embed_mixes_context() {
        let mut lm = toy_lm(dist(&[("a", 1.0)]), dist(&[])).0;
        let t = toks("a dog runs");
        let plain = lm.embed(&t).unwrap();
        assert_eq!(plain.row(1), lm.embeddings["dog"].as_slice());
        lm.context_mix = 0.5;
        let mixed = lm.embed(&t).unwrap();
        for c in 0..2 {
            let expect = lm.embeddings["dog"][c] + 0.25 * (lm.embeddings["a"][c] + lm.embeddings["runs"][c]);
            assert!((mixed.get(1, c) - expect).abs() < 1e-12);
        }
        assert!(lm.embed(&toks("a unknown")).is_err());
    }

    #[test]
    fn table_round_trip() {
        let (lm, m) = toy_lm(dist(&[("x", 0.4), ("y", 0.2)]), dist(&[("x", 0.4), ("y", 0.05)]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        lm.save(&path).unwrap();
        let back = TableLm::from_file(&path).unwrap();
        assert_eq!(back, lm);
        assert_eq!(back.masked_distribution(&m).unwrap(), dist(&[("x", 0.4), ("y", 0.2)]));
    }

    #[test]
    fn no_noun_signal_and_determinism() {
        let (lm, _) = toy_lm(dist(&[("cat", 0.5), ("cow", 0.5)]), dist(&[]));
        let feats = Matrix::zeros(3, 2);
        let none = CaptionTokens::new(toks("a dog runs"), feats.clone(), vec![Pos::Other; 3]).unwrap();
        assert!(make_negatives(&none, &lm, 1, NegParams::default()).unwrap().is_none());
        let one = CaptionTokens::new(toks("a dog runs"), feats, vec![Pos::Other, Pos::Noun, Pos::Other]).unwrap();
        for seed in 0..5 {
            let (pos, set) = make_negatives(&one, &lm, seed, NegParams::default()).unwrap().unwrap();
            assert_eq!(pos, 1);
            assert_eq!(Some(set), make_negatives(&one, &lm, seed, NegParams::default()).unwrap().map(|x| x.1));
        }
    }

    #[test]
    fn cache_round_trip() {
        let (lm, m) = toy_lm(dist(&[("x", 0.4), ("y", 0.2)]), dist(&[("x", 0.4), ("y", 0.05)]));
        let caption = CaptionTokens::new(m.tokens.clone(), Matrix::zeros(3, 2), vec![Pos::Other, Pos::Noun, Pos::Other]).unwrap();
        let cache = NegativeCache::build([&caption], &lm, NegParams { n_cand: 2, n_keep: 2 }).unwrap();
        assert_eq!(cache.len(), 1);
        let mut buf = Vec::new();
        cache.write_jsonl(&mut buf).unwrap();
        let back = NegativeCache::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, cache);
        assert!(back.get(&m.tokens, 1).is_some());
        assert!(back.get(&m.tokens, 0).is_none());
        let tampered = String::from_utf8(buf).unwrap().replace("\"dog\"", "\"cat\"");
        assert!(NegativeCache::read_jsonl(tampered.as_bytes()).is_err());
    }
}
