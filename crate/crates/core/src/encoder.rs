//! Character encoder: scene serialization, a windowed contextualizer and
//! per-speaker attentive pooling.
//!
//! A scene is flattened to one token stream in which every masked speaker's
//! utterance reads `[Px] words... [SPLIT]`. Tokens are embedded, mixed with
//! their neighbours through banded attention, passed through a tanh
//! feed-forward layer, and finally pooled per speaker with a masked softmax
//! over learned token scores.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use amc_tensor::{Bound, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::{AnonymizedScene, Task, ID_LABELS};
use crate::error::{Error, Result};

pub const SPLIT_TOKEN: &str = "[SPLIT]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const SPECIAL_TOKENS: [&str; 8] = ["[P0]", "[P1]", "[P2]", "[P3]", "[P4]", SPLIT_TOKEN, UNK_TOKEN, PAD_TOKEN];
pub const SPLIT_ID: usize = 5;
pub const UNK_ID: usize = 6;
pub const PAD_ID: usize = 7;

pub const EMBEDDING: &str = "encoder.embedding";
pub const QUERY: &str = "encoder.mix.query";
pub const KEY: &str = "encoder.mix.key";
pub const FF_WEIGHT: &str = "encoder.ff.weight";
pub const FF_BIAS: &str = "encoder.ff.bias";
pub const SCORER: &str = "encoder.pool.scorer";

/// Number of encoder layers: the embedding layer, then mixing plus pooling.
pub const ENCODER_LAYERS: usize = 2;

/// Layer index (1-based) an encoder parameter belongs to.
pub fn layer_of(name: &str) -> Option<usize> {
    match name {
        EMBEDDING => Some(1),
        QUERY | KEY | FF_WEIGHT | FF_BIAS | SCORER => Some(2),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub window: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            window: 256,
            max_len: 2000,
        }
    }
}

/// Lowercased maximal alphanumeric runs of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token strings for a piece of scene text. Masking labels mentioned in
/// background text map to their special tokens.
fn text_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            if ID_LABELS.contains(&w) {
                format!("[{w}]")
            } else {
                w.to_lowercase()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_tokens(Vec::new()).expect("specials are distinct")
    }
}

impl Vocabulary {
    /// Specials first, then `words` in the given order; duplicates are errors.
    pub fn from_tokens(words: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(Error::InvalidData(format!("vocabulary entry {i} is malformed")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidData(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Words seen at least `min_count` times in the scenes of `tasks`,
    /// most frequent first (ties lexicographic), capped at `max_words`.
    pub fn build<'a>(tasks: impl IntoIterator<Item = &'a Task>, min_count: usize, max_words: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for task in tasks {
            for scene in &task.scenes {
                for u in &scene.utterances {
                    let spoken_name = if !u.is_background && !ID_LABELS.contains(&u.speaker.as_str()) {
                        text_tokens(&u.speaker)
                    } else {
                        Vec::new()
                    };
                    for w in spoken_name.into_iter().chain(text_tokens(&u.text)) {
                        if !w.starts_with('[') {
                            *counts.entry(w).or_default() += 1;
                        }
                    }
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(cap) = max_words {
            ranked.truncate(cap);
        }
        Vocabulary::from_tokens(ranked.into_iter().map(|(w, _)| w).collect()).expect("counted words are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn label_id(label: &str) -> Option<usize> {
        ID_LABELS.iter().position(|l| *l == label)
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
        if lines.len() < SPECIAL_TOKENS.len() || lines[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(Error::InvalidData("vocabulary must start with the special tokens".into()));
        }
        Vocabulary::from_tokens(lines[SPECIAL_TOKENS.len()..].iter().map(|s| s.to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocabulary::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedScene {
    pub ids: Vec<usize>,
    /// Label → 0/1 mask over `ids`, for every label in the scene's id_map.
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl TokenizedScene {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The label's mask if it kept at least one token after truncation.
    pub fn mask(&self, label: &str) -> Option<&[bool]> {
        self.masks.get(label).filter(|m| m.iter().any(|&b| b)).map(Vec::as_slice)
    }
}

/// Serializes a scene to token ids plus one mask per masked speaker.
///
/// Masked speakers' utterances become `[Px] text [SPLIT]`; other speakers
/// contribute their name followed by the text; background contributes its
/// text. The first `max_len` tokens are kept.
pub fn tokenize_scene(scene: &AnonymizedScene, vocab: &Vocabulary, max_len: usize) -> TokenizedScene {
    let mut ids = Vec::new();
    let mut owner: Vec<Option<usize>> = Vec::new();
    for u in &scene.utterances {
        let label = (!u.is_background)
            .then(|| Vocabulary::label_id(&u.speaker))
            .flatten()
            .filter(|_| scene.id_map.contains_key(&u.speaker));
        match label {
            Some(l) => {
                ids.push(l);
                ids.extend(text_tokens(&u.text).iter().map(|w| vocab.id(w)));
                ids.push(SPLIT_ID);
                owner.resize(ids.len(), Some(l));
            }
            None => {
                if !u.is_background {
                    ids.extend(text_tokens(&u.speaker).iter().map(|w| vocab.id(w)));
                }
                ids.extend(text_tokens(&u.text).iter().map(|w| vocab.id(w)));
                owner.resize(ids.len(), None);
            }
        }
    }
    ids.truncate(max_len);
    owner.truncate(max_len);
    let masks = scene
        .id_map
        .keys()
        .map(|label| {
            let l = Vocabulary::label_id(label);
            (label.clone(), owner.iter().map(|o| o.is_some() && *o == l).collect())
        })
        .collect();
    TokenizedScene { ids, masks }
}

/// Freshly initialized encoder parameters for a vocabulary of `vocab_len`.
pub fn init_params<R: Rng + ?Sized>(vocab_len: usize, cfg: &EncoderConfig, rng: &mut R) -> ParamSet {
    let d = cfg.d_model;
    let mut p = ParamSet::new();
    p.insert(EMBEDDING, Tensor::uniform(&[vocab_len, d], 1.0, rng));
    p.insert(QUERY, Tensor::glorot(d, d, rng));
    p.insert(KEY, Tensor::glorot(d, d, rng));
    p.insert(FF_WEIGHT, Tensor::glorot(d, d, rng));
    p.insert(FF_BIAS, Tensor::zeros(&[d]));
    p.insert(SCORER, Tensor::uniform(&[d], (1.0 / d as f64).sqrt(), rng));
    p
}

/// Row-major `[len, len]` mask allowing position `i` to attend to `j` when
/// `|i - j| <= window / 2`.
pub fn band_mask(len: usize, window: usize) -> Vec<bool> {
    let half = window / 2;
    let mut m = vec![false; len * len];
    for i in 0..len {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(len - 1);
        m[i * len + lo..=i * len + hi].iter_mut().for_each(|b| *b = true);
    }
    m
}

/// `H = tanh((X + softmax_band(X Wq (X Wk)ᵀ / √D) X) Wf + bf)` with
/// `X` the embedded tokens; returns `[len, D]`.
pub fn contextualize<'t>(params: &Bound<'t>, ids: &[usize], cfg: &EncoderConfig) -> Result<Var<'t>> {
    let x = params.get(EMBEDDING)?.embedding_lookup(ids)?;
    let q = x.matmul(&params.get(QUERY)?)?;
    let k = x.matmul(&params.get(KEY)?)?;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (cfg.d_model as f64).sqrt())?;
    let attn = scores.masked_softmax(&band_mask(ids.len(), cfg.window))?;
    let mixed = x.add(&attn.matmul(&x)?)?;
    Ok(mixed
        .matmul(&params.get(FF_WEIGHT)?)?
        .add_row(&params.get(FF_BIAS)?)?
        .tanh()?)
}

/// `e = Hᵀ masked_softmax(H a, mask)`.
pub fn attentive_pool<'t>(params: &Bound<'t>, hidden: &Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
    let scores = hidden.matmul(&params.get(SCORER)?)?;
    let alpha = scores.masked_softmax(mask)?;
    Ok(hidden.transpose()?.matmul(&alpha)?)
}

/// Pooled embedding per masked speaker whose tokens survived truncation.
pub fn encode_scene<'t>(
    params: &Bound<'t>,
    tokens: &TokenizedScene,
    cfg: &EncoderConfig,
) -> Result<BTreeMap<String, Var<'t>>> {
    let mut out = BTreeMap::new();
    if tokens.is_empty() {
        return Ok(out);
    }
    let hidden = contextualize(params, &tokens.ids, cfg)?;
    for label in tokens.masks.keys() {
        if let Some(mask) = tokens.mask(label) {
            out.insert(label.clone(), attentive_pool(params, &hidden, mask)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::screenplay::Utterance;
    use amc_tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(utts: Vec<Utterance>, labels: &[(&str, &str)]) -> AnonymizedScene {
        AnonymizedScene {
            movie_id: "m".into(),
            scene_index: 0,
            heading: "INT. ROOM - DAY".into(),
            utterances: utts,
            id_map: labels.iter().map(|(l, n)| (l.to_string(), n.to_string())).collect(),
            candidates: labels.iter().map(|(_, n)| n.to_string()).collect(),
        }
    }

    #[test]
    fn two_speaker_masks() {
        let s = scene(
            vec![Utterance::spoken("P0", "hi"), Utterance::spoken("P1", "yo")],
            &[("P0", "A"), ("P1", "B")],
        );
        let vocab = Vocabulary::from_tokens(vec!["hi".into(), "yo".into()]).unwrap();
        let t = tokenize_scene(&s, &vocab, 2000);
        assert_eq!(t.ids, vec![0, 8, SPLIT_ID, 1, 9, SPLIT_ID]);
        assert_eq!(t.masks["P0"], vec![true, true, true, false, false, false]);
        assert_eq!(t.masks["P1"], vec![false, false, false, true, true, true]);
    }

    #[test]
    fn non_candidates_and_background() {
        let s = scene(
            vec![
                Utterance::background("P0 waves at Dodge."),
                Utterance::spoken("DODGE", "Hey there!"),
                Utterance::spoken("P0", "Hello."),
            ],
            &[("P0", "EPPS")],
        );
        let t = tokenize_scene(&s, &Vocabulary::default(), 2000);
        // [P0] waves at dodge | dodge hey there | [P0] hello [SPLIT]
        assert_eq!(t.ids.len(), 4 + 3 + 3);
        assert_eq!(t.ids[0], 0);
        assert_eq!(t.masks["P0"].iter().filter(|&&b| b).count(), 3);
        assert!(!t.masks["P0"][0], "mentions in background are not the speaker's tokens");
    }

    #[test]
    fn truncation_can_empty_a_mask() {
        let s = scene(
            vec![Utterance::spoken("P0", "a b c"), Utterance::spoken("P1", "d")],
            &[("P0", "A"), ("P1", "B")],
        );
        let t = tokenize_scene(&s, &Vocabulary::default(), 4);
        assert_eq!(t.len(), 4);
        assert!(t.mask("P0").is_some());
        assert!(t.mask("P1").is_none());
    }

    #[test]
    fn vocabulary_roundtrip_and_specials() {
        let v = Vocabulary::from_tokens(vec!["alpha".into(), "beta".into()]).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.id("[SPLIT]"), SPLIT_ID);
        assert_eq!(v.id("gamma"), UNK_ID);
        assert_eq!(v.id("beta"), 9);
        assert!(Vocabulary::from_text("alpha\n").is_err());
        assert!(Vocabulary::from_tokens(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn single_token_shapes() {
        let cfg = EncoderConfig { d_model: 8, ..EncoderConfig::default() };
        let p = init_params(10, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::new();
        let b = p.bind(&tape, |_| true);
        let h = contextualize(&b, &[3], &cfg).unwrap();
        assert_eq!(h.shape(), vec![1, 8]);
        let e = attentive_pool(&b, &h, &[true]).unwrap();
        assert_eq!(e.value().data(), h.value().row(0));
    }

    #[test]
    fn pooling_closed_form() {
        // H rows chosen so that H·a = [1, 2, 3] with a = e1.
        let tape = Tape::new();
        let mut p = ParamSet::new();
        p.insert(SCORER, Tensor::vector(vec![1.0, 0.0]));
        let b = p.bind(&tape, |_| true);
        let h = tape.constant(Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 7.0, 3.0, 11.0]).unwrap());
        let e = attentive_pool(&b, &h, &[true, true, false]).unwrap();
        let (w1, w2) = (1f64.exp() / (1f64.exp() + 2f64.exp()), 2f64.exp() / (1f64.exp() + 2f64.exp()));
        let want = [w1 * 1.0 + w2 * 2.0, w1 * 5.0 + w2 * 7.0];
        for (g, w) in e.value().data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn band_mask_shape() {
        let m = band_mask(5, 2);
        let row2: Vec<bool> = m[10..15].to_vec();
        assert_eq!(row2, vec![false, true, true, true, false]);
        assert!(band_mask(1, 256)[0]);
    }

    #[test]
    fn words_split_on_punctuation() {
        assert_eq!(words("Now listen carefully. Stan's"), vec!["now", "listen", "carefully", "stan", "s"]);
    }
}
