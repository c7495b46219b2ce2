//! Style and lyric conditioning.
//!
//! Style prompts come in two modalities that share one embedding space: an
//! audio prompt (a reference latent) goes through a fixed projection of its
//! mean frame, a text prompt (a set of tag ids) through a second projection of
//! its tag indicator vector. Both are L2-normalized. Lyrics are placed on the
//! frame grid by holding each token's embedding until the next token starts.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_for, stream};
use crate::synth::{DataError, LatentSeq, LyricAlignment};

pub const DEFAULT_STYLE_DIM: usize = 8;
pub const DEFAULT_LYRIC_DIM: usize = 8;
pub const DEFAULT_TAG_VOCAB: usize = 16;
pub const DEFAULT_TOKEN_VOCAB: usize = 32;

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("unknown tag id {tag} (vocabulary {vocab})")]
    UnknownTag { tag: u32, vocab: usize },
    #[error("token id {token} out of range (vocabulary {vocab})")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("audio prompt has {got} channels, projection expects {expected}")]
    AudioDim { got: usize, expected: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
}

/// A style prompt. The enum carries exactly the payload of its modality.
#[derive(Debug, Clone, PartialEq)]
pub enum StylePrompt {
    Audio(LatentSeq),
    Text(BTreeSet<u32>),
}

impl StylePrompt {
    pub fn modality(&self) -> Modality {
        match self {
            StylePrompt::Audio(_) => Modality::Audio,
            StylePrompt::Text(_) => Modality::Text,
        }
    }

    /// A text prompt without tags. It embeds to the null style.
    pub fn open() -> Self {
        StylePrompt::Text(BTreeSet::new())
    }
}

/// Style prompt plus lyrics: everything a generation request is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub style: StylePrompt,
    pub lyrics: LyricAlignment,
}

/// Unit-norm style vector, or the all-zero null embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding(Array1<f64>);

impl StyleEmbedding {
    pub fn zeros(dim: usize) -> Self {
        Self(Array1::zeros(dim))
    }

    fn normalized(v: Array1<f64>) -> Self {
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 {
            Self(v)
        } else {
            Self(v / norm)
        }
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.dot(&self.0).sqrt()
    }

    pub fn is_null(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// The fixed projections of the two prompt modalities into style space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTable {
    /// `S × D`
    pub audio: Array2<f64>,
    /// `S × tag_vocab`
    pub text: Array2<f64>,
}

impl ProjectionTable {
    pub fn seeded(latent_dim: usize, style_dim: usize, tag_vocab: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::TABLES, 0);
        let audio = Array2::from_shape_fn((style_dim, latent_dim), |_| rng.random_range(-1.0..1.0));
        let text = Array2::from_shape_fn((style_dim, tag_vocab), |_| rng.random_range(-1.0..1.0));
        Self { audio, text }
    }

    pub fn style_dim(&self) -> usize {
        self.audio.nrows()
    }

    pub fn tag_vocab(&self) -> usize {
        self.text.ncols()
    }
}

/// Per-token lyric embeddings. The filler (no token yet) is the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingTable {
    /// `vocab × E`
    pub table: Array2<f64>,
}

impl TokenEmbeddingTable {
    pub fn seeded(vocab: usize, lyric_dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::TABLES, 1);
        let table = Array2::from_shape_fn((vocab, lyric_dim), |_| rng.random_range(-1.0..1.0));
        Self { table }
    }

    pub fn vocab(&self) -> usize {
        self.table.nrows()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }
}

pub fn embed_style(p: &StylePrompt, table: &ProjectionTable) -> Result<StyleEmbedding, ConditionError> {
    match p {
        StylePrompt::Audio(latent) => {
            if latent.dim() != table.audio.ncols() {
                return Err(ConditionError::AudioDim { got: latent.dim(), expected: table.audio.ncols() });
            }
            Ok(StyleEmbedding::normalized(table.audio.dot(&latent.mean_frame())))
        }
        StylePrompt::Text(tags) => {
            let mut v = Array1::zeros(table.style_dim());
            for &tag in tags {
                let col = table
                    .text
                    .columns()
                    .into_iter()
                    .nth(tag as usize)
                    .ok_or(ConditionError::UnknownTag { tag, vocab: table.tag_vocab() })?;
                v += &col;
            }
            Ok(StyleEmbedding::normalized(v))
        }
    }
}

/// Row `t` is the embedding of the latest token starting at or before `t`;
/// rows before the first token hold the (zero) filler.
pub fn embed_lyrics(
    a: &LyricAlignment,
    len: usize,
    emb: &TokenEmbeddingTable,
) -> Result<Array2<f64>, ConditionError> {
    a.validate(len)?;
    if let Some(&token) = a.token_ids().iter().find(|&&t| t as usize >= emb.vocab()) {
        return Err(ConditionError::TokenOutOfRange { token, vocab: emb.vocab() });
    }
    let mut out = Array2::zeros((len, emb.dim()));
    let starts = a.start_frames();
    for (k, (&token, &start)) in a.token_ids().iter().zip(starts).enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(len);
        let row = emb.table.row(token as usize);
        for t in start..end {
            out.row_mut(t).assign(&row);
        }
    }
    Ok(out)
}

/// Per-frame conditioning consumed by the vector field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub style: StyleEmbedding,
    /// `L × E`
    pub lyric_frames: Array2<f64>,
    pub style_dropped: bool,
    pub lyrics_dropped: bool,
}

impl ConditionBundle {
    /// The unconditional bundle: zero style, zero lyrics, both flags set.
    pub fn null(len: usize, style_dim: usize, lyric_dim: usize) -> Self {
        Self {
            style: StyleEmbedding::zeros(style_dim),
            lyric_frames: Array2::zeros((len, lyric_dim)),
            style_dropped: true,
            lyrics_dropped: true,
        }
    }

    pub fn null_like(&self) -> Self {
        Self::null(self.len(), self.style.dim(), self.lyric_frames.ncols())
    }

    pub fn len(&self) -> usize {
        self.lyric_frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.lyric_frames.nrows() == 0
    }
}

/// Independently zeroes the style and the lyrics with probability `p` each.
pub fn apply_condition_dropout(c: &ConditionBundle, p: f64, seed: u64) -> ConditionBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drop_style = rng.random::<f64>() < p;
    let drop_lyrics = rng.random::<f64>() < p;
    let mut out = c.clone();
    if drop_style {
        out.style = StyleEmbedding::zeros(c.style.dim());
        out.style_dropped = true;
    }
    if drop_lyrics {
        out.lyric_frames.fill(0.0);
        out.lyrics_dropped = true;
    }
    out
}

/// How training prompts pick their modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityMix {
    Audio,
    Text,
    /// Audio or text with equal probability per example.
    Mixed,
}

/// The style and lyric tables together.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioner {
    pub projections: ProjectionTable,
    pub tokens: TokenEmbeddingTable,
}

impl Conditioner {
    pub fn seeded(
        latent_dim: usize,
        style_dim: usize,
        lyric_dim: usize,
        tag_vocab: usize,
        token_vocab: usize,
        seed: u64,
    ) -> Self {
        Self {
            projections: ProjectionTable::seeded(latent_dim, style_dim, tag_vocab, seed),
            tokens: TokenEmbeddingTable::seeded(token_vocab, lyric_dim, seed),
        }
    }

    pub fn style_dim(&self) -> usize {
        self.projections.style_dim()
    }

    pub fn lyric_dim(&self) -> usize {
        self.tokens.dim()
    }

    pub fn bundle(&self, prompt: &Prompt, len: usize) -> Result<ConditionBundle, ConditionError> {
        Ok(ConditionBundle {
            style: embed_style(&prompt.style, &self.projections)?,
            lyric_frames: embed_lyrics(&prompt.lyrics, len, &self.tokens)?,
            style_dropped: false,
            lyrics_dropped: false,
        })
    }

    pub fn null_bundle(&self, len: usize) -> ConditionBundle {
        ConditionBundle::null(len, self.style_dim(), self.lyric_dim())
    }
}

/// Style prompt for a training example of known `mode`: the example's own
/// latent (audio) or the tag naming its mode (text).
pub fn training_style(latent: &LatentSeq, mode: u32, tag_vocab: usize, mix: ModalityMix, seed: u64) -> StylePrompt {
    let audio = match mix {
        ModalityMix::Audio => true,
        ModalityMix::Text => false,
        ModalityMix::Mixed => rng_for(seed, stream::PROMPT, 0).random::<f64>() < 0.5,
    };
    if audio {
        StylePrompt::Audio(latent.clone())
    } else {
        StylePrompt::Text(BTreeSet::from([mode % tag_vocab as u32]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn table() -> ProjectionTable {
        ProjectionTable::seeded(2, 8, 16, 5)
    }

    fn latent(rows: Vec<[f64; 2]>) -> LatentSeq {
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        LatentSeq::new(Array2::from_shape_vec((n, 2), flat).unwrap(), 10.0).unwrap()
    }

    #[test]
    fn zero_audio_gives_null_embedding() {
        let e = embed_style(&StylePrompt::Audio(latent(vec![[0.0, 0.0]; 4])), &table()).unwrap();
        assert!(e.is_null());
        assert_eq!(e.norm(), 0.0);
        let e = embed_style(&StylePrompt::open(), &table()).unwrap();
        assert!(e.is_null());
    }

    #[test]
    fn nonzero_prompts_are_unit_norm() {
        let t = table();
        let e = embed_style(&StylePrompt::Audio(latent(vec![[0.3, -2.0], [1.0, 0.5]])), &t).unwrap();
        assert!((e.norm() - 1.0).abs() <= 1e-9);
        let e = embed_style(&StylePrompt::Text(BTreeSet::from([1, 7, 15])), &t).unwrap();
        assert!((e.norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn basis_mean_frame_selects_projection_column() {
        let t = table();
        // mean frame (0, 1)
        let e = embed_style(&StylePrompt::Audio(latent(vec![[1.0, 1.0], [-1.0, 1.0]])), &t).unwrap();
        let col: Vec<f64> = (0..8).map(|s| t.audio[[s, 1]]).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (got, want) in e.view().iter().zip(&col) {
            assert!((got - want / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_tag_is_an_error() {
        let err = embed_style(&StylePrompt::Text(BTreeSet::from([16])), &table()).unwrap_err();
        assert!(matches!(err, ConditionError::UnknownTag { tag: 16, .. }));
    }

    fn tokens() -> TokenEmbeddingTable {
        TokenEmbeddingTable::seeded(32, 8, 3)
    }

    #[test]
    fn empty_alignment_is_all_filler() {
        let m = embed_lyrics(&LyricAlignment::empty(), 6, &tokens()).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        assert_eq!(m.dim(), (6, 8));
    }

    #[test]
    fn token_at_frame_zero_fills_everything() {
        let t = tokens();
        let a = LyricAlignment::new(vec![4], vec![0], 5).unwrap();
        let m = embed_lyrics(&a, 5, &t).unwrap();
        for row in m.rows() {
            assert_eq!(row, t.table.row(4));
        }
    }

    #[test]
    fn hold_until_next_token_placement() {
        let t = tokens();
        let a = LyricAlignment::new(vec![7, 9], vec![2, 5], 8).unwrap();
        let m = embed_lyrics(&a, 8, &t).unwrap();
        let expected: Vec<Option<usize>> =
            vec![None, None, Some(7), Some(7), Some(7), Some(9), Some(9), Some(9)];
        for (row, want) in m.rows().into_iter().zip(expected) {
            match want {
                None => assert!(row.iter().all(|&v| v == 0.0)),
                Some(k) => assert_eq!(row, t.table.row(k)),
            }
        }
        let again = LyricAlignment::new(vec![7, 9], vec![2, 5], 8).unwrap();
        assert_eq!(embed_lyrics(&again, 8, &t).unwrap(), m);
    }

    #[test]
    fn token_out_of_range_is_an_error() {
        let a = LyricAlignment::new(vec![32], vec![0], 4).unwrap();
        assert!(matches!(
            embed_lyrics(&a, 4, &tokens()),
            Err(ConditionError::TokenOutOfRange { token: 32, .. })
        ));
    }

    fn sample_bundle() -> ConditionBundle {
        ConditionBundle {
            style: StyleEmbedding::normalized(array![1.0, 2.0, 0.0]),
            lyric_frames: Array2::from_elem((4, 2), 0.5),
            style_dropped: false,
            lyrics_dropped: false,
        }
    }

    #[test]
    fn dropout_extremes() {
        let c = sample_bundle();
        assert_eq!(apply_condition_dropout(&c, 0.0, 1), c);
        let d = apply_condition_dropout(&c, 1.0, 1);
        assert!(d.style_dropped && d.lyrics_dropped);
        assert!(d.style.is_null());
        assert!(d.lyric_frames.iter().all(|&v| v == 0.0));
        assert_eq!(d, c.null_like());
    }

    #[test]
    fn dropout_rates_and_independence() {
        let c = sample_bundle();
        let trials = 10_000;
        let (mut s, mut l, mut both) = (0usize, 0usize, 0usize);
        for seed in 0..trials {
            let d = apply_condition_dropout(&c, 0.2, seed as u64);
            s += d.style_dropped as usize;
            l += d.lyrics_dropped as usize;
            both += (d.style_dropped && d.lyrics_dropped) as usize;
        }
        let n = trials as f64;
        assert!((0.18..=0.22).contains(&(s as f64 / n)), "style rate {}", s as f64 / n);
        assert!((0.18..=0.22).contains(&(l as f64 / n)), "lyrics rate {}", l as f64 / n);
        // joint rate p^2 = 0.04, binomial sd 0.002
        assert!((both as f64 / n - 0.04).abs() < 0.008, "joint rate {}", both as f64 / n);
    }

    #[test]
    fn mixed_training_prompts_use_both_modalities() {
        let l = latent(vec![[1.0, 2.0]; 3]);
        let audio = (0..1000)
            .filter(|&s| training_style(&l, 1, 16, ModalityMix::Mixed, s).modality() == Modality::Audio)
            .count();
        assert!((430..=570).contains(&audio), "{audio}");
        assert_eq!(
            training_style(&l, 17, 16, ModalityMix::Text, 0),
            StylePrompt::Text(BTreeSet::from([1]))
        );
    }

    proptest! {
        #[test]
        fn embedding_norm_contract(x in -5.0f64..5.0, y in -5.0f64..5.0, tags in proptest::collection::btree_set(0u32..16, 0..5)) {
            let t = table();
            let e = embed_style(&StylePrompt::Audio(latent(vec![[x, y]])), &t).unwrap();
            prop_assert!(e.is_null() || (e.norm() - 1.0).abs() <= 1e-9);
            let e = embed_style(&StylePrompt::Text(tags.clone()), &t).unwrap();
            if tags.is_empty() {
                prop_assert!(e.is_null());
            } else {
                prop_assert!((e.norm() - 1.0).abs() <= 1e-9);
            }
        }
    }
}
