//! Character vocabulary, label encoding, text mask planning, and
//! prediction decoding.
//!
//! The charset order is fixed — `a..z`, then `0..9`, then EOS — so
//! checkpoints are portable. EOS is a prediction class (id 36); the MASK
//! token is an input-embedding row only (id `M` = 37 in the embedding
//! table) and never a prediction class.

use crate::error::Error;
use crate::Result;
use rand::Rng;

/// Number of prediction classes: 36 characters + EOS.
pub const NUM_CLASSES: usize = 37;
/// Prediction class marking end of word; also the target at pad positions.
pub const EOS: usize = 36;

const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

/// The fixed 36-character vocabulary.
#[derive(Debug, Clone, Copy, Default)]
pub struct Charset;

impl Charset {
    /// Recognizable characters in class order.
    pub fn chars() -> impl Iterator<Item = char> {
        LETTERS.chars()
    }

    pub fn contains(ch: char) -> bool {
        ch.is_ascii_lowercase() || ch.is_ascii_digit()
    }

    /// Class index of a character; recognition is case-insensitive, so
    /// uppercase input is folded before lookup.
    pub fn index_of(ch: char) -> Result<usize> {
        let ch = ch.to_ascii_lowercase();
        match ch {
            'a'..='z' => Ok(ch as usize - 'a' as usize),
            '0'..='9' => Ok(26 + ch as usize - '0' as usize),
            _ => Err(Error::Charset { ch }),
        }
    }

    pub fn char_at(index: usize) -> Option<char> {
        LETTERS.chars().nth(index)
    }
}

/// Per-position class targets for one label, padded to length `L`:
/// word characters first, then EOS, then EOS padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharTargets {
    pub indices: Vec<usize>,
    pub word_len: usize,
}

/// Encode a word into `L` class targets.
pub fn encode_label(word: &str, l: usize) -> Result<CharTargets> {
    let word = word.to_ascii_lowercase();
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Err(Error::Label {
            label: word,
            reason: "empty word".into(),
        });
    }
    if chars.len() > l - 1 {
        return Err(Error::Label {
            label: word.clone(),
            reason: format!("{} chars exceeds the {} supported by L={l}", chars.len(), l - 1),
        });
    }
    let mut indices = Vec::with_capacity(l);
    for ch in &chars {
        indices.push(Charset::index_of(*ch)?);
    }
    indices.resize(l, EOS);
    Ok(CharTargets {
        indices,
        word_len: chars.len(),
    })
}

/// Invert [`encode_label`]: characters up to the first EOS.
pub fn decode_targets(targets: &CharTargets) -> String {
    targets
        .indices
        .iter()
        .take_while(|&&i| i != EOS)
        .filter_map(|&i| Charset::char_at(i))
        .collect()
}

/// Partition of text positions `0..L` into masked and unmasked sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TextMaskPlan {
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
    pub ratio: f64,
}

impl TextMaskPlan {
    /// All `L` positions masked (the fully implicit decoding view).
    pub fn full(l: usize) -> Self {
        TextMaskPlan {
            masked: (0..l).collect(),
            unmasked: Vec::new(),
            ratio: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.masked.len() + self.unmasked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draw a text mask plan.
///
/// For `ratio < 1`, `round(ratio·word_len)` of the word's character
/// positions are masked uniformly without replacement, and every padding
/// position (index ≥ `word_len`, which carries a MASK input token) is
/// masked as well. `ratio == 1.0` masks all `L` positions.
pub fn sample_text_mask(
    word_len: usize,
    ratio: f64,
    l: usize,
    rng: &mut impl Rng,
) -> TextMaskPlan {
    assert!((0.0..=1.0).contains(&ratio), "text mask ratio {ratio} out of [0,1]");
    assert!(word_len <= l, "word_len {word_len} exceeds L={l}");
    if ratio >= 1.0 {
        return TextMaskPlan::full(l);
    }
    let k = (ratio * word_len as f64).round() as usize;
    let chosen = sample_without_replacement(word_len, k, rng);
    let mut mask_flags = vec![false; l];
    for &i in &chosen {
        mask_flags[i] = true;
    }
    for flag in mask_flags.iter_mut().skip(word_len) {
        *flag = true;
    }
    let masked = (0..l).filter(|&i| mask_flags[i]).collect();
    let unmasked = (0..l).filter(|&i| !mask_flags[i]).collect();
    TextMaskPlan {
        masked,
        unmasked,
        ratio,
    }
}

/// First `k` of a partial Fisher-Yates shuffle over `0..n`, sorted.
pub(crate) fn sample_without_replacement(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.gen_range(0..n - i);
        pool.swap(i, j);
    }
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Per-position argmax decode, truncated at the first EOS. Ties go to the
/// lowest class index.
pub fn decode_prediction(logits: &[f64], l: usize, m: usize) -> String {
    assert_eq!(logits.len(), l * m, "logits length {} != {l}x{m}", logits.len());
    let mut word = String::new();
    for row in logits.chunks_exact(m) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == EOS || Charset::char_at(best).is_none() {
            break;
        }
        word.push(Charset::char_at(best).unwrap());
    }
    word
}
