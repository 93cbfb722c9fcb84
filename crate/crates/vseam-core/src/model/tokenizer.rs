//! Word-level toy tokenizer.
//!
//! The toy vocabulary has three regions:
//!   - fixed word list (ids `0..WORDS.len()`),
//!   - a deterministic fallback range for unknown words,
//!   - one id per image-patch intensity level at the top of the vocabulary.

/// Fixed word list. "yes" and "no" come first so answer ids are stable.
const WORDS: &[&str] = &[
    "yes", "no", "is", "the", "a", "an", "there", "in", "this", "picture", "image", "made", "of",
    "to", "on", "top", "next", "side", "left", "right", "under", "above", "below", "white",
    "black", "light", "dark", "gray", "holding", "man", "woman", "lamp",
];

#[derive(Debug, Clone)]
pub struct ToyTokenizer {
    vocab_size: usize,
    image_levels: usize,
}

impl ToyTokenizer {
    /// `image_levels` ids at the top of the vocabulary encode patch
    /// intensities; everything below is text.
    pub fn new(vocab_size: usize, image_levels: usize) -> Self {
        assert!(
            vocab_size > WORDS.len() + image_levels,
            "toy vocabulary too small"
        );
        ToyTokenizer {
            vocab_size,
            image_levels,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// First image-level token id.
    pub fn image_token_base(&self) -> u32 {
        (self.vocab_size - self.image_levels) as u32
    }

    pub fn image_levels(&self) -> usize {
        self.image_levels
    }

    pub fn image_level_token(&self, level: usize) -> u32 {
        debug_assert!(level < self.image_levels);
        self.image_token_base() + level as u32
    }

    /// Lowercase, strip punctuation, split on whitespace.
    pub fn words(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn encode_word(&self, word: &str) -> u32 {
        if let Some(idx) = WORDS.iter().position(|w| *w == word) {
            return idx as u32;
        }
        // Unknown words hash into the range between the word list and the
        // image tokens, so the same word always gets the same id.
        let span = self.image_token_base() as usize - WORDS.len();
        (WORDS.len() + (fnv1a(word) as usize % span)) as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        Self::words(text).iter().map(|w| self.encode_word(w)).collect()
    }

    pub fn decode(&self, id: u32) -> String {
        let idx = id as usize;
        if idx < WORDS.len() {
            WORDS[idx].to_string()
        } else if id >= self.image_token_base() {
            format!("<img:{}>", id - self.image_token_base())
        } else {
            format!("<w{id}>")
        }
    }

    pub fn yes_id(&self) -> u32 {
        0
    }

    pub fn no_id(&self) -> u32 {
        1
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_are_single_stable_tokens() {
        let t = ToyTokenizer::new(64, 16);
        assert_eq!(t.encode("Yes"), vec![0]);
        assert_eq!(t.encode("No"), vec![1]);
        assert_eq!(t.encode("yes"), vec![0]);
    }

    #[test]
    fn unknown_words_are_deterministic_and_in_range() {
        let t = ToyTokenizer::new(64, 16);
        let a = t.encode_word("zebra");
        let b = t.encode_word("zebra");
        assert_eq!(a, b);
        assert!(a >= WORDS.len() as u32 && a < t.image_token_base());
    }

    #[test]
    fn punctuation_is_stripped() {
        let t = ToyTokenizer::new(64, 16);
        assert_eq!(t.encode("Is the shirt white?"), t.encode("is the shirt white"));
    }
}
