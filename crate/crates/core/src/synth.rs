//! Synthetic corpus generation for tests and demos.
//!
//! Six "generator" classes each write from a private syllable inventory
//! whose consonants are disjoint from every other class, so each class
//! emits character-n-gram signatures no other class can produce. Human
//! documents use ordinary English with a first-person voice, varied
//! punctuation, and high lexical diversity; generator documents repeat a
//! single sentence, yielding the opposite stylistic profile.

use std::collections::HashSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, HUMAN_LABEL};

/// Generator class names, one per synthetic style.
pub const GENERATOR_NAMES: [&str; 6] =
    ["GPT-4-o", "Gemma-2-9B", "Llama-8B", "Mistral-7B", "Qwen-2-72B", "Yi-Large"];

/// Consonant-disjoint syllable inventories, one row per generator.
const CLASS_SYLLABLES: [[&str; 6]; 6] = [
    ["ba", "do", "gu", "bi", "da", "go"],
    ["ki", "pe", "ta", "ku", "pi", "te"],
    ["mo", "ne", "su", "ma", "ni", "se"],
    ["ro", "la", "vi", "ru", "li", "va"],
    ["za", "fe", "wo", "zu", "fi", "we"],
    ["ce", "hy", "ju", "co", "hi", "ja"],
];

const WORDS_PER_CLASS: usize = 40;

const HUMAN_WORDS: [&str; 96] = [
    "yesterday", "morning", "walked", "through", "market", "bought", "fresh", "bread",
    "coffee", "tasted", "bitter", "sweet", "friend", "laughed", "story", "about",
    "travel", "mountain", "river", "quiet", "evening", "reading", "novel", "kitchen",
    "garden", "tomatoes", "growing", "slowly", "weather", "turned", "cold", "jacket",
    "forgot", "umbrella", "rain", "started", "suddenly", "music", "playing", "nearby",
    "neighbor", "waved", "hello", "children", "running", "park", "dog", "barked",
    "twice", "window", "light", "golden", "afternoon", "letter", "arrived", "finally",
    "news", "surprised", "everyone", "dinner", "cooked", "together", "recipe", "grandmother",
    "taught", "years", "ago", "remember", "first", "time", "ocean", "waves",
    "sand", "warm", "summer", "vacation", "photos", "faded", "album", "keeps",
    "memories", "alive", "winter", "snow", "covered", "streets", "silent", "beautiful",
    "spring", "flowers", "bloomed", "early", "birds", "returned", "nest", "roof",
];

const FIRST_PERSON_STARTERS: [&str; 4] = ["I", "My", "We", "Our"];
const SENTENCE_ENDS: [&str; 3] = [".", "!", "?"];

/// Shape of a synthetic corpus.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub humans: usize,
    pub per_generator: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { humans: 600, per_generator: 100, seed: 42 }
    }
}

/// Signature words for one generator class.
fn class_words(class: usize) -> Vec<String> {
    let syllables = CLASS_SYLLABLES[class];
    let mut words = Vec::with_capacity(WORDS_PER_CLASS);
    // Deterministic enumeration: all 2-syllable words first, then
    // 3-syllable ones until the pool is full.
    'outer: for len in 2..=3usize {
        let combos = syllables.len().pow(len as u32);
        for mut idx in 0..combos {
            let mut word = String::new();
            for _ in 0..len {
                word.push_str(syllables[idx % syllables.len()]);
                idx /= syllables.len();
            }
            words.push(word);
            if words.len() == WORDS_PER_CLASS {
                break 'outer;
            }
        }
    }
    words
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// One generator document: a single sentence of signature words repeated
/// enough times to push the type-token ratio far below 0.5. Terminal
/// punctuation is always a period and no first-person token appears.
fn generator_text(words: &[String], rng: &mut ChaCha8Rng) -> String {
    let sentence_len = rng.random_range(5..=8usize);
    let repeats = rng.random_range(30usize.div_ceil(sentence_len).max(4)..=80 / sentence_len);
    let chosen: Vec<&str> =
        (0..sentence_len).map(|_| words[rng.random_range(0..words.len())].as_str()).collect();
    let mut sentence = capitalize(chosen[0]);
    for w in &chosen[1..] {
        sentence.push(' ');
        sentence.push_str(w);
    }
    sentence.push('.');
    let mut text = sentence.clone();
    for _ in 1..repeats {
        text.push(' ');
        text.push_str(&sentence);
    }
    text
}

/// One human document: varied vocabulary, a guaranteed first-person
/// opener, and punctuation cycling through period, bang, and question.
fn human_text(rng: &mut ChaCha8Rng) -> String {
    let target_words = rng.random_range(30..=80usize);
    let mut text = String::new();
    let mut written = 0;
    let mut sentence_idx = 0;
    while written < target_words {
        let len = rng.random_range(6..=12usize).min(target_words - written + 2);
        let mut sentence_words: Vec<String> = Vec::with_capacity(len);
        let first_person = sentence_idx == 0 || rng.random_range(0..5) == 0;
        if first_person {
            sentence_words
                .push(FIRST_PERSON_STARTERS[rng.random_range(0..FIRST_PERSON_STARTERS.len())].to_string());
        }
        while sentence_words.len() < len {
            sentence_words.push(HUMAN_WORDS[rng.random_range(0..HUMAN_WORDS.len())].to_string());
        }
        if !first_person {
            sentence_words[0] = capitalize(&sentence_words[0]);
        }
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(&sentence_words.join(" "));
        text.push_str(SENTENCE_ENDS[sentence_idx % SENTENCE_ENDS.len()]);
        written += sentence_words.len();
        sentence_idx += 1;
    }
    text
}

/// Generates the labeled corpus: humans first, then each generator class
/// in [`GENERATOR_NAMES`] order. Deterministic per seed; all texts are
/// distinct so content-hash ids never collide.
pub fn generate_corpus(spec: &SynthSpec) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut docs = Vec::with_capacity(spec.humans + 6 * spec.per_generator);

    let push_unique = |docs: &mut Vec<Document>,
                           seen: &mut HashSet<String>,
                           rng: &mut ChaCha8Rng,
                           make: &mut dyn FnMut(&mut ChaCha8Rng) -> String,
                           label_a: u8,
                           label_b: &str| {
        loop {
            let text = make(rng);
            if seen.insert(text.clone()) {
                docs.push(Document::new(text, Some(label_a), Some(label_b)).expect("valid doc"));
                break;
            }
        }
    };

    for _ in 0..spec.humans {
        push_unique(&mut docs, &mut seen, &mut rng, &mut human_text, 0, HUMAN_LABEL);
    }
    for (class, name) in GENERATOR_NAMES.iter().enumerate() {
        let words = class_words(class);
        let mut make = |rng: &mut ChaCha8Rng| generator_text(&words, rng);
        for _ in 0..spec.per_generator {
            push_unique(&mut docs, &mut seen, &mut rng, &mut make, 1, name);
        }
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelVocabulary;

    fn tokens(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| {
                w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }

    fn ttr(text: &str) -> f64 {
        let toks = tokens(text);
        let distinct: HashSet<&String> = toks.iter().collect();
        distinct.len() as f64 / toks.len() as f64
    }

    fn char_3grams(text: &str) -> HashSet<String> {
        let lowered = text.to_lowercase();
        let chars: Vec<char> = lowered.chars().collect();
        chars
            .windows(3)
            .filter(|w| w.iter().all(|c| c.is_ascii_alphabetic()))
            .map(|w| w.iter().collect())
            .collect()
    }

    #[test]
    fn corpus_has_requested_shape() {
        let docs = generate_corpus(&SynthSpec::default());
        assert_eq!(docs.len(), 1200);
        let humans = docs.iter().filter(|d| d.label_a == Some(0)).count();
        assert_eq!(humans, 600);
        for name in GENERATOR_NAMES {
            let n = docs.iter().filter(|d| d.label_b.as_deref() == Some(name)).count();
            assert_eq!(n, 100, "class {name}");
        }
        let vocab = LabelVocabulary::build(&docs).unwrap();
        assert_eq!(vocab.len(), 7);

        let ids: HashSet<&str> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids.len(), docs.len());
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = SynthSpec { humans: 20, per_generator: 5, seed: 7 };
        assert_eq!(generate_corpus(&spec), generate_corpus(&spec));
        let other = SynthSpec { seed: 8, ..spec };
        assert_ne!(generate_corpus(&spec), generate_corpus(&other));
    }

    #[test]
    fn stylistic_profiles_match_labels() {
        let docs = generate_corpus(&SynthSpec { humans: 50, per_generator: 20, seed: 3 });
        for doc in &docs {
            let toks = tokens(&doc.text);
            assert!(toks.len() >= 20 && toks.len() <= 90, "{} words", toks.len());
            let has_first_person = toks.iter().any(|t| t == "i" || t == "my" || t == "we" || t == "our");
            let punct_kinds =
                ['.', '!', '?'].iter().filter(|c| doc.text.contains(**c)).count();
            if doc.label_a == Some(0) {
                assert!(ttr(&doc.text) > 0.5, "human ttr {}", ttr(&doc.text));
                assert!(has_first_person);
                assert!(punct_kinds >= 2);
            } else {
                assert!(ttr(&doc.text) < 0.5, "generator ttr {}", ttr(&doc.text));
                assert!(!has_first_person);
                assert_eq!(punct_kinds, 1);
            }
        }
    }

    #[test]
    fn generator_ngram_signatures_are_disjoint() {
        let docs = generate_corpus(&SynthSpec { humans: 5, per_generator: 30, seed: 11 });
        let grams_of = |name: &str| {
            let mut grams = HashSet::new();
            for d in docs.iter().filter(|d| d.label_b.as_deref() == Some(name)) {
                grams.extend(char_3grams(&d.text));
            }
            grams
        };
        for i in 0..GENERATOR_NAMES.len() {
            for j in i + 1..GENERATOR_NAMES.len() {
                let a = grams_of(GENERATOR_NAMES[i]);
                let b = grams_of(GENERATOR_NAMES[j]);
                let shared: Vec<&String> = a.intersection(&b).collect();
                assert!(
                    shared.is_empty(),
                    "{} and {} share grams {:?}",
                    GENERATOR_NAMES[i],
                    GENERATOR_NAMES[j],
                    shared
                );
            }
        }
    }
}
