//! Seeded generator of English-like text for smoke tests and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DETERMINERS: &[&str] = &["the", "a", "every", "this", "that", "one", "some", "no"];
const ADJECTIVES: &[&str] = &[
    "small", "quiet", "bright", "old", "young", "heavy", "careful", "green", "distant", "warm",
    "strange", "simple", "broken", "golden", "patient", "narrow",
];
const NOUNS: &[&str] = &[
    "river", "teacher", "machine", "garden", "letter", "window", "farmer", "city", "engine",
    "forest", "student", "market", "bridge", "question", "child", "mountain", "ship", "painter",
    "road", "house", "doctor", "story", "winter", "village",
];
const VERBS: &[&str] = &[
    "watched",
    "carried",
    "found",
    "built",
    "followed",
    "opened",
    "painted",
    "answered",
    "crossed",
    "remembered",
    "visited",
    "repaired",
    "described",
    "noticed",
    "left",
    "reached",
];
const ADVERBS: &[&str] = &[
    "slowly",
    "again",
    "quickly",
    "carefully",
    "today",
    "once",
    "later",
    "quietly",
];
const PREPOSITIONS: &[&str] = &[
    "near", "under", "behind", "across", "beside", "toward", "inside", "past",
];
const CONNECTIVES: &[&str] = &["and", "but", "while", "because", "so"];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
    out.push(pick(rng, DETERMINERS).to_string());
    if rng.gen_bool(0.5) {
        out.push(pick(rng, ADJECTIVES).to_string());
    }
    out.push(pick(rng, NOUNS).to_string());
}

fn clause(rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
    noun_phrase(rng, out);
    out.push(pick(rng, VERBS).to_string());
    noun_phrase(rng, out);
    if rng.gen_bool(0.4) {
        out.push(pick(rng, PREPOSITIONS).to_string());
        noun_phrase(rng, out);
    }
    if rng.gen_bool(0.3) {
        out.push(pick(rng, ADVERBS).to_string());
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let mut words = Vec::new();
    clause(rng, &mut words);
    if rng.gen_bool(0.35) {
        words.push(format!(",{}", pick(rng, CONNECTIVES)));
        clause(rng, &mut words);
    }
    let mut s = words.join(" ").replace(" ,", ",");
    if let Some(first) = s.get(0..1) {
        s = first.to_uppercase() + &s[1..];
    }
    s.push(if rng.gen_bool(0.1) { '?' } else { '.' });
    s
}

/// At least `min_bytes` bytes of paragraphs separated by blank lines.
pub fn synthetic_corpus(seed: u64, min_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 512);
    while out.len() < min_bytes {
        let sentences = rng.gen_range(3..8);
        let para: Vec<String> = (0..sentences).map(|_| sentence(&mut rng)).collect();
        out.push_str(&para.join(" "));
        out.push_str("\n\n");
    }
    out
}
