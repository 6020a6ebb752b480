//! Seeded synthetic corpora for desk experiments.
//!
//! Corpus A is templated English-like prose over a small vocabulary; a
//! model pretrained on some of it treats fresh samples as familiar. Corpus B
//! is syllable/digit noise with its own punctuation, unlike anything in A.

use crate::rng::SeededRng;
use crate::selection::CorpusDocument;

const ADJ: &[&str] = &[
    "red", "old", "quiet", "small", "bright", "cold", "green", "tall", "slow", "brave", "dark",
    "gentle",
];
const NOUN: &[&str] = &[
    "fox", "river", "farmer", "garden", "bird", "village", "teacher", "horse", "boat", "tree",
    "child", "market", "bridge", "dog", "window", "mill",
];
const VERB: &[&str] = &[
    "watched", "followed", "crossed", "found", "carried", "painted", "visited", "passed",
    "called", "helped", "closed", "heard",
];
const PREP: &[&str] = &["near", "behind", "under", "beside", "across", "past", "above", "by"];
const TIME: &[&str] = &[
    "in the morning",
    "at night",
    "after the rain",
    "before winter",
    "every day",
    "at noon",
];

fn pick<'a>(rng: &mut SeededRng, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

fn sentence_a(rng: &mut SeededRng) -> String {
    let subject = format!("the {} {}", pick(rng, ADJ), pick(rng, NOUN));
    let object = format!("the {} {}", pick(rng, ADJ), pick(rng, NOUN));
    let place = format!("{} the {}", pick(rng, PREP), pick(rng, NOUN));
    match rng.below(3) {
        0 => format!("{subject} {} {object} {place}.", pick(rng, VERB)),
        1 => format!("{subject} {} {object} {}.", pick(rng, VERB), pick(rng, TIME)),
        _ => format!(
            "{} {subject} {} {object}.",
            capitalize(pick(rng, TIME)),
            pick(rng, VERB)
        ),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Prose of `min_len..max_len` bytes built from whole sentences.
fn text_a(rng: &mut SeededRng, min_len: usize) -> String {
    let mut out = String::new();
    while out.len() < min_len {
        if !out.is_empty() {
            out.push(' ');
        }
        let s = sentence_a(rng);
        out.push_str(&capitalize(&s));
    }
    out
}

const ONSET: &[&str] = &["zr", "kv", "q", "x", "gl", "pf", "vy", "tz", "j", "wh"];
const NUCLEUS: &[&str] = &["u", "y", "ae", "oi", "e", "i"];
const SEP: &[&str] = &["|", "::", "#", "~", "/"];

fn word_b(rng: &mut SeededRng) -> String {
    let mut w = String::new();
    for _ in 0..1 + rng.below(3) {
        w.push_str(pick(rng, ONSET));
        w.push_str(pick(rng, NUCLEUS));
    }
    if rng.below(2) == 0 {
        w.push_str(&format!("{}", rng.below(1000)));
    }
    if rng.below(4) == 0 {
        w = w.to_uppercase();
    }
    w
}

fn text_b(rng: &mut SeededRng, min_len: usize) -> String {
    let mut out = String::new();
    while out.len() < min_len {
        if !out.is_empty() {
            out.push_str(if rng.below(3) == 0 { pick(rng, SEP) } else { " " });
        }
        out.push_str(&word_b(rng));
    }
    out
}

fn docs(
    prefix: &str,
    n: usize,
    seed: u64,
    len_range: (usize, usize),
    gen: fn(&mut SeededRng, usize) -> String,
) -> Vec<CorpusDocument> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let min_len = len_range.0 + rng.below(len_range.1 - len_range.0 + 1);
            CorpusDocument {
                id: format!("{prefix}-{i:04}"),
                text: gen(&mut rng, min_len),
                label: None,
            }
        })
        .collect()
}

/// `n` documents of template prose, each at least `min_len` bytes.
pub fn corpus_a(n: usize, seed: u64, len_range: (usize, usize)) -> Vec<CorpusDocument> {
    docs("a", n, seed, len_range, text_a)
}

/// `n` documents of syllable noise.
pub fn corpus_b(n: usize, seed: u64, len_range: (usize, usize)) -> Vec<CorpusDocument> {
    docs("b", n, seed, len_range, text_b)
}

/// Question/answer documents in the `Q: …\nA: …` layout, answer style
/// matching corpus A or B.
pub fn qa_documents(prefix: &str, n: usize, seed: u64, familiar_style: bool) -> Vec<CorpusDocument> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let (q, a) = if familiar_style {
                let noun = pick(&mut rng, NOUN);
                (
                    format!("what did the {} {} see?", pick(&mut rng, ADJ), noun),
                    capitalize(&sentence_a(&mut rng)),
                )
            } else {
                (format!("{}?", word_b(&mut rng)), text_b(&mut rng, 24))
            };
            CorpusDocument {
                id: format!("{prefix}-{i:04}"),
                text: format!("Q: {q}\nA: {a}"),
                label: None,
            }
        })
        .collect()
}
