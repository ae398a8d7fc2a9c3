//! Synthetic flight-query slot grammar for fixtures and benchmarks.
//!
//! Generates annotated sentences from a small template grammar with three
//! slot families (departure city, arrival city, weekday, airline) over an
//! 8-tag IOB vocabulary. Slot positions vary across templates and values
//! may span several tokens, so the alignment between words and tags is
//! non-trivial but fully recoverable from context.

use rand::Rng;

use crate::corpus::{Pair, Sentence, TagSequence};
use crate::rng::Prng;

const FROM_CITIES: &[&str] = &[
    "boston",
    "denver",
    "atlanta",
    "chicago",
    "seattle",
    "memphis",
    "oakland",
    "tampa",
    "new york",
    "los angeles",
    "san francisco",
    "salt lake city",
    "kansas city",
    "st petersburg",
];

const DAYS: &[&str] = &[
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
];

const AIRLINES: &[&str] = &[
    "delta",
    "united",
    "lufthansa",
    "northwest",
    "american airlines",
    "air canada",
];

enum Piece {
    Lit(&'static str),
    Slot(&'static str),
}

use Piece::{Lit, Slot};

fn templates() -> Vec<Vec<Piece>> {
    vec![
        vec![
            Lit("show flights from"),
            Slot("fromloc"),
            Lit("to"),
            Slot("toloc"),
        ],
        vec![
            Lit("show flights from"),
            Slot("fromloc"),
            Lit("to"),
            Slot("toloc"),
            Lit("on"),
            Slot("day"),
        ],
        vec![
            Lit("list all flights departing"),
            Slot("fromloc"),
            Lit("on"),
            Slot("day"),
        ],
        vec![
            Lit("book a"),
            Slot("airline"),
            Lit("flight to"),
            Slot("toloc"),
        ],
        vec![Lit("what"), Slot("airline"), Lit("flights leave"), Slot("fromloc")],
        vec![
            Lit("flights arriving in"),
            Slot("toloc"),
            Lit("on"),
            Slot("day"),
        ],
        vec![
            Lit("i need a"),
            Slot("airline"),
            Lit("flight from"),
            Slot("fromloc"),
            Lit("to"),
            Slot("toloc"),
        ],
        vec![
            Lit("are there flights to"),
            Slot("toloc"),
            Lit("on"),
            Slot("day"),
        ],
    ]
}

fn slot_values(slot: &str) -> &'static [&'static str] {
    match slot {
        "fromloc" | "toloc" => FROM_CITIES,
        "day" => DAYS,
        "airline" => AIRLINES,
        _ => unreachable!("unknown slot {slot}"),
    }
}

/// `n` annotated sentences drawn from the grammar, deterministic per seed.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<Pair> {
    let templates = templates();
    let mut rng = Prng::new(seed).stream("synth");
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let template = &templates[rng.random_range(0..templates.len())];
        let mut tokens: Vec<String> = Vec::new();
        let mut tags: Vec<String> = Vec::new();
        for piece in template {
            match piece {
                Lit(text) => {
                    for word in text.split(' ') {
                        tokens.push(word.to_string());
                        tags.push("O".to_string());
                    }
                }
                Slot(kind) => {
                    let values = slot_values(kind);
                    let value = values[rng.random_range(0..values.len())];
                    for (i, word) in value.split(' ').enumerate() {
                        tokens.push(word.to_string());
                        tags.push(if i == 0 {
                            format!("B-{kind}")
                        } else {
                            format!("I-{kind}")
                        });
                    }
                }
            }
        }
        pairs.push((
            Sentence::from_tokens(tokens),
            TagSequence::from_tags(tags),
        ));
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{IobMode, validate_iob};
    use std::collections::BTreeSet;

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let a = toy_corpus(100, 3);
        let b = toy_corpus(100, 3);
        assert_eq!(a, b);
        for (sentence, tags) in &a {
            assert_eq!(sentence.len(), tags.len());
            assert!(sentence.len() >= 4);
            validate_iob(&tags.tags, IobMode::Strict).unwrap();
        }
    }

    #[test]
    fn grammar_uses_exactly_eight_tags() {
        let pairs = toy_corpus(500, 0);
        let tags: BTreeSet<&String> = pairs.iter().flat_map(|(_, t)| &t.tags).collect();
        let expected: BTreeSet<String> = [
            "O",
            "B-fromloc",
            "I-fromloc",
            "B-toloc",
            "I-toloc",
            "B-day",
            "B-airline",
            "I-airline",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let got: BTreeSet<String> = tags.into_iter().cloned().collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn sentences_parse_unambiguously() {
        // the token sequence determines the tag sequence, which is what
        // makes the grammar learnable to 100%
        use std::collections::HashMap;
        let pairs = toy_corpus(2000, 1);
        let mut seen: HashMap<Vec<String>, Vec<String>> = HashMap::new();
        for (sentence, tags) in pairs {
            if let Some(existing) = seen.get(&sentence.tokens) {
                assert_eq!(existing, &tags.tags, "ambiguous {:?}", sentence.tokens);
            } else {
                seen.insert(sentence.tokens, tags.tags);
            }
        }
    }
}
