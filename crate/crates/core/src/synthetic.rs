//! Templated toy corpus: short restaurant-review sentences where an opinion
//! word next to the marked aspect fixes its polarity. Sentences with two
//! aspects carry conflicting opinions, so the label depends on which aspect
//! is marked.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Instance, Lexicon, Polarity};

pub const ASPECTS: [&str; 12] = [
    "food", "service", "pizza", "staff", "wine", "menu", "decor", "waiter", "sushi", "music", "dessert", "coffee",
];
pub const POSITIVE: [&str; 6] = ["great", "delicious", "excellent", "friendly", "amazing", "lovely"];
pub const NEGATIVE: [&str; 6] = ["awful", "terrible", "rude", "bland", "horrible", "slow"];
/// Polarity-neutral descriptors; not part of the lexicon.
pub const NEUTRAL: [&str; 4] = ["average", "ordinary", "typical", "usual"];

const OPENERS: [&str; 4] = ["the", "our", "their", "this"];
const CLOSERS: [&str; 5] = ["tonight", "here", "again", "overall", "today"];
const JOINERS: [&str; 3] = ["but", "and", "while"];

/// Lexicon of the positive and negative opinion words.
pub fn lexicon() -> Lexicon {
    Lexicon::new(POSITIVE, NEGATIVE).expect("word lists are disjoint")
}

fn opinion(polarity: Polarity, rng: &mut impl Rng) -> &'static str {
    match polarity {
        Polarity::Positive => POSITIVE.choose(rng),
        Polarity::Negative => NEGATIVE.choose(rng),
        Polarity::Neutral => NEUTRAL.choose(rng),
    }
    .expect("non-empty")
}

fn random_polarity(rng: &mut impl Rng) -> Polarity {
    Polarity::ALL[rng.gen_range(0..3)]
}

/// `n` instances drawn from `seed`. About half mention two aspects.
pub fn generate(n: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| sentence(format!("syn-{i}"), &mut rng)).collect()
}

/// Appends one clause and returns the aspect's position.
fn clause(tokens: &mut Vec<String>, aspect: &str, polarity: Polarity, rng: &mut impl Rng) -> usize {
    let word = opinion(polarity, rng);
    tokens.push(OPENERS.choose(rng).expect("non-empty").to_string());
    if rng.gen_bool(0.7) {
        tokens.push(word.to_string());
        tokens.push(aspect.to_string());
        tokens.len() - 1
    } else {
        tokens.push(aspect.to_string());
        let at = tokens.len() - 1;
        tokens.push(if rng.gen_bool(0.5) { "was" } else { "is" }.to_string());
        tokens.push(word.to_string());
        at
    }
}

fn sentence(id: String, rng: &mut impl Rng) -> Instance {
    let mut tokens: Vec<String> = Vec::new();
    let first_aspect = *ASPECTS.choose(rng).expect("non-empty");
    let first_polarity = random_polarity(rng);
    let first = clause(&mut tokens, first_aspect, first_polarity, rng);

    let mut marked = (first, first_polarity);
    if rng.gen_bool(0.5) {
        tokens.push(JOINERS.choose(rng).expect("non-empty").to_string());
        let second_aspect = loop {
            let a = *ASPECTS.choose(rng).expect("non-empty");
            if a != first_aspect {
                break a;
            }
        };
        let second_polarity = loop {
            let p = random_polarity(rng);
            if p != first_polarity {
                break p;
            }
        };
        let second = clause(&mut tokens, second_aspect, second_polarity, rng);
        if rng.gen_bool(0.5) {
            marked = (second, second_polarity);
        }
    }
    if rng.gen_bool(0.4) {
        tokens.push(CLOSERS.choose(rng).expect("non-empty").to_string());
    }
    let (at, polarity) = marked;
    Instance::new(id, tokens, (at, at + 1), polarity).expect("templates produce valid instances")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate(20, 3), generate(20, 3));
        assert_ne!(generate(20, 3), generate(20, 4));
    }

    #[test]
    fn label_follows_marked_opinion() {
        let lex = lexicon();
        for inst in generate(300, 1) {
            let a = inst.aspect_span.0;
            assert!(ASPECTS.contains(&inst.tokens[a].as_str()));
            // The marked aspect's opinion sits right before it or two after it.
            let word = if a > 0 && (POSITIVE.contains(&inst.tokens[a - 1].as_str()) || NEGATIVE.contains(&inst.tokens[a - 1].as_str()) || NEUTRAL.contains(&inst.tokens[a - 1].as_str())) {
                &inst.tokens[a - 1]
            } else {
                &inst.tokens[a + 2]
            };
            let expected = if POSITIVE.contains(&word.as_str()) {
                Polarity::Positive
            } else if NEGATIVE.contains(&word.as_str()) {
                Polarity::Negative
            } else {
                Polarity::Neutral
            };
            assert_eq!(inst.polarity, expected, "{:?}", inst.tokens);
            assert_eq!(lex.contains(word), expected != Polarity::Neutral);
        }
    }

    #[test]
    fn all_labels_and_two_aspect_sentences_occur() {
        let data = generate(200, 2);
        for p in Polarity::ALL {
            assert!(data.iter().filter(|i| i.polarity == p).count() > 30);
        }
        let two = data.iter().filter(|i| i.tokens.iter().filter(|t| ASPECTS.contains(&t.as_str())).count() == 2).count();
        assert!(two > 60);
    }
}
