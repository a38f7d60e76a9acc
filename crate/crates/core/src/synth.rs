//! A small generative act grammar for desk-scale experiments.
//!
//! Backchannel and Agreement share the same surface forms ("yeah", "right", ...)
//! and differ only by the act of the preceding utterance: Backchannel follows a
//! Statement, Agreement follows an Opinion. Both contexts are equally likely, so a
//! model without history cannot beat 50% on those two labels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{normalize_and_tokenize, Conversation, Utterance};
use crate::error::{Error, Result};

/// Acts in the order they are enabled by `n_acts`.
pub const ACTS: [&str; 8] = [
    "Statement",
    "Opinion",
    "Backchannel",
    "Agreement",
    "Question",
    "Answer",
    "Greeting",
    "Farewell",
];

/// Labels whose surface form is shared and resolved only by context.
pub const CONTEXT_DEPENDENT: [&str; 2] = ["Backchannel", "Agreement"];

pub fn is_context_dependent(label: &str) -> bool {
    CONTEXT_DEPENDENT.contains(&label)
}

const PLACES: [&str; 5] = ["paris", "boston", "the lake", "my office", "the city"];
const TIMES: [&str; 4] = ["yesterday", "last week", "today", "this morning"];
const MOVES: [&str; 4] = ["went to", "came back from", "stayed in", "drove to"];
const THINGS: [&str; 5] = ["the movie", "that book", "this city", "the food", "the game"];
const JUDGEMENTS: [&str; 5] = ["great", "terrible", "beautiful", "boring", "amazing"];
const SHARED: [&str; 4] = ["yeah.", "right.", "okay.", "yeah, yeah."];
const QUESTIONS: [&str; 4] = ["How are you?", "Where did you go?", "What do you do?", "Did you like it?"];
const ANSWERS: [&str; 4] = ["I am fine, thanks.", "At home mostly.", "Nothing much really.", "Not really, no."];
const GREETINGS: [&str; 4] = ["Hi.", "Hello there.", "Hi, nice to see you.", "Good morning."];
const FAREWELLS: [&str; 4] = ["Bye.", "See you later.", "I have to go, bye.", "Good night."];
/// Words used to corrupt test utterances; they also appear as occasional openers
/// in generated text so they are part of the vocabulary.
pub const FILLERS: [&str; 5] = ["um", "uh", "well", "so", "like"];

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items.choose(rng).expect("non-empty list")
}

fn surface<R: Rng>(act: &str, rng: &mut R) -> String {
    let text = match act {
        "Statement" => format!("I {} {} {}.", pick(rng, &MOVES), pick(rng, &PLACES), pick(rng, &TIMES)),
        "Opinion" => {
            if rng.gen_bool(0.5) {
                format!("I think {} is {}.", pick(rng, &THINGS), pick(rng, &JUDGEMENTS))
            } else {
                format!("{} was really {}.", pick(rng, &THINGS), pick(rng, &JUDGEMENTS))
            }
        }
        "Backchannel" | "Agreement" => pick(rng, &SHARED).to_string(),
        "Question" => pick(rng, &QUESTIONS).to_string(),
        "Answer" => pick(rng, &ANSWERS).to_string(),
        "Greeting" => pick(rng, &GREETINGS).to_string(),
        _ => pick(rng, &FAREWELLS).to_string(),
    };
    if !is_context_dependent(act) && rng.gen_bool(0.1) {
        format!("{} {}", pick(rng, &FILLERS), text)
    } else {
        text
    }
}

/// Generates `n_conversations` conversations over the first `n_acts` acts of
/// [`ACTS`] (4 to 8). Identical arguments give identical output.
pub fn synth_corpus(seed: u64, n_conversations: usize, n_acts: usize) -> Result<Vec<Conversation>> {
    if !(4..=ACTS.len()).contains(&n_acts) {
        return Err(Error::Config(format!("number of acts must be in 4..=8, got {n_acts}")));
    }
    let enabled = |act: &str| ACTS[..n_acts].contains(&act);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conversations = Vec::with_capacity(n_conversations);
    for c in 0..n_conversations {
        let mut acts: Vec<&str> = Vec::new();
        if enabled("Greeting") {
            acts.extend(["Greeting", "Greeting"]);
        }
        for _ in 0..rng.gen_range(2..=5) {
            match rng.gen_range(0..6) {
                0 | 1 => acts.extend(["Statement", "Backchannel"]),
                2 | 3 => acts.extend(["Opinion", "Agreement"]),
                4 if enabled("Question") => {
                    acts.push("Question");
                    acts.push(if enabled("Answer") { "Answer" } else { "Statement" });
                }
                _ => acts.push(if rng.gen_bool(0.5) { "Statement" } else { "Opinion" }),
            }
        }
        if enabled("Farewell") {
            acts.extend(["Farewell", "Farewell"]);
        }
        let utterances = acts
            .iter()
            .enumerate()
            .map(|(k, act)| Utterance {
                speaker: if k % 2 == 0 { "A" } else { "B" }.to_string(),
                tokens: normalize_and_tokenize(&surface(act, &mut rng)),
                label: Some(act.to_string()),
            })
            .collect();
        conversations.push(Conversation {
            id: format!("conv{:05}", c + 1),
            utterances,
        });
    }
    Ok(conversations)
}

/// Replaces each token with a random filler word with probability `rate`. Labels
/// are kept as they are.
pub fn inject_noise(conversations: &[Conversation], rate: f64, seed: u64) -> Vec<Conversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    conversations
        .iter()
        .map(|c| Conversation {
            id: c.id.clone(),
            utterances: c
                .utterances
                .iter()
                .map(|u| Utterance {
                    tokens: u
                        .tokens
                        .iter()
                        .map(|t| {
                            if rng.gen_bool(rate) {
                                pick(&mut rng, &FILLERS).to_string()
                            } else {
                                t.clone()
                            }
                        })
                        .collect(),
                    ..u.clone()
                })
                .collect(),
        })
        .collect()
}
