//! Synthetic interaction streams shared by the integration suites.
#![allow(dead_code)]

use driftmem::corpus::{Interaction, UserStream};
use driftmem::engine::RunConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PHRASES_A: [&str; 8] = [
    "the river runs past the old mill",
    "a quiet meadow full of wild flowers",
    "tall pines stand along the northern ridge",
    "morning fog settles over the lake",
    "the trail climbs toward a rocky summit",
    "birds nest in the hollow oak",
    "cold streams feed the valley below",
    "moss covers every fallen log",
];

pub const PHRASES_B: [&str; 8] = [
    "the engine idles with a steady hum",
    "a worn piston scrapes inside the cylinder",
    "fresh oil keeps the gears turning",
    "the valve opens on every third stroke",
    "torque climbs as the shaft spins faster",
    "a loose belt squeals under heavy load",
    "the radiator vents hot steam",
    "bolts hold the manifold in place",
];

pub const TOPICS_A: [&str; 6] = ["river", "meadow", "pines", "lake", "trail", "valley"];
pub const TOPICS_B: [&str; 6] = ["engine", "piston", "gears", "valve", "shaft", "radiator"];

pub const SETTINGS_A: [&str; 6] = ["at dawn", "in winter", "after rain", "at dusk", "in spring", "under snow"];
pub const SETTINGS_B: [&str; 6] = ["at idle", "under load", "after service", "at startup", "in traffic", "on the bench"];

/// Words and phrasing shared by neither lexicon.
pub const PHRASES_C: [&str; 4] = [
    "violet comets drift beyond saturn",
    "quantum lattices hum near absolute zero",
    "nebulae glow with ultraviolet light",
    "pulsars blink across galactic distances",
];
pub const TOPICS_C: [&str; 3] = ["comets", "lattices", "pulsars"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lexicon {
    A,
    B,
    C,
}

impl Lexicon {
    fn phrases(self) -> &'static [&'static str] {
        match self {
            Lexicon::A => &PHRASES_A,
            Lexicon::B => &PHRASES_B,
            Lexicon::C => &PHRASES_C,
        }
    }

    fn topics(self) -> &'static [&'static str] {
        match self {
            Lexicon::A => &TOPICS_A,
            Lexicon::B => &TOPICS_B,
            Lexicon::C => &TOPICS_C,
        }
    }
}

pub fn query_for(lex: Lexicon, rng: &mut impl Rng) -> String {
    let pair: Vec<&str> = lex.topics().choose_multiple(rng, 2).copied().collect();
    let (t1, t2) = (pair[0], pair[1]);
    match lex {
        Lexicon::A => format!("describe the {t1} and {t2} scene {}", SETTINGS_A.choose(rng).unwrap()),
        Lexicon::B => format!("explain the {t1} and {t2} problem {}", SETTINGS_B.choose(rng).unwrap()),
        Lexicon::C => format!("ponder {t1} plus {t2} cosmically"),
    }
}

pub fn response_for(lex: Lexicon, rng: &mut impl Rng, n_phrases: usize) -> String {
    let mut picked: Vec<&str> = lex.phrases().choose_multiple(rng, n_phrases).copied().collect();
    picked.shuffle(rng);
    picked.join(if lex == Lexicon::C { " then " } else { " and " })
}

pub fn interaction(user: &str, ts: i64, lex: Lexicon, rng: &mut impl Rng) -> Interaction {
    Interaction::new(user, ts, query_for(lex, rng), response_for(lex, rng, 2))
}

/// A user writing about lexicon A, switching to a `b_share` mix of B from
/// `shift_at` (as a fraction of the stream) on.
pub fn shifting_user(user: &str, n: usize, shift_at: f64, b_share: f64, seed: u64) -> UserStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cut = (n as f64 * shift_at) as usize;
    let items = (0..n)
        .map(|i| {
            let lex = if i >= cut && rng.gen_bool(b_share) { Lexicon::B } else { Lexicon::A };
            interaction(user, i as i64, lex, &mut rng)
        })
        .collect();
    UserStream::new(user, items)
}

pub fn single_topic_user(user: &str, n: usize, lex: Lexicon, seed: u64) -> UserStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n).map(|i| interaction(user, i as i64 * 10, lex, &mut rng)).collect();
    UserStream::new(user, items)
}

/// Equal numbers of A and B documents.
pub fn balanced_background(n_each: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    for _ in 0..n_each {
        for lex in [Lexicon::A, Lexicon::B] {
            docs.push(format!("{} {}", query_for(lex, &mut rng), response_for(lex, &mut rng, 2)));
        }
    }
    docs
}

/// Defaults scaled down for fast runs.
pub fn small_config() -> RunConfig {
    RunConfig {
        max_tokens: 40,
        n_max: 10,
        threads: Some(2),
        ..Default::default()
    }
}

pub fn two_users() -> Vec<UserStream> {
    vec![shifting_user("alice", 50, 0.4, 0.7, 11), shifting_user("bob", 45, 0.4, 0.7, 12)]
}

pub const NAMES: [&str; 24] = [
    "ada", "bram", "cleo", "dov", "edda", "finn", "gus", "hana", "ivo", "juno", "kai", "lena", "milo", "nell", "otto",
    "pia", "quin", "rosa", "sven", "tess", "uma", "vik", "wren", "yara",
];

/// Like [`shifting_user`], with each query addressed to a named reader so
/// that queries are far more distinctive than the topic templates alone.
pub fn named_user(user: &str, n: usize, b_share: f64, seed: u64) -> UserStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| {
            let lex = if rng.gen_bool(b_share) { Lexicon::B } else { Lexicon::A };
            let query = format!("{} for {}", query_for(lex, &mut rng), NAMES.choose(&mut rng).unwrap());
            Interaction::new(user, i as i64, query, response_for(lex, &mut rng, 2))
        })
        .collect();
    UserStream::new(user, items)
}
