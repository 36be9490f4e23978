//! Seeded synthetic corpora for tests, examples and benchmarks.
//!
//! Samples mix single-image, multi-image, video and pure-text items across
//! three scenarios. Every tenth sample is an exact copy (new id) of its
//! predecessor so deduplication has something to remove.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CorpusSnapshot, Fps, MediaRef, Sample};

const SCENARIOS: [&str; 3] = ["Kitchen", "ShopFront", "ShopInterior"];
const OBJECTS: [&str; 8] = [
    "shelf",
    "price tag",
    "storefront sign",
    "fridge",
    "counter",
    "aisle",
    "menu board",
    "cart",
];
const ASKS: [&str; 4] = [
    "Which option describes the {} best?",
    "What is shown on the {}?",
    "How many items are on the {}?",
    "Is the {} compliant with the display rules?",
];

pub fn seeded_corpus(n: usize, seed: u64) -> CorpusSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<Sample> = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("s{i:06}");
        if i % 10 == 9 {
            let mut twin = samples[i - 1].clone();
            twin.id = id;
            samples.push(twin);
            continue;
        }
        let object = OBJECTS[rng.random_range(0..OBJECTS.len())];
        let ask = ASKS[rng.random_range(0..ASKS.len())].replace("{}", object);
        let letter = ['A', 'B', 'C', 'D'][rng.random_range(0..4)];
        let question = format!("{ask} Variant {}.", rng.random_range(0..1_000_000u32));
        let answer = format!(
            "({letter}) the {object} detail {}",
            rng.random_range(0..1000u32)
        );
        let mut s = Sample::new(id, question, answer)
            .with_scenario(SCENARIOS[rng.random_range(0..SCENARIOS.len())]);
        match rng.random_range(0..20) {
            0 => {}
            1 => s.media.push(MediaRef::video(
                format!("vid/{i}.mp4"),
                Some(Fps { num: 2, den: 1 }),
                Some(32),
            )),
            2 | 3 => {
                s.media.push(MediaRef::image(format!("img/{i}a.jpg")));
                s.media.push(MediaRef::image(format!("img/{i}b.jpg")));
            }
            _ => s.media.push(MediaRef::image(format!("img/{i}.jpg"))),
        }
        samples.push(s);
    }
    CorpusSnapshot::new("D", samples)
}
