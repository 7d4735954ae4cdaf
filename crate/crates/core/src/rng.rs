//! Named random sub-streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    DataGen = 1,
    Init = 2,
    Shuffle = 3,
    PromptInit = 4,
    Edit = 5,
    Augment = 6,
    Decoder = 7,
    Sample = 8,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Normal sample redrawn until it falls within two standard deviations.
pub fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let n = Normal::new(0.0, std).expect("finite std");
    loop {
        let v: f64 = n.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

pub fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    Normal::new(0.0, std).expect("finite std").sample(rng)
}
