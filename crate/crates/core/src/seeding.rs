//! Named, decorrelated random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tag of a random stream. Each tag (and each worker index within a
/// tag) gets its own ChaCha stream, so e.g. mask sampling never perturbs
/// action noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init = 1,
    Env = 2,
    Action = 3,
    ActorMask = 4,
    CriticMask = 5,
    Update = 6,
    UpdateMask = 7,
    Eval = 8,
    EvalMask = 9,
    Probe = 10,
    Marginal = 11,
}

pub fn stream(seed: u64, tag: Stream, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 40) | (index & ((1 << 40) - 1)));
    rng
}
