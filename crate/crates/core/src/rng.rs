//! Named random sub-streams derived from a single seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha streams, one per stochastic component, so that e.g.
/// changing the dropout draws never perturbs the generated scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    Scene,
    Pairs,
    Speckle,
    Init,
    Dropout,
    Shuffle,
    Eval,
}

impl RngStream {
    fn id(self) -> u64 {
        match self {
            RngStream::Scene => 1,
            RngStream::Pairs => 2,
            RngStream::Speckle => 3,
            RngStream::Init => 4,
            RngStream::Dropout => 5,
            RngStream::Shuffle => 6,
            RngStream::Eval => 7,
        }
    }
}

pub fn stream_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Stream for the `index`-th instance of a repeated component (one per
/// scene, say).
pub fn indexed_rng(seed: u64, stream: RngStream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream.id());
    rng
}
