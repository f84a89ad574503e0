use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent, reproducible random stream `stream` derived from `seed`.
///
/// Separate streams let one consumer (say, coarse-batch sampling) draw more
/// or fewer numbers without shifting what another consumer sees.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
