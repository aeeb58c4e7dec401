//! Shared plumbing: seeded RNG construction and thread-pool setup.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

/// The crate's deterministic RNG. Stream position is exposed so training can
/// be checkpointed and resumed mid-sequence.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Saves an RNG as `(seed material, stream position)`.
pub fn rng_state(rng: &Rng) -> ([u8; 32], u128) {
    (rng.get_seed(), rng.get_word_pos())
}

pub fn rng_restore(seed: [u8; 32], word_pos: u128) -> Rng {
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    rng
}

static POOL_INIT: OnceLock<usize> = OnceLock::new();

/// Bounds internal parallelism from `POODLE_THREADS` (default: hardware
/// parallelism) and tunes the allocator for the large short-lived buffers
/// the kernels cycle through. Safe to call repeatedly; only the first call
/// takes effect. Results do not depend on the thread count: parallel work is
/// split into fixed-size chunks combined in a fixed order.
pub fn init_parallelism() -> usize {
    *POOL_INIT.get_or_init(|| {
        // Keep big buffers on the heap instead of mmap/munmap cycles; fresh
        // mappings are zero-filled by the kernel, which shows up as page
        // faults every step.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
        let requested = std::env::var("POODLE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&v| v >= 1);
        if let Some(n) = requested {
            // Ignore failure: a pool may already exist (e.g. under a test harness).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            n
        } else {
            rayon::current_num_threads()
        }
    })
}

/// True when the global pool has a single thread; hot kernels then run their
/// loops inline instead of dispatching tasks.
#[inline]
pub fn single_threaded() -> bool {
    rayon::current_num_threads() <= 1
}
