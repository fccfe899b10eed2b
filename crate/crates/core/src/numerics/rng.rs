use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Portable, seedable random stream.
///
/// Backed by ChaCha8, whose output depends only on `(seed, position)`, so draws
/// are identical across platforms. Independent sub-streams are obtained with
/// [`RngStream::derive`], which mixes a label into the seed; this is how
/// per-sample randomness stays independent of batch composition and of the
/// order in which parallel workers run.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    draws: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            draws: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.draws
    }

    /// Child stream keyed by `label`. Does not advance `self`.
    pub fn derive(&self, label: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(label.wrapping_add(0xA5A5_5A5A))))
    }

    /// Child stream keyed by a string tag, for readable call sites.
    pub fn derive_tag(&self, tag: &str) -> RngStream {
        let h = tag
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3));
        self.derive(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        // StandardNormal may consume a variable number of words; count them
        // through a counting adapter.
        let mut counting = Counting {
            rng: &mut self.inner,
            draws: 0,
        };
        let z: f64 = counting.sample(StandardNormal);
        self.draws += counting.draws;
        z
    }

    /// Uniform integer in `0..n`, by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

struct Counting<'a> {
    rng: &'a mut ChaCha8Rng,
    draws: u64,
}

impl RngCore for Counting<'_> {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.draws += dst.len().div_ceil(8) as u64;
        self.rng.fill_bytes(dst)
    }
}
