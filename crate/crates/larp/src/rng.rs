//! Splittable counter-based RNG (splitmix64 core).
//!
//! Every stochastic operation in the crate draws from one of these, so runs
//! are bitwise reproducible from a seed and the two-word state round-trips
//! through checkpoints exactly.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
    // Distinguishes streams split from the same parent.
    stream: u64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: mix(seed.wrapping_add(GAMMA)), stream: mix(seed ^ 0x5851_F42D_4C95_7F2D) | 1 }
    }

    /// Derive an independent child stream; advances this generator once.
    pub fn split(&mut self) -> Rng {
        let s = self.next_u64();
        Rng { state: mix(s.wrapping_add(GAMMA)), stream: mix(s ^ self.stream) | 1 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state ^ self.stream)
    }

    /// Uniform in `[0, 1)` with 53 bits of mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller (one draw per call, twin discarded).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Sample an index from a probability vector by inverse CDF.
    pub fn multinomial(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    pub fn state_words(&self) -> (u64, u64) {
        (self.state, self.stream)
    }

    pub fn from_state_words(state: u64, stream: u64) -> Self {
        Rng { state, stream }
    }
}
