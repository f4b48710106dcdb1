//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, stream, draw index)`, so streams
//! can be split per task without coordination and results do not depend on
//! thread layout. The generator is the SplitMix64 finalizer applied to a
//! Weyl sequence keyed by seed and stream id.

use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream of draws identified by `(seed, stream)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream, counter: 0 }
    }

    /// Derive an independent child stream; the parent is left untouched.
    pub fn substream(&self, id: u64) -> RngStream {
        RngStream::new(self.seed, mix64(self.stream ^ mix64(id ^ GOLDEN)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Index of the next raw draw.
    pub fn draw_index(&self) -> u64 {
        self.counter
    }

    /// Raw draw at an explicit index, independent of stream state.
    pub fn raw_at(seed: u64, stream: u64, index: u64) -> u64 {
        let base = mix64(seed ^ mix64(stream.wrapping_add(GOLDEN)));
        mix64(base.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = Self::raw_at(self.seed, self.stream, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box-Muller; consumes two raw draws).
    pub fn next_normal(&mut self) -> f64 {
        // (0, 1] so the logarithm is always finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Tensor of i.i.d. standard normal draws.
    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.next_normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("normal draws are finite")
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }

    /// Uniform integer in `[0, bound)`.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        // Rejection-free modulo; bias is negligible for the bounds used here.
        self.next_u64() % bound
    }
}
