//! Counter-based random numbers (Philox4x32-10).
//!
//! Every normal variate is a pure function of `(seed, path, step, block)`, so
//! paths can be simulated in any order, on any number of workers, and still
//! reproduce bit for bit.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = a as u64 * b as u64;
    ((p >> 32) as u32, p as u32)
}

/// The Philox4x32 block function with 10 rounds.
#[inline]
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Uniform in the open interval (0, 1) from 53 random bits.
#[inline]
fn open_unit(hi: u32, lo: u32) -> f64 {
    let bits = (((hi as u64) << 32) | lo as u64) >> 11;
    (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Keyed generator. The seed is the key; `(stream, index, block)` is the counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: [u32; 2],
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
        }
    }

    #[inline]
    fn block(&self, stream: u64, index: u64, block: u32) -> [u32; 4] {
        debug_assert!(index < (1u64 << 32), "step index exceeds 32 bits");
        philox4x32_10(
            [index as u32, block, stream as u32, (stream >> 32) as u32],
            self.key,
        )
    }

    /// Two uniforms in (0, 1).
    #[inline]
    pub fn uniform_pair(&self, stream: u64, index: u64, block: u32) -> [f64; 2] {
        let r = self.block(stream, index, block);
        [open_unit(r[0], r[1]), open_unit(r[2], r[3])]
    }

    /// Fills `out` with independent standard normals for `(stream, index)`
    /// using the Box–Muller transform, two variates per Philox block.
    #[inline]
    pub fn normals(&self, stream: u64, index: u64, out: &mut [f64]) {
        for (b, chunk) in out.chunks_mut(2).enumerate() {
            let [u1, u2] = self.uniform_pair(stream, index, b as u32);
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            chunk[0] = r * c;
            if chunk.len() > 1 {
                chunk[1] = r * s;
            }
        }
    }

    /// Uniform in `[lo, hi]` for `(stream, index)`.
    pub fn uniform_in(&self, stream: u64, index: u64, lo: f64, hi: f64) -> f64 {
        let [u, _] = self.uniform_pair(stream, index, 0);
        lo + (hi - lo) * u
    }
}
