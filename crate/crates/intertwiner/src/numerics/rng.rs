use crate::numerics::matrix::Matrix;

/// Deterministic SplitMix64 generator.
///
/// The state advances by a fixed odd increment and each output is a mix of
/// the state (Steele, Lea & Flood 2014), so the stream is a pure function of
/// `(seed, call index)`. The integer stream is identical on every platform;
/// Gaussian and lognormal variates additionally go through `ln`/`sqrt`, whose
/// last-bit behaviour follows the platform libm.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent stream, e.g. one per experiment cell.
    pub fn substream(&self, tag: u64) -> Rng {
        let mut r = Rng::new(self.state ^ tag.wrapping_mul(0xA076_1D64_78BD_642F));
        r.next_u64();
        Rng { state: r.state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection sampling keeps the draw exactly uniform.
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via the Marsaglia polar method (one variate per call;
    /// the paired variate is discarded to keep the stream position simple).
    pub fn gaussian(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, self.gaussian_vec(rows * cols)).expect("sized to fit")
    }

    /// Lognormal sample of length `n`, rescaled so its arithmetic mean is
    /// exactly 1.0: entries are divided by the sample mean and the last entry
    /// is then set to `n - sum(rest)`. That difference is exact (Sterbenz),
    /// so the left-to-right sum of the result is bit-exactly `n`.
    pub fn lognormal_unit_mean(&mut self, n: usize) -> Vec<f64> {
        assert!(n > 0);
        if n == 1 {
            return vec![1.0];
        }
        let sigma = 0.5;
        let mut v: Vec<f64> = (0..n).map(|_| (sigma * self.gaussian()).exp()).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        for x in v.iter_mut() {
            *x /= mean;
        }
        let prefix: f64 = v[..n - 1].iter().sum();
        v[n - 1] = n as f64 - prefix;
        v
    }

    /// Uniform random permutation of {0..n-1} by Fisher–Yates.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_below(i + 1);
            p.swap(i, j);
        }
        p
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Random sign, +1.0 or -1.0.
    pub fn sign(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}
