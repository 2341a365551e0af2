//! BPSK over AWGN and the syndrome-based decoder inputs built from a channel
//! observation.

use crate::code::{CodeError, CodeSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Random stream used for every simulation draw.
pub type SimRng = ChaCha8Rng;

/// Derives an independent substream from `(master, domain, index)`.
///
/// The ChaCha key holds `master` and `domain` (little endian, zero padded) and
/// `index` selects the ChaCha stream, so frame `index` always sees the same
/// draws no matter which worker generates it or in which order.
pub fn substream(master: u64, domain: u64, index: u64) -> SimRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// BPSK map: 0 -> +1, 1 -> -1.
#[inline]
pub fn tau(bit: u8) -> f64 {
    if bit == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Hard decision: non-negative samples (including exactly 0) map to bit 0.
#[inline]
pub fn hard_bit(y: f64) -> u8 {
    (y < 0.0) as u8
}

pub fn bpsk_modulate(c: &[u8]) -> Vec<f64> {
    c.iter().map(|&b| tau(b)).collect()
}

pub fn hard_decision(y: &[f64]) -> Vec<u8> {
    y.iter().map(|&v| hard_bit(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("code rate must lie in (0, 1], got {0}")]
pub struct RateError(pub f64);

/// Noise standard deviation for unit-energy BPSK at `ebn0_db` and code rate
/// `rate`: `sigma = (2 R 10^(Eb/N0 / 10))^(-1/2)`.
pub fn ebn0_to_sigma(ebn0_db: f64, rate: f64) -> Result<f64, RateError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(RateError(rate));
    }
    Ok((2.0 * rate * 10f64.powf(ebn0_db / 10.0)).powf(-0.5))
}

/// Draws `n` samples of N(0, sigma^2).
pub fn gaussian_noise<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sigma * z
        })
        .collect()
}

/// `y = x + z` with `z` i.i.d. N(0, sigma^2).
pub fn transmit<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    let z = gaussian_noise(x.len(), sigma, rng);
    x.iter().zip(z).map(|(a, b)| a + b).collect()
}

/// Gaussian upper tail `Q(x) = P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes `erfcc`, relative error
/// below 1.2e-7 everywhere).
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// One simulated transmission and the decoder inputs derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    /// Transmitted codeword.
    pub c: Vec<u8>,
    /// BPSK symbols.
    pub x: Vec<f64>,
    /// Channel output.
    pub y: Vec<f64>,
    pub sigma: f64,
    /// Reliabilities `|y|`.
    pub m_y: Vec<f64>,
    /// Hard decisions.
    pub y_b: Vec<u8>,
    /// Signed syndrome `tau(H y_b)`, entries exactly +-1.
    pub s_y: Vec<f64>,
    /// Error indicator `y_b xor c`.
    pub eps: Vec<u8>,
}

/// Decoder inputs `(m_y, y_b, s_y)` computed from a channel observation.
pub fn syndrome_inputs(spec: &CodeSpec, y: &[f64]) -> (Vec<f64>, Vec<u8>, Vec<f64>) {
    let m_y = y.iter().map(|v| v.abs()).collect();
    let y_b = hard_decision(y);
    let s_y = spec.syndrome_unchecked(&y_b).into_iter().map(tau).collect();
    (m_y, y_b, s_y)
}

/// Builds a frame from a codeword and an explicit noise realization.
pub fn frame_from_noise(spec: &CodeSpec, c: &[u8], z: &[f64], sigma: f64) -> Result<FrameSample, CodeError> {
    if c.len() != spec.n {
        return Err(CodeError::Length {
            expected: spec.n,
            got: c.len(),
        });
    }
    if z.len() != spec.n {
        return Err(CodeError::Length {
            expected: spec.n,
            got: z.len(),
        });
    }
    let x = bpsk_modulate(c);
    let y: Vec<f64> = x.iter().zip(z).map(|(a, b)| a + b).collect();
    let (m_y, y_b, s_y) = syndrome_inputs(spec, &y);
    let eps = y_b.iter().zip(c).map(|(a, b)| a ^ b).collect();
    Ok(FrameSample {
        c: c.to_vec(),
        x,
        y,
        sigma,
        m_y,
        y_b,
        s_y,
        eps,
    })
}

pub fn make_frame<R: Rng + ?Sized>(
    spec: &CodeSpec,
    c: &[u8],
    sigma: f64,
    rng: &mut R,
) -> Result<FrameSample, CodeError> {
    let z = gaussian_noise(spec.n, sigma, rng);
    frame_from_noise(spec, c, &z, sigma)
}

/// A uniformly random codeword: `encode(u)` for uniform `u`.
pub fn random_codeword<R: Rng + ?Sized>(spec: &CodeSpec, rng: &mut R) -> Vec<u8> {
    let u: Vec<u8> = (0..spec.k).map(|_| rng.random::<bool>() as u8).collect();
    spec.encode(&u).expect("u has length k")
}
