//! BPSK over AWGN, SNR bookkeeping and decoder-input construction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gf2::{CodeError, ParityCheckMatrix};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("code rate must lie in (0, 1], got {0}")]
    InvalidRate(f64),
    #[error("noise standard deviation must be non-negative and finite, got {0}")]
    InvalidSigma(f64),
    #[error(transparent)]
    Code(#[from] CodeError),
}

/// How the SNR in dB maps to the noise standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrConvention {
    /// Eb/N0 normalised by the code rate.
    #[default]
    Ebn0,
    /// Es/N0, i.e. per channel symbol.
    EsN0,
}

/// How the syndrome bits enter the decoder input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyndromeEncoding {
    /// 0 -> +1, 1 -> -1.
    #[default]
    Bipolar,
    /// Raw 0/1 values.
    Binary,
}

pub fn snr_to_sigma(snr_db: f64, rate: f64, convention: SnrConvention) -> Result<f64, ChannelError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(ChannelError::InvalidRate(rate));
    }
    let linear = 10f64.powf(snr_db / 10.0);
    let scale = match convention {
        SnrConvention::Ebn0 => 2.0 * rate,
        SnrConvention::EsN0 => 2.0,
    };
    Ok((scale * linear).powf(-0.5))
}

/// The Gaussian tail Q(x) = P(N(0,1) > x).
pub fn q_function(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

/// Bit error rate of hard decisions on BPSK with noise std `sigma`.
pub fn uncoded_ber(sigma: f64) -> f64 {
    q_function(1.0 / sigma)
}

#[inline]
pub fn bpsk(bit: u8) -> f64 {
    1.0 - 2.0 * f64::from(bit)
}

/// One transmitted codeword and its channel observation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSample {
    pub x: Vec<u8>,
    pub y: Vec<f64>,
    pub sigma: f64,
    pub snr_db: f64,
}

impl ChannelSample {
    /// Channel LLRs 2y/sigma^2, clamped to +-`clamp`.
    pub fn llr(&self, clamp: f64) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        self.y
            .iter()
            .map(|&y| if s2 > 0.0 { (2.0 * y / s2).clamp(-clamp, clamp) } else { clamp * y.signum() })
            .collect()
    }
}

/// y = (1 - 2x) + sigma * g with g i.i.d. standard normal.
pub fn transmit<R: Rng + ?Sized>(
    x: &[u8],
    sigma: f64,
    snr_db: f64,
    rng: &mut R,
) -> Result<ChannelSample, ChannelError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ChannelError::InvalidSigma(sigma));
    }
    let y = x
        .iter()
        .map(|&b| {
            let g: f64 = rng.sample(StandardNormal);
            bpsk(b) + sigma * g
        })
        .collect();
    Ok(ChannelSample {
        x: x.to_vec(),
        y,
        sigma,
        snr_db,
    })
}

/// 0 for y >= 0, 1 for y < 0 (sign(0) is taken as +1).
pub fn hard_decision(y: &[f64]) -> Vec<u8> {
    y.iter().map(|&v| u8::from(v < 0.0)).collect()
}

/// Input vector and training target for the neural decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInput {
    /// `[|y|; encoded syndrome]`, length 2n - k.
    pub y_in: Vec<f64>,
    /// 1 where the hard decision disagrees with the transmitted bit.
    pub z_target: Vec<u8>,
    /// The channel output itself, needed to reconstruct the codeword.
    pub y_raw: Vec<f64>,
    /// Syndrome of the hard decision.
    pub syndrome: Vec<u8>,
}

pub fn build_decoder_input(
    sample: &ChannelSample,
    h: &ParityCheckMatrix,
    encoding: SyndromeEncoding,
) -> Result<DecoderInput, ChannelError> {
    let n = h.n();
    if sample.y.len() != n || sample.x.len() != n {
        return Err(CodeError::LengthMismatch {
            expected: n,
            got: sample.y.len().min(sample.x.len()),
        }
        .into());
    }
    let hard = hard_decision(&sample.y);
    let syndrome = h.syndrome(&hard)?;
    let mut y_in: Vec<f64> = sample.y.iter().map(|v| v.abs()).collect();
    y_in.extend(syndrome.iter().map(|&s| match encoding {
        SyndromeEncoding::Bipolar => bpsk(s),
        SyndromeEncoding::Binary => f64::from(s),
    }));
    let z_target = hard.iter().zip(&sample.x).map(|(a, b)| a ^ b).collect();
    Ok(DecoderInput {
        y_in,
        z_target,
        y_raw: sample.y.clone(),
        syndrome,
    })
}
