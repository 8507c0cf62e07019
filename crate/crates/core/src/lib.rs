//! A hybrid Mamba/Transformer decoder for short binary linear codes.
//!
//! The decoder reads the channel magnitudes and the syndrome of the hard
//! decision, runs them through alternating bidirectional selective-scan
//! and masked attention blocks, and predicts which received bits are
//! flipped. Every block shares one output head, so decoding can stop at
//! the first block whose correction satisfies all parity checks.
//!
//! The crate is self-contained. [`autodiff`] is a small reverse-mode tape,
//! [`training`] runs Adam with deterministic sharded gradients, and
//! [`bp`] and [`eval`] provide the baselines and Monte Carlo BER
//! estimates. The `eccm` binary wraps all of it (see [`cli`]).
//!
//! ```
//! use eccm::gf2::ParityCheckMatrix;
//! use eccm::model::{EccmModel, ModelConfig};
//!
//! let h = ParityCheckMatrix::hamming_7_4();
//! let model = EccmModel::new(h, ModelConfig::tiny(), 0).unwrap();
//! assert_eq!(model.layers().len(), ModelConfig::tiny().n_blocks);
//! ```

pub mod alist;
pub mod attention;
pub mod autodiff;
pub mod channel;
pub mod codes;
pub mod gf2;
pub mod mamba;
pub mod model;
pub mod params;
pub mod checkpoint;
pub mod training;
pub mod bp;
pub mod eval;
pub mod config;
pub mod cli;

/// The guide's code snippets, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            struct $name;
        };
    }
    chapter!(Introduction, "introduction.md");
    chapter!(Quickstart, "quickstart.md");
    chapter!(Codes, "codes.md");
    chapter!(Channel, "channel.md");
    chapter!(Autodiff, "autodiff.md");
    chapter!(Mamba, "mamba.md");
    chapter!(Attention, "attention.md");
    chapter!(Model, "model.md");
    chapter!(Training, "training.md");
    chapter!(Bp, "bp.md");
    chapter!(Evaluation, "evaluation.md");
    chapter!(Cli, "cli.md");
    chapter!(Acceptance, "acceptance.md");
}
