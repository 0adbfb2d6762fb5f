//! Adversarial model: U-Net generator, patch discriminator, continuity
//! padding and the losses.

mod discriminator;
mod generator;
mod loss;
mod padding;

pub use discriminator::{Discriminator, DiscriminatorSpec, DISCRIMINATOR_LAYERS};
pub use generator::{generate, GenerateOptions, Generator, GeneratorSaved, GeneratorSpec};

#[cfg(test)]
mod tests;
pub use loss::{loss_d, loss_d_backward, loss_g, loss_g_backward, GeneratorLoss, LossWeights};
pub use padding::{continuity_pad, continuity_pad_backward, continuity_pad_with, sample_pad_columns, PadColumns, PadSpec};

use serde::{Deserialize, Serialize};

/// Whether conv/deconv layers carry class attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Conditioning {
    ClassConditioned,
    ClassIndependent,
}

impl Conditioning {
    pub(crate) fn classes(self, k: usize) -> Option<usize> {
        match self {
            Conditioning::ClassConditioned => Some(k),
            Conditioning::ClassIndependent => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Conditioning::ClassConditioned => "conditioned",
            Conditioning::ClassIndependent => "independent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conditioned" => Some(Conditioning::ClassConditioned),
            "independent" => Some(Conditioning::ClassIndependent),
            _ => None,
        }
    }
}
