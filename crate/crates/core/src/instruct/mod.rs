//! Instructions: template provider, tokenizer, text encoder and describers.

mod describe;
mod encoder;
pub mod template;
mod tokenizer;

use serde::{Deserialize, Serialize};

pub use describe::{
    describe_heuristic, DescribeError, Describer, ExternalDescriber, ExternalVlmConfig, FallbackDescriber,
    HeuristicDescriber,
    VLM_PROMPT,
};
pub use encoder::{TextEncoder, TextEncoderConfig, TokenBatch};
pub use template::{synthesize_instruction, FacetMask, SceneDescriptor};
pub use tokenizer::{detokenize, normalize, tokenize, Tokenizer, BOS, EOS, MAX_LEN, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionSource {
    Template,
    ExternalVlm,
    Manual,
    Heuristic,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Facets {
    pub lighting: Option<String>,
    pub shadows: Option<String>,
    pub spatial: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub facets: Facets,
    pub source: InstructionSource,
}

impl Instruction {
    /// Text is the present facets joined by a space in the order
    /// lighting, shadows, spatial.
    pub fn from_facets(facets: Facets, source: InstructionSource) -> Self {
        let text = [&facets.lighting, &facets.shadows, &facets.spatial]
            .into_iter()
            .flatten()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(" ");
        Self { text, facets, source }
    }

    /// Free text with no facet structure.
    pub fn manual(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            facets: Facets::default(),
            source: InstructionSource::Manual,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }
}
