//! Model assembly: which components each variant uses, parameter
//! registration, and the shared forward pass up to `f` and `H^d`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad_head::register_tagger;
use crate::allocation::{allocate, register_allocation, AllocationMode, AllocationOutput};
use crate::asc_head::{aspect_opinion_attention, aspect_position_rep, register_asc, sentiment_logits, AscOptions};
use crate::corpus::{Batch, Domain};
use crate::domain_align::register_domain_classifier;
use crate::encoder::{encode, register_encoder, ContextStates};
use crate::error::{DifdError, Result};
use crate::ndgrad::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "difd")]
    Difd,
    #[serde(rename = "difd-s")]
    DifdS,
    #[serde(rename = "difd-ca")]
    DifdCa,
    #[serde(rename = "difd-at")]
    DifdAt,
    #[serde(rename = "asc-at")]
    AscAt,
    #[serde(rename = "difd-at+mmd")]
    DifdAtMmd,
    #[serde(rename = "difd-at+coral")]
    DifdAtCoral,
    #[serde(rename = "source-only")]
    SourceOnly,
}

/// How the two domains' `f` are pulled together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    None,
    Adversarial,
    Mmd,
    Coral,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Difd,
        Variant::DifdS,
        Variant::DifdCa,
        Variant::DifdAt,
        Variant::AscAt,
        Variant::DifdAtMmd,
        Variant::DifdAtCoral,
        Variant::SourceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Difd => "difd",
            Variant::DifdS => "difd-s",
            Variant::DifdCa => "difd-ca",
            Variant::DifdAt => "difd-at",
            Variant::AscAt => "asc-at",
            Variant::DifdAtMmd => "difd-at+mmd",
            Variant::DifdAtCoral => "difd-at+coral",
            Variant::SourceOnly => "source-only",
        }
    }

    /// Learned context allocation gate.
    pub fn has_gate(self) -> bool {
        matches!(
            self,
            Variant::Difd | Variant::DifdS | Variant::DifdAt | Variant::DifdAtMmd | Variant::DifdAtCoral
        )
    }

    /// Source aspect tagger. `source-only` keeps it (on the unsplit `H`)
    /// so its tagging accuracy can be measured.
    pub fn has_source_tagger(self) -> bool {
        self != Variant::AscAt
    }

    pub fn has_target_tagger(self) -> bool {
        !matches!(self, Variant::AscAt | Variant::DifdS | Variant::SourceOnly)
    }

    pub fn alignment(self) -> Alignment {
        match self {
            Variant::Difd | Variant::DifdCa | Variant::AscAt => Alignment::Adversarial,
            Variant::DifdAtMmd => Alignment::Mmd,
            Variant::DifdAtCoral => Alignment::Coral,
            Variant::DifdS | Variant::DifdAt | Variant::SourceOnly => Alignment::None,
        }
    }

    pub fn has_domain_classifier(self) -> bool {
        self.alignment() == Alignment::Adversarial
    }

    /// Whether training reads any target-domain batch.
    pub fn uses_target(self) -> bool {
        self.has_target_tagger() || self.alignment() != Alignment::None
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = DifdError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                DifdError::Config(format!("unknown variant '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// Architecture settings shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub variant: Variant,
    /// What `difd-ca` feeds the heads in place of the learned gate.
    #[serde(default = "default_ablation")]
    pub ca_ablation: AllocationMode,
    #[serde(default)]
    pub asc: AscOptions,
}

fn default_ablation() -> AllocationMode {
    AllocationMode::Full
}

impl ModelConfig {
    pub fn new(embedding_dim: usize, hidden: usize, variant: Variant) -> Self {
        Self { embedding_dim, hidden, variant, ca_ablation: AllocationMode::Full, asc: AscOptions::default() }
    }

    pub fn allocation(&self) -> AllocationMode {
        if self.variant.has_gate() {
            AllocationMode::Split
        } else if self.variant == Variant::DifdCa {
            self.ca_ablation
        } else {
            AllocationMode::Full
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.embedding_dim % 2 != 0 {
            return Err(DifdError::Config(format!("embedding_dim must be even and positive, got {}", self.embedding_dim)));
        }
        if self.hidden == 0 {
            return Err(DifdError::Config("hidden must be positive".into()));
        }
        if self.variant == Variant::DifdCa && self.ca_ablation == AllocationMode::Split {
            return Err(DifdError::Config("difd-ca needs ca_ablation 'full' or 'half'".into()));
        }
        Ok(())
    }
}

/// Registers exactly the parameters `config.variant` uses.
pub fn init_params<R: Rng>(config: &ModelConfig, embedding: Tensor, rng: &mut R) -> Result<ParamStore> {
    config.validate()?;
    if embedding.shape().len() != 2 || embedding.cols() != config.embedding_dim {
        return Err(DifdError::shape(
            "init_params",
            format!("[vocab, {}] embedding table", config.embedding_dim),
            embedding.shape_str(),
        ));
    }
    let h = config.hidden;
    let mut store = ParamStore::new();
    register_encoder(&mut store, embedding, h, rng)?;
    if config.allocation().has_gate() {
        register_allocation(&mut store, h, rng)?;
    }
    register_asc(&mut store, h, rng)?;
    if config.variant.has_source_tagger() {
        register_tagger(&mut store, Domain::Source, h, rng)?;
    }
    if config.variant.has_target_tagger() {
        register_tagger(&mut store, Domain::Target, h, rng)?;
    }
    if config.variant.has_domain_classifier() {
        register_domain_classifier(&mut store, h, rng)?;
    }
    Ok(store)
}

/// Everything one batch produces up to the task heads.
#[derive(Debug, Clone)]
pub struct Pass {
    pub states: ContextStates,
    pub alloc: AllocationOutput,
    pub ha: Var,
    /// `[rows, 1]` aspect-opinion weights.
    pub gamma: Var,
    /// `[size, 2h]` domain-invariant features.
    pub f: Var,
}

pub fn forward(tape: &mut Tape, store: &ParamStore, config: &ModelConfig, batch: &Batch) -> Result<Pass> {
    let states = encode(tape, store, batch)?;
    let alloc = allocate(tape, store, &states, config.allocation())?;
    let ha = aspect_position_rep(tape, alloc.hc, batch, config.asc.aspect_pooling)?;
    let att = aspect_opinion_attention(tape, store, alloc.hc, &states.layout, ha, config.asc.length_normalize)?;
    Ok(Pass { states, alloc, ha, gamma: att.gamma, f: att.f })
}

/// Forward plus sentiment logits.
pub fn forward_logits(tape: &mut Tape, store: &ParamStore, config: &ModelConfig, batch: &Batch) -> Result<(Pass, Var)> {
    let pass = forward(tape, store, config, batch)?;
    let logits = sentiment_logits(tape, store, pass.f)?;
    Ok((pass, logits))
}

/// `[size, 2h]` mask-weighted mean of `H^d` rows (equal to `H` for variants
/// without a split).
pub fn mean_hd(tape: &mut Tape, pass: &Pass) -> Result<Var> {
    let layout = &pass.states.layout;
    let lengths = layout.lengths();
    let pool = layout.pooling_matrix(|b, t| layout.mask[layout.row(t, b)] / lengths[b].max(1) as f64);
    let pool = tape.constant(pool);
    tape.matmul(pool, pass.alloc.hd)
}
