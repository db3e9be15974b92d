use std::fmt;
use std::str::FromStr;

use super::ViTModel;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;

/// Depth from which fine-tuning starts; everything before it is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FreezeSpec {
    /// Nothing frozen.
    NoFreeze,
    /// Patch embedding, class token and positional embedding frozen.
    PatchEmbed,
    /// Patch embedding and encoder blocks `1..k-1` frozen (1-based `k`).
    Block(usize),
    /// Everything frozen except the last linear layer of the head.
    Mlp,
}

impl FreezeSpec {
    /// `NF, PE, EB1..EBe, MLP` for an `e`-block model.
    pub fn sweep(n_blocks: usize) -> Vec<FreezeSpec> {
        let mut out = vec![FreezeSpec::NoFreeze, FreezeSpec::PatchEmbed];
        out.extend((1..=n_blocks).map(FreezeSpec::Block));
        out.push(FreezeSpec::Mlp);
        out
    }

    /// Parses a comma-separated list such as `NF,EB3,MLP`.
    pub fn parse_list(s: &str) -> Result<Vec<FreezeSpec>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for FreezeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezeSpec::NoFreeze => write!(f, "NF"),
            FreezeSpec::PatchEmbed => write!(f, "PE"),
            FreezeSpec::Block(k) => write!(f, "EB{k}"),
            FreezeSpec::Mlp => write!(f, "MLP"),
        }
    }
}

impl FromStr for FreezeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        match up.as_str() {
            "NF" => Ok(FreezeSpec::NoFreeze),
            "PE" => Ok(FreezeSpec::PatchEmbed),
            "MLP" => Ok(FreezeSpec::Mlp),
            _ => up
                .strip_prefix("EB")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(FreezeSpec::Block)
                .ok_or_else(|| Error::arg(format!("unknown freeze mode `{s}`"))),
        }
    }
}

/// Coarse position of a parameter in the network, by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Embedding,
    Block(usize),
    FinalNorm,
    HeadHidden,
    HeadOutput,
    PatchHeads,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("patch_embed.") {
            ParamGroup::Embedding
        } else if let Some(rest) = name.strip_prefix("blocks.") {
            let idx = rest.split('.').next().and_then(|i| i.parse().ok()).unwrap_or(0);
            ParamGroup::Block(idx)
        } else if name.starts_with("norm.") {
            ParamGroup::FinalNorm
        } else if name.starts_with("head.fc2.") {
            ParamGroup::HeadOutput
        } else if name.starts_with("head.") {
            ParamGroup::HeadHidden
        } else {
            ParamGroup::PatchHeads
        }
    }

    /// Whether a parameter in this group stays trainable under `spec`.
    pub fn trainable_under(self, spec: FreezeSpec) -> bool {
        match spec {
            FreezeSpec::NoFreeze => true,
            FreezeSpec::PatchEmbed => self != ParamGroup::Embedding,
            FreezeSpec::Block(k) => match self {
                ParamGroup::Embedding => false,
                ParamGroup::Block(i) => i >= k,
                _ => true,
            },
            FreezeSpec::Mlp => self == ParamGroup::HeadOutput,
        }
    }
}

/// Sets every parameter's trainable flag according to `spec`.
pub fn apply_freeze<T: Scalar>(model: &mut ViTModel<T>, spec: FreezeSpec) -> Result<()> {
    if let FreezeSpec::Block(k) = spec {
        if k == 0 || k > model.blocks.len() {
            return Err(Error::arg(format!(
                "freeze mode EB{k} outside 1..={} blocks",
                model.blocks.len()
            )));
        }
    }
    model.visit_mut(&mut |p| p.trainable = ParamGroup::of(&p.name).trainable_under(spec));
    Ok(())
}
