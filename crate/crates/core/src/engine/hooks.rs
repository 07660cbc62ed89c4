// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook sites and the hook interface the forward pass calls into.

use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use super::spec::ModelSpec;
use crate::{Error, Result, Tensor};

/// Activation captured (and interceptable) inside each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    ResidPre,
    AttnPattern,
    AttnOut,
    MlpOut,
    ResidPost,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::ResidPre,
        Component::AttnPattern,
        Component::AttnOut,
        Component::MlpOut,
        Component::ResidPost,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::ResidPre => "resid_pre",
            Component::AttnPattern => "attn_pattern",
            Component::AttnOut => "attn_out",
            Component::MlpOut => "mlp_out",
            Component::ResidPost => "resid_post",
        }
    }

    /// Vector-valued sites are `[position × d_model]`; the attention pattern
    /// is `[head × query × key]`.
    pub fn is_vector(self) -> bool {
        self != Component::AttnPattern
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "resid_pre" => Component::ResidPre,
            "resid_post" => Component::ResidPost,
            "attn_out" | "attn" => Component::AttnOut,
            "attn_pattern" => Component::AttnPattern,
            "mlp_out" | "mlp" => Component::MlpOut,
            other => {
                return Err(Error::InvalidSite {
                    site: other.to_string(),
                    reason: "unknown component".into(),
                })
            }
        })
    }
}

/// Half-open range of token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PositionRange {
    pub start: usize,
    pub end: usize,
}

impl PositionRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn single(pos: usize) -> Self {
        Self { start: pos, end: pos + 1 }
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }
}

/// Where in the forward pass a hook acts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookSite {
    pub layer: usize,
    pub component: Component,
    /// Positions (query positions for `attn_pattern`); all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<PositionRange>,
    /// Restricts an `attn_pattern` site to one head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
}

impl HookSite {
    pub fn new(layer: usize, component: Component) -> Self {
        Self {
            layer,
            component,
            positions: None,
            head: None,
        }
    }

    pub fn at_positions(mut self, range: PositionRange) -> Self {
        self.positions = Some(range);
        self
    }

    pub fn with_head(mut self, head: usize) -> Self {
        self.head = Some(head);
        self
    }

    /// Canonical `blocks.{layer}.{component}` rendering plus any position or
    /// head restriction.
    pub fn describe(&self) -> String {
        let mut s = self.to_string();
        if let Some(r) = self.positions {
            s.push_str(&format!("[{}..{}]", r.start, r.end));
        }
        if let Some(h) = self.head {
            s.push_str(&format!("#h{h}"));
        }
        s
    }

    /// Checks the site against a model and, when known, a sequence length.
    pub fn validate(&self, spec: &ModelSpec, seq_len: Option<usize>) -> Result<()> {
        let invalid = |reason: String| Error::InvalidSite {
            site: self.describe(),
            reason,
        };
        if self.layer >= spec.n_layers {
            return Err(invalid(format!("layer must be < {}", spec.n_layers)));
        }
        if let Some(h) = self.head {
            if self.component != Component::AttnPattern {
                return Err(invalid("a head applies only to attn_pattern sites".into()));
            }
            if h >= spec.n_heads {
                return Err(invalid(format!("head must be < {}", spec.n_heads)));
            }
        }
        if let Some(r) = self.positions {
            if r.start >= r.end {
                return Err(invalid("empty position range".into()));
            }
            if let Some(len) = seq_len {
                if r.end > len {
                    return Err(invalid(format!("positions exceed sequence length {len}")));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn covers(&self, pos: usize) -> bool {
        self.positions.is_none_or(|r| r.contains(pos))
    }

    pub(crate) fn covers_head(&self, head: usize) -> bool {
        self.head.is_none_or(|h| h == head)
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.layer, self.component)
    }
}

impl FromStr for HookSite {
    type Err = Error;

    /// Parses `blocks.{layer}.{component}`; `mlp` and `attn` are accepted as
    /// aliases of `mlp_out` and `attn_out`.
    fn from_str(s: &str) -> Result<Self> {
        let invalid = |reason: &str| Error::InvalidSite {
            site: s.to_string(),
            reason: reason.to_string(),
        };
        let rest = s
            .strip_prefix("blocks.")
            .ok_or_else(|| invalid("expected `blocks.{layer}.{component}`"))?;
        let (layer, component) = rest
            .split_once('.')
            .ok_or_else(|| invalid("expected `blocks.{layer}.{component}`"))?;
        let layer = layer.parse().map_err(|_| invalid("layer is not an index"))?;
        let component = component.parse().map_err(|_| invalid("unknown component"))?;
        Ok(Self::new(layer, component))
    }
}

/// An intervention the forward pass applies at one site.
///
/// `apply` receives the full activation at the site (`[position × d_model]`,
/// or `[head × query × key]` for attention patterns) and must only touch the
/// rows its site covers.
pub trait Hook {
    fn site(&self) -> &HookSite;
    fn apply(&self, activation: &mut Tensor) -> Result<()>;
    fn describe(&self) -> String;
}
