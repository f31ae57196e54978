use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::CHANNELS;
use crate::error::{Error, Result};

/// The six ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// GCN stack only.
    #[serde(rename = "GNN")]
    Gnn,
    /// GCN stack with spatial attention.
    #[serde(rename = "AGNN")]
    Agnn,
    /// TCN stack on the raw window.
    #[serde(rename = "TCN")]
    Tcn,
    /// TCN stack with temporal attention.
    #[serde(rename = "ATCN")]
    Atcn,
    /// Cascaded GCN then TCN, no attention.
    #[serde(rename = "STGNN")]
    Stgnn,
    /// Cascaded GCN then TCN with spatial and temporal attention.
    #[serde(rename = "STAGNN")]
    Stagnn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Gnn,
        Variant::Agnn,
        Variant::Tcn,
        Variant::Atcn,
        Variant::Stgnn,
        Variant::Stagnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gnn => "GNN",
            Self::Agnn => "AGNN",
            Self::Tcn => "TCN",
            Self::Atcn => "ATCN",
            Self::Stgnn => "STGNN",
            Self::Stagnn => "STAGNN",
        }
    }

    pub fn uses_graph(self) -> bool {
        matches!(self, Self::Gnn | Self::Agnn | Self::Stgnn | Self::Stagnn)
    }

    pub fn uses_tcn(self) -> bool {
        matches!(self, Self::Tcn | Self::Atcn | Self::Stgnn | Self::Stagnn)
    }

    pub fn spatial_attention(self) -> bool {
        matches!(self, Self::Agnn | Self::Stagnn)
    }

    pub fn temporal_attention(self) -> bool {
        matches!(self, Self::Atcn | Self::Stagnn)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Graph nodes / input channels.
    pub nodes: usize,
    /// Window length.
    pub window: usize,
    pub gcn_dims: Vec<usize>,
    pub tcn_dims: Vec<usize>,
    pub kernel_size: usize,
    pub dropout: f64,
    pub heads_spatial: usize,
    pub heads_temporal: usize,
    pub leaky_slope: f64,
    /// Replace every attention layer by an identity passthrough while keeping
    /// its parameters.
    pub identity_attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Stagnn,
            nodes: CHANNELS,
            window: 50,
            gcn_dims: vec![64, 64],
            tcn_dims: vec![64, 10],
            kernel_size: 2,
            dropout: 0.5,
            heads_spatial: 2,
            heads_temporal: 2,
            leaky_slope: 0.2,
            identity_attention: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.nodes == 0 || self.window == 0 {
            return bad("nodes and window must be positive");
        }
        if self.kernel_size == 0 {
            return bad("kernel_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.heads_spatial == 0 || self.heads_temporal == 0 {
            return bad("attention head counts must be >= 1");
        }
        if self.variant.uses_graph() && (self.gcn_dims.is_empty() || self.gcn_dims.contains(&0)) {
            return bad("graph variants need non-empty positive gcn_dims");
        }
        if self.variant.uses_tcn() && (self.tcn_dims.is_empty() || self.tcn_dims.contains(&0)) {
            return bad("temporal variants need non-empty positive tcn_dims");
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite");
        }
        Ok(())
    }

    /// Variant with attention active (identity override respected).
    pub fn spatial_attention_active(&self) -> bool {
        self.variant.spatial_attention() && !self.identity_attention
    }

    pub fn temporal_attention_active(&self) -> bool {
        self.variant.temporal_attention() && !self.identity_attention
    }

    /// Sequence length seen by the TCN stack: the GCN width in cascaded
    /// variants, the window otherwise.
    pub fn tcn_length(&self) -> usize {
        if self.variant.uses_graph() {
            *self.gcn_dims.last().expect("validated")
        } else {
            self.window
        }
    }

    /// Length of the flattened feature vector fed to the prediction head.
    pub fn feature_len(&self) -> usize {
        if self.variant.uses_tcn() {
            self.tcn_dims.last().expect("validated") * self.tcn_length()
        } else {
            self.nodes * self.gcn_dims.last().expect("validated")
        }
    }
}
