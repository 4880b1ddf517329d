use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Memory attribution class of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Hidden,
    Attention,
    Ffn,
    Logits,
    #[default]
    Other,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Hidden,
        Component::Attention,
        Component::Ffn,
        Component::Logits,
        Component::Other,
    ];

    /// Logits and FFN are the only components split along the token axis.
    pub fn is_chunkable(self) -> bool {
        matches!(self, Component::Logits | Component::Ffn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Hidden => "hidden",
            Component::Attention => "attention",
            Component::Ffn => "ffn",
            Component::Logits => "logits",
            Component::Other => "other",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown component tag `{s}`"))
    }
}
