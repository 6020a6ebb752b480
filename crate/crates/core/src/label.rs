use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::KamirError;

/// The classifier's two classes. The numeric encoding is the training
/// target: familiar = 0, unfamiliar = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Familiar,
    Unfamiliar,
}

impl Label {
    pub fn as_target(self) -> f32 {
        match self {
            Label::Familiar => 0.0,
            Label::Unfamiliar => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Familiar => "familiar",
            Label::Unfamiliar => "unfamiliar",
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Familiar => Label::Unfamiliar,
            Label::Unfamiliar => Label::Familiar,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = KamirError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "familiar" => Ok(Label::Familiar),
            "unfamiliar" => Ok(Label::Unfamiliar),
            other => Err(KamirError::invalid(format!(
                "label must be \"familiar\" or \"unfamiliar\", got {other:?}"
            ))),
        }
    }
}

/// Name used in CSV label columns, where missing labels are `unlabeled`.
pub fn label_field(label: Option<Label>) -> &'static str {
    label.map_or("unlabeled", Label::name)
}

pub fn parse_label_field(s: &str) -> Result<Option<Label>, KamirError> {
    if s == "unlabeled" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}
