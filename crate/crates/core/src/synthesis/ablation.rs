use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One removable computation of the context pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Global,
    Local,
    Ima,
    Imf,
    Caa,
    IntIma,
    IntImf,
    Video,
    Text,
    Audio,
    #[serde(rename = "pre")]
    Previous,
    #[serde(rename = "fol")]
    Following,
}

impl Ablation {
    pub const ALL: [Ablation; 12] = [
        Ablation::Global,
        Ablation::Local,
        Ablation::Ima,
        Ablation::Imf,
        Ablation::Caa,
        Ablation::IntIma,
        Ablation::IntImf,
        Ablation::Video,
        Ablation::Text,
        Ablation::Audio,
        Ablation::Previous,
        Ablation::Following,
    ];

    /// Command-line identifier.
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Global => "global",
            Ablation::Local => "local",
            Ablation::Ima => "ima",
            Ablation::Imf => "imf",
            Ablation::Caa => "caa",
            Ablation::IntIma => "int-ima",
            Ablation::IntImf => "int-imf",
            Ablation::Video => "video",
            Ablation::Text => "text",
            Ablation::Audio => "audio",
            Ablation::Previous => "pre",
            Ablation::Following => "fol",
        }
    }

    /// Row label of the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Global => "w/o Global",
            Ablation::Local => "w/o Local",
            Ablation::Ima => "w/o IMA",
            Ablation::Imf => "w/o IMF",
            Ablation::Caa => "w/o CAA",
            Ablation::IntIma => "w/o Int. in IMA",
            Ablation::IntImf => "w/o Int. in IMF",
            Ablation::Video => "w/o Video",
            Ablation::Text => "w/o Text",
            Ablation::Audio => "w/o Audio",
            Ablation::Previous => "w/o Previous Sentence",
            Ablation::Following => "w/o Following Sentence",
        }
    }

    pub fn valid_names() -> String {
        Ablation::ALL.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Ablation::ALL
            .iter()
            .copied()
            .find(|a| a.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown ablation flag {s:?}; valid flags: {}", Ablation::valid_names())))
    }
}

/// Composable set of ablations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ablations(BTreeSet<Ablation>);

impl Ablations {
    pub fn none() -> Self {
        Ablations::default()
    }

    pub fn of(flags: &[Ablation]) -> Self {
        Ablations(flags.iter().copied().collect())
    }

    /// Parses a comma-separated list such as `"pre,fol"`. Empty input is
    /// the full model.
    pub fn parse_list(list: &str) -> Result<Self> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<Result<BTreeSet<_>>>()
            .map(Ablations)
    }

    /// Parses ablation variants: commas separate variants, `+` combines
    /// flags within one, as in `"pre+fol,int-ima"`.
    pub fn parse_variants(list: &str) -> Result<Vec<Self>> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|v| Ablations::parse_list(&v.replace('+', ",")))
            .collect()
    }

    pub fn contains(&self, a: Ablation) -> bool {
        self.0.contains(&a)
    }

    pub fn with(mut self, a: Ablation) -> Self {
        self.0.insert(a);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Ablation> + '_ {
        self.0.iter().copied()
    }

    /// `"Full"` or the row labels joined with `" & "`.
    pub fn label(&self) -> String {
        if self.0.is_empty() {
            "Full".to_string()
        } else {
            self.0.iter().map(|a| a.label()).collect::<Vec<_>>().join(" & ")
        }
    }

    pub fn names(&self) -> String {
        self.0.iter().map(|a| a.name()).collect::<Vec<_>>().join(",")
    }
}
