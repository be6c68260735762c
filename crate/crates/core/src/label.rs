//! The seven diagnostic categories and their fixed index order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

pub const NUM_CLASSES: usize = 7;

/// Diagnostic category of a lesion. Indices follow the alphabetical order of
/// the codes: akiec=0, bcc=1, bkl=2, df=3, mel=4, nv=5, vasc=6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    /// Actinic keratoses / intraepithelial carcinoma.
    Akiec,
    /// Basal cell carcinoma.
    Bcc,
    /// Benign keratosis-like lesions.
    Bkl,
    /// Dermatofibroma.
    Df,
    /// Melanoma.
    Mel,
    /// Melanocytic nevi.
    Nv,
    /// Vascular lesions.
    Vasc,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Akiec,
        ClassLabel::Bcc,
        ClassLabel::Bkl,
        ClassLabel::Df,
        ClassLabel::Mel,
        ClassLabel::Nv,
        ClassLabel::Vasc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            ClassLabel::Akiec => "akiec",
            ClassLabel::Bcc => "bcc",
            ClassLabel::Bkl => "bkl",
            ClassLabel::Df => "df",
            ClassLabel::Mel => "mel",
            ClassLabel::Nv => "nv",
            ClassLabel::Vasc => "vasc",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.code() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown diagnosis code '{s}'")))
    }
}

impl Serialize for ClassLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for ClassLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
