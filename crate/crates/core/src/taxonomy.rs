//! The seven dermatoscopic lesion classes and their three-way grouping.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LesionClass {
    ActinicKeratosis,
    BasalCellCarcinoma,
    BenignKeratosis,
    Dermatofibroma,
    Melanoma,
    Nevus,
    VascularLesion,
}

impl LesionClass {
    /// All classes in class-index order.
    pub const ALL: [LesionClass; 7] = [
        LesionClass::ActinicKeratosis,
        LesionClass::BasalCellCarcinoma,
        LesionClass::BenignKeratosis,
        LesionClass::Dermatofibroma,
        LesionClass::Melanoma,
        LesionClass::Nevus,
        LesionClass::VascularLesion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LesionClass::ActinicKeratosis => "actinic-keratosis",
            LesionClass::BasalCellCarcinoma => "basal-cell-carcinoma",
            LesionClass::BenignKeratosis => "benign-keratosis",
            LesionClass::Dermatofibroma => "dermatofibroma",
            LesionClass::Melanoma => "melanoma",
            LesionClass::Nevus => "nevus",
            LesionClass::VascularLesion => "vascular-lesion",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn group(self) -> LesionGroup {
        match self {
            LesionClass::Melanoma => LesionGroup::Melanoma,
            LesionClass::ActinicKeratosis | LesionClass::BasalCellCarcinoma => {
                LesionGroup::NonMelanomaCancer
            }
            LesionClass::BenignKeratosis
            | LesionClass::Dermatofibroma
            | LesionClass::Nevus
            | LesionClass::VascularLesion => LesionGroup::Benign,
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.as_str().to_string()).collect()
    }
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LesionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Taxonomy(s.to_string()))
    }
}

/// Three-way grouping used for the held-out test protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LesionGroup {
    Melanoma,
    NonMelanomaCancer,
    Benign,
}

impl LesionGroup {
    pub const ALL: [LesionGroup; 3] = [
        LesionGroup::Melanoma,
        LesionGroup::NonMelanomaCancer,
        LesionGroup::Benign,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LesionGroup::Melanoma => "melanoma",
            LesionGroup::NonMelanomaCancer => "non-melanoma-cancer",
            LesionGroup::Benign => "benign",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.as_str().to_string()).collect()
    }
}

impl fmt::Display for LesionGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for c in LesionClass::ALL {
            assert_eq!(c.as_str().parse::<LesionClass>().unwrap(), c);
            assert_eq!(LesionClass::from_index(c.index()), Some(c));
        }
        assert!(matches!("melanooma".parse::<LesionClass>(), Err(Error::Taxonomy(_))));
    }

    #[test]
    fn groups_partition_classes() {
        let count = |g| LesionClass::ALL.iter().filter(|c| c.group() == g).count();
        assert_eq!(count(LesionGroup::Melanoma), 1);
        assert_eq!(count(LesionGroup::NonMelanomaCancer), 2);
        assert_eq!(count(LesionGroup::Benign), 4);
    }
}
