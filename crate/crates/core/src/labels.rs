use serde::{Deserialize, Serialize};

/// Lesion categories in categorizer output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionCategory {
    GroundGlass,
    Consolidation,
    CrazyPaving,
    Negative,
}

impl LesionCategory {
    pub const ALL: [LesionCategory; 4] = [
        LesionCategory::GroundGlass,
        LesionCategory::Consolidation,
        LesionCategory::CrazyPaving,
        LesionCategory::Negative,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LesionCategory::GroundGlass => "ground_glass",
            LesionCategory::Consolidation => "consolidation",
            LesionCategory::CrazyPaving => "crazy_paving",
            LesionCategory::Negative => "negative",
        }
    }

    /// Precedence when several lesion kinds share a slice or crop:
    /// consolidation > crazy paving > ground glass > negative.
    pub fn precedence(self) -> u8 {
        match self {
            LesionCategory::Consolidation => 3,
            LesionCategory::CrazyPaving => 2,
            LesionCategory::GroundGlass => 1,
            LesionCategory::Negative => 0,
        }
    }

    /// Code used in `lesion_kinds` grids (0 = no lesion).
    pub fn grid_code(self) -> u8 {
        match self {
            LesionCategory::Negative => 0,
            LesionCategory::GroundGlass => 1,
            LesionCategory::Consolidation => 2,
            LesionCategory::CrazyPaving => 3,
        }
    }

    pub fn from_grid_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LesionCategory::Negative),
            1 => Some(LesionCategory::GroundGlass),
            2 => Some(LesionCategory::Consolidation),
            3 => Some(LesionCategory::CrazyPaving),
            _ => None,
        }
    }

    /// Highest-precedence category among `codes` (grid codes).
    pub fn dominant(codes: impl IntoIterator<Item = u8>) -> Self {
        codes
            .into_iter()
            .filter_map(Self::from_grid_code)
            .max_by_key(|c| c.precedence())
            .unwrap_or(LesionCategory::Negative)
    }
}

/// Scan- or slice-level binary label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Positive,
    Negative,
}

impl Verdict {
    pub fn is_positive(self) -> bool {
        self == Verdict::Positive
    }

    pub fn from_flag(positive: bool) -> Self {
        if positive {
            Verdict::Positive
        } else {
            Verdict::Negative
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_order() {
        use LesionCategory::*;
        assert_eq!(LesionCategory::dominant([1, 3]), CrazyPaving);
        assert_eq!(LesionCategory::dominant([1, 3, 2]), Consolidation);
        assert_eq!(LesionCategory::dominant([0, 0]), Negative);
        assert_eq!(LesionCategory::dominant([]), Negative);
        for c in LesionCategory::ALL {
            assert_eq!(LesionCategory::from_index(c.index()), Some(c));
            assert_eq!(LesionCategory::from_grid_code(c.grid_code()), Some(c));
        }
    }
}
