use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
    NoDir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modifier {
    Thumb,
    Pinch,
    Fist,
    Open,
    NoMod,
}

impl Direction {
    /// Head output order; `NoDir` last.
    pub const ALL: [Direction; 5] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right, Direction::NoDir];
    pub const ACTIVE: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_active(self) -> bool {
        self != Direction::NoDir
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "Up",
            Direction::Down => "Down",
            Direction::Left => "Left",
            Direction::Right => "Right",
            Direction::NoDir => "NoDir",
        }
    }
}

impl Modifier {
    /// Head output order; `NoMod` last.
    pub const ALL: [Modifier; 5] = [Modifier::Thumb, Modifier::Pinch, Modifier::Fist, Modifier::Open, Modifier::NoMod];
    pub const ACTIVE: [Modifier; 4] = [Modifier::Thumb, Modifier::Pinch, Modifier::Fist, Modifier::Open];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_active(self) -> bool {
        self != Modifier::NoMod
    }

    pub fn name(self) -> &'static str {
        match self {
            Modifier::Thumb => "Thumb",
            Modifier::Pinch => "Pinch",
            Modifier::Fist => "Fist",
            Modifier::Open => "Open",
            Modifier::NoMod => "NoMod",
        }
    }
}

impl FromStr for Direction {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| DataError::Label(format!("unknown direction {s:?}")))
    }
}

impl FromStr for Modifier {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modifier::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DataError::Label(format!("unknown modifier {s:?}")))
    }
}

/// Which components of a label are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelKind {
    DirectionOnly,
    ModifierOnly,
    Combination,
    /// `(NoDir, NoMod)`: only ever a prediction.
    Outlier,
}

/// Two-part gesture label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GestureLabel {
    pub direction: Direction,
    pub modifier: Modifier,
}

/// Number of storable classes: 8 singles and 16 combinations.
pub const NUM_CLASSES: usize = 24;
/// Column of the outlier prediction in confusion matrices.
pub const OUTLIER_INDEX: usize = 24;

impl GestureLabel {
    pub const OUTLIER: GestureLabel = GestureLabel { direction: Direction::NoDir, modifier: Modifier::NoMod };

    pub fn new(direction: Direction, modifier: Modifier) -> Self {
        GestureLabel { direction, modifier }
    }

    pub fn kind(self) -> LabelKind {
        match (self.direction.is_active(), self.modifier.is_active()) {
            (true, false) => LabelKind::DirectionOnly,
            (false, true) => LabelKind::ModifierOnly,
            (true, true) => LabelKind::Combination,
            (false, false) => LabelKind::Outlier,
        }
    }

    pub fn is_single(self) -> bool {
        matches!(self.kind(), LabelKind::DirectionOnly | LabelKind::ModifierOnly)
    }

    pub fn is_combination(self) -> bool {
        self.kind() == LabelKind::Combination
    }

    /// Fixed class order: 4 directions, 4 modifiers, then 16 combinations
    /// direction-major. `None` for the outlier.
    pub fn class_index(self) -> Option<usize> {
        let (d, m) = (self.direction.index(), self.modifier.index());
        match self.kind() {
            LabelKind::DirectionOnly => Some(d),
            LabelKind::ModifierOnly => Some(4 + m),
            LabelKind::Combination => Some(8 + d * 4 + m),
            LabelKind::Outlier => None,
        }
    }

    /// Class index, with the outlier mapped to [`OUTLIER_INDEX`].
    pub fn column_index(self) -> usize {
        self.class_index().unwrap_or(OUTLIER_INDEX)
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0..=3 => Some(GestureLabel::new(Direction::ACTIVE[i], Modifier::NoMod)),
            4..=7 => Some(GestureLabel::new(Direction::NoDir, Modifier::ACTIVE[i - 4])),
            8..=23 => Some(GestureLabel::new(Direction::ACTIVE[(i - 8) / 4], Modifier::ACTIVE[(i - 8) % 4])),
            OUTLIER_INDEX => Some(GestureLabel::OUTLIER),
            _ => None,
        }
    }

    /// The 24 storable classes in class-index order.
    pub fn all_classes() -> Vec<GestureLabel> {
        (0..NUM_CLASSES).filter_map(GestureLabel::from_class_index).collect()
    }

    /// Index of a combination among the 16 combinations, direction-major.
    pub fn combo_index(self) -> Option<usize> {
        self.is_combination().then(|| self.direction.index() * 4 + self.modifier.index())
    }
}

impl fmt::Display for GestureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind() {
            LabelKind::DirectionOnly => f.write_str(self.direction.name()),
            LabelKind::ModifierOnly => f.write_str(self.modifier.name()),
            _ => write!(f, "{}&{}", self.direction.name(), self.modifier.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_indices_roundtrip_and_order() {
        let all = GestureLabel::all_classes();
        assert_eq!(all.len(), 24);
        for (i, l) in all.iter().enumerate() {
            assert_eq!(l.class_index(), Some(i));
        }
        assert_eq!(all[8], GestureLabel::new(Direction::Up, Modifier::Thumb));
        assert_eq!(all[9], GestureLabel::new(Direction::Up, Modifier::Pinch));
        assert_eq!(all.iter().filter(|l| l.is_single()).count(), 8);
        assert_eq!(GestureLabel::OUTLIER.class_index(), None);
        assert_eq!(GestureLabel::OUTLIER.column_index(), OUTLIER_INDEX);
    }

    #[test]
    fn vocabulary_strings_parse() {
        assert_eq!("NoDir".parse::<Direction>().unwrap(), Direction::NoDir);
        assert_eq!("Pinch".parse::<Modifier>().unwrap(), Modifier::Pinch);
        assert!("pinch".parse::<Modifier>().is_err());
    }
}
