//! The 22 atomic nonverbal interactions under 5 broad types.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BroadType {
    Gaze,
    Touch,
    Expression,
    Gesture,
    Posture,
}

impl BroadType {
    pub const ALL: [BroadType; 5] = [
        BroadType::Gaze,
        BroadType::Touch,
        BroadType::Expression,
        BroadType::Gesture,
        BroadType::Posture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BroadType::Gaze => "gaze",
            BroadType::Touch => "touch",
            BroadType::Expression => "expression",
            BroadType::Gesture => "gesture",
            BroadType::Posture => "posture",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::validation("broad", format!("unknown broad type {name:?}")))
    }

    pub fn arity(self) -> Arity {
        match self {
            BroadType::Gaze | BroadType::Touch => Arity::Group,
            _ => Arity::Individual,
        }
    }
}

impl fmt::Display for BroadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether an interaction involves one person or a social group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arity {
    Individual,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaxonomyEntry {
    pub id: usize,
    pub name: &'static str,
    pub broad: BroadType,
}

impl TaxonomyEntry {
    pub fn arity(&self) -> Arity {
        self.broad.arity()
    }
}

pub const NUM_CLASSES: usize = 22;

const ENTRIES: [(&str, BroadType); NUM_CLASSES] = [
    ("gaze-following", BroadType::Gaze),
    ("mutual-gaze", BroadType::Gaze),
    ("gaze-aversion", BroadType::Gaze),
    ("handshake", BroadType::Touch),
    ("hug", BroadType::Touch),
    ("hit", BroadType::Touch),
    ("neutral", BroadType::Expression),
    ("anger", BroadType::Expression),
    ("smile", BroadType::Expression),
    ("surprise", BroadType::Expression),
    ("sadness", BroadType::Expression),
    ("fear", BroadType::Expression),
    ("disgust", BroadType::Expression),
    ("wave", BroadType::Gesture),
    ("point", BroadType::Gesture),
    ("beckon", BroadType::Gesture),
    ("palm-out", BroadType::Gesture),
    ("arm-cross", BroadType::Posture),
    ("leg-cross", BroadType::Posture),
    ("slouch", BroadType::Posture),
    ("arms-akimbo", BroadType::Posture),
    ("bow", BroadType::Posture),
];

/// Canonical, id-ordered class registry.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    entries: Vec<TaxonomyEntry>,
}

impl Taxonomy {
    /// Loads the registry, checking the per-type and per-arity totals.
    pub fn load() -> Result<Self> {
        let entries: Vec<TaxonomyEntry> = ENTRIES
            .iter()
            .enumerate()
            .map(|(id, &(name, broad))| TaxonomyEntry { id, name, broad })
            .collect();
        let count = |b: BroadType| entries.iter().filter(|e| e.broad == b).count();
        let expected = [
            (BroadType::Gaze, 3),
            (BroadType::Touch, 3),
            (BroadType::Expression, 7),
            (BroadType::Gesture, 4),
            (BroadType::Posture, 5),
        ];
        for (b, n) in expected {
            if count(b) != n {
                return Err(Error::validation("taxonomy", format!("{b} has {} classes, expected {n}", count(b))));
            }
        }
        let groups = entries.iter().filter(|e| e.arity() == Arity::Group).count();
        if entries.len() != NUM_CLASSES || groups != 6 {
            return Err(Error::validation("taxonomy", "expected 22 classes, 6 of them group-wise"));
        }
        Ok(Taxonomy { entries })
    }

    pub fn entries(&self) -> &[TaxonomyEntry] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> Result<&TaxonomyEntry> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::validation("atomic", format!("class id {id} out of range")))
    }

    pub fn by_name(&self, name: &str) -> Result<&TaxonomyEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::validation("atomic", format!("unknown atomic class {name:?}")))
    }

    pub fn ids_of(&self, broad: BroadType) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().filter(move |e| e.broad == broad).map(|e| e.id)
    }
}

/// The registry, loaded once.
pub fn taxonomy() -> &'static Taxonomy {
    static TAXONOMY: std::sync::OnceLock<Taxonomy> = std::sync::OnceLock::new();
    TAXONOMY.get_or_init(|| Taxonomy::load().expect("built-in taxonomy is consistent"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals() {
        let t = Taxonomy::load().unwrap();
        assert_eq!(t.entries().len(), 22);
        let individual = t.entries().iter().filter(|e| e.arity() == Arity::Individual).count();
        assert_eq!(individual, 16);
        assert_eq!(t.by_name("gaze-following").unwrap().id, 0);
        assert_eq!(t.by_name("bow").unwrap().id, 21);
        assert_eq!(t.by_name("hit").unwrap().arity(), Arity::Group);
        assert!(t.by_name("shrug").is_err());
        assert!(t.get(22).is_err());
    }
}
