use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const TEST_FOLD: u8 = 10;
pub const TRAIN_FOLDS: std::ops::RangeInclusive<u8> = 1..=9;

/// Fold-based partition into a training pool (folds 1-9) and a test set
/// (fold 10). The training pool feeds both pretraining and finetuning.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub fold_assignment: BTreeMap<String, u8>,
}

pub fn split_folds<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    fold_assignment: &BTreeMap<String, u8>,
) -> Result<DatasetSplit> {
    let mut train_ids = BTreeSet::new();
    let mut test_ids = BTreeSet::new();
    let mut folds = BTreeMap::new();
    for id in ids {
        let fold = *fold_assignment
            .get(id)
            .ok_or_else(|| Error::MissingFold(id.to_string()))?;
        if !(1..=TEST_FOLD).contains(&fold) {
            return Err(Error::InvalidArgument(format!("record {id} has fold {fold}, expected 1..=10")));
        }
        if fold == TEST_FOLD {
            test_ids.insert(id.to_string());
        } else {
            train_ids.insert(id.to_string());
        }
        folds.insert(id.to_string(), fold);
    }
    Ok(DatasetSplit {
        train_ids,
        test_ids,
        fold_assignment: folds,
    })
}

/// Share of the nine training folds whose labels are used for finetuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct LabelFraction(u8);

impl LabelFraction {
    pub const TENTH: LabelFraction = LabelFraction(1);
    pub const FORTY: LabelFraction = LabelFraction(4);
    pub const FULL: LabelFraction = LabelFraction(9);
    pub const ALL: [LabelFraction; 3] = [Self::TENTH, Self::FORTY, Self::FULL];

    pub fn new(folds: u8) -> Result<Self> {
        match folds {
            1 | 4 | 9 => Ok(LabelFraction(folds)),
            _ => Err(Error::InvalidArgument(format!(
                "label fraction must be 1/9, 4/9 or 9/9, got {folds}/9"
            ))),
        }
    }

    pub fn folds(self) -> u8 {
        self.0
    }

    /// Nominal percentage: 10, 40 or 100.
    pub fn percent(self) -> u32 {
        match self.0 {
            1 => 10,
            4 => 40,
            _ => 100,
        }
    }

    pub fn parse_percent(s: &str) -> Result<Self> {
        match s.trim().trim_end_matches('%') {
            "10" => Ok(Self::TENTH),
            "40" => Ok(Self::FORTY),
            "100" => Ok(Self::FULL),
            _ => Err(Error::InvalidArgument(format!("unknown label fraction {s}"))),
        }
    }
}

impl TryFrom<u8> for LabelFraction {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        LabelFraction::new(v)
    }
}

impl From<LabelFraction> for u8 {
    fn from(f: LabelFraction) -> u8 {
        f.0
    }
}

impl fmt::Display for LabelFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.percent())
    }
}

/// Training folds chosen for `fraction`, as a prefix of one seeded shuffle
/// of folds 1-9 (so smaller fractions are subsets of larger ones).
pub fn chosen_folds(fraction: LabelFraction, seed: u64) -> Vec<u8> {
    let mut folds: Vec<u8> = TRAIN_FOLDS.collect();
    folds.shuffle(&mut rng::stream(seed, &[0x1abe1]));
    folds.truncate(fraction.folds() as usize);
    folds.sort_unstable();
    folds
}

/// Ids of the training records that sit in the chosen folds.
pub fn select_label_fraction(split: &DatasetSplit, fraction: LabelFraction, seed: u64) -> BTreeSet<String> {
    let folds = chosen_folds(fraction, seed);
    split
        .train_ids
        .iter()
        .filter(|id| folds.contains(&split.fold_assignment[*id]))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assignment(per_fold: usize) -> BTreeMap<String, u8> {
        (1..=10u8)
            .flat_map(|f| (0..per_fold).map(move |i| (format!("f{f}-{i}"), f)))
            .collect()
    }

    #[test]
    fn one_id_per_fold() {
        let a = assignment(1);
        let s = split_folds(a.keys().map(String::as_str), &a).unwrap();
        assert_eq!(s.test_ids.iter().collect::<Vec<_>>(), vec!["f10-0"]);
        assert_eq!(s.train_ids.len(), 9);
    }

    #[test]
    fn all_in_test_fold() {
        let a: BTreeMap<String, u8> = (0..5).map(|i| (format!("r{i}"), 10)).collect();
        let s = split_folds(a.keys().map(String::as_str), &a).unwrap();
        assert!(s.train_ids.is_empty());
        assert_eq!(s.test_ids.len(), 5);
    }

    #[test]
    fn missing_fold_names_the_record() {
        let a = assignment(1);
        match split_folds(["f1-0", "ghost"], &a) {
            Err(Error::MissingFold(id)) => assert_eq!(id, "ghost"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fraction_cardinality_and_determinism() {
        let a = assignment(100);
        let s = split_folds(a.keys().map(String::as_str), &a).unwrap();
        assert_eq!(select_label_fraction(&s, LabelFraction::FULL, 3), s.train_ids);
        assert_eq!(select_label_fraction(&s, LabelFraction::FORTY, 3).len(), 400);
        let one = select_label_fraction(&s, LabelFraction::TENTH, 3);
        assert_eq!(one.len(), 100);
        assert_eq!(one, select_label_fraction(&s, LabelFraction::TENTH, 3));
        let folds: BTreeSet<u8> = one.iter().map(|id| s.fold_assignment[id]).collect();
        assert_eq!(folds.len(), 1);
        assert!(LabelFraction::new(2).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_monotone(folds in proptest::collection::vec(1u8..=10, 1..200), seed in any::<u64>()) {
            let a: BTreeMap<String, u8> = folds.iter().enumerate().map(|(i, f)| (format!("id{i}"), *f)).collect();
            let s = split_folds(a.keys().map(String::as_str), &a).unwrap();
            prop_assert!(s.train_ids.is_disjoint(&s.test_ids));
            prop_assert_eq!(s.train_ids.len() + s.test_ids.len(), a.len());
            let f1 = select_label_fraction(&s, LabelFraction::TENTH, seed);
            let f4 = select_label_fraction(&s, LabelFraction::FORTY, seed);
            let f9 = select_label_fraction(&s, LabelFraction::FULL, seed);
            prop_assert!(f1.is_subset(&f4));
            prop_assert!(f4.is_subset(&f9));
            prop_assert_eq!(&f9, &s.train_ids);
        }
    }
}
