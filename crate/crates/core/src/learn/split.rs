use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FOLDS: usize = 6;

/// Fold id of each position: `i mod 6`.
pub fn assign_folds(n: usize) -> Result<Vec<usize>> {
    if n < FOLDS {
        return Err(Error::InvalidInput(format!("{n} segments cannot fill {FOLDS} folds")));
    }
    Ok((0..n).map(|i| i % FOLDS).collect())
}

/// Which folds train, validate and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldScheme {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Default for FoldScheme {
    fn default() -> Self {
        Self {
            train: vec![0, 1, 2, 3],
            val: vec![4],
            test: vec![5],
        }
    }
}

impl FoldScheme {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &f in self.train.iter().chain(&self.val).chain(&self.test) {
            if f >= FOLDS {
                return Err(Error::Config(format!("fold {f} out of range 0..{FOLDS}")));
            }
            if !seen.insert(f) {
                return Err(Error::Config(format!("fold {f} assigned to more than one role")));
            }
        }
        if self.train.is_empty() || self.val.is_empty() || self.test.is_empty() {
            return Err(Error::Config("every role needs at least one fold".into()));
        }
        Ok(())
    }
}

/// Dataset positions of each role, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(n: usize, scheme: &FoldScheme) -> Result<Split> {
    scheme.validate()?;
    let folds = assign_folds(n)?;
    let pick = |role: &[usize]| -> Vec<usize> { (0..n).filter(|&i| role.contains(&folds[i])).collect() };
    Ok(Split {
        train: pick(&scheme.train),
        val: pick(&scheme.val),
        test: pick(&scheme.test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fold_examples() {
        assert_eq!(assign_folds(12).unwrap(), vec![0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5]);
        assert_eq!(assign_folds(7).unwrap()[6], 0);
        assert!(assign_folds(5).is_err());
        let f = assign_folds(4500).unwrap();
        for k in 0..FOLDS {
            assert_eq!(f.iter().filter(|&&x| x == k).count(), 750);
        }
    }

    #[test]
    fn default_split_sizes() {
        let s = split(4500, &FoldScheme::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3000, 750, 750));
        assert!(s.test.iter().all(|i| !s.train.contains(i)));
    }

    #[test]
    fn custom_and_overlapping_schemes() {
        let swapped = FoldScheme {
            val: vec![5],
            test: vec![4],
            ..FoldScheme::default()
        };
        let a = split(60, &FoldScheme::default()).unwrap();
        let b = split(60, &swapped).unwrap();
        assert_eq!((a.val.clone(), a.test.clone()), (b.test, b.val));
        let overlap = FoldScheme {
            val: vec![3],
            ..FoldScheme::default()
        };
        assert!(split(60, &overlap).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_balance(n in 6usize..3000) {
            let s = split(n, &FoldScheme { train: vec![0, 1, 2, 3], val: vec![4], test: vec![5] }).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let f = assign_folds(n).unwrap();
            let sizes: Vec<usize> = (0..FOLDS).map(|k| f.iter().filter(|&&x| x == k).count()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
