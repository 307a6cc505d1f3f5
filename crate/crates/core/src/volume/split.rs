use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Explicit train/validation/test case lists; never recomputed implicitly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn new(train: Vec<String>, validation: Vec<String>, test: Vec<String>) -> Result<Self> {
        let split = Self {
            train,
            validation,
            test,
        };
        split.validate()?;
        Ok(split)
    }

    /// Checks that no case id appears twice across the three lists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.all() {
            if !seen.insert(id) {
                return Err(Error::Format(format!("case {id:?} listed more than once in split")));
            }
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cases eligible for cross-validation folds (train + validation).
    pub fn development(&self) -> Vec<String> {
        self.train.iter().chain(&self.validation).cloned().collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: Self = serde_json::from_str(&text)?;
        split.validate()?;
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Largest-remainder apportionment of `n` items over integer `weights`.
/// Remainder ties go to the earlier weight.
pub fn apportion(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    assert!(total > 0, "apportion needs a positive weight sum");
    let mut counts: Vec<usize> = weights.iter().map(|w| n * w / total).collect();
    let mut remainders: Vec<(usize, usize)> =
        weights.iter().enumerate().map(|(i, w)| (n * w % total, i)).collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = counts.iter().sum();
    for &(_, i) in remainders.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_cases_split_six_two_two() {
        assert_eq!(apportion(10, &[58, 20, 20]), vec![6, 2, 2]);
        assert_eq!(apportion(98, &[58, 20, 20]), vec![58, 20, 20]);
        assert_eq!(apportion(5, &[58, 20, 20]).iter().sum::<usize>(), 5);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = DatasetSplit::new(vec!["a".into()], vec!["a".into()], vec![]);
        assert!(r.is_err());
    }
}
