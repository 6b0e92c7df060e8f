use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One split per distinct group (ascending), testing on that group.
pub fn logo_splits(groups: &[u32]) -> Result<Vec<Split>> {
    let mut by_group: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(*g).or_default().push(i);
    }
    if by_group.len() < 2 {
        return Err(Error::Protocol(format!(
            "leave-one-group-out needs at least two groups, found {}",
            by_group.len()
        )));
    }
    Ok(by_group
        .into_iter()
        .map(|(g, test)| Split {
            name: format!("group{g}"),
            train: (0..groups.len()).filter(|&i| groups[i] != g).collect(),
            test,
        })
        .collect())
}

/// Stratified random split: each class contributes `round(n_c · fraction)`
/// test samples, at least one and never all.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Protocol(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::Protocol(format!("class {class} has fewer than two samples")));
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        name: format!("seed{seed}"),
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logo_partitions() {
        let groups = [2, 0, 1, 1, 2, 2, 2, 0, 1, 2];
        let splits = logo_splits(&groups).unwrap();
        assert_eq!(splits.len(), 3);
        let sizes: Vec<usize> = splits.iter().map(|s| s.test.len()).collect();
        assert_eq!(sizes, vec![2, 3, 5]);
        let mut all: Vec<usize> = splits.iter().flat_map(|s| s.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for s in &splits {
            assert_eq!(s.train.len() + s.test.len(), 10);
            assert!(s.train.iter().all(|i| !s.test.contains(i)));
        }
        assert!(matches!(logo_splits(&[4, 4, 4]), Err(Error::Protocol(_))));
    }

    #[test]
    fn stratified_keeps_class_balance() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let s = stratified_split(&labels, 0.5, 4).unwrap();
        assert_eq!(s.test.len(), 15);
        for c in 0..3 {
            assert_eq!(s.test.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
        assert_eq!(s, stratified_split(&labels, 0.5, 4).unwrap());
    }
}
