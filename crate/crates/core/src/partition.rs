//! Worker partitions of rows and classes.

use std::ops::Range;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Contiguous, balanced row ranges, one per worker. Sizes differ by at most
/// one, with the remainder going to the earliest workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowPartition {
    ranges: Vec<Range<usize>>,
}

impl RowPartition {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn range(&self, worker: usize) -> Range<usize> {
        self.ranges[worker].clone()
    }

    pub fn n_workers(&self) -> usize {
        self.ranges.len()
    }
}

pub fn partition_rows(n_rows: usize, n_workers: usize) -> Result<RowPartition> {
    if n_workers == 0 {
        return Err(Error::InvalidConfig("worker count must be at least 1".into()));
    }
    if n_workers > n_rows {
        return Err(Error::InvalidConfig(format!(
            "{n_workers} workers but only {n_rows} rows; every worker must own a row"
        )));
    }
    let base = n_rows / n_workers;
    let extra = n_rows % n_workers;
    let mut ranges = Vec::with_capacity(n_workers);
    let mut start = 0;
    for p in 0..n_workers {
        let len = base + usize::from(p < extra);
        ranges.push(start..start + len);
        start += len;
    }
    Ok(RowPartition { ranges })
}

/// Initial class ownership, one disjoint set per worker covering `[0, K)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    sets: Vec<Vec<usize>>,
}

impl ClassPartition {
    pub fn classes(&self, worker: usize) -> &[usize] {
        &self.sets[worker]
    }

    pub fn n_workers(&self) -> usize {
        self.sets.len()
    }
}

/// Seeded balanced assignment: class ids are shuffled and dealt round-robin,
/// so set sizes differ by at most one and every worker is nonempty.
pub fn partition_classes(n_classes: usize, n_workers: usize, seed: u64) -> Result<ClassPartition> {
    if n_workers == 0 {
        return Err(Error::InvalidConfig("worker count must be at least 1".into()));
    }
    if n_classes < n_workers {
        return Err(Error::InvalidConfig(format!(
            "{n_classes} classes cannot cover {n_workers} workers"
        )));
    }
    let mut ids: Vec<usize> = (0..n_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5_5e5);
    ids.shuffle(&mut rng);
    let mut sets = vec![Vec::new(); n_workers];
    for (pos, k) in ids.into_iter().enumerate() {
        sets[pos % n_workers].push(k);
    }
    for set in &mut sets {
        set.sort_unstable();
    }
    Ok(ClassPartition { sets })
}

/// Contiguous class ranges for the ring engine's weight blocks, built the
/// same way as row ranges.
pub fn contiguous_class_blocks(n_classes: usize, n_workers: usize) -> Result<Vec<Range<usize>>> {
    Ok(partition_rows(n_classes, n_workers)?.ranges().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_split() {
        let p = partition_rows(10, 2).unwrap();
        assert_eq!(p.ranges(), &[0..5, 5..10]);
    }

    #[test]
    fn remainder_goes_to_earliest_workers() {
        let p = partition_rows(10, 3).unwrap();
        let sizes: Vec<usize> = p.ranges().iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn singletons() {
        let p = partition_rows(5, 5).unwrap();
        assert!(p.ranges().iter().all(|r| r.len() == 1));
    }

    #[test]
    fn more_workers_than_rows_is_an_error() {
        assert!(partition_rows(3, 4).is_err());
    }

    #[test]
    fn concatenated_ranges_cover_everything_in_order() {
        for (n, p) in [(17, 4), (9, 1), (100, 7)] {
            let part = partition_rows(n, p).unwrap();
            let flat: Vec<usize> = part.ranges().iter().flat_map(|r| r.clone()).collect();
            assert_eq!(flat, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn class_partition_is_a_disjoint_cover() {
        for seed in 0..20 {
            let part = partition_classes(11, 3, seed).unwrap();
            let mut all: Vec<usize> = (0..3).flat_map(|p| part.classes(p).to_vec()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..11).collect::<Vec<_>>());
        }
    }

    #[test]
    fn square_case_gives_one_class_each() {
        for seed in 0..50 {
            let part = partition_classes(4, 4, seed).unwrap();
            for p in 0..4 {
                assert_eq!(part.classes(p).len(), 1, "seed {seed} worker {p}");
            }
        }
    }

    #[test]
    fn same_seed_is_deterministic() {
        assert_eq!(
            partition_classes(23, 5, 42).unwrap(),
            partition_classes(23, 5, 42).unwrap()
        );
    }

    #[test]
    fn too_few_classes_is_an_error() {
        assert!(partition_classes(3, 4, 0).is_err());
    }
}
