use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ExpressionMatrix;

/// Labels with fewer cells than this are pooled into one shared stratum.
pub const RARE_STRATUM_MIN: usize = 20;

const VAL_FRACTION: f64 = 0.05;
const TEST_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Train/val/test tag for every cell plus the seed that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    tags: Vec<SplitTag>,
    seed: u64,
}

impl SplitAssignment {
    pub fn new(tags: Vec<SplitTag>, seed: u64) -> Self {
        Self { tags, seed }
    }

    pub fn tags(&self) -> &[SplitTag] {
        &self.tags
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tag)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, tag: SplitTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }
}

/// 90/5/5 split. With cell labels, each label is split on its own (rare labels
/// pooled); without labels the whole matrix is one stratum.
pub fn split(m: &ExpressionMatrix, seed: u64) -> SplitAssignment {
    let n = m.n_cells();
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    match m.cell_labels() {
        Some(labels) => {
            let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
            for l in labels {
                *sizes.entry(l.as_str()).or_default() += 1;
            }
            for (c, l) in labels.iter().enumerate() {
                // '\u{0}' prefix keeps the pooled stratum from colliding with a real label
                let key = if sizes[l.as_str()] < RARE_STRATUM_MIN {
                    "\u{0}rare".to_string()
                } else {
                    l.clone()
                };
                strata.entry(key).or_default().push(c);
            }
        }
        None => {
            strata.insert(String::new(), (0..n).collect());
        }
    }

    let mut rng = crate::rng::stream(seed, "split");
    let mut tags = vec![SplitTag::Train; n];
    for cells in strata.values_mut() {
        cells.shuffle(&mut rng);
        let k = cells.len() as f64;
        let n_val = (k * VAL_FRACTION).round() as usize;
        let n_test = (k * TEST_FRACTION).round() as usize;
        for &c in &cells[..n_val] {
            tags[c] = SplitTag::Val;
        }
        for &c in &cells[n_val..n_val + n_test] {
            tags[c] = SplitTag::Test;
        }
    }
    SplitAssignment::new(tags, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Stage;
    use proptest::prelude::*;

    fn blank(n: usize) -> ExpressionMatrix {
        ExpressionMatrix::with_default_names(n, 1, vec![1.0; n], Stage::NormalizedLog1p).unwrap()
    }

    #[test]
    fn unlabeled_thousand() {
        let s = split(&blank(1000), 42);
        assert_eq!(s.count(SplitTag::Train), 900);
        assert_eq!(s.count(SplitTag::Val), 50);
        assert_eq!(s.count(SplitTag::Test), 50);
        assert_eq!(s.seed(), 42);
    }

    #[test]
    fn two_labels_split_independently() {
        let labels = (0..200)
            .map(|i| if i % 2 == 0 { "T" } else { "B" }.to_string())
            .collect::<Vec<_>>();
        let m = blank(200).with_cell_labels(labels.clone()).unwrap();
        let s = split(&m, 42);
        for lab in ["T", "B"] {
            let count = |tag| {
                (0..200)
                    .filter(|&c| labels[c] == lab && s.tags()[c] == tag)
                    .count()
            };
            assert_eq!(count(SplitTag::Train), 90);
            assert_eq!(count(SplitTag::Val), 5);
            assert_eq!(count(SplitTag::Test), 5);
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let m = blank(321);
        assert_eq!(split(&m, 9), split(&m, 9));
        assert_ne!(split(&m, 9), split(&m, 10));
    }

    proptest! {
        #[test]
        fn strata_hold_fractions(sizes in proptest::collection::vec(1usize..120, 1..6), seed in any::<u64>()) {
            let labels: Vec<String> = sizes
                .iter()
                .enumerate()
                .flat_map(|(i, &k)| std::iter::repeat_n(format!("L{i}"), k))
                .collect();
            let n = labels.len();
            let m = blank(n).with_cell_labels(labels.clone()).unwrap();
            let s = split(&m, seed);
            prop_assert_eq!(s.tags().len(), n);
            let rare: usize = sizes.iter().filter(|&&k| k < RARE_STRATUM_MIN).sum();
            let mut strata: Vec<(Vec<usize>, usize)> = sizes
                .iter()
                .enumerate()
                .filter(|(_, &k)| k >= RARE_STRATUM_MIN)
                .map(|(i, &k)| {
                    let name = format!("L{i}");
                    ((0..n).filter(|&c| labels[c] == name).collect(), k)
                })
                .collect();
            if rare > 0 {
                let pooled = (0..n)
                    .filter(|&c| sizes[labels[c][1..].parse::<usize>().unwrap()] < RARE_STRATUM_MIN)
                    .collect();
                strata.push((pooled, rare));
            }
            for (cells, k) in strata {
                let val = cells.iter().filter(|&&c| s.tags()[c] == SplitTag::Val).count() as f64;
                let test = cells.iter().filter(|&&c| s.tags()[c] == SplitTag::Test).count() as f64;
                let train = cells.len() as f64 - val - test;
                let k = k as f64;
                prop_assert!((val - 0.05 * k).abs() <= 1.0);
                prop_assert!((test - 0.05 * k).abs() <= 1.0);
                prop_assert!((train - 0.90 * k).abs() <= 1.0);
            }
        }
    }
}
