use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitPart {
    Train,
    Valid,
    Test,
}

impl SplitPart {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Valid => "valid",
            SplitPart::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitPart::Train),
            "valid" => Some(SplitPart::Valid),
            "test" => Some(SplitPart::Test),
            _ => None,
        }
    }
}

/// Disjoint user sets for a user-based split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: BTreeSet<String>,
    pub valid: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn part_of(&self, user_id: &str) -> Option<SplitPart> {
        if self.train.contains(user_id) {
            Some(SplitPart::Train)
        } else if self.valid.contains(user_id) {
            Some(SplitPart::Valid)
        } else if self.test.contains(user_id) {
            Some(SplitPart::Test)
        } else {
            None
        }
    }

    pub fn users(&self, part: SplitPart) -> &BTreeSet<String> {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Valid => &self.valid,
            SplitPart::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

/// Shuffles the (sorted) user ids with a seeded generator and cuts them by
/// `ratios`. Part sizes use the largest-remainder rule; equal remainders go
/// to the later part, so the test part absorbs any excess first.
pub fn split_users<'a, I>(user_ids: I, ratios: (u32, u32, u32), seed: u64) -> Result<DatasetSplit>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut users: Vec<&str> = user_ids
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if users.len() < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 users to split, got {}",
            users.len()
        )));
    }
    let total = ratios.0 + ratios.1 + ratios.2;
    if total == 0 {
        return Err(Error::invalid("split ratios must not all be zero"));
    }
    let sizes = largest_remainder(users.len(), [ratios.0, ratios.1, ratios.2]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    users.shuffle(&mut rng);

    let take = |range: std::ops::Range<usize>| -> BTreeSet<String> {
        users[range].iter().map(|s| s.to_string()).collect()
    };
    Ok(DatasetSplit {
        train: take(0..sizes[0]),
        valid: take(sizes[0]..sizes[0] + sizes[1]),
        test: take(sizes[0] + sizes[1]..users.len()),
        seed,
    })
}

fn largest_remainder(n: usize, weights: [u32; 3]) -> [usize; 3] {
    let total: u64 = weights.iter().map(|&w| w as u64).sum();
    let mut sizes = [0usize; 3];
    let mut rems = [0u64; 3];
    for i in 0..3 {
        let num = n as u64 * weights[i] as u64;
        sizes[i] = (num / total) as usize;
        rems[i] = num % total;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    // larger remainder first; ties favour the later part
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(b.cmp(&a)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("user{i:04}")).collect()
    }

    #[test]
    fn exact_ratio() {
        let u = ids(10);
        let s = split_users(u.iter().map(String::as_str), (8, 1, 1), 7).unwrap();
        assert_eq!(s.sizes(), (8, 1, 1));
    }

    #[test]
    fn rounding_goes_to_test() {
        let u = ids(25);
        let s = split_users(u.iter().map(String::as_str), (8, 1, 1), 7).unwrap();
        assert_eq!(s.sizes(), (20, 2, 3));
    }

    #[test]
    fn deterministic_partition() {
        let u = ids(100);
        let a = split_users(u.iter().map(String::as_str), (8, 1, 1), 42).unwrap();
        let b = split_users(u.iter().map(String::as_str), (8, 1, 1), 42).unwrap();
        assert_eq!(a, b);
        let c = split_users(u.iter().map(String::as_str), (8, 1, 1), 43).unwrap();
        assert_ne!(a.train, c.train);

        let mut all: BTreeSet<String> = BTreeSet::new();
        for part in [&a.train, &a.valid, &a.test] {
            for user in part {
                assert!(all.insert(user.clone()), "{user} assigned twice");
            }
        }
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn too_few_users() {
        let u = ids(9);
        assert!(split_users(u.iter().map(String::as_str), (8, 1, 1), 0).is_err());
    }
}
