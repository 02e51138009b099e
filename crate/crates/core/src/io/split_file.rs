use std::fs;
use std::path::Path;

use crate::data::{DatasetSplit, SplitPart};
use crate::error::{Error, Result};

/// One `user_id<TAB>part` line per user, parts in train/valid/test order.
pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut out = format!("# seed\t{}\n", split.seed);
    for part in [SplitPart::Train, SplitPart::Valid, SplitPart::Test] {
        for u in split.users(part) {
            out.push_str(&format!("{u}\t{}\n", part.as_str()));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut split = DatasetSplit {
        train: Default::default(),
        valid: Default::default(),
        test: Default::default(),
        seed: 0,
    };
    for (i, line) in text.lines().enumerate() {
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            msg: msg.to_string(),
        };
        if line.is_empty() {
            continue;
        }
        if let Some(seed) = line.strip_prefix("# seed\t") {
            split.seed = seed.parse().map_err(|_| err("bad seed"))?;
            continue;
        }
        let Some((user, part)) = line.split_once('\t') else {
            return Err(err("expected `user_id<TAB>part`"));
        };
        let part = SplitPart::parse(part).ok_or_else(|| err("part must be train, valid or test"))?;
        if split.part_of(user).is_some() {
            return Err(err("user listed twice"));
        }
        match part {
            SplitPart::Train => split.train.insert(user.to_string()),
            SplitPart::Valid => split.valid.insert(user.to_string()),
            SplitPart::Test => split.test.insert(user.to_string()),
        };
    }
    Ok(split)
}
