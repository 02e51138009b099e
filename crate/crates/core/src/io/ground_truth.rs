use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// True per-segment interest `g(u, v, i)` planted by the generator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlantedGroundTruth {
    order: Vec<(String, String)>,
    scores: HashMap<(String, String), Vec<f64>>,
}

impl PlantedGroundTruth {
    pub fn insert(&mut self, user_id: &str, video_id: &str, g: Vec<f64>) {
        let key = (user_id.to_string(), video_id.to_string());
        if self.scores.insert(key.clone(), g).is_none() {
            self.order.push(key);
        }
    }

    /// Interest of every segment of `video_id` for `user_id`, 0-based.
    pub fn get(&self, user_id: &str, video_id: &str) -> Option<&[f64]> {
        self.scores
            .get(&(user_id.to_string(), video_id.to_string()))
            .map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &[f64])> {
        self.order.iter().map(|k| {
            (
                k.0.as_str(),
                k.1.as_str(),
                self.scores[k].as_slice(),
            )
        })
    }
}

/// One `user_id<TAB>video_id<TAB>segment_index<TAB>g` line per segment.
pub fn write_ground_truth(path: &Path, gt: &PlantedGroundTruth) -> Result<()> {
    let mut out = String::new();
    for (u, v, g) in gt.iter() {
        for (i, x) in g.iter().enumerate() {
            out.push_str(&format!("{u}\t{v}\t{}\t{x}\n", i + 1));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth(path: &Path) -> Result<PlantedGroundTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut gt = PlantedGroundTruth::default();
    let mut current: Option<(String, String, Vec<f64>)> = None;
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            msg: msg.to_string(),
        };
        let parts: Vec<&str> = line.split('\t').collect();
        let [u, v, seg, g] = parts.as_slice() else {
            return Err(err("expected 4 tab-separated fields"));
        };
        let seg: usize = seg.parse().map_err(|_| err("bad segment index"))?;
        let g: f64 = g.parse().map_err(|_| err("bad interest value"))?;
        match &mut current {
            Some((cu, cv, vals)) if cu == u && cv == v => {
                if seg != vals.len() + 1 {
                    return Err(err("segments must be consecutive"));
                }
                vals.push(g);
            }
            _ => {
                if let Some((cu, cv, vals)) = current.take() {
                    gt.insert(&cu, &cv, vals);
                }
                if seg != 1 {
                    return Err(err("segments must start at 1"));
                }
                current = Some((u.to_string(), v.to_string(), vec![g]));
            }
        }
    }
    if let Some((cu, cv, vals)) = current {
        gt.insert(&cu, &cv, vals);
    }
    Ok(gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut gt = PlantedGroundTruth::default();
        gt.insert("u1", "v1", vec![0.5, -1.25, 3.0]);
        gt.insert("u2", "v1", vec![0.1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.tsv");
        write_ground_truth(&path, &gt).unwrap();
        let back = read_ground_truth(&path).unwrap();
        assert_eq!(back, gt);
        assert_eq!(back.get("u1", "v1").unwrap()[1], -1.25);
        assert!(back.get("u1", "v2").is_none());
    }
}
