//! Train/test split generation for the supported evaluation protocols.
//!
//! `predefined_split` reads each entry's `split_tag` as `;`-separated
//! `group:part` pairs with part one of `train`, `val`, `test`
//! (e.g. `"1:train;2:test;3:val"`). A bare part such as `"test"` belongs to
//! group `"0"`. Every entry must name a part for every group.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::Protocol;
use crate::store::DatasetManifest;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("entry {image_id:?} has no {tag}")]
    MissingTag { image_id: String, tag: &'static str },
    #[error("entry {image_id:?} has malformed split_tag {tag:?}")]
    BadSplitTag { image_id: String, tag: String },
    #[error("entry {image_id:?} has no part for split group {group:?}")]
    MissingGroup { image_id: String, group: String },
    #[error("class {class:?} has no training images in split {split:?}")]
    ClassMissing { split: String, class: String },
    #[error("split {0:?} has no test images")]
    EmptyTest(String),
    #[error("manifest has no entries")]
    EmptyManifest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Split {
    pub name: String,
    /// Everything used for fitting, validation images included.
    pub train: Vec<String>,
    /// Subset of `train` held out for cost selection.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Train,
    Val,
    Test,
}

fn parse_split_tag(image_id: &str, tag: &str) -> Result<BTreeMap<String, Part>, SplitError> {
    let bad = || SplitError::BadSplitTag {
        image_id: image_id.to_string(),
        tag: tag.to_string(),
    };
    let mut out = BTreeMap::new();
    for item in tag.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (group, part) = match item.split_once(':') {
            Some((g, p)) => (g.trim(), p.trim()),
            None => ("0", item),
        };
        let part = match part {
            "train" => Part::Train,
            "val" | "validation" => Part::Val,
            "test" => Part::Test,
            _ => return Err(bad()),
        };
        if group.is_empty() || out.insert(group.to_string(), part).is_some() {
            return Err(bad());
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Numeric group names sort numerically, the rest lexicographically after them.
fn group_order(a: &String, b: &String) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        _ => a.cmp(b),
    }
}

fn check_split(manifest: &DatasetManifest, split: &Split) -> Result<(), SplitError> {
    let train: HashSet<&str> = split.train.iter().map(String::as_str).collect();
    for class in &manifest.class_names {
        let present = manifest
            .entries
            .iter()
            .any(|e| &e.class_label == class && train.contains(e.image_id.as_str()));
        if !present {
            return Err(SplitError::ClassMissing {
                split: split.name.clone(),
                class: class.clone(),
            });
        }
    }
    if split.test.is_empty() {
        return Err(SplitError::EmptyTest(split.name.clone()));
    }
    Ok(())
}

pub fn make_splits(
    manifest: &DatasetManifest,
    protocol: Protocol,
    rounds: usize,
    seed: u64,
) -> Result<Vec<Split>, SplitError> {
    if manifest.entries.is_empty() {
        return Err(SplitError::EmptyManifest);
    }
    let splits = match protocol {
        Protocol::KthSample => kth_sample(manifest)?,
        Protocol::HalfSplit => (0..rounds).map(|r| half_split(manifest, r, seed)).collect(),
        Protocol::PredefinedSplit => predefined(manifest)?,
    };
    for s in &splits {
        check_split(manifest, s)?;
    }
    Ok(splits)
}

fn kth_sample(manifest: &DatasetManifest) -> Result<Vec<Split>, SplitError> {
    let mut tags = BTreeSet::new();
    for e in &manifest.entries {
        let tag = e
            .sample_tag
            .as_ref()
            .ok_or_else(|| SplitError::MissingTag {
                image_id: e.image_id.clone(),
                tag: "sample_tag",
            })?;
        tags.insert(tag.clone());
    }
    Ok(tags
        .into_iter()
        .map(|tag| {
            let (train, test): (Vec<_>, Vec<_>) = manifest
                .entries
                .iter()
                .partition(|e| e.sample_tag.as_deref() == Some(tag.as_str()));
            Split {
                name: format!("sample-{tag}"),
                train: train.into_iter().map(|e| e.image_id.clone()).collect(),
                validation: Vec::new(),
                test: test.into_iter().map(|e| e.image_id.clone()).collect(),
            }
        })
        .collect())
}

fn half_split(manifest: &DatasetManifest, round: usize, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, round as u64));
    let mut in_train = HashSet::new();
    for class in &manifest.class_names {
        let mut ids: Vec<&str> = manifest
            .entries
            .iter()
            .filter(|e| &e.class_label == class)
            .map(|e| e.image_id.as_str())
            .collect();
        ids.shuffle(&mut rng);
        let n_train = ids.len().div_ceil(2);
        in_train.extend(ids.into_iter().take(n_train));
    }
    let (train, test): (Vec<_>, Vec<_>) = manifest
        .entries
        .iter()
        .map(|e| e.image_id.clone())
        .partition(|id| in_train.contains(id.as_str()));
    Split {
        name: format!("round-{round}"),
        train,
        validation: Vec::new(),
        test,
    }
}

fn predefined(manifest: &DatasetManifest) -> Result<Vec<Split>, SplitError> {
    let mut parsed = Vec::with_capacity(manifest.entries.len());
    let mut groups = BTreeSet::new();
    for e in &manifest.entries {
        let tag = e.split_tag.as_ref().ok_or_else(|| SplitError::MissingTag {
            image_id: e.image_id.clone(),
            tag: "split_tag",
        })?;
        let parts = parse_split_tag(&e.image_id, tag)?;
        groups.extend(parts.keys().cloned());
        parsed.push(parts);
    }
    let mut groups: Vec<String> = groups.into_iter().collect();
    groups.sort_by(group_order);

    let mut splits = Vec::with_capacity(groups.len());
    for group in groups {
        let mut split = Split {
            name: format!("split-{group}"),
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for (e, parts) in manifest.entries.iter().zip(&parsed) {
            let part = parts.get(&group).ok_or_else(|| SplitError::MissingGroup {
                image_id: e.image_id.clone(),
                group: group.clone(),
            })?;
            match part {
                Part::Train => split.train.push(e.image_id.clone()),
                Part::Val => {
                    split.train.push(e.image_id.clone());
                    split.validation.push(e.image_id.clone());
                }
                Part::Test => split.test.push(e.image_id.clone()),
            }
        }
        splits.push(split);
    }
    Ok(splits)
}
