//! Train/test protocols for the three benchmark tasks, and split files.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{SampleManifest, SampleRecord};
use crate::error::{Error, Result};

/// Label that collects every class outside the retained ones.
pub const OTHER_LABEL: &str = "other";

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: SampleManifest,
    pub test: SampleManifest,
}

/// Which instance of each class is held out for testing.
#[derive(Debug, Clone, PartialEq)]
pub enum LeaveOut {
    /// Class label → held-out instance id, e.g. from an official split file.
    Explicit(BTreeMap<String, String>),
    /// One instance per class drawn with this seed.
    Seeded(u64),
}

/// Every fifth frame is kept; per class one instance goes entirely to test
/// and the remaining instances to train.
pub fn rod_split(manifest: &SampleManifest, leave_out: &LeaveOut) -> Result<Split> {
    let mut instances: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in &manifest.records {
        let inst = r
            .instance_id
            .as_deref()
            .ok_or_else(|| Error::Split(format!("sample `{}` has no instance_id", r.id)))?;
        if r.frame_index.is_none() {
            return Err(Error::Split(format!("sample `{}` has no frame_index", r.id)));
        }
        instances.entry(r.class_label.as_str()).or_default().insert(inst);
    }
    let mut rng = match leave_out {
        LeaveOut::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(*seed)),
        LeaveOut::Explicit(_) => None,
    };
    let mut held: BTreeMap<&str, &str> = BTreeMap::new();
    for (class, insts) in &instances {
        if insts.len() < 2 {
            return Err(Error::Split(format!(
                "class `{class}` has a single instance; cannot hold one out"
            )));
        }
        let chosen = match (leave_out, rng.as_mut()) {
            (LeaveOut::Explicit(map), _) => {
                let inst = map
                    .get(*class)
                    .ok_or_else(|| Error::Split(format!("no held-out instance listed for `{class}`")))?;
                if !insts.contains(inst.as_str()) {
                    return Err(Error::Split(format!("class `{class}` has no instance `{inst}`")));
                }
                inst.as_str()
            }
            (LeaveOut::Seeded(_), Some(rng)) => {
                let v: Vec<&str> = insts.iter().copied().collect();
                *v.choose(rng).expect("nonempty")
            }
            (LeaveOut::Seeded(_), None) => unreachable!(),
        };
        held.insert(class, chosen);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for r in &manifest.records {
        if r.frame_index.unwrap_or(1) % 5 != 0 {
            continue;
        }
        let inst = r.instance_id.as_deref().unwrap_or_default();
        if held.get(r.class_label.as_str()) == Some(&inst) {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok(Split {
        train: manifest.with_records(train),
        test: manifest.with_records(test),
    })
}

/// Seeded 80/20 split, stratified per class: each class contributes
/// `round(0.2·n)` test samples.
pub fn linemod_split(manifest: &SampleManifest, seed: u64) -> Result<Split> {
    let mut by_class: BTreeMap<usize, Vec<&SampleRecord>> = BTreeMap::new();
    for r in &manifest.records {
        let c = manifest
            .class_index(&r.class_label)
            .ok_or_else(|| Error::Split(format!("undeclared label `{}`", r.class_label)))?;
        by_class.entry(c).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train_ids, mut test_ids) = (BTreeSet::new(), BTreeSet::new());
    for (c, mut recs) in by_class {
        if recs.len() < 5 {
            return Err(Error::Split(format!(
                "class `{}` has {} samples; at least 5 are needed to stratify",
                manifest.labels[c],
                recs.len()
            )));
        }
        recs.shuffle(&mut rng);
        let n_test = (recs.len() as f64 * 0.2).round() as usize;
        for (i, r) in recs.into_iter().enumerate() {
            if i < n_test {
                test_ids.insert(r.id.as_str());
            } else {
                train_ids.insert(r.id.as_str());
            }
        }
    }
    // Keep manifest order within each side.
    let pick = |ids: &BTreeSet<&str>| {
        manifest
            .records
            .iter()
            .filter(|r| ids.contains(r.id.as_str()))
            .cloned()
            .collect()
    };
    Ok(Split {
        train: manifest.with_records(pick(&train_ids)),
        test: manifest.with_records(pick(&test_ids)),
    })
}

/// Nine most frequent labels kept, everything else merged into
/// [`OTHER_LABEL`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRemap {
    /// Retained labels, most frequent first (ties by name).
    pub kept: Vec<String>,
    pub map: BTreeMap<String, String>,
}

impl LabelRemap {
    /// The ten output classes, retained ones first.
    pub fn labels(&self) -> Vec<String> {
        let mut l = self.kept.clone();
        l.push(OTHER_LABEL.to_owned());
        l
    }

    pub fn apply(&self, manifest: &SampleManifest) -> Result<SampleManifest> {
        let records = manifest
            .records
            .iter()
            .map(|r| {
                let to = self
                    .map
                    .get(&r.class_label)
                    .cloned()
                    .unwrap_or_else(|| OTHER_LABEL.to_owned());
                SampleRecord {
                    class_label: to,
                    ..r.clone()
                }
            })
            .collect();
        let mut m = manifest.with_records(records);
        m.labels = self.labels();
        m.validate()?;
        Ok(m)
    }
}

/// Builds the ten-class remap from training labels.
pub fn nyu_class_remap<S: AsRef<str>>(labels: &[S]) -> Result<LabelRemap> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_ref()).or_default() += 1;
    }
    if counts.len() < 10 {
        return Err(Error::Split(format!(
            "{} distinct labels; at least 10 are needed",
            counts.len()
        )));
    }
    let mut order: Vec<(&str, usize)> = counts.into_iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let kept: Vec<String> = order[..9].iter().map(|(l, _)| (*l).to_owned()).collect();
    if kept.iter().any(|k| k == OTHER_LABEL) {
        return Err(Error::Split(format!("label `{OTHER_LABEL}` is reserved for merged classes")));
    }
    let map = order
        .iter()
        .map(|(l, _)| {
            let to = if kept.iter().any(|k| k == l) { *l } else { OTHER_LABEL };
            ((*l).to_owned(), to.to_owned())
        })
        .collect();
    Ok(LabelRemap { kept, map })
}

/// Sample ids, one per line; blank lines and `#` comments are ignored.
pub fn parse_split_file(text: &str) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let id = line.split('#').next().unwrap_or("").trim();
        if id.is_empty() {
            continue;
        }
        if id.chars().any(char::is_whitespace) {
            return Err(Error::Parse(format!("split line {}: id contains whitespace", i + 1)));
        }
        if !seen.insert(id.to_owned()) {
            return Err(Error::Parse(format!("split line {}: duplicate id `{id}`", i + 1)));
        }
        ids.push(id.to_owned());
    }
    Ok(ids)
}

pub fn write_split_file(ids: &[String]) -> String {
    ids.iter().map(|id| format!("{id}\n")).collect()
}

/// Records of `manifest` named in `ids`, in `ids` order.
pub fn select(manifest: &SampleManifest, ids: &[String]) -> Result<SampleManifest> {
    let by_id: BTreeMap<&str, &SampleRecord> = manifest.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let records = ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::Split(format!("split names unknown sample `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(manifest.with_records(records))
}

/// Split from explicit id lists; the lists must be disjoint.
pub fn split_from_ids(manifest: &SampleManifest, train: &[String], test: &[String]) -> Result<Split> {
    let t: BTreeSet<&String> = train.iter().collect();
    if let Some(dup) = test.iter().find(|id| t.contains(id)) {
        return Err(Error::Split(format!("sample `{dup}` is in both train and test")));
    }
    Ok(Split {
        train: select(manifest, train)?,
        test: select(manifest, test)?,
    })
}
