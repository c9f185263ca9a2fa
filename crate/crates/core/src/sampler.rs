//! Limited-scale selection, protocol splits and DASP/SADP pairing.
//!
//! A DASP partner shares the performer and depicts a different action; a SADP
//! partner shows the same action by a different performer. When the data lack
//! an exact partner the index falls back along a fixed ladder and records the
//! fallback in [`PairFlags`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, SampleRecord};
use crate::error::{Error, Result};

pub const PAIR_FILE_HEADER: &str = "sample_id,dasp_id,sadp_id,flags";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LimitedScaleSpec {
    pub samples_per_class: usize,
    pub performer_budget: u32,
    pub allow_short: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub manifest: DatasetManifest,
    /// `(class, available)` for every class that fell short of N. Only
    /// non-empty when `allow_short` is set.
    pub shortfalls: Vec<(usize, usize)>,
}

/// Limited-scale sample selection over a manifest already sorted by file name:
/// keep performers `1..=P`, stable-sort by setup then performer, and take the
/// first N rows of each class in class order.
pub fn limited_scale_select(manifest: &DatasetManifest, spec: &LimitedScaleSpec) -> Result<Selection> {
    if spec.samples_per_class == 0 || spec.performer_budget == 0 {
        return Err(Error::Config("samples_per_class and performer_budget must be ≥ 1".into()));
    }
    let mut rows: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.performer <= spec.performer_budget)
        .collect();
    // Vec::sort_by_key is stable, so filename order breaks ties.
    rows.sort_by_key(|r| (r.setup, r.performer));

    let mut by_class: Vec<Vec<&SampleRecord>> = vec![Vec::new(); manifest.class_count];
    for r in rows {
        if r.action < by_class.len() && by_class[r.action].len() < spec.samples_per_class {
            by_class[r.action].push(r);
        }
    }
    let shortfalls: Vec<(usize, usize)> = by_class
        .iter()
        .enumerate()
        .filter(|(_, rows)| rows.len() < spec.samples_per_class)
        .map(|(c, rows)| (c, rows.len()))
        .collect();
    if !shortfalls.is_empty() && !spec.allow_short {
        return Err(Error::DeficientClasses {
            shortfalls,
            needed: spec.samples_per_class,
        });
    }
    let records = by_class.into_iter().flatten().cloned().collect();
    Ok(Selection {
        manifest: DatasetManifest::with_class_count(records, manifest.class_count),
        shortfalls,
    })
}

/// Cross-subject protocol: records of `train_performers` versus the rest.
pub fn cross_subject_split(
    manifest: &DatasetManifest,
    train_performers: &BTreeSet<u32>,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if train_performers.is_empty() {
        return Err(Error::Protocol("train performer set is empty".into()));
    }
    let (train, test): (Vec<_>, Vec<_>) = manifest
        .records
        .iter()
        .cloned()
        .partition(|r| train_performers.contains(&r.performer));
    if train.is_empty() {
        return Err(Error::Protocol("cross-subject split leaves the train set empty".into()));
    }
    if test.is_empty() {
        return Err(Error::Protocol("cross-subject split leaves the test set empty".into()));
    }
    Ok((
        DatasetManifest::with_class_count(train, manifest.class_count),
        DatasetManifest::with_class_count(test, manifest.class_count),
    ))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneShotSplit {
    pub base_train: DatasetManifest,
    /// One record per novel class, ordered by class id.
    pub exemplars: DatasetManifest,
    pub novel_queries: DatasetManifest,
}

/// One-shot protocol: base classes train fully supervised; each novel class
/// contributes one fixed exemplar and the remainder become queries.
pub fn one_shot_split(
    manifest: &DatasetManifest,
    novel_classes: &BTreeSet<usize>,
    exemplar_ids: &BTreeMap<usize, String>,
) -> Result<OneShotSplit> {
    let covered: BTreeSet<usize> = exemplar_ids.keys().copied().collect();
    if &covered != novel_classes {
        return Err(Error::Protocol(format!(
            "exemplars cover classes {covered:?} but novel classes are {novel_classes:?}"
        )));
    }
    let present: BTreeSet<usize> = manifest.records.iter().map(|r| r.action).collect();
    if let Some(c) = novel_classes.iter().find(|c| !present.contains(c)) {
        return Err(Error::Protocol(format!("novel class {c} has no records")));
    }
    let mut exemplars = Vec::new();
    for (&class, id) in exemplar_ids {
        let rec = manifest
            .find(id)
            .ok_or_else(|| Error::Protocol(format!("exemplar {id} not in manifest")))?;
        if rec.action != class {
            return Err(Error::Protocol(format!(
                "exemplar {id} has action {} but stands for class {class}",
                rec.action
            )));
        }
        exemplars.push(rec.clone());
    }
    let exemplar_set: BTreeSet<&str> = exemplar_ids.values().map(String::as_str).collect();
    let (novel, base): (Vec<_>, Vec<_>) = manifest
        .records
        .iter()
        .cloned()
        .partition(|r| novel_classes.contains(&r.action));
    let queries = novel
        .into_iter()
        .filter(|r| !exemplar_set.contains(r.sample_id.as_str()))
        .collect();
    let k = manifest.class_count;
    Ok(OneShotSplit {
        base_train: DatasetManifest::with_class_count(base, k),
        exemplars: DatasetManifest::with_class_count(exemplars, k),
        novel_queries: DatasetManifest::with_class_count(queries, k),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaspKind {
    Exact,
    /// Any sample of a different action.
    Fallback,
    /// Single-class data: the sample pairs with itself.
    SelfPair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SadpKind {
    Exact,
    /// Same action, same performer, different sample.
    Relaxed,
    SelfPair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairFlags {
    pub dasp: DaspKind,
    pub sadp: SadpKind,
}

impl fmt::Display for PairFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.dasp {
            DaspKind::Exact => "dasp_exact",
            DaspKind::Fallback => "dasp_fallback",
            DaspKind::SelfPair => "dasp_self",
        };
        let s = match self.sadp {
            SadpKind::Exact => "sadp_exact",
            SadpKind::Relaxed => "sadp_relaxed",
            SadpKind::SelfPair => "sadp_self",
        };
        write!(f, "{d}|{s}")
    }
}

impl std::str::FromStr for PairFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (d, sa) = s
            .split_once('|')
            .ok_or_else(|| Error::Invalid(format!("pair flags {s:?} lack a '|' separator")))?;
        let dasp = match d {
            "dasp_exact" => DaspKind::Exact,
            "dasp_fallback" => DaspKind::Fallback,
            "dasp_self" => DaspKind::SelfPair,
            _ => return Err(Error::Invalid(format!("unknown DASP flag {d:?}"))),
        };
        let sadp = match sa {
            "sadp_exact" => SadpKind::Exact,
            "sadp_relaxed" => SadpKind::Relaxed,
            "sadp_self" => SadpKind::SelfPair,
            _ => return Err(Error::Invalid(format!("unknown SADP flag {sa:?}"))),
        };
        Ok(PairFlags { dasp, sadp })
    }
}

/// Candidate partners for every manifest record, addressed by position.
///
/// Outside of the `*_self` fallbacks a sample never lists itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairIndex {
    ids: Vec<String>,
    position: HashMap<String, usize>,
    dasp: Vec<Vec<usize>>,
    sadp: Vec<Vec<usize>>,
    flags: Vec<PairFlags>,
}

impl PairIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.position.get(sample_id).copied()
    }

    pub fn dasp_of(&self, i: usize) -> &[usize] {
        &self.dasp[i]
    }

    pub fn sadp_of(&self, i: usize) -> &[usize] {
        &self.sadp[i]
    }

    pub fn flags_of(&self, i: usize) -> PairFlags {
        self.flags[i]
    }

    pub fn dasp(&self, sample_id: &str) -> Option<Vec<&str>> {
        self.position(sample_id)
            .map(|i| self.dasp[i].iter().map(|&j| self.ids[j].as_str()).collect())
    }

    pub fn sadp(&self, sample_id: &str) -> Option<Vec<&str>> {
        self.position(sample_id)
            .map(|i| self.sadp[i].iter().map(|&j| self.ids[j].as_str()).collect())
    }

    pub fn flags(&self, sample_id: &str) -> Option<PairFlags> {
        self.position(sample_id).map(|i| self.flags[i])
    }

    /// Draws one DASP and one SADP partner uniformly for each position.
    pub fn draw_positions<R: Rng + ?Sized>(&self, batch: &[usize], rng: &mut R) -> (Vec<usize>, Vec<usize>) {
        let mut dasp = Vec::with_capacity(batch.len());
        let mut sadp = Vec::with_capacity(batch.len());
        for &i in batch {
            let d = &self.dasp[i];
            let s = &self.sadp[i];
            assert!(!d.is_empty() && !s.is_empty(), "fallback ladder guarantees candidates");
            dasp.push(d[rng.random_range(0..d.len())]);
            sadp.push(s[rng.random_range(0..s.len())]);
        }
        (dasp, sadp)
    }

    /// Freezes one drawn partner per sample into an index whose candidate
    /// lists are singletons.
    pub fn freeze<R: Rng + ?Sized>(&self, rng: &mut R) -> StaticPairs {
        let all: Vec<usize> = (0..self.len()).collect();
        let (d, s) = self.draw_positions(&all, rng);
        StaticPairs {
            rows: all
                .iter()
                .map(|&i| StaticPair {
                    sample_id: self.ids[i].clone(),
                    dasp_id: self.ids[d[i]].clone(),
                    sadp_id: self.ids[s[i]].clone(),
                    flags: self.flags[i],
                })
                .collect(),
        }
    }
}

/// Builds the DASP/SADP candidate index. Candidate order is a seeded shuffle
/// of manifest order.
pub fn build_pair_index(manifest: &DatasetManifest, rng_seed: u64) -> PairIndex {
    let recs = &manifest.records;
    let n = recs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut dasp = Vec::with_capacity(n);
    let mut sadp = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);

    let mut by_performer: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut by_action: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in recs.iter().enumerate() {
        by_performer.entry(r.performer).or_default().push(i);
        by_action.entry(r.action).or_default().push(i);
    }

    for (i, r) in recs.iter().enumerate() {
        let mut d: Vec<usize> = by_performer[&r.performer]
            .iter()
            .copied()
            .filter(|&j| recs[j].action != r.action)
            .collect();
        let dk = if !d.is_empty() {
            DaspKind::Exact
        } else {
            d = (0..n).filter(|&j| recs[j].action != r.action).collect();
            if d.is_empty() {
                d.push(i);
                DaspKind::SelfPair
            } else {
                DaspKind::Fallback
            }
        };

        let same_action = &by_action[&r.action];
        let mut s: Vec<usize> = same_action
            .iter()
            .copied()
            .filter(|&j| recs[j].performer != r.performer)
            .collect();
        let sk = if !s.is_empty() {
            SadpKind::Exact
        } else {
            s = same_action.iter().copied().filter(|&j| j != i).collect();
            if s.is_empty() {
                s.push(i);
                SadpKind::SelfPair
            } else {
                SadpKind::Relaxed
            }
        };
        d.shuffle(&mut rng);
        s.shuffle(&mut rng);
        dasp.push(d);
        sadp.push(s);
        flags.push(PairFlags { dasp: dk, sadp: sk });
    }
    let ids: Vec<String> = recs.iter().map(|r| r.sample_id.clone()).collect();
    let position = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    PairIndex {
        ids,
        position,
        dasp,
        sadp,
        flags,
    }
}

/// Draws partners for `batch_ids`, aligned elementwise with the input.
pub fn draw_pair_batch<R: Rng + ?Sized>(
    batch_ids: &[&str],
    index: &PairIndex,
    rng: &mut R,
) -> Result<(Vec<String>, Vec<String>)> {
    let positions = batch_ids
        .iter()
        .map(|id| {
            index
                .position(id)
                .ok_or_else(|| Error::Invalid(format!("sample {id} not in pair index")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (d, s) = index.draw_positions(&positions, rng);
    Ok((
        d.into_iter().map(|j| index.ids[j].clone()).collect(),
        s.into_iter().map(|j| index.ids[j].clone()).collect(),
    ))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaticPair {
    pub sample_id: String,
    pub dasp_id: String,
    pub sadp_id: String,
    pub flags: PairFlags,
}

/// Pre-drawn pairs, one per sample, as stored in the static pair file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaticPairs {
    pub rows: Vec<StaticPair>,
}

impl StaticPairs {
    pub fn to_text(&self) -> String {
        let mut out = format!("{PAIR_FILE_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.sample_id, r.dasp_id, r.sadp_id, r.flags));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(|h| h.trim_end_matches('\r')) != Some(PAIR_FILE_HEADER) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {PAIR_FILE_HEADER:?}"),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: format!("expected 4 fields, found {}", f.len()),
                });
            }
            let flags = f[3].parse().map_err(|e: Error| Error::Parse {
                line: i + 2,
                msg: e.to_string(),
            })?;
            rows.push(StaticPair {
                sample_id: f[0].into(),
                dasp_id: f[1].into(),
                sadp_id: f[2].into(),
                flags,
            });
        }
        Ok(Self { rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Singleton-candidate index over `manifest` order.
    pub fn to_index(&self, manifest: &DatasetManifest) -> Result<PairIndex> {
        let ids: Vec<String> = manifest.records.iter().map(|r| r.sample_id.clone()).collect();
        let position: HashMap<String, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let by_id: HashMap<&str, &StaticPair> =
            self.rows.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        let lookup = |id: &str| {
            position
                .get(id)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("paired sample {id} not in manifest")))
        };
        let mut dasp = Vec::with_capacity(ids.len());
        let mut sadp = Vec::with_capacity(ids.len());
        let mut flags = Vec::with_capacity(ids.len());
        for id in &ids {
            let row = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Invalid(format!("no static pair for {id}")))?;
            dasp.push(vec![lookup(&row.dasp_id)?]);
            sadp.push(vec![lookup(&row.sadp_id)?]);
            flags.push(row.flags);
        }
        Ok(PairIndex {
            ids,
            position,
            dasp,
            sadp,
            flags,
        })
    }
}
