//! Core domain types and their on-disk formats.
//!
//! * SKX1 sequences: `b"SKX1"`, then little-endian `u32` T, V, D (D = 3), then
//!   T·V·D little-endian `f32` values, frame-major, joint-minor,
//!   coordinate-innermost.
//! * Manifests: UTF-8 text with the fixed header
//!   `sample_id,performer,setup,action,path`, one unquoted record per line.
//! * Layouts: JSON objects `{name, joint_count, root, edges}`.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SKX1_MAGIC: &[u8; 4] = b"SKX1";
pub const MANIFEST_HEADER: &str = "sample_id,performer,setup,action,path";

/// Kinematic tree over `joint_count` joints. Edges are stored as
/// `(parent, child)` pairs oriented away from `root`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkeletonLayout {
    pub name: String,
    pub joint_count: usize,
    pub root: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SkeletonLayout {
    /// Builds a layout from undirected edges, orienting each edge away from
    /// `root`. Fails unless the edges form a spanning tree.
    pub fn new(
        name: impl Into<String>,
        joint_count: usize,
        root: usize,
        undirected: &[(usize, usize)],
    ) -> Result<Self> {
        let name = name.into();
        if joint_count == 0 {
            return Err(Error::Invalid(format!("layout {name}: joint_count must be positive")));
        }
        if root >= joint_count {
            return Err(Error::Invalid(format!("layout {name}: root {root} out of range")));
        }
        if undirected.len() != joint_count - 1 {
            return Err(Error::Invalid(format!(
                "layout {name}: a tree over {joint_count} joints needs {} edges, got {}",
                joint_count - 1,
                undirected.len()
            )));
        }
        let mut adj = vec![Vec::new(); joint_count];
        for &(a, b) in undirected {
            if a >= joint_count || b >= joint_count {
                return Err(Error::Invalid(format!("layout {name}: edge ({a},{b}) out of range")));
            }
            if a == b {
                return Err(Error::Invalid(format!("layout {name}: self-loop at {a}")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; joint_count];
        let mut edges = Vec::with_capacity(joint_count - 1);
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(j) = queue.pop_front() {
            for &k in &adj[j] {
                if !seen[k] {
                    seen[k] = true;
                    edges.push((j, k));
                    queue.push_back(k);
                }
            }
        }
        if edges.len() != joint_count - 1 {
            return Err(Error::Invalid(format!(
                "layout {name}: edges do not connect all joints (or contain a cycle)"
            )));
        }
        Ok(Self {
            name,
            joint_count,
            root,
            edges,
        })
    }

    /// Re-checks the tree invariants, used after deserialising.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::new(&self.name, self.joint_count, self.root, &self.edges)?;
        let mut has_parent = vec![false; self.joint_count];
        for &(_, c) in &self.edges {
            has_parent[c] = true;
        }
        if has_parent[self.root] || rebuilt.edges.len() != self.edges.len() {
            return Err(Error::Invalid(format!("layout {}: edges not oriented from root", self.name)));
        }
        Ok(())
    }

    /// `parent[j]` of every joint; `None` for the root.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.joint_count];
        for &(p, c) in &self.edges {
            parent[c] = Some(p);
        }
        parent
    }

    /// Hop distance of every joint from the root.
    pub fn depths(&self) -> Vec<usize> {
        let parent = self.parents();
        (0..self.joint_count)
            .map(|mut j| {
                let mut d = 0;
                while let Some(p) = parent[j] {
                    j = p;
                    d += 1;
                }
                d
            })
            .collect()
    }

    /// Default 11-joint humanoid: pelvis, chest, head, two two-joint arms and
    /// two two-joint legs.
    pub fn humanoid11() -> Self {
        let edges = [
            (0, 1),
            (1, 2),
            (1, 3),
            (3, 4),
            (1, 5),
            (5, 6),
            (0, 7),
            (7, 8),
            (0, 9),
            (9, 10),
        ];
        Self::new("humanoid11", 11, 0, &edges).expect("static layout is a tree")
    }

    /// The 25-joint Kinect v2 skeleton of the NTU RGB+D datasets, rooted at the
    /// spine joint.
    pub fn ntu25() -> Self {
        let one_based = [
            (1, 2),
            (2, 21),
            (3, 21),
            (4, 3),
            (5, 21),
            (6, 5),
            (7, 6),
            (8, 7),
            (9, 21),
            (10, 9),
            (11, 10),
            (12, 11),
            (13, 1),
            (14, 13),
            (15, 14),
            (16, 15),
            (17, 1),
            (18, 17),
            (19, 18),
            (20, 19),
            (22, 23),
            (23, 8),
            (24, 25),
            (25, 12),
        ];
        let edges: Vec<_> = one_based.iter().map(|&(a, b)| (a - 1, b - 1)).collect();
        Self::new("ntu25", 25, 20, &edges).expect("static layout is a tree")
    }

    /// Looks up a built-in layout by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "humanoid11" => Some(Self::humanoid11()),
            "ntu25" => Some(Self::ntu25()),
            _ => None,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let layout: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("layout serialises");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn layout_name_for(joints: usize) -> String {
    match joints {
        11 => "humanoid11".into(),
        25 => "ntu25".into(),
        v => format!("joints{v}"),
    }
}

/// One body's joint coordinates over time, `frames × joints × 3`, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    coords: Array3<f32>,
    pub layout_name: String,
}

impl SkeletonSequence {
    pub fn new(coords: Array3<f32>, layout_name: impl Into<String>) -> Result<Self> {
        let (t, v, d) = coords.dim();
        if t == 0 || v == 0 || d != 3 {
            return Err(Error::Shape(format!("sequence must be T×V×3 with T,V ≥ 1, got {t}×{v}×{d}")));
        }
        if let Some(pos) = coords.iter().position(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!("non-finite coordinate at flat index {pos}")));
        }
        Ok(Self {
            coords: coords.as_standard_layout().into_owned(),
            layout_name: layout_name.into(),
        })
    }

    /// Sequence tagged with the conventional layout name for its joint count.
    pub fn from_coords(coords: Array3<f32>) -> Result<Self> {
        let v = coords.dim().1;
        Self::new(coords, layout_name_for(v))
    }

    pub fn coords(&self) -> &Array3<f32> {
        &self.coords
    }

    pub fn into_coords(self) -> Array3<f32> {
        self.coords
    }

    pub fn frame_count(&self) -> usize {
        self.coords.dim().0
    }

    pub fn joint_count(&self) -> usize {
        self.coords.dim().1
    }

    pub fn check_layout(&self, layout: &SkeletonLayout) -> Result<()> {
        if self.joint_count() != layout.joint_count {
            return Err(Error::Shape(format!(
                "sequence has {} joints, layout {} has {}",
                self.joint_count(),
                layout.name,
                layout.joint_count
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (t, v, d) = self.coords.dim();
        let mut out = Vec::with_capacity(16 + 4 * t * v * d);
        out.extend_from_slice(SKX1_MAGIC);
        for n in [t, v, d] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for x in self.coords.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: format!("header needs 16 bytes, found {}", bytes.len()),
            });
        }
        if &bytes[0..4] != SKX1_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected \"SKX1\"".into(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (t, v, d) = (word(4), word(8), word(12));
        if d != 3 {
            return Err(Error::Format {
                offset: 12,
                msg: format!("coordinate dimension must be 3, got {d}"),
            });
        }
        if t == 0 || v == 0 {
            return Err(Error::Format {
                offset: if t == 0 { 4 } else { 8 },
                msg: "frame and joint counts must be positive".into(),
            });
        }
        let expected = t
            .checked_mul(v)
            .and_then(|n| n.checked_mul(d * 4))
            .ok_or_else(|| Error::Format {
                offset: 4,
                msg: "header dimensions overflow".into(),
            })?;
        let payload = &bytes[16..];
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::Format {
                offset: 16 + expected,
                msg: format!("{} trailing bytes after payload", payload.len() - expected),
            });
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let coords = Array3::from_shape_vec((t, v, d), values).expect("length checked above");
        Self::from_coords(coords)
    }

    /// Coordinates widened (or kept) to the working scalar type.
    pub fn coords_as<S: Scalar>(&self) -> Array3<S> {
        self.coords.mapv(|x| S::of(x as f64))
    }
}

pub fn write_sequence(seq: &SkeletonSequence, path: &Path) -> Result<()> {
    fs::write(path, seq.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: &Path) -> Result<SkeletonSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    SkeletonSequence::from_bytes(&bytes)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub performer: u32,
    pub setup: u32,
    pub action: usize,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub class_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rule {
    DuplicateId,
    ClassOutOfRange,
    NonPositivePerformer,
    NonPositiveSetup,
    EmptyId,
    InvalidField,
    ZeroClassCount,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::DuplicateId => "duplicate id",
            Rule::ClassOutOfRange => "class out of range",
            Rule::NonPositivePerformer => "non-positive performer",
            Rule::NonPositiveSetup => "non-positive setup",
            Rule::EmptyId => "empty sample id",
            Rule::InvalidField => "delimiter inside field",
            Rule::ZeroClassCount => "class count must be positive",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Position of the offending record, `None` for manifest-level rules.
    pub record: Option<usize>,
    pub sample_id: Option<String>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.record, &self.sample_id) {
            (Some(i), Some(id)) => write!(f, "record {i} ({id}): {}", self.rule),
            _ => write!(f, "manifest: {}", self.rule),
        }
    }
}

impl DatasetManifest {
    /// Manifest whose class count is one past the largest action present.
    pub fn new(records: Vec<SampleRecord>) -> Self {
        let class_count = records.iter().map(|r| r.action + 1).max().unwrap_or(0);
        Self {
            records,
            class_count,
        }
    }

    pub fn with_class_count(records: Vec<SampleRecord>, class_count: usize) -> Self {
        Self {
            records,
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_manifest(self)
    }

    pub fn find(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    /// Record count per class, indexed by action.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for r in &self.records {
            if r.action < counts.len() {
                counts[r.action] += 1;
            }
        }
        counts
    }

    pub fn performers(&self) -> Vec<u32> {
        let mut ps: Vec<u32> = self.records.iter().map(|r| r.performer).collect();
        ps.sort_unstable();
        ps.dedup();
        ps
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.sample_id, r.performer, r.setup, r.action, r.path
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
            other => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header {MANIFEST_HEADER:?}, found {other:?}"),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 5 fields, found {}", fields.len()),
                });
            }
            let int = |s: &str, what: &str| -> Result<u64> {
                s.trim().parse::<u64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("{what} must be a non-negative integer, got {s:?}"),
                })
            };
            records.push(SampleRecord {
                sample_id: fields[0].to_string(),
                performer: int(fields[1], "performer")? as u32,
                setup: int(fields[2], "setup")? as u32,
                action: int(fields[3], "action")? as usize,
                path: fields[4].to_string(),
            });
        }
        Ok(Self::new(records))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Resolves a record's payload locator against the manifest's directory.
    pub fn resolve(base_dir: &Path, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    }
}

/// Lists every broken manifest invariant; an empty list means the manifest is
/// well formed.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    if manifest.class_count == 0 && !manifest.records.is_empty() {
        out.push(Violation {
            record: None,
            sample_id: None,
            rule: Rule::ZeroClassCount,
        });
    }
    let mut seen = HashSet::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let mut flag = |rule| {
            out.push(Violation {
                record: Some(i),
                sample_id: Some(r.sample_id.clone()),
                rule,
            })
        };
        if r.sample_id.is_empty() {
            flag(Rule::EmptyId);
        }
        if r.sample_id.contains([',', '\n']) || r.path.contains([',', '\n']) {
            flag(Rule::InvalidField);
        }
        if !seen.insert(r.sample_id.as_str()) {
            flag(Rule::DuplicateId);
        }
        if r.action >= manifest.class_count {
            flag(Rule::ClassOutOfRange);
        }
        if r.performer == 0 {
            flag(Rule::NonPositivePerformer);
        }
        if r.setup == 0 {
            flag(Rule::NonPositiveSetup);
        }
    }
    out
}

/// A probability vector over `K` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution<S> {
    probs: Array1<S>,
}

impl<S: Scalar> LabelDistribution<S> {
    pub fn new(probs: Array1<S>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Invalid("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < S::zero()) {
            return Err(Error::Invalid("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = probs.iter().map(|p| p.f64()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut probs = Array1::zeros(classes);
        probs[class] = S::one();
        Self { probs }
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            probs: Array1::from_elem(classes, S::one() / S::of(classes as f64)),
        }
    }

    pub fn probs(&self) -> &Array1<S> {
        &self.probs
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_lowest(self.probs.iter().copied())
    }
}

/// Index of the largest value, preferring the lowest index among ties.
pub fn argmax_lowest<S: PartialOrd>(values: impl IntoIterator<Item = S>) -> usize {
    let mut best: Option<(usize, S)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match &best {
            Some((_, b)) if !(v > *b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

/// Loads every sequence referenced by a manifest, keyed by sample id.
pub fn load_sequences(
    manifest: &DatasetManifest,
    base_dir: &Path,
) -> Result<BTreeMap<String, SkeletonSequence>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let seq = read_sequence(&DatasetManifest::resolve(base_dir, r))?;
            Ok((r.sample_id.clone(), seq))
        })
        .collect()
}
