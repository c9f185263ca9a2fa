//! Synthetic skeleton sequences with known action, performer and setup.
//!
//! Each bone carries two swing angles. A class fixes, per bone and axis, a
//! mean angle and a sinusoid (amplitude, frequency, phase). A performer
//! rescales bone lengths, speeds the motion up or down and adds its own
//! posture offsets. A setup rotates the whole sequence about the vertical
//! axis. Joint positions follow by forward kinematics from the root, so bone
//! lengths stay fixed over time.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_sequence, DatasetManifest, SampleRecord, SkeletonLayout, SkeletonSequence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub class_count: usize,
    pub performer_count: u32,
    pub setup_count: u32,
    pub samples_per_cell: usize,
    pub frames: usize,
    pub layout: String,
    /// Coordinate noise standard deviation, metres.
    pub noise_std: f64,
    /// Rotation about the vertical axis between consecutive setups, radians.
    pub setup_rotation: f64,
    /// Standard deviation of a performer's per-bone posture offsets, radians.
    pub posture_std: f64,
    /// Standard deviation of a class's per-bone mean angles, radians.
    pub class_posture_std: f64,
    /// Per-sample timing jitter as a fraction of one cycle.
    pub phase_jitter: f64,
    pub class_style: ClassStyle,
    pub seed: u64,
}

/// How classes differ from one another.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassStyle {
    /// Independent amplitude, frequency and phase per class, bone and axis.
    Free,
    /// Amplitudes and frequencies are shared by all classes; a class fixes
    /// the relative timing of the trunk and the four limbs.
    #[default]
    Coordination,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            class_count: 8,
            performer_count: 6,
            setup_count: 2,
            samples_per_cell: 2,
            frames: 64,
            layout: "humanoid11".into(),
            noise_std: 0.01,
            setup_rotation: 0.5,
            posture_std: 0.1,
            class_posture_std: 0.0,
            phase_jitter: 0.05,
            class_style: ClassStyle::Coordination,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.performer_count == 0 || self.setup_count == 0 || self.samples_per_cell == 0 {
            return Err(Error::Config("all counts must be at least 1".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be at least 1".into()));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("posture_std", self.posture_std),
            ("class_posture_std", self.class_posture_std),
            ("phase_jitter", self.phase_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.layout != "humanoid11" {
            return Err(Error::Config(format!("unsupported synthetic layout {}", self.layout)));
        }
        Ok(())
    }
}

/// Bones of the humanoid in child order with rest direction (y up) and
/// nominal length.
const BONES: [(usize, usize, [f64; 3], f64); 10] = [
    (0, 1, [0.0, 1.0, 0.0], 0.5),
    (1, 2, [0.0, 1.0, 0.0], 0.25),
    (1, 3, [-0.3, -1.0, 0.0], 0.3),
    (3, 4, [-0.3, -1.0, 0.0], 0.28),
    (1, 5, [0.3, -1.0, 0.0], 0.3),
    (5, 6, [0.3, -1.0, 0.0], 0.28),
    (0, 7, [-0.1, -1.0, 0.0], 0.45),
    (7, 8, [-0.1, -1.0, 0.0], 0.45),
    (0, 9, [0.1, -1.0, 0.0], 0.45),
    (9, 10, [0.1, -1.0, 0.0], 0.45),
];

#[derive(Clone, Debug)]
struct ClassPattern {
    mean: [[f64; 2]; 10],
    amplitude: [[f64; 2]; 10],
    frequency: [[f64; 2]; 10],
    phase: [[f64; 2]; 10],
    bob: f64,
}

#[derive(Clone, Debug)]
struct PerformerStyle {
    bone_scale: [f64; 10],
    speed: f64,
    posture: [[f64; 2]; 10],
}

fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (a << 32) ^ b);
    rng
}

fn class_pattern(cfg: &SynthConfig, c: usize) -> ClassPattern {
    let mut rng = stream(cfg.seed, 1, c as u64, 0);
    let normal = Normal::new(0.0, cfg.class_posture_std.max(1e-12)).unwrap();
    let mut p = ClassPattern {
        mean: [[0.0; 2]; 10],
        amplitude: [[0.0; 2]; 10],
        frequency: [[0.0; 2]; 10],
        phase: [[0.0; 2]; 10],
        bob: rng.random_range(0.0..0.1),
    };
    for b in 0..10 {
        for a in 0..2 {
            p.mean[b][a] = if cfg.class_posture_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            p.amplitude[b][a] = if rng.random_bool(0.6) {
                rng.random_range(0.3..0.9)
            } else {
                rng.random_range(0.0..0.1)
            };
            p.frequency[b][a] = [0.5, 1.0, 1.5, 2.0][rng.random_range(0..4)];
            p.phase[b][a] = rng.random_range(0.0..TAU);
        }
    }
    if cfg.class_style == ClassStyle::Coordination {
        let shared = class_pattern(&SynthConfig { class_style: ClassStyle::Free, ..cfg.clone() }, usize::MAX >> 1);
        p.amplitude = shared.amplitude;
        p.frequency = shared.frequency;
        let group_phase: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..TAU)).collect();
        for b in 0..10 {
            for a in 0..2 {
                p.phase[b][a] = shared.phase[b][a] + group_phase[b / 2];
            }
        }
    }
    p
}

fn performer_style(cfg: &SynthConfig, p: u32) -> PerformerStyle {
    let mut rng = stream(cfg.seed, 2, p as u64, 0);
    let normal = Normal::new(0.0, cfg.posture_std.max(1e-12)).unwrap();
    let mut s = PerformerStyle {
        bone_scale: [1.0; 10],
        speed: rng.random_range(0.85..1.15),
        posture: [[0.0; 2]; 10],
    };
    for b in 0..10 {
        s.bone_scale[b] = rng.random_range(0.8..1.2);
        for a in 0..2 {
            s.posture[b][a] = if cfg.posture_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        }
    }
    s
}

fn swing(dir: [f64; 3], ax: f64, az: f64) -> [f64; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sz, cz) = az.sin_cos();
    let [x, y, z] = dir;
    // rotate about x, then about z
    let (y1, z1) = (cx * y - sx * z, sx * y + cx * z);
    [cz * x - sz * y1, sz * x + cz * y1, z1]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// One synthetic sequence. `sample` indexes repetitions within a cell.
pub fn sequence(cfg: &SynthConfig, class: usize, performer: u32, setup: u32, sample: usize) -> Result<SkeletonSequence> {
    cfg.validate()?;
    let pat = class_pattern(cfg, class);
    let sty = performer_style(cfg, performer);
    let mut rng = stream(cfg.seed, 3, ((class as u64) << 16) ^ performer as u64, ((setup as u64) << 24) ^ sample as u64);
    let shift = if cfg.phase_jitter > 0.0 {
        rng.random_range(-cfg.phase_jitter..cfg.phase_jitter)
    } else {
        0.0
    };
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-300)).unwrap();
    let yaw = cfg.setup_rotation * (setup.saturating_sub(1)) as f64;
    let (sy, cy) = yaw.sin_cos();
    let t_len = cfg.frames;
    let mut coords = Array3::<f32>::zeros((t_len, 11, 3));
    for t in 0..t_len {
        let tau = sty.speed * t as f64 / t_len as f64 + shift;
        let mut pos = [[0.0f64; 3]; 11];
        let mut total = [[0.0f64; 2]; 11];
        pos[0] = [0.0, pat.bob * (TAU * 2.0 * tau).sin(), 0.0];
        for (b, &(parent, child, rest, len)) in BONES.iter().enumerate() {
            for a in 0..2 {
                let own = pat.mean[b][a]
                    + sty.posture[b][a]
                    + pat.amplitude[b][a] * (TAU * pat.frequency[b][a] * tau + pat.phase[b][a]).sin();
                total[child][a] = total[parent][a] + own;
            }
            let d = swing(normalize(rest), total[child][0], total[child][1]);
            let l = len * sty.bone_scale[b];
            for k in 0..3 {
                pos[child][k] = pos[parent][k] + l * d[k];
            }
        }
        for (j, p) in pos.iter().enumerate() {
            let (x, y, z) = (cy * p[0] + sy * p[2], p[1], -sy * p[0] + cy * p[2]);
            for (k, v) in [x, y, z].into_iter().enumerate() {
                let e = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                coords[[t, j, k]] = (v + e) as f32;
            }
        }
    }
    SkeletonSequence::new(coords, "humanoid11")
}

pub fn sample_id(class: usize, performer: u32, setup: u32, sample: usize) -> String {
    format!("S{setup:03}P{performer:03}A{:03}R{sample:03}", class + 1)
}

/// A generated dataset held in memory.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub manifest: DatasetManifest,
    pub sequences: BTreeMap<String, SkeletonSequence>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut sequences = BTreeMap::new();
    for setup in 1..=cfg.setup_count {
        for performer in 1..=cfg.performer_count {
            for class in 0..cfg.class_count {
                for r in 0..cfg.samples_per_cell {
                    let id = sample_id(class, performer, setup, r);
                    sequences.insert(id.clone(), sequence(cfg, class, performer, setup, r)?);
                    records.push(SampleRecord {
                        path: format!("seq/{id}.skx"),
                        sample_id: id,
                        performer,
                        setup,
                        action: class,
                    });
                }
            }
        }
    }
    Ok(SynthData {
        manifest: DatasetManifest::with_class_count(records, cfg.class_count),
        sequences,
    })
}

/// Writes `seq/*.skx`, `manifest.csv` and `layout.json` under `out`.
pub fn write(data: &SynthData, out: &Path) -> Result<()> {
    let dir = out.join("seq");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for r in &data.manifest.records {
        write_sequence(&data.sequences[&r.sample_id], &out.join(&r.path))?;
    }
    data.manifest.write(&out.join("manifest.csv"))?;
    SkeletonLayout::humanoid11().write(&out.join("layout.json"))
}

/// Leave-one-out nearest-centroid accuracy on flattened sequences: each
/// sample is assigned to the closest class mean computed without it.
pub fn nearest_centroid_accuracy(data: &SynthData) -> f64 {
    let recs = &data.manifest.records;
    let k = data.manifest.class_count;
    let flat: Vec<Vec<f64>> = recs
        .iter()
        .map(|r| data.sequences[&r.sample_id].coords().iter().map(|&x| x as f64).collect())
        .collect();
    let dim = flat[0].len();
    let mut sums = Array2::<f64>::zeros((k, dim));
    let mut counts = vec![0usize; k];
    for (r, f) in recs.iter().zip(&flat) {
        counts[r.action] += 1;
        for (s, x) in sums.row_mut(r.action).iter_mut().zip(f) {
            *s += x;
        }
    }
    let mut correct = 0;
    for (r, f) in recs.iter().zip(&flat) {
        let mut best = (f64::INFINITY, 0);
        for c in 0..k {
            let mut n = counts[c] as f64;
            if c == r.action {
                n -= 1.0;
            }
            if n <= 0.0 {
                continue;
            }
            let d: f64 = sums
                .row(c)
                .iter()
                .zip(f)
                .map(|(s, x)| {
                    let m = if c == r.action { (s - x) / n } else { s / n };
                    (m - x) * (m - x)
                })
                .sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        if best.1 == r.action {
            correct += 1;
        }
    }
    correct as f64 / recs.len() as f64
}
