//! NTU `.skeleton` parsing, clip normalisation and the bone modality.

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{SampleRecord, SkeletonLayout, SkeletonSequence};
use crate::error::{Error, Result};

pub const NTU_JOINTS: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_frames: usize,
    pub empty_frame_epsilon: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_frames: 64,
            empty_frame_epsilon: 1e-8,
        }
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        loop {
            match self.inner.next() {
                Some((i, l)) => {
                    self.last = i + 1;
                    if !l.trim().is_empty() {
                        return Ok(l);
                    }
                }
                None => {
                    return Err(Error::Parse {
                        line: self.last + 1,
                        msg: format!("unexpected end of file, expected {what}"),
                    })
                }
            }
        }
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let line = self.next(what)?;
        let field = line.split_whitespace().next().unwrap_or("");
        field.parse::<usize>().map_err(|_| Error::Parse {
            line: self.last,
            msg: format!("{what} must be a non-negative integer, got {field:?}"),
        })
    }
}

/// Parses an NTU RGB+D `.skeleton` text file, keeping the first body of each
/// frame. Frames without bodies become all-zero frames.
pub fn parse_ntu_skeleton(text: &str) -> Result<SkeletonSequence> {
    let mut lines = Lines::new(text);
    let frame_count = lines.count("frame count")?;
    if frame_count == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "frame count must be positive".into(),
        });
    }
    let mut frames: Vec<Option<Vec<[f32; 3]>>> = Vec::with_capacity(frame_count);
    let mut joints: Option<usize> = None;
    for _ in 0..frame_count {
        let bodies = lines.count("body count")?;
        let mut first = None;
        for b in 0..bodies {
            lines.next("body info line")?;
            let declared = lines.count("joint count")?;
            match joints {
                Some(v) if v != declared => {
                    return Err(Error::Parse {
                        line: lines.last,
                        msg: format!("joint count {declared} differs from earlier frames ({v})"),
                    })
                }
                _ => joints = Some(declared),
            }
            let mut body = Vec::with_capacity(declared);
            for _ in 0..declared {
                let line = lines.next("joint line")?;
                let mut xyz = [0f32; 3];
                let mut fields = line.split_whitespace();
                for c in xyz.iter_mut() {
                    let f = fields.next().ok_or_else(|| Error::Parse {
                        line: lines.last,
                        msg: "joint line has fewer than 3 fields".into(),
                    })?;
                    *c = f.parse::<f32>().map_err(|_| Error::Parse {
                        line: lines.last,
                        msg: format!("invalid coordinate {f:?}"),
                    })?;
                    if !c.is_finite() {
                        return Err(Error::Parse {
                            line: lines.last,
                            msg: format!("non-finite coordinate {f:?}"),
                        });
                    }
                }
                body.push(xyz);
            }
            if b == 0 {
                first = Some(body);
            }
        }
        frames.push(first);
    }
    let v = joints.unwrap_or(NTU_JOINTS);
    if v == 0 {
        return Err(Error::Parse {
            line: lines.last,
            msg: "joint count must be positive".into(),
        });
    }
    let mut coords = Array3::<f32>::zeros((frame_count, v, 3));
    for (t, frame) in frames.iter().enumerate() {
        if let Some(body) = frame {
            for (j, xyz) in body.iter().enumerate() {
                for (c, &x) in xyz.iter().enumerate() {
                    coords[[t, j, c]] = x;
                }
            }
        }
    }
    SkeletonSequence::from_coords(coords)
}

/// A frame is empty when every coordinate is below `eps` in magnitude.
pub fn is_empty_frame(seq: &SkeletonSequence, t: usize, eps: f64) -> bool {
    seq.coords()
        .slice(s![t, .., ..])
        .iter()
        .all(|x| (*x as f64).abs() < eps)
}

/// Drops empty frames, then linearly resamples every joint coordinate to
/// `target_frames` frames over the normalised time axis `[0, 1]`.
pub fn preprocess(seq: &SkeletonSequence, config: &PreprocessConfig) -> Result<SkeletonSequence> {
    if config.target_frames == 0 {
        return Err(Error::Config("target_frames must be at least 1".into()));
    }
    let kept: Vec<usize> = (0..seq.frame_count())
        .filter(|&t| !is_empty_frame(seq, t, config.empty_frame_epsilon))
        .collect();
    if kept.is_empty() {
        return Err(Error::Degenerate("every frame is empty".into()));
    }
    let src = seq.coords();
    let (_, v, d) = src.dim();
    let n = kept.len();
    let target = config.target_frames;
    let mut out = Array3::<f32>::zeros((target, v, d));
    for i in 0..target {
        let pos = if target == 1 || n == 1 {
            0.0
        } else {
            (i * (n - 1)) as f64 / (target - 1) as f64
        };
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = pos - lo as f64;
        for j in 0..v {
            for c in 0..d {
                let a = src[[kept[lo], j, c]] as f64;
                let b = src[[kept[hi], j, c]] as f64;
                out[[i, j, c]] = (a * (1.0 - frac) + b * frac) as f32;
            }
        }
    }
    SkeletonSequence::new(out, seq.layout_name.clone())
}

/// Bone modality: each child joint holds `child − parent`, the root holds zero.
pub fn to_bone(seq: &SkeletonSequence, layout: &SkeletonLayout) -> Result<SkeletonSequence> {
    seq.check_layout(layout)?;
    let src = seq.coords();
    let mut out = Array3::<f32>::zeros(src.dim());
    for &(parent, child) in &layout.edges {
        let diff = &src.slice(s![.., child, ..]) - &src.slice(s![.., parent, ..]);
        out.slice_mut(s![.., child, ..]).assign(&diff);
    }
    SkeletonSequence::new(out, seq.layout_name.clone())
}

/// Reads setup, performer and action from an NTU file stem such as
/// `S001C002P003R002A013`. Actions become 0-based class ids.
pub fn ntu_record(stem: &str, path: impl Into<String>) -> Result<SampleRecord> {
    let bad = || Error::Invalid(format!("{stem:?} is not an NTU sample name"));
    let field = |tag: char| -> Result<u32> {
        let at = stem.find(tag).ok_or_else(bad)?;
        let digits: String = stem[at + 1..].chars().take_while(char::is_ascii_digit).collect();
        if digits.len() != 3 {
            return Err(bad());
        }
        digits.parse().map_err(|_| bad())
    };
    let action = field('A')?;
    if action == 0 {
        return Err(bad());
    }
    Ok(SampleRecord {
        sample_id: stem.to_string(),
        performer: field('P')?,
        setup: field('S')?,
        action: action as usize - 1,
        path: path.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn ntu_names() {
        let r = ntu_record("S001C002P003R002A013", "seq/x.skx").unwrap();
        assert_eq!((r.setup, r.performer, r.action), (1, 3, 12));
        assert!(ntu_record("S001C002P003R002", "p").is_err());
        assert!(ntu_record("S001C002P003R002A000", "p").is_err());
        assert!(ntu_record("S1C002P003R002A013", "p").is_err());
    }

    fn joint_line(x: f32, y: f32, z: f32) -> String {
        format!("{x} {y} {z} 0 0 0 0 0 0 0 0 2")
    }

    pub(crate) fn ntu_text(frames: &[Option<Vec<[f32; 3]>>]) -> String {
        let mut s = format!("{}\n", frames.len());
        for f in frames {
            match f {
                None => s.push_str("0\n"),
                Some(joints) => {
                    s.push_str("1\n");
                    s.push_str("72057594037931101 0 1 1 1 1 0 0.02 0.06 2\n");
                    s.push_str(&format!("{}\n", joints.len()));
                    for j in joints {
                        s.push_str(&joint_line(j[0], j[1], j[2]));
                        s.push('\n');
                    }
                }
            }
        }
        s
    }

    #[test]
    fn single_zero_frame() {
        let text = ntu_text(&[Some(vec![[0.0; 3]; 25])]);
        let seq = parse_ntu_skeleton(&text).unwrap();
        assert_eq!(seq.coords().dim(), (1, 25, 3));
        assert!(seq.coords().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bodyless_frame_is_zero() {
        let text = ntu_text(&[Some(vec![[1.0, 2.0, 3.0]; 25]), None]);
        let seq = parse_ntu_skeleton(&text).unwrap();
        assert_eq!(seq.frame_count(), 2);
        assert!(seq.coords().slice(s![1, .., ..]).iter().all(|&x| x == 0.0));
        assert_eq!(seq.coords()[[0, 24, 2]], 3.0);
    }

    #[test]
    fn second_body_is_ignored() {
        let mut text = String::from("1\n2\n");
        for b in 0..2 {
            text.push_str("info\n25\n");
            for _ in 0..25 {
                text.push_str(&joint_line(b as f32, 0.0, 0.0));
                text.push('\n');
            }
        }
        let seq = parse_ntu_skeleton(&text).unwrap();
        assert!(seq.coords().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn missing_joint_lines_report_line_number() {
        let mut text = ntu_text(&[Some(vec![[0.0; 3]; 25])]);
        // keep header lines (4) plus 10 joints
        text = text.lines().take(14).collect::<Vec<_>>().join("\n");
        match parse_ntu_skeleton(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 15),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_integer_count_is_a_parse_error() {
        match parse_ntu_skeleton("1\nabc\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn seq_from(frames: Vec<[f32; 3]>) -> SkeletonSequence {
        let t = frames.len();
        let flat: Vec<f32> = frames.into_iter().flatten().collect();
        SkeletonSequence::from_coords(Array3::from_shape_vec((t, 1, 3), flat).unwrap()).unwrap()
    }

    #[test]
    fn two_frames_resized_to_three() {
        let seq = seq_from(vec![[1.0, 2.0, 3.0], [3.0, 4.0, 7.0]]);
        let cfg = PreprocessConfig {
            target_frames: 3,
            ..Default::default()
        };
        let out = preprocess(&seq, &cfg).unwrap();
        let c = out.coords();
        assert_eq!(c.slice(s![0, 0, ..]).to_vec(), vec![1.0, 2.0, 3.0]);
        assert_eq!(c.slice(s![1, 0, ..]).to_vec(), vec![2.0, 3.0, 5.0]);
        assert_eq!(c.slice(s![2, 0, ..]).to_vec(), vec![3.0, 4.0, 7.0]);
    }

    #[test]
    fn clean_target_length_input_is_unchanged() {
        let frames: Vec<[f32; 3]> = (0..64).map(|i| [i as f32 * 0.1 + 0.3, -1.0, 0.5]).collect();
        let seq = seq_from(frames);
        let out = preprocess(&seq, &PreprocessConfig::default()).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn all_empty_is_degenerate() {
        let seq = seq_from(vec![[0.0; 3]; 4]);
        assert!(matches!(
            preprocess(&seq, &PreprocessConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn single_surviving_frame_is_repeated() {
        let seq = seq_from(vec![[0.0; 3], [1.0, 1.0, 1.0], [0.0; 3]]);
        let cfg = PreprocessConfig {
            target_frames: 4,
            ..Default::default()
        };
        let out = preprocess(&seq, &cfg).unwrap();
        assert!(out.coords().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn bone_of_two_joint_chain() {
        let layout = SkeletonLayout::new("chain", 2, 0, &[(0, 1)]).unwrap();
        let coords = Array3::from_shape_vec((1, 2, 3), vec![0.5, 0.5, 0.5, 1.5, 0.5, 0.5]).unwrap();
        let seq = SkeletonSequence::from_coords(coords).unwrap();
        let bone = to_bone(&seq, &layout).unwrap();
        assert_eq!(bone.coords().as_slice().unwrap(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_joints_give_zero_bones() {
        let layout = SkeletonLayout::humanoid11();
        let seq = SkeletonSequence::from_coords(Array3::from_elem((3, 11, 3), 0.7)).unwrap();
        assert!(to_bone(&seq, &layout).unwrap().coords().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bone_rejects_joint_mismatch() {
        let seq = SkeletonSequence::from_coords(Array3::zeros((1, 4, 3))).unwrap();
        assert!(matches!(to_bone(&seq, &SkeletonLayout::humanoid11()), Err(Error::Shape(_))));
    }
}
