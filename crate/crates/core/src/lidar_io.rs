//! Readers and writers for the KITTI-family file formats.
//!
//! * point clouds: little-endian `f32` quadruples `(x, y, z, intensity)`, no header
//! * labels: little-endian `u32` per point, low 16 bits semantic, high 16 bits instance
//! * per-point scores: little-endian `f32` per point in `[0, 1]`
//! * poses: text, one row-major 3x4 rigid transform (12 reals) per line
//!
//! All readers are pure: they allocate a fresh value and never keep the file open.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A 3D point in meters.
pub type Point = [f64; 3];

const POINT_RECORD: usize = 16;

/// One lidar scan.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub intensity: Option<Vec<f32>>,
    pub scan_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            intensity: None,
            scan_id: String::new(),
        }
    }

    pub fn with_scan_id(mut self, id: impl Into<String>) -> Self {
        self.scan_id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the finite-coordinate and intensity-length invariants.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::NonFinite { index: i });
        }
        if let Some(int) = &self.intensity {
            if int.len() != self.points.len() {
                return Err(Error::arg(format!(
                    "intensity has {} values for {} points",
                    int.len(),
                    self.points.len()
                )));
            }
        }
        Ok(())
    }
}

/// Which id space the semantic labels of a [`LabelMap`] live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelSpace {
    /// Dataset label ids, as stored in the original label files.
    #[default]
    Raw,
    /// Vocabulary class ids `1..=K+1`, with 0 reserved for ignored points.
    Vocab,
}

/// Per-point semantic class and instance ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelMap {
    pub semantic: Vec<u32>,
    pub instance: Vec<u32>,
    pub space: LabelSpace,
}

impl LabelMap {
    pub fn new(semantic: Vec<u32>, instance: Vec<u32>, space: LabelSpace) -> Result<Self> {
        if semantic.len() != instance.len() {
            return Err(Error::arg(format!(
                "semantic ({}) and instance ({}) lengths differ",
                semantic.len(),
                instance.len()
            )));
        }
        Ok(LabelMap {
            semantic,
            instance,
            space,
        })
    }

    pub fn zeros(n: usize, space: LabelSpace) -> Self {
        LabelMap {
            semantic: vec![0; n],
            instance: vec![0; n],
            space,
        }
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }
}

/// Externally produced per-point objectness values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerPointScores {
    pub values: Vec<f32>,
}

impl PerPointScores {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        for (index, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::ScoreRange { index, value });
            }
        }
        Ok(PerPointScores { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Rigid transform `p -> R p + t`, stored as a row-major 3x4 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rows: [[f64; 4]; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rows: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    pub fn from_row_major(v: [f64; 12]) -> Self {
        let mut rows = [[0.0; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            row.copy_from_slice(&v[r * 4..r * 4 + 4]);
        }
        Pose { rows }
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let mut v = [0.0; 12];
        for (r, row) in self.rows.iter().enumerate() {
            v[r * 4..r * 4 + 4].copy_from_slice(row);
        }
        v
    }

    pub fn from_rotation_translation(rot: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut rows = [[0.0; 4]; 3];
        for r in 0..3 {
            rows[r][..3].copy_from_slice(&rot[r]);
            rows[r][3] = t[r];
        }
        Pose { rows }
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let mut rot = [[0.0; 3]; 3];
        for r in 0..3 {
            rot[r].copy_from_slice(&self.rows[r][..3]);
        }
        rot
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.rows[0][3], self.rows[1][3], self.rows[2][3]]
    }

    pub fn apply(&self, p: &Point) -> Point {
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.rows[r];
            *o = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + row[3];
        }
        out
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let a = self.rotation();
        let b = other.rotation();
        let mut rot = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                rot[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
            }
        }
        let t = self.apply(&other.translation());
        Pose::from_rotation_translation(rot, t)
    }

    /// True when the rotation block is orthonormal with determinant +1, within `tol`.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = self.rotation();
        if self.rows.iter().flatten().any(|v| !v.is_finite()) {
            return false;
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > tol {
                    return false;
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (det - 1.0).abs() <= tol
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn scan_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn decode_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % POINT_RECORD != 0 {
        let offset = (bytes.len() / POINT_RECORD * POINT_RECORD) as u64;
        return Err(Error::Truncated { offset });
    }
    let n = bytes.len() / POINT_RECORD;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (index, rec) in bytes.chunks_exact(POINT_RECORD).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[k * 4..k * 4 + 4].try_into().unwrap());
        let p = [f(0) as f64, f(1) as f64, f(2) as f64];
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        points.push(p);
        intensity.push(f(3));
    }
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
        scan_id: String::new(),
    })
}

/// Encodes a cloud as `f32` quadruples. Coordinates are narrowed to `f32`;
/// missing intensity is written as 0.
pub fn encode_point_cloud(cloud: &PointCloud) -> Result<Vec<u8>> {
    cloud.validate()?;
    let mut out = Vec::with_capacity(cloud.len() * POINT_RECORD);
    for (i, p) in cloud.points.iter().enumerate() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        let int = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        out.extend_from_slice(&int.to_le_bytes());
    }
    Ok(out)
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let mut cloud = decode_point_cloud(&read_bytes(path)?)?;
    cloud.scan_id = scan_id_of(path);
    Ok(cloud)
}

pub fn write_point_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_point_cloud(cloud)?)
}

pub fn decode_labels(bytes: &[u8], n: usize) -> Result<LabelMap> {
    let expected = 4 * n as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: bytes.len() as u64,
        });
    }
    let (semantic, instance) = bytes
        .chunks_exact(4)
        .map(|w| {
            let w = u32::from_le_bytes(w.try_into().unwrap());
            (w & 0xFFFF, w >> 16)
        })
        .unzip();
    Ok(LabelMap {
        semantic,
        instance,
        space: LabelSpace::Raw,
    })
}

pub fn encode_labels(labels: &LabelMap) -> Result<Vec<u8>> {
    if labels.semantic.len() != labels.instance.len() {
        return Err(Error::arg("semantic and instance lengths differ"));
    }
    let mut out = Vec::with_capacity(4 * labels.len());
    for (index, (&s, &i)) in labels.semantic.iter().zip(&labels.instance).enumerate() {
        if s > 0xFFFF {
            return Err(Error::IdOverflow {
                index,
                field: "semantic",
                value: s,
            });
        }
        if i > 0xFFFF {
            return Err(Error::IdOverflow {
                index,
                field: "instance",
                value: i,
            });
        }
        out.extend_from_slice(&(s | (i << 16)).to_le_bytes());
    }
    Ok(out)
}

/// Reads a label file for a cloud of `n` points. The result is tagged
/// [`LabelSpace::Raw`]; callers that know better retag it.
pub fn read_labels(path: impl AsRef<Path>, n: usize) -> Result<LabelMap> {
    decode_labels(&read_bytes(path.as_ref())?, n)
}

/// Reads a label file whose length alone determines the point count.
pub fn read_labels_any(path: impl AsRef<Path>) -> Result<LabelMap> {
    let bytes = read_bytes(path.as_ref())?;
    if bytes.len() % 4 != 0 {
        return Err(Error::LengthMismatch {
            expected: (bytes.len() / 4 * 4) as u64,
            found: bytes.len() as u64,
        });
    }
    decode_labels(&bytes, bytes.len() / 4)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_labels(labels)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn decode_scores(bytes: &[u8], n: usize) -> Result<PerPointScores> {
    let expected = 4 * n as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: bytes.len() as u64,
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|w| f32::from_le_bytes(w.try_into().unwrap()))
        .collect();
    PerPointScores::new(values)
}

pub fn encode_scores(scores: &PerPointScores) -> Vec<u8> {
    scores.values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_scores(path: impl AsRef<Path>, n: usize) -> Result<PerPointScores> {
    decode_scores(&read_bytes(path.as_ref())?, n)
}

pub fn write_scores(scores: &PerPointScores, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_scores(scores))
}

pub fn parse_poses(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad number {tok:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        let arr: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| Error::Parse {
            line: lineno + 1,
            msg: format!("expected 12 values, found {}", v.len()),
        })?;
        poses.push(Pose::from_row_major(arr));
    }
    Ok(poses)
}

pub fn format_poses(poses: &[Pose]) -> String {
    let mut out = String::new();
    for pose in poses {
        let line: Vec<String> = pose.to_row_major().iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text)
}

pub fn write_poses(poses: &[Pose], path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), format_poses(poses).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(x: f32, y: f32, z: f32, i: f32) -> Vec<u8> {
        [x, y, z, i].iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn decodes_two_points() {
        let mut bytes = record(1.0, 2.0, 3.0, 0.5);
        bytes.extend(record(4.0, 5.0, 6.0, 0.1));
        assert_eq!(bytes.len(), 32);
        let cloud = decode_point_cloud(&bytes).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[1], [4.0, 5.0, 6.0]);
        assert_eq!(cloud.intensity.as_ref().unwrap()[0], 0.5);
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        assert!(decode_point_cloud(&[]).unwrap().is_empty());
    }

    #[test]
    fn truncated_cloud_reports_offset() {
        let mut bytes = record(1.0, 2.0, 3.0, 0.5);
        bytes.push(0);
        match decode_point_cloud(&bytes) {
            Err(Error::Truncated { offset }) => assert_eq!(offset, 16),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_coordinate_reports_index() {
        let mut bytes = record(1.0, 2.0, 3.0, 0.5);
        bytes.extend(record(f32::NAN, 0.0, 0.0, 0.0));
        assert!(matches!(
            decode_point_cloud(&bytes),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn label_word_bit_split() {
        let l = decode_labels(&0x0001_000Au32.to_le_bytes(), 1).unwrap();
        assert_eq!((l.semantic[0], l.instance[0]), (10, 1));
        let l = decode_labels(&0u32.to_le_bytes(), 1).unwrap();
        assert_eq!((l.semantic[0], l.instance[0]), (0, 0));
    }

    #[test]
    fn label_length_mismatch() {
        assert!(matches!(
            decode_labels(&[0u8; 8], 3),
            Err(Error::LengthMismatch {
                expected: 12,
                found: 8
            })
        ));
    }

    #[test]
    fn label_encoding() {
        let l = LabelMap::new(vec![10], vec![1], LabelSpace::Raw).unwrap();
        assert_eq!(encode_labels(&l).unwrap(), vec![0x0A, 0x00, 0x01, 0x00]);
        assert!(encode_labels(&LabelMap::default()).unwrap().is_empty());
        let l = LabelMap::new(vec![1, 1], vec![0, 70000], LabelSpace::Raw).unwrap();
        assert!(matches!(
            encode_labels(&l),
            Err(Error::IdOverflow {
                index: 1,
                field: "instance",
                ..
            })
        ));
    }

    #[test]
    fn label_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000000.label");
        let l = LabelMap::new(vec![10, 40, 0], vec![3, 0, 0], LabelSpace::Raw).unwrap();
        write_labels(&l, &path).unwrap();
        assert_eq!(read_labels(&path, 3).unwrap(), l);
        assert_eq!(read_labels_any(&path).unwrap(), l);
    }

    #[test]
    fn score_range_checked() {
        let bytes: Vec<u8> = [0.5f32, 1.5].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert!(matches!(
            decode_scores(&bytes, 2),
            Err(Error::ScoreRange { index: 1, .. })
        ));
    }

    #[test]
    fn poses_parse_and_validate() {
        let text = "1 0 0 5 0 1 0 6 0 0 1 7\n\n0 -1 0 0 1 0 0 0 0 0 1 0\n";
        let poses = parse_poses(text).unwrap();
        assert_eq!(poses.len(), 2);
        assert_eq!(poses[0].apply(&[1.0, 1.0, 1.0]), [6.0, 7.0, 8.0]);
        assert_eq!(poses[1].apply(&[1.0, 0.0, 0.0]), [0.0, 1.0, 0.0]);
        assert!(poses.iter().all(|p| p.is_rigid(1e-9)));
        assert!(!Pose::from_row_major([2., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.]).is_rigid(1e-6));
        assert!(matches!(
            parse_poses("1 2 3\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert_eq!(parse_poses(&format_poses(&poses)).unwrap(), poses);
    }

    proptest! {
        #[test]
        fn labels_round_trip(words in proptest::collection::vec((0u32..65536, 0u32..65536), 0..200)) {
            let (semantic, instance): (Vec<u32>, Vec<u32>) = words.into_iter().unzip();
            let l = LabelMap::new(semantic, instance, LabelSpace::Raw).unwrap();
            let bytes = encode_labels(&l).unwrap();
            prop_assert_eq!(decode_labels(&bytes, l.len()).unwrap(), l);
        }

        #[test]
        fn cloud_round_trip(pts in proptest::collection::vec(
            (-1e4f32..1e4, -1e4f32..1e4, -1e4f32..1e4, 0f32..1.0), 0..100)) {
            let bytes: Vec<u8> = pts.iter().flat_map(|&(x, y, z, i)| record(x, y, z, i)).collect();
            let cloud = decode_point_cloud(&bytes).unwrap();
            prop_assert_eq!(encode_point_cloud(&cloud).unwrap(), bytes);
        }
    }
}
