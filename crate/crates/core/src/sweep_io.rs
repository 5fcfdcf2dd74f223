//! Sweep ingestion: KITTI velodyne binaries and a generic CSV layout, beam
//! segmentation, and the range gate.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

const KITTI_RECORD: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    pub position: Point3,
    pub intensity: f64,
    pub ring: Option<u32>,
}

impl RawPoint {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self {
            position: Point3::new(x, y, z),
            intensity,
            ring: None,
        }
    }

    pub fn with_ring(mut self, ring: u32) -> Self {
        self.ring = Some(ring);
        self
    }

    #[inline]
    pub fn range(&self) -> f64 {
        self.position.norm()
    }

    /// Elevation angle in radians, `atan2(z, hypot(x, y))`.
    #[inline]
    pub fn elevation(&self) -> f64 {
        let p = &self.position;
        p.z.atan2(p.x.hypot(p.y))
    }

    #[inline]
    pub fn azimuth(&self) -> f64 {
        self.position.y.atan2(self.position.x)
    }
}

/// Points from a single beam, in acquisition (azimuth) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub beam: u32,
    pub points: Vec<RawPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub index: usize,
    pub timestamp: f64,
    /// Scans sorted by ascending beam index.
    pub scans: Vec<Scan>,
    /// Points that could not be assigned to any beam.
    pub dropped: usize,
}

impl Sweep {
    pub fn empty(index: usize, timestamp: f64) -> Self {
        Self {
            index,
            timestamp,
            scans: Vec::new(),
            dropped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.scans.iter().map(|s| s.points.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> impl Iterator<Item = &RawPoint> {
        self.scans.iter().flat_map(|s| s.points.iter())
    }
}

/// How points are assigned to beams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BeamModel {
    /// Use each point's `ring` field; points without one are dropped.
    RingField,
    /// `beams` equal elevation bins covering `[min_deg, max_deg]`; beam 0 is
    /// the lowest.
    Uniform {
        beams: u32,
        min_deg: f64,
        max_deg: f64,
    },
}

impl BeamModel {
    /// Velodyne HDL-64E layout used by KITTI.
    pub fn hdl64() -> Self {
        BeamModel::Uniform {
            beams: 64,
            min_deg: -24.8,
            max_deg: 2.0,
        }
    }

    /// Beam index for a point, if any bin contains it. The ring field wins
    /// whenever present.
    pub fn beam_of(&self, p: &RawPoint) -> Option<u32> {
        if let Some(r) = p.ring {
            return Some(r);
        }
        match *self {
            BeamModel::RingField => None,
            BeamModel::Uniform {
                beams,
                min_deg,
                max_deg,
            } => {
                let e = p.elevation().to_degrees();
                if !(e >= min_deg && e <= max_deg) {
                    return None;
                }
                let width = (max_deg - min_deg) / beams as f64;
                let b = ((e - min_deg) / width).floor() as i64;
                Some(b.clamp(0, beams as i64 - 1) as u32)
            }
        }
    }

    /// Elevation of the centre of bin `beam`, in degrees.
    pub fn bin_center_deg(&self, beam: u32) -> Option<f64> {
        match *self {
            BeamModel::RingField => None,
            BeamModel::Uniform {
                beams,
                min_deg,
                max_deg,
            } => {
                let width = (max_deg - min_deg) / beams as f64;
                Some(min_deg + (beam as f64 + 0.5) * width)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub beam_count: u32,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Use the ring column when the input provides one.
    pub use_ring_field: bool,
    /// Re-sort each scan by azimuth instead of keeping file order.
    pub sort_by_azimuth: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            r_min: 3.0,
            r_max: 75.0,
            beam_count: 64,
            elevation_min_deg: -24.8,
            elevation_max_deg: 2.0,
            use_ring_field: true,
            sort_by_azimuth: false,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_min >= 0.0 && self.r_min < self.r_max) {
            return Err(Error::InvalidInterval {
                r_min: self.r_min,
                r_max: self.r_max,
            });
        }
        if self.beam_count == 0 || !(self.elevation_min_deg < self.elevation_max_deg) {
            return Err(Error::Config(
                "beam model needs beams > 0 and min < max elevation".into(),
            ));
        }
        Ok(())
    }

    pub fn beam_model(&self) -> BeamModel {
        BeamModel::Uniform {
            beams: self.beam_count,
            min_deg: self.elevation_min_deg,
            max_deg: self.elevation_max_deg,
        }
    }
}

/// Decodes a KITTI velodyne scan: little-endian `f32` quadruples
/// `(x, y, z, intensity)`.
pub fn read_kitti_bin(path: &Path) -> Result<Vec<RawPoint>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_kitti(&bytes).ok_or(Error::MalformedLength {
        path: path.to_path_buf(),
        len: bytes.len() as u64,
    })
}

pub fn decode_kitti(bytes: &[u8]) -> Option<Vec<RawPoint>> {
    if !bytes.len().is_multiple_of(KITTI_RECORD) {
        return None;
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    Some(
        bytes
            .chunks_exact(KITTI_RECORD)
            .map(|r| RawPoint::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12]), f(&r[12..16])))
            .collect(),
    )
}

pub fn encode_kitti(points: &[RawPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * KITTI_RECORD);
    for p in points {
        for v in [p.position.x, p.position.y, p.position.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_kitti_bin(path: &Path, points: &[RawPoint]) -> Result<()> {
    fs::write(path, encode_kitti(points)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    x: f64,
    y: f64,
    z: f64,
    intensity: f64,
    #[serde(default)]
    ring: Option<u32>,
}

/// Reads `x,y,z,intensity[,ring]` rows with a header line.
pub fn read_csv_points(path: &Path) -> Result<Vec<RawPoint>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    rdr.deserialize::<CsvRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            Ok(RawPoint {
                position: Point3::new(row.x, row.y, row.z),
                intensity: row.intensity,
                ring: row.ring,
            })
        })
        .collect()
}

pub fn write_csv_points(path: &Path, points: &[RawPoint]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let with_ring = points.iter().any(|p| p.ring.is_some());
    let header = if with_ring {
        "x,y,z,intensity,ring"
    } else {
        "x,y,z,intensity"
    };
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for p in points {
        let v = &p.position;
        match (with_ring, p.ring) {
            (true, Some(r)) => writeln!(w, "{},{},{},{},{}", v.x, v.y, v.z, p.intensity, r),
            (true, None) => writeln!(w, "{},{},{},{},", v.x, v.y, v.z, p.intensity),
            _ => writeln!(w, "{},{},{},{}", v.x, v.y, v.z, p.intensity),
        }
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Groups points into per-beam scans. Points outside every bin are counted
/// in [`Sweep::dropped`].
pub fn split_scans(points: &[RawPoint], beam_model: &BeamModel) -> Sweep {
    split_scans_with(points, beam_model, false)
}

pub fn split_scans_with(
    points: &[RawPoint],
    beam_model: &BeamModel,
    sort_by_azimuth: bool,
) -> Sweep {
    let mut by_beam: std::collections::BTreeMap<u32, Vec<RawPoint>> = Default::default();
    let mut dropped = 0;
    for p in points {
        match beam_model.beam_of(p) {
            Some(b) => by_beam.entry(b).or_default().push(*p),
            None => dropped += 1,
        }
    }
    let scans = by_beam
        .into_iter()
        .map(|(beam, mut points)| {
            if sort_by_azimuth {
                points.sort_by(|a, b| a.azimuth().total_cmp(&b.azimuth()));
            }
            Scan { beam, points }
        })
        .collect();
    Sweep {
        index: 0,
        timestamp: 0.0,
        scans,
        dropped,
    }
}

/// Keeps exactly the points with `r_min ≤ ‖p‖ ≤ r_max`, preserving order.
/// Scans left empty are removed.
pub fn range_filter(sweep: &Sweep, r_min: f64, r_max: f64) -> Result<Sweep> {
    if !(r_min >= 0.0 && r_min < r_max) {
        return Err(Error::InvalidInterval { r_min, r_max });
    }
    let scans = sweep
        .scans
        .iter()
        .filter_map(|s| {
            let points: Vec<RawPoint> = s
                .points
                .iter()
                .filter(|p| {
                    let r = p.range();
                    r >= r_min && r <= r_max
                })
                .copied()
                .collect();
            (!points.is_empty()).then_some(Scan {
                beam: s.beam,
                points,
            })
        })
        .collect();
    Ok(Sweep {
        index: sweep.index,
        timestamp: sweep.timestamp,
        scans,
        dropped: sweep.dropped,
    })
}

/// Full ingest of one raw point list: beam split then range gate.
pub fn prepare_sweep(
    points: &[RawPoint],
    cfg: &SweepConfig,
    index: usize,
    timestamp: f64,
) -> Result<Sweep> {
    let model =
        if cfg.use_ring_field && points.iter().all(|p| p.ring.is_some()) && !points.is_empty() {
            BeamModel::RingField
        } else {
            cfg.beam_model()
        };
    let mut sweep = split_scans_with(points, &model, cfg.sort_by_azimuth);
    sweep.index = index;
    sweep.timestamp = timestamp;
    range_filter(&sweep, cfg.r_min, cfg.r_max)
}

/// Input format of a dataset directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// `velodyne/NNNNNN.bin`
    Kitti,
    /// `csv/NNNNNN.csv`
    Csv,
}

/// Sorted list of sweep files of a dataset directory plus optional
/// `times.txt` timestamps.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub format: DatasetFormat,
    pub files: Vec<PathBuf>,
    pub timestamps: Option<Vec<f64>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let (format, dir, ext) = if root.join("velodyne").is_dir() {
            (DatasetFormat::Kitti, root.join("velodyne"), "bin")
        } else if root.join("csv").is_dir() {
            (DatasetFormat::Csv, root.join("csv"), "csv")
        } else {
            return Err(Error::Parse(format!(
                "{}: expected a velodyne/ or csv/ subdirectory",
                root.display()
            )));
        };
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == ext))
            .collect();
        files.sort();

        let times_path = root.join("times.txt");
        let timestamps = if times_path.is_file() {
            let text = fs::read_to_string(&times_path).map_err(|e| Error::io(&times_path, e))?;
            let ts = text
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("times.txt: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(ts)
        } else {
            None
        };
        Ok(Self {
            format,
            files,
            timestamps,
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn timestamp(&self, i: usize, period: f64) -> f64 {
        self.timestamps
            .as_ref()
            .and_then(|t| t.get(i).copied())
            .unwrap_or(i as f64 * period)
    }

    pub fn read_points(&self, i: usize) -> Result<Vec<RawPoint>> {
        match self.format {
            DatasetFormat::Kitti => read_kitti_bin(&self.files[i]),
            DatasetFormat::Csv => read_csv_points(&self.files[i]),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn kitti_empty_and_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.bin");
        fs::write(&empty, []).unwrap();
        assert!(read_kitti_bin(&empty).unwrap().is_empty());

        let one = dir.path().join("one.bin");
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        // 1.0f32 = 0x3F800000, little-endian.
        assert_eq!(&bytes[0..4], &[0x00, 0x00, 0x80, 0x3F]);
        fs::write(&one, &bytes).unwrap();
        let pts = read_kitti_bin(&one).unwrap();
        assert_eq!(pts, vec![RawPoint::new(1.0, 2.0, 3.0, 0.5)]);
    }

    #[test]
    fn kitti_malformed_length() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.bin");
        fs::write(&bad, [0u8; 17]).unwrap();
        assert!(matches!(
            read_kitti_bin(&bad),
            Err(Error::MalformedLength { len: 17, .. })
        ));
        assert!(matches!(
            read_kitti_bin(&dir.path().join("missing.bin")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn csv_roundtrip_with_rings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let pts = vec![
            RawPoint::new(1.5, -2.0, 0.25, 0.1).with_ring(3),
            RawPoint::new(10.0, 0.0, -1.0, 0.9).with_ring(7),
        ];
        write_csv_points(&path, &pts).unwrap();
        assert_eq!(read_csv_points(&path).unwrap(), pts);

        let plain = dir.path().join("p.csv");
        fs::write(&plain, "x,y,z,intensity\n1.0,2.0,3.0,0.5\n").unwrap();
        assert_eq!(
            read_csv_points(&plain).unwrap(),
            vec![RawPoint::new(1.0, 2.0, 3.0, 0.5)]
        );
    }

    #[test]
    fn split_uses_ring_field() {
        let pts: Vec<RawPoint> = (0..5)
            .map(|i| RawPoint::new(10.0, i as f64, 50.0, 0.0).with_ring(4))
            .collect();
        let sweep = split_scans(&pts, &BeamModel::hdl64());
        assert_eq!(sweep.scans.len(), 1);
        assert_eq!(sweep.scans[0].beam, 4);
        assert_eq!(sweep.scans[0].points.len(), 5);
        assert_eq!(sweep.dropped, 0);
    }

    #[test]
    fn split_mid_bin_elevation() {
        let width: f64 = (2.0 - (-24.8)) / 64.0;
        let mid10 = -24.8 + 10.5 * width;
        let e = mid10.to_radians();
        let p = RawPoint::new(20.0 * e.cos(), 0.0, 20.0 * e.sin(), 0.0);
        let sweep = split_scans(&[p], &BeamModel::hdl64());
        assert_eq!(sweep.scans.len(), 1);
        assert_eq!(sweep.scans[0].beam, 10);
        assert!((BeamModel::hdl64().bin_center_deg(10).unwrap() - mid10).abs() < 1e-12);
    }

    #[test]
    fn split_drops_points_outside_bins() {
        let p = RawPoint::new(0.1, 0.1, 10.0, 0.0);
        let sweep = split_scans(
            &[p, RawPoint::new(10.0, 0.0, 0.0, 0.0)],
            &BeamModel::hdl64(),
        );
        assert_eq!(sweep.dropped, 1);
        assert_eq!(sweep.len(), 1);
    }

    #[test]
    fn range_filter_examples() {
        let pts = vec![
            RawPoint::new(2.9, 0.0, 0.0, 0.0).with_ring(0),
            RawPoint::new(3.0, 0.0, 0.0, 0.0).with_ring(0),
            RawPoint::new(75.0, 0.0, 0.0, 0.0).with_ring(0),
            RawPoint::new(75.01, 0.0, 0.0, 0.0).with_ring(0),
        ];
        let sweep = split_scans(&pts, &BeamModel::RingField);
        let f = range_filter(&sweep, 3.0, 75.0).unwrap();
        let xs: Vec<f64> = f.points().map(|p| p.position.x).collect();
        assert_eq!(xs, vec![3.0, 75.0]);

        let empty = Sweep::empty(0, 0.0);
        assert!(range_filter(&empty, 3.0, 75.0).unwrap().is_empty());
        assert!(matches!(
            range_filter(&empty, 5.0, 5.0),
            Err(Error::InvalidInterval { .. })
        ));
    }

    #[test]
    fn dataset_listing() {
        let dir = tempfile::tempdir().unwrap();
        let vel = dir.path().join("velodyne");
        fs::create_dir(&vel).unwrap();
        for i in [2, 0, 1] {
            write_kitti_bin(
                &vel.join(format!("{i:06}.bin")),
                &[RawPoint::new(i as f64, 0.0, 0.0, 0.0)],
            )
            .unwrap();
        }
        fs::write(dir.path().join("times.txt"), "0.0\n0.1\n0.25\n").unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.read_points(2).unwrap()[0].position.x, 2.0);
        assert_eq!(ds.timestamp(2, 0.1), 0.25);
        assert_eq!(ds.timestamp(5, 0.1), 0.5);
    }

    fn arb_points() -> impl Strategy<Value = Vec<RawPoint>> {
        prop::collection::vec(
            (-90.0f64..90.0, -90.0f64..90.0, -30.0f64..10.0, 0.0f64..1.0),
            0..200,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(x, y, z, i)| RawPoint::new(x, y, z, i))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn split_is_a_partition(points in arb_points()) {
            let sweep = split_scans(&points, &BeamModel::hdl64());
            prop_assert_eq!(sweep.len() + sweep.dropped, points.len());
        }

        #[test]
        fn range_filter_idempotent(points in arb_points()) {
            let sweep = split_scans(&points, &BeamModel::hdl64());
            let once = range_filter(&sweep, 3.0, 75.0).unwrap();
            let twice = range_filter(&once, 3.0, 75.0).unwrap();
            prop_assert!(once.points().all(|p| (3.0..=75.0).contains(&p.range())));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn kitti_encoding_roundtrips_bit_exactly(raw in prop::collection::vec(any::<[u32; 4]>(), 0..64)) {
            // Arbitrary finite f32 bit patterns.
            let bytes: Vec<u8> = raw.iter()
                .flat_map(|r| r.iter().map(|b| {
                    let f = f32::from_bits(*b);
                    if f.is_finite() { f } else { 0.0 }
                }))
                .flat_map(|f| f.to_le_bytes())
                .collect();
            let pts = decode_kitti(&bytes).unwrap();
            prop_assert_eq!(encode_kitti(&pts), bytes);
        }
    }
}
