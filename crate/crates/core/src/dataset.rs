//! Dataset manifest, binary record format, and split generation.
//!
//! A dataset directory holds `manifest.json` plus one record file per split.
//! Record files are little-endian f32 tensors with a fixed-size layout, so a
//! reader can seek straight to any record:
//!
//! ```text
//! header: magic [8]  version u32  record_count u64  h u32  w u32  m u32
//! record: input f32[h*w]  labels f32[m*3]  occupancy f32[h*w]  checksum u64
//! ```
//!
//! The checksum is FNV-1a over the record's payload bytes. The manifest fully
//! determines regeneration; its creation timestamp is informational and the
//! only field excluded from byte-determinism comparisons.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::grid::Region;
use crate::propagation::PropagationModel;
use crate::scene::{build_example, sample_scene, LabelMatrix, LabelRow};
use crate::{Error, Result};

pub const DATASET_MAGIC: [u8; 8] = *b"EMLOCDS\0";
pub const DATASET_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 8 + 4 + 8 + 4 + 4 + 4;

/// Dataset partition. The numeric id feeds the per-scene seed chain, so the
/// values are part of the format contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.bin",
            Split::Val => "val.bin",
            Split::Test => "test.bin",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

/// Everything needed to regenerate a dataset bit-for-bit, plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub preset: String,
    pub region: Region,
    pub propagation: PropagationModel,
    /// Maximum emitters per scene (label slots).
    pub m: usize,
    pub n_sensors: usize,
    pub tau_dbm: f64,
    pub train_size: u64,
    pub val_size: u64,
    pub test_size: u64,
    pub master_seed: u64,
    /// Unix seconds at generation time; informational only.
    pub created_unix: u64,
}

impl DatasetManifest {
    /// Paper-scale free-space profile: 144x144 grid over a 144 m square,
    /// 30720/2048/2048 examples, M=3, 10 sensors.
    pub fn paper_freespace(master_seed: u64) -> Self {
        let region = Region::square(144.0, 144).expect("static region");
        DatasetManifest {
            format_version: DATASET_VERSION,
            preset: "paper-freespace".to_string(),
            propagation: PropagationModel::freespace(2.1e9, region.half_cell_diagonal())
                .expect("static model"),
            region,
            m: 3,
            n_sensors: 10,
            tau_dbm: -45.0,
            train_size: 30_720,
            val_size: 2_048,
            test_size: 2_048,
            master_seed,
            created_unix: 0,
        }
    }

    /// Desk-scale free-space profile: 72x72 grid over the same 144 m square
    /// (2 m cells), 8192/1024/1024 examples. Sized so a full three-method
    /// sweep finishes in hours on one CPU core.
    pub fn desk_freespace(master_seed: u64) -> Self {
        let region = Region::square(144.0, 72).expect("static region");
        DatasetManifest {
            format_version: DATASET_VERSION,
            preset: "desk-freespace".to_string(),
            propagation: PropagationModel::freespace(2.1e9, region.half_cell_diagonal())
                .expect("static model"),
            region,
            m: 3,
            n_sensors: 10,
            tau_dbm: -45.0,
            train_size: 8_192,
            val_size: 1_024,
            test_size: 1_024,
            master_seed,
            created_unix: 0,
        }
    }

    pub fn preset(name: &str, master_seed: u64) -> Result<Self> {
        match name {
            "paper-freespace" => Ok(Self::paper_freespace(master_seed)),
            "desk-freespace" => Ok(Self::desk_freespace(master_seed)),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected paper-freespace or desk-freespace"
            ))),
        }
    }

    /// Replace the region (and the propagation min-distance clamp tied to
    /// its cell size), keeping everything else.
    pub fn with_region(mut self, region: Region) -> Self {
        self.region = region;
        self.propagation.min_distance_m = region.half_cell_diagonal();
        self
    }

    pub fn split_size(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
            Split::Test => self.test_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != DATASET_VERSION {
            return Err(Error::DatasetVersion {
                found: self.format_version,
                expected: DATASET_VERSION,
            });
        }
        self.propagation.validate()?;
        if self.m == 0 || self.m > 16 {
            return Err(Error::Config(format!("m must be in 1..=16, got {}", self.m)));
        }
        if self.n_sensors == 0 || self.n_sensors > self.region.n_cells() {
            return Err(Error::Config(format!(
                "n_sensors must be in 1..={} for a {}x{} grid, got {}",
                self.region.n_cells(),
                self.region.grid_h,
                self.region.grid_w,
                self.n_sensors
            )));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Config("all split sizes must be nonzero".to_string()));
        }
        if !self.tau_dbm.is_finite() {
            return Err(Error::Config(format!("tau must be finite, got {}", self.tau_dbm)));
        }
        Ok(())
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let file = File::create(Self::manifest_path(dir))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| Error::Parse { what: "manifest".to_string(), detail: e.to_string() })?;
        Ok(())
    }

    /// Manifest-only read: split sizes and settings without touching records.
    pub fn read(dir: &Path) -> Result<Self> {
        let file = File::open(Self::manifest_path(dir))?;
        let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Parse { what: "manifest".to_string(), detail: e.to_string() })?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// One deserialized record.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Transformed input map, h*w row-major.
    pub input: Vec<f32>,
    pub labels: LabelMatrix,
    /// Ground-truth occupancy, h*w row-major, values 0.0 or 1.0.
    pub occupancy: Vec<f32>,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn record_payload_bytes(h: usize, w: usize, m: usize) -> u64 {
    ((h * w + m * 3 + h * w) * 4) as u64
}

fn encode_record(example: &Example, buf: &mut Vec<u8>) {
    buf.clear();
    for v in &example.input {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for row in &example.labels.rows {
        buf.extend_from_slice(&(row.b as f32).to_le_bytes());
        buf.extend_from_slice(&(row.u as f32).to_le_bytes());
        buf.extend_from_slice(&(row.v as f32).to_le_bytes());
    }
    for v in &example.occupancy {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = fnv1a(buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
}

fn decode_record(payload: &[u8], h: usize, w: usize, m: usize, index: u64) -> Result<Example> {
    let body = &payload[..payload.len() - 8];
    let stored = u64::from_le_bytes(payload[payload.len() - 8..].try_into().unwrap());
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::DatasetChecksum { index, stored, computed });
    }
    let mut floats = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let input: Vec<f32> = floats.by_ref().take(h * w).collect();
    let rows: Vec<LabelRow> = (0..m)
        .map(|_| {
            let b = floats.next().unwrap();
            let u = floats.next().unwrap();
            let v = floats.next().unwrap();
            LabelRow { b: b as u8, u: u as i64, v: v as i64 }
        })
        .collect();
    let occupancy: Vec<f32> = floats.take(h * w).collect();
    Ok(Example { input, labels: LabelMatrix { rows }, occupancy })
}

/// Streaming writer for one split file.
struct SplitWriter {
    out: BufWriter<File>,
    buf: Vec<u8>,
    written: u64,
    expected: u64,
}

impl SplitWriter {
    fn create(path: &Path, count: u64, h: usize, w: usize, m: usize) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&DATASET_MAGIC)?;
        out.write_all(&DATASET_VERSION.to_le_bytes())?;
        out.write_all(&count.to_le_bytes())?;
        out.write_all(&(h as u32).to_le_bytes())?;
        out.write_all(&(w as u32).to_le_bytes())?;
        out.write_all(&(m as u32).to_le_bytes())?;
        Ok(SplitWriter { out, buf: Vec::new(), written: 0, expected: count })
    }

    fn push(&mut self, example: &Example) -> Result<()> {
        encode_record(example, &mut self.buf);
        self.out.write_all(&self.buf)?;
        self.written += 1;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        debug_assert_eq!(self.written, self.expected);
        self.out.flush()?;
        Ok(())
    }
}

/// Random-access reader over one split file. Checksums are verified on every
/// record read.
pub struct SplitReader {
    file: File,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    len: u64,
    record_bytes: u64,
}

impl SplitReader {
    pub fn open(dir: &Path, split: Split) -> Result<Self> {
        let path = dir.join(split.file_name());
        let mut file = File::open(&path)?;
        let mut header = [0u8; HEADER_BYTES as usize];
        file.read_exact(&mut header).map_err(|_| Error::DatasetTruncated {
            context: format!("{} header", path.display()),
        })?;
        if header[..8] != DATASET_MAGIC {
            return Err(Error::DatasetMagic { found: header[..8].try_into().unwrap() });
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::DatasetVersion { found: version, expected: DATASET_VERSION });
        }
        let len = u64::from_le_bytes(header[12..20].try_into().unwrap());
        let h = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(header[24..28].try_into().unwrap()) as usize;
        let m = u32::from_le_bytes(header[28..32].try_into().unwrap()) as usize;
        if h == 0 || w == 0 || m == 0 {
            return Err(Error::DatasetTruncated {
                context: format!("{}: degenerate header {h}x{w}, m={m}", path.display()),
            });
        }
        let record_bytes = record_payload_bytes(h, w, m) + 8;
        let expect = HEADER_BYTES + len * record_bytes;
        let actual = file.metadata()?.len();
        if actual != expect {
            return Err(Error::DatasetTruncated {
                context: format!(
                    "{}: {actual} bytes on disk, header implies {expect}",
                    path.display()
                ),
            });
        }
        Ok(SplitReader { file, h, w, m, len, record_bytes })
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&mut self, index: u64) -> Result<Example> {
        if index >= self.len {
            return Err(Error::DatasetTruncated {
                context: format!("record {index} out of {}", self.len),
            });
        }
        self.file.seek(SeekFrom::Start(HEADER_BYTES + index * self.record_bytes))?;
        let mut payload = vec![0u8; self.record_bytes as usize];
        self.file.read_exact(&mut payload).map_err(|_| Error::DatasetTruncated {
            context: format!("record {index}"),
        })?;
        decode_record(&payload, self.h, self.w, self.m, index)
    }

    /// Read a batch of records by index, in the given order.
    pub fn get_many(&mut self, indices: &[u64]) -> Result<Vec<Example>> {
        indices.iter().map(|&i| self.get(i)).collect()
    }

    pub fn read_all(&mut self) -> Result<Vec<Example>> {
        (0..self.len).map(|i| self.get(i)).collect()
    }
}

/// Summary of a generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dir: PathBuf,
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

/// Generate all three splits plus the manifest into `dir` (created if
/// needed). Records are written in index order, one at a time.
pub fn generate(manifest: &DatasetManifest, dir: &Path) -> Result<DatasetSummary> {
    manifest.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut stamped = manifest.clone();
    stamped.created_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    stamped.write(dir)?;
    let region = manifest.region;
    for split in Split::ALL {
        let count = manifest.split_size(split);
        let mut writer = SplitWriter::create(
            &dir.join(split.file_name()),
            count,
            region.grid_h,
            region.grid_w,
            manifest.m,
        )?;
        for index in 0..count {
            let scene = sample_scene(manifest, split, index)?;
            let (input, labels, occupancy) = build_example(&scene, manifest)?;
            let example = Example {
                input: input.as_f32(),
                labels,
                occupancy: occupancy.values.iter().map(|&v| v as f32).collect(),
            };
            writer.push(&example)?;
        }
        writer.finish()?;
    }
    Ok(DatasetSummary {
        dir: dir.to_path_buf(),
        train: manifest.train_size,
        val: manifest.val_size,
        test: manifest.test_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest() -> DatasetManifest {
        let mut m = DatasetManifest::desk_freespace(7)
            .with_region(Region::square(32.0, 16).unwrap());
        m.train_size = 8;
        m.val_size = 4;
        m.test_size = 4;
        m
    }

    #[test]
    fn round_trip_is_elementwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest();
        let summary = generate(&manifest, dir.path()).unwrap();
        assert_eq!((summary.train, summary.val, summary.test), (8, 4, 4));

        let mut reader = SplitReader::open(dir.path(), Split::Train).unwrap();
        assert_eq!(reader.len(), 8);
        assert_eq!((reader.h, reader.w, reader.m), (16, 16, 3));
        let all = reader.read_all().unwrap();
        for (index, example) in all.iter().enumerate() {
            let scene = sample_scene(&manifest, Split::Train, index as u64).unwrap();
            let (input, labels, occupancy) = build_example(&scene, &manifest).unwrap();
            assert_eq!(example.input, input.as_f32());
            assert_eq!(example.labels, labels);
            let occ: Vec<f32> = occupancy.values.iter().map(|&v| v as f32).collect();
            assert_eq!(example.occupancy, occ);
        }
        // Random access agrees with sequential order.
        assert_eq!(reader.get(5).unwrap(), all[5]);
        assert_eq!(reader.get(0).unwrap(), all[0]);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let manifest = tiny_manifest();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate(&manifest, dir_a.path()).unwrap();
        generate(&manifest, dir_b.path()).unwrap();
        for split in Split::ALL {
            let a = std::fs::read(dir_a.path().join(split.file_name())).unwrap();
            let b = std::fs::read(dir_b.path().join(split.file_name())).unwrap();
            assert_eq!(a, b, "split {split} bytes differ");
        }
    }

    #[test]
    fn manifest_round_trips_and_reads_alone() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest();
        generate(&manifest, dir.path()).unwrap();
        let loaded = DatasetManifest::read(dir.path()).unwrap();
        assert_eq!(loaded.train_size, 8);
        assert_eq!(loaded.region, manifest.region);
        assert_eq!(loaded.master_seed, manifest.master_seed);
        // Only the stamp may differ from the in-memory manifest.
        let mut unstamped = loaded.clone();
        unstamped.created_unix = manifest.created_unix;
        assert_eq!(unstamped, manifest);
    }

    #[test]
    fn corrupted_payload_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest();
        generate(&manifest, dir.path()).unwrap();
        let path = dir.path().join(Split::Val.file_name());
        let mut bytes = std::fs::read(&path).unwrap();
        let record_bytes = record_payload_bytes(16, 16, 3) + 8;
        // Flip one byte inside record 2's payload.
        let offset = HEADER_BYTES as usize + 2 * record_bytes as usize + 17;
        bytes[offset] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();

        let mut reader = SplitReader::open(dir.path(), Split::Val).unwrap();
        assert!(reader.get(1).is_ok());
        match reader.get(2) {
            Err(Error::DatasetChecksum { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_version_and_truncation_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest();
        generate(&manifest, dir.path()).unwrap();
        let path = dir.path().join(Split::Test.file_name());
        let original = std::fs::read(&path).unwrap();

        let mut magic = original.clone();
        magic[0] = b'X';
        std::fs::write(&path, &magic).unwrap();
        assert!(matches!(
            SplitReader::open(dir.path(), Split::Test),
            Err(Error::DatasetMagic { .. })
        ));

        let mut version = original.clone();
        version[8..12].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &version).unwrap();
        assert!(matches!(
            SplitReader::open(dir.path(), Split::Test),
            Err(Error::DatasetVersion { found: 99, .. })
        ));

        let truncated = &original[..original.len() - 5];
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(
            SplitReader::open(dir.path(), Split::Test),
            Err(Error::DatasetTruncated { .. })
        ));
    }

    #[test]
    fn preset_lookup() {
        assert!(DatasetManifest::preset("desk-freespace", 1).is_ok());
        assert!(DatasetManifest::preset("paper-freespace", 1).is_ok());
        assert!(matches!(
            DatasetManifest::preset("underwater", 1),
            Err(Error::Config(_))
        ));
        let paper = DatasetManifest::paper_freespace(5);
        assert_eq!((paper.region.grid_h, paper.train_size), (144, 30_720));
        let desk = DatasetManifest::desk_freespace(5);
        assert_eq!((desk.region.grid_h, desk.train_size), (72, 8_192));
        assert_eq!(desk.m, 3);
        assert_eq!(desk.n_sensors, 10);
    }
}
