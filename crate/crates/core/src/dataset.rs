//! PMDS dataset container and the PMDP prediction container.
//!
//! Both are little-endian and versioned:
//!
//! ```text
//! magic[4] "PMDS" | "PMDP"
//! version u16
//! grid block: 9 x f64 (x0 x1 y0 y1 z0 z1 xy_res z_res dt) + u32 input_frames + u32 output_steps
//! record count u32
//! records: tag[4] + u64 payload length + payload
//! ```
//!
//! A PMDS record (`SEQR`) holds `u32 frame count`, then per frame `u32 n` followed
//! by `n` f32 triples, then five tensors: motion (f32), category (u8), state (u8),
//! instance id (i32), valid (u8). A PMDP record (`PRED`) holds motion (f32),
//! category logits (f32) and state logits (f32). Each tensor is written as
//! `u8 dtype | u8 rank | rank x u32 dims | data`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, PointSequence, SceneLabels, NUM_CATEGORIES};

pub const DATASET_MAGIC: &[u8; 4] = b"PMDS";
pub const PREDICTION_MAGIC: &[u8; 4] = b"PMDP";
pub const FORMAT_VERSION: u16 = 1;

const SEQUENCE_TAG: &[u8; 4] = b"SEQR";
const PREDICTION_TAG: &[u8; 4] = b"PRED";

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;
const DTYPE_I32: u8 = 2;

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub points: PointSequence,
    pub labels: SceneLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GridSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(spec: GridSpec) -> Self {
        Self { spec, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Model outputs for one sequence, as stored in a PMDP file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    /// `T x H x W x 2`.
    pub motion: Vec<f32>,
    /// `H x W x N_C`.
    pub category_logits: Vec<f32>,
    /// `H x W`.
    pub state_logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub spec: GridSpec,
    pub records: Vec<PredictionRecord>,
}

struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn header(&mut self, magic: &[u8; 4], spec: &GridSpec, count: usize) {
        self.buf.extend_from_slice(magic);
        self.u16(FORMAT_VERSION);
        for v in spec.x_range().into_iter().chain(spec.y_range()).chain(spec.z_range()) {
            self.f64(v);
        }
        self.f64(spec.xy_resolution());
        self.f64(spec.z_resolution());
        self.f64(spec.frame_interval());
        self.u32(spec.input_frames() as u32);
        self.u32(spec.output_steps() as u32);
        self.u32(count as u32);
    }

    fn tensor_header(&mut self, dtype: u8, dims: &[usize]) {
        self.u8(dtype);
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u32(d as u32);
        }
    }

    fn tensor_f32(&mut self, dims: &[usize], data: &[f32]) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.tensor_header(DTYPE_F32, dims);
        self.f32s(data);
    }

    fn tensor_u8(&mut self, dims: &[usize], data: &[u8]) {
        self.tensor_header(DTYPE_U8, dims);
        self.buf.extend_from_slice(data);
    }

    fn tensor_i32(&mut self, dims: &[usize], data: &[i32]) {
        self.tensor_header(DTYPE_I32, dims);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Appends a tagged record whose payload is produced by `body`.
    fn record(&mut self, tag: &[u8; 4], body: impl FnOnce(&mut Encoder)) {
        let mut inner = Encoder::new();
        body(&mut inner);
        self.buf.extend_from_slice(tag);
        self.u64(inner.buf.len() as u64);
        self.buf.extend_from_slice(&inner.buf);
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Decoder<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt { path: self.path.to_path_buf(), reason: reason.into() }
    }

    fn format(&self, reason: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.corrupt(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(GridSpec, usize)> {
        let got = self.take(4).map_err(|_| self.format("file shorter than magic"))?;
        if got != magic {
            return Err(self.format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(self.format(format!("unsupported version {version}")));
        }
        let mut v = [0.0f64; 9];
        for slot in &mut v {
            *slot = self.f64()?;
        }
        let input_frames = self.u32()? as usize;
        let output_steps = self.u32()? as usize;
        let spec = GridSpec::new(
            [v[0], v[1]],
            [v[2], v[3]],
            [v[4], v[5]],
            v[6],
            v[7],
            v[8],
            input_frames,
            output_steps,
        )
        .map_err(|e| self.format(format!("invalid grid block: {e}")))?;
        let count = self.u32()? as usize;
        Ok((spec, count))
    }

    fn tensor_header(&mut self, dtype: u8, expected: &[usize]) -> Result<usize> {
        let got_dtype = self.u8()?;
        if got_dtype != dtype {
            return Err(self.format(format!("tensor dtype {got_dtype}, expected {dtype}")));
        }
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        if dims != expected {
            return Err(self.format(format!("tensor shape {dims:?}, expected {expected:?}")));
        }
        Ok(dims.iter().product())
    }

    fn tensor_f32(&mut self, expected: &[usize]) -> Result<Vec<f32>> {
        let n = self.tensor_header(DTYPE_F32, expected)?;
        self.f32s(n)
    }

    fn tensor_u8(&mut self, expected: &[usize]) -> Result<Vec<u8>> {
        let n = self.tensor_header(DTYPE_U8, expected)?;
        Ok(self.take(n)?.to_vec())
    }

    fn tensor_i32(&mut self, expected: &[usize]) -> Result<Vec<i32>> {
        let n = self.tensor_header(DTYPE_I32, expected)?;
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    /// Reads a record frame and returns a decoder positioned over its payload.
    fn record(&mut self, tag: &[u8; 4]) -> Result<Decoder<'a>> {
        let got = self.take(4)?;
        if got != tag {
            return Err(self.corrupt(format!("unexpected record tag {:?}", String::from_utf8_lossy(got))));
        }
        let len = usize::try_from(self.u64()?).map_err(|_| self.corrupt("record too large"))?;
        let payload = self.take(len)?;
        Ok(Decoder { bytes: payload, pos: 0, path: self.path })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Writes via a sibling temporary file and a rename, so readers never observe
/// a partially written file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = PathBuf::from(path);
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    tmp.set_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let spec = &ds.spec;
    let (t, h, w) = (spec.output_steps(), spec.height(), spec.width());
    let mut enc = Encoder::new();
    enc.header(DATASET_MAGIC, spec, ds.samples.len());
    for (idx, s) in ds.samples.iter().enumerate() {
        s.points.validate(spec)?;
        let l = &s.labels;
        if (l.steps(), l.height(), l.width()) != (t, h, w) {
            return Err(Error::shape(format!("sample {idx} labels do not match the grid spec")));
        }
        enc.record(SEQUENCE_TAG, |e| {
            e.u32(s.points.frames.len() as u32);
            for frame in &s.points.frames {
                e.u32(frame.len() as u32);
                for p in frame {
                    e.f32s(p);
                }
            }
            e.tensor_f32(&[t, h, w, 2], &l.motion);
            e.tensor_u8(&[h, w], &l.category);
            e.tensor_u8(&[h, w], &l.state);
            e.tensor_i32(&[h, w], &l.instance_id);
            e.tensor_u8(&[h, w], &l.valid);
        });
    }
    Ok(enc.buf)
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut dec = Decoder { bytes, pos: 0, path };
    let (spec, count) = dec.header(DATASET_MAGIC)?;
    let (t, h, w) = (spec.output_steps(), spec.height(), spec.width());
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut rec = dec.record(SEQUENCE_TAG)?;
        let n_frames = rec.u32()? as usize;
        if n_frames != spec.input_frames() {
            return Err(rec.format(format!("record has {n_frames} frames")));
        }
        let mut frames = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let n = rec.u32()? as usize;
            let flat = rec.f32s(n.checked_mul(3).ok_or_else(|| rec.corrupt("length overflow"))?)?;
            frames.push(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
        }
        let motion = rec.tensor_f32(&[t, h, w, 2])?;
        let category = rec.tensor_u8(&[h, w])?;
        let state = rec.tensor_u8(&[h, w])?;
        let instance_id = rec.tensor_i32(&[h, w])?;
        let valid = rec.tensor_u8(&[h, w])?;
        rec.finish()?;
        if category.iter().any(|&c| c as usize >= NUM_CATEGORIES) {
            return Err(rec.corrupt("category index out of range"));
        }
        let labels = SceneLabels::from_parts(t, h, w, motion, category, state, instance_id, valid)?;
        samples.push(Sample { points: PointSequence::new(frames), labels });
    }
    dec.finish()?;
    Ok(Dataset { spec, samples })
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_atomic(path.as_ref(), &encode_dataset(ds)?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_dataset(&bytes, path)
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &PredictionFile) -> Result<()> {
    let spec = &preds.spec;
    let (t, h, w) = (spec.output_steps(), spec.height(), spec.width());
    let mut enc = Encoder::new();
    enc.header(PREDICTION_MAGIC, spec, preds.records.len());
    for r in &preds.records {
        if r.motion.len() != t * h * w * 2
            || r.category_logits.len() != h * w * NUM_CATEGORIES
            || r.state_logits.len() != h * w
        {
            return Err(Error::shape("prediction record does not match the grid spec"));
        }
        enc.record(PREDICTION_TAG, |e| {
            e.tensor_f32(&[t, h, w, 2], &r.motion);
            e.tensor_f32(&[h, w, NUM_CATEGORIES], &r.category_logits);
            e.tensor_f32(&[h, w], &r.state_logits);
        });
    }
    write_atomic(path.as_ref(), &enc.buf)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionFile> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut dec = Decoder { bytes: &bytes, pos: 0, path };
    let (spec, count) = dec.header(PREDICTION_MAGIC)?;
    let (t, h, w) = (spec.output_steps(), spec.height(), spec.width());
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut rec = dec.record(PREDICTION_TAG)?;
        let motion = rec.tensor_f32(&[t, h, w, 2])?;
        let category_logits = rec.tensor_f32(&[h, w, NUM_CATEGORIES])?;
        let state_logits = rec.tensor_f32(&[h, w])?;
        rec.finish()?;
        records.push(PredictionRecord { motion, category_logits, state_logits });
    }
    dec.finish()?;
    Ok(PredictionFile { spec, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        let spec = GridSpec::new([-2.0, 2.0], [-2.0, 2.0], [-1.0, 1.0], 0.5, 0.5, 0.2, 2, 3).unwrap();
        let mut labels = SceneLabels::empty(3, 8, 8);
        labels.valid[9] = 1;
        labels.category[9] = 2;
        labels.instance_id[9] = 4;
        labels.motion[18] = 0.25;
        let points = PointSequence::new(vec![vec![[0.1, 0.2, 0.3]], vec![[1.0, -1.0, 0.0], [0.5, 0.5, 0.5]]]);
        Dataset { spec, samples: vec![Sample { points, labels }] }
    }

    #[test]
    fn round_trip_in_memory() {
        let ds = tiny_dataset();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(&bytes[..4], b"PMDS");
        assert_eq!(decode_dataset(&bytes, Path::new("mem")).unwrap(), ds);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = encode_dataset(&tiny_dataset()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes, Path::new("mem")), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_version_is_a_format_error() {
        let mut bytes = encode_dataset(&tiny_dataset()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_dataset(&bytes, Path::new("mem")), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = encode_dataset(&tiny_dataset()).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 90] {
            let r = decode_dataset(&bytes[..cut], Path::new("mem"));
            assert!(matches!(r, Err(Error::Corrupt { .. })), "cut at {cut}: {r:?}");
        }
    }

    #[test]
    fn trailing_garbage_is_corruption() {
        let mut bytes = encode_dataset(&tiny_dataset()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_dataset(&bytes, Path::new("mem")), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_dataset().spec;
        let rec = PredictionRecord {
            motion: (0..3 * 64 * 2).map(|i| i as f32 * 0.5).collect(),
            category_logits: vec![0.25; 64 * NUM_CATEGORIES],
            state_logits: vec![-1.0; 64],
        };
        let file = PredictionFile { spec, records: vec![rec.clone(), rec] };
        let path = dir.path().join("p.pmdp");
        write_predictions(&path, &file).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), file);
        // A prediction file is not a dataset.
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
    }
}
