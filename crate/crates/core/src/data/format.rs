//! `MSEQ0001` binary sequences and the CSV import path.
//!
//! Layout (all little-endian): the 8-byte magic, `u32` joint count, `u32`
//! frame count, `u32` frame rate in millihertz, `u32` skeleton-name length
//! and the UTF-8 name, then `T·J·3` `f32` coordinates, frame-major with xyz
//! innermost.

use std::io::{Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::kinematics::{PoseSequence, Skeleton};

pub const MAGIC: &[u8; 8] = b"MSEQ0001";

pub fn encode_sequence(seq: &PoseSequence) -> Result<Vec<u8>> {
    let millihertz = (seq.frame_rate() * 1000.0).round();
    if !(1.0..=u32::MAX as f64).contains(&millihertz) {
        return Err(Error::Format(format!(
            "frame rate {} does not fit the header",
            seq.frame_rate()
        )));
    }
    let name = seq.skeleton().as_bytes();
    let header = [seq.joints(), seq.frames(), millihertz as usize, name.len()];
    let mut out = Vec::with_capacity(24 + name.len() + seq.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for field in header {
        let v = u32::try_from(field).map_err(|_| Error::Format(format!("header field {field} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(name);
    for &x in seq.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: {what} needs {n} bytes at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_sequence(bytes: &[u8]) -> Result<PoseSequence> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let joints = c.u32("joint count")?;
    let frames = c.u32("frame count")?;
    let millihertz = c.u32("frame rate")?;
    let name_len = c.u32("name length")?;
    let name = std::str::from_utf8(c.take(name_len, "skeleton name")?)
        .map_err(|_| Error::Format("skeleton name is not UTF-8".into()))?
        .to_string();
    if joints == 0 || millihertz == 0 {
        return Err(Error::Format(format!(
            "invalid header: {joints} joints at {millihertz} mHz"
        )));
    }
    let count = frames
        .checked_mul(joints * 3)
        .ok_or_else(|| Error::Format("frame count overflows".into()))?;
    let raw = c.take(count * 4, "coordinates")?;
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    PoseSequence::new(name, joints, millihertz as f64 / 1000.0, data)
}

pub fn write_sequence(path: impl AsRef<Path>, seq: &PoseSequence) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_sequence(seq)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<PoseSequence> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes)
}

/// Checks a loaded sequence against the skeleton it should belong to.
pub fn check_skeleton(seq: &PoseSequence, skeleton: &Skeleton) -> Result<()> {
    if seq.skeleton() != skeleton.name() || seq.joints() != skeleton.joint_count() {
        return Err(Error::Skeleton {
            expected: format!("{} ({} joints)", skeleton.name(), skeleton.joint_count()),
            found: format!("{} ({} joints)", seq.skeleton(), seq.joints()),
        });
    }
    Ok(())
}

/// Reads a sequence and checks it against `skeleton`.
pub fn read_sequence_for(path: impl AsRef<Path>, skeleton: &Skeleton) -> Result<PoseSequence> {
    let seq = read_sequence(path)?;
    check_skeleton(&seq, skeleton)?;
    Ok(seq)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    frame: usize,
    joint: usize,
    x: f64,
    y: f64,
    z: f64,
}

/// Parses `frame,joint,x,y,z` rows; every (frame, joint) pair must appear
/// exactly once.
pub fn sequence_from_csv(reader: impl Read, skeleton: &Skeleton, frame_rate: f64) -> Result<PoseSequence> {
    let joints = skeleton.joint_count();
    let mut rows = Vec::new();
    for (i, row) in csv::Reader::from_reader(reader).deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| Error::Format(format!("CSV row {}: {e}", i + 1)))?;
        if row.joint >= joints {
            return Err(Error::Skeleton {
                expected: format!("{} ({joints} joints)", skeleton.name()),
                found: format!("joint index {}", row.joint),
            });
        }
        rows.push(row);
    }
    let frames = rows.iter().map(|r| r.frame + 1).max().unwrap_or(0);
    if rows.len() != frames * joints {
        return Err(Error::Format(format!(
            "{} rows for {frames} frames of {joints} joints",
            rows.len()
        )));
    }
    let mut data = vec![f64::NAN; frames * joints * 3];
    let mut seen = vec![false; frames * joints];
    for r in &rows {
        let slot = r.frame * joints + r.joint;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::Format(format!(
                "duplicate row for frame {}, joint {}",
                r.frame, r.joint
            )));
        }
        data[slot * 3..slot * 3 + 3].copy_from_slice(&[r.x, r.y, r.z]);
    }
    PoseSequence::new(skeleton.name(), joints, frame_rate, data)
}

pub fn read_csv(path: impl AsRef<Path>, skeleton: &Skeleton, frame_rate: f64) -> Result<PoseSequence> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    sequence_from_csv(file, skeleton, frame_rate)
}
