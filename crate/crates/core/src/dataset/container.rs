//! The `F4D1` container.
//!
//! ```text
//! bytes 0..4   magic "F4D1"
//! u32 LE       header length H
//! H bytes      UTF-8 JSON header (ContainerHeader)
//! records      `count` records, in order
//! u32 LE       CRC32 of all record bytes
//! ```
//!
//! A patch record is nine little-endian f32 arrays (LR vx, vy, vz; LR mx, my,
//! mz; HR vx, vy, vz) followed by 16 bytes of metadata (three f32 VENCs and the
//! f32 fluid fraction). A volume record is seven arrays at the header dims
//! (vx, vy, vz, mx, my, mz, mask as 0/1) followed by the same 16 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::augment::AugmentationPolicy;
use super::patch::PatchPair;
use crate::error::{ensure, Error, Result};
use crate::volume::Volume;

pub const MAGIC: &[u8; 4] = b"F4D1";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u32 = 16 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Patches,
    Volumes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    pub kind: RecordKind,
    /// LR patch dims for patch containers, volume dims otherwise.
    pub dims: [usize; 3],
    /// HR patch dims (patch containers only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_dims: Option<[usize; 3]>,
    /// Voxel size of the `dims` grid in mm.
    pub spacing_mm: [f64; 3],
    pub split: String,
    pub count: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<AugmentationPolicy>,
    #[serde(default)]
    pub sources: Vec<String>,
}

impl ContainerHeader {
    pub fn patches(lr_dims: [usize; 3], hr_spacing_mm: [f64; 3], split: &str, count: usize, seed: u64) -> Self {
        ContainerHeader {
            format_version: FORMAT_VERSION,
            kind: RecordKind::Patches,
            dims: lr_dims,
            hr_dims: Some(lr_dims.map(|d| 2 * d)),
            spacing_mm: hr_spacing_mm.map(|h| 2.0 * h),
            split: split.to_string(),
            count,
            seed,
            policy: None,
            sources: Vec::new(),
        }
    }

    pub fn volumes(dims: [usize; 3], spacing_mm: [f64; 3], split: &str, count: usize, seed: u64) -> Self {
        ContainerHeader {
            format_version: FORMAT_VERSION,
            kind: RecordKind::Volumes,
            dims,
            hr_dims: None,
            spacing_mm,
            split: split.to_string(),
            count,
            seed,
            policy: None,
            sources: Vec::new(),
        }
    }

    fn voxels(d: [usize; 3]) -> usize {
        d.iter().product()
    }

    /// Bytes per record, metadata included.
    pub fn record_len(&self) -> Result<usize> {
        let floats = match self.kind {
            RecordKind::Patches => {
                let hr = self.hr_dims.ok_or_else(|| Error::Format("patch container without hr_dims".into()))?;
                6 * Self::voxels(self.dims) + 3 * Self::voxels(hr)
            }
            RecordKind::Volumes => 7 * Self::voxels(self.dims),
        };
        Ok(4 * floats + 16)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if self.kind == RecordKind::Patches {
            let hr = self.hr_dims.ok_or_else(|| Error::Format("patch container without hr_dims".into()))?;
            if hr != self.dims.map(|d| 2 * d) {
                return Err(Error::Format(format!("HR dims {hr:?} are not twice LR dims {:?}", self.dims)));
            }
        }
        Ok(())
    }
}

/// A full-size frame: velocities (cm/s), magnitudes, fluid mask and
/// encoding metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub velocity: [Volume<f32>; 3],
    pub magnitude: [Volume<f32>; 3],
    pub mask: Volume<bool>,
    pub venc: [f32; 3],
    pub fluid_fraction: f32,
}

impl VolumeRecord {
    pub fn dims(&self) -> [usize; 3] {
        self.mask.dims()
    }
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub struct ContainerWriter<W: Write> {
    inner: W,
    header: ContainerHeader,
    written: usize,
    crc: crc32fast::Hasher,
    scratch: Vec<u8>,
}

impl<W: Write> ContainerWriter<W> {
    pub fn new(mut inner: W, header: ContainerHeader) -> Result<Self> {
        header.validate()?;
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::io("<container>", e);
        inner.write_all(MAGIC).map_err(io)?;
        inner.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
        inner.write_all(&json).map_err(io)?;
        Ok(ContainerWriter {
            inner,
            header,
            written: 0,
            crc: crc32fast::Hasher::new(),
            scratch: Vec::new(),
        })
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    fn emit(&mut self) -> Result<()> {
        ensure(self.written < self.header.count, || {
            format!("container declared {} records", self.header.count)
        })?;
        debug_assert_eq!(self.scratch.len(), self.header.record_len()?);
        self.crc.update(&self.scratch);
        self.inner
            .write_all(&self.scratch)
            .map_err(|e| Error::io("<container>", e))?;
        self.written += 1;
        Ok(())
    }

    pub fn write_patch(&mut self, p: &PatchPair) -> Result<()> {
        ensure(self.header.kind == RecordKind::Patches, || "not a patch container".into())?;
        ensure(p.lr_dims() == self.header.dims, || {
            format!("patch dims {:?} differ from header {:?}", p.lr_dims(), self.header.dims)
        })?;
        p.validate()?;
        self.scratch.clear();
        for v in p.lr_velocity.iter().chain(&p.lr_magnitude).chain(&p.hr_velocity) {
            put_f32s(&mut self.scratch, v.as_slice());
        }
        put_f32s(&mut self.scratch, &p.venc);
        put_f32s(&mut self.scratch, &[p.fluid_fraction]);
        self.emit()
    }

    pub fn write_volume(&mut self, r: &VolumeRecord) -> Result<()> {
        ensure(self.header.kind == RecordKind::Volumes, || "not a volume container".into())?;
        let dims = self.header.dims;
        ensure(
            r.velocity.iter().chain(&r.magnitude).all(|v| v.dims() == dims) && r.mask.dims() == dims,
            || format!("volume record dims differ from header {dims:?}"),
        )?;
        self.scratch.clear();
        for v in r.velocity.iter().chain(&r.magnitude) {
            put_f32s(&mut self.scratch, v.as_slice());
        }
        let mask: Vec<f32> = r.mask.as_slice().iter().map(|&b| b as u8 as f32).collect();
        put_f32s(&mut self.scratch, &mask);
        put_f32s(&mut self.scratch, &r.venc);
        put_f32s(&mut self.scratch, &[r.fluid_fraction]);
        self.emit()
    }

    /// Write the checksum. Fails if fewer records than declared were written.
    pub fn finish(mut self) -> Result<W> {
        ensure(self.written == self.header.count, || {
            format!("wrote {} of {} declared records", self.written, self.header.count)
        })?;
        let crc = self.crc.finalize();
        self.inner
            .write_all(&crc.to_le_bytes())
            .and_then(|_| self.inner.flush())
            .map_err(|e| Error::io("<container>", e))?;
        Ok(self.inner)
    }
}

impl ContainerWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: ContainerHeader) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufWriter::new(f), header)
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Truncated(format!("unexpected end of file reading {what}"))
        } else {
            Error::io("<container>", e)
        }
    })
}

pub struct ContainerReader<R: Read> {
    inner: R,
    header: ContainerHeader,
    read: usize,
    crc: crc32fast::Hasher,
    buf: Vec<u8>,
    verified: bool,
}

impl<R: Read> ContainerReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or(&mut inner, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected F4D1")));
        }
        let mut len = [0u8; 4];
        read_exact_or(&mut inner, &mut len, "header length")?;
        let len = u32::from_le_bytes(len);
        if len > MAX_HEADER {
            return Err(Error::Format(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        read_exact_or(&mut inner, &mut json, "header")?;
        let header: ContainerHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("header JSON: {e}")))?;
        header.validate()?;
        let buf = vec![0u8; header.record_len()?];
        Ok(ContainerReader {
            inner,
            header,
            read: 0,
            crc: crc32fast::Hasher::new(),
            buf,
            verified: false,
        })
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    /// Load the next record's bytes; `false` once all declared records were
    /// consumed and the checksum verified.
    fn advance(&mut self) -> Result<bool> {
        if self.read == self.header.count {
            if !self.verified {
                let mut stored = [0u8; 4];
                read_exact_or(&mut self.inner, &mut stored, "checksum")?;
                let stored = u32::from_le_bytes(stored);
                let computed = self.crc.clone().finalize();
                if stored != computed {
                    return Err(Error::Checksum { stored, computed });
                }
                self.verified = true;
            }
            return Ok(false);
        }
        read_exact_or(&mut self.inner, &mut self.buf, "record")?;
        self.crc.update(&self.buf);
        self.read += 1;
        Ok(true)
    }

    fn take_vol(&self, offset: &mut usize, dims: [usize; 3]) -> Volume<f32> {
        let n: usize = dims.iter().product();
        let bytes = &self.buf[*offset..*offset + 4 * n];
        *offset += 4 * n;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Volume::from_vec(dims, data).expect("dims")
    }

    fn take_meta(&self, offset: usize) -> ([f32; 3], f32) {
        let f = |i: usize| {
            let b = &self.buf[offset + 4 * i..offset + 4 * i + 4];
            f32::from_le_bytes([b[0], b[1], b[2], b[3]])
        };
        ([f(0), f(1), f(2)], f(3))
    }

    pub fn next_patch(&mut self) -> Option<Result<PatchPair>> {
        if self.header.kind != RecordKind::Patches {
            return Some(Err(Error::Format("not a patch container".into())));
        }
        match self.advance() {
            Err(e) => return Some(Err(e)),
            Ok(false) => return None,
            Ok(true) => {}
        }
        let lr = self.header.dims;
        let hr = self.header.hr_dims.expect("validated");
        let mut off = 0;
        let mut vols = Vec::with_capacity(9);
        for i in 0..9 {
            vols.push(self.take_vol(&mut off, if i < 6 { lr } else { hr }));
        }
        let (venc, fluid_fraction) = self.take_meta(off);
        let mut it = vols.into_iter();
        let mut three = || [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
        Some(Ok(PatchPair {
            lr_velocity: three(),
            lr_magnitude: three(),
            hr_velocity: three(),
            venc,
            fluid_fraction,
        }))
    }

    pub fn next_volume(&mut self) -> Option<Result<VolumeRecord>> {
        if self.header.kind != RecordKind::Volumes {
            return Some(Err(Error::Format("not a volume container".into())));
        }
        match self.advance() {
            Err(e) => return Some(Err(e)),
            Ok(false) => return None,
            Ok(true) => {}
        }
        let d = self.header.dims;
        let mut off = 0;
        let mut vols: Vec<Volume<f32>> = (0..7).map(|_| self.take_vol(&mut off, d)).collect();
        let (venc, fluid_fraction) = self.take_meta(off);
        let mask = vols.pop().unwrap().map(|v| v != 0.0);
        let mut it = vols.into_iter();
        let mut three = || [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
        Some(Ok(VolumeRecord {
            velocity: three(),
            magnitude: three(),
            mask,
            venc,
            fluid_fraction,
        }))
    }

    /// Iterate the remaining patch records.
    pub fn patches(&mut self) -> impl Iterator<Item = Result<PatchPair>> + '_ {
        std::iter::from_fn(move || self.next_patch())
    }

    pub fn volumes(&mut self) -> impl Iterator<Item = Result<VolumeRecord>> + '_ {
        std::iter::from_fn(move || self.next_volume())
    }
}

impl ContainerReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(f))
    }
}

pub fn write_dataset(path: &Path, header: ContainerHeader, records: &[PatchPair]) -> Result<()> {
    ensure(header.count == records.len(), || {
        format!("header count {} but {} records", header.count, records.len())
    })?;
    let mut w = ContainerWriter::create(path, header)?;
    for r in records {
        w.write_patch(r)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(ContainerHeader, Vec<PatchPair>)> {
    let mut r = ContainerReader::open(path)?;
    let records = r.patches().collect::<Result<Vec<_>>>()?;
    Ok((r.header().clone(), records))
}

pub fn write_volumes(path: &Path, header: ContainerHeader, records: &[VolumeRecord]) -> Result<()> {
    ensure(header.count == records.len(), || {
        format!("header count {} but {} records", header.count, records.len())
    })?;
    let mut w = ContainerWriter::create(path, header)?;
    for r in records {
        w.write_volume(r)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_volumes(path: &Path) -> Result<(ContainerHeader, Vec<VolumeRecord>)> {
    let mut r = ContainerReader::open(path)?;
    let records = r.volumes().collect::<Result<Vec<_>>>()?;
    Ok((r.header().clone(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    fn random_pair(rng: &mut ChaCha8Rng, lr: usize) -> PatchPair {
        let mut v = |s: usize, lo: f32| Volume::from_fn([s; 3], |_, _, _| rng.random_range(lo..1.0f32));
        PatchPair {
            lr_velocity: [v(lr, -1.0), v(lr, -1.0), v(lr, -1.0)],
            lr_magnitude: [v(lr, 0.0), v(lr, 0.0), v(lr, 0.0)],
            hr_velocity: [v(2 * lr, -1.0), v(2 * lr, -1.0), v(2 * lr, -1.0)],
            venc: [100.0, 150.0, 60.0],
            fluid_fraction: 0.25,
        }
    }

    fn encode(records: &[PatchPair], lr: usize) -> Vec<u8> {
        let h = ContainerHeader::patches([lr; 3], [0.594; 3], "train", records.len(), 7);
        let mut w = ContainerWriter::new(Vec::new(), h).unwrap();
        for r in records {
            w.write_patch(r).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn hundred_pairs_round_trip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let recs: Vec<_> = (0..100).map(|_| random_pair(&mut rng, 4)).collect();
        let bytes = encode(&recs, 4);
        let mut r = ContainerReader::new(Cursor::new(bytes)).unwrap();
        let back: Vec<_> = r.patches().collect::<Result<_>>().unwrap();
        assert_eq!(back, recs);
        assert_eq!(r.header().count, 100);
    }

    #[test]
    fn empty_container_is_valid() {
        let bytes = encode(&[], 16);
        let mut r = ContainerReader::new(Cursor::new(bytes)).unwrap();
        assert_eq!(r.header().count, 0);
        assert!(r.next_patch().is_none());
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut bytes = encode(&[], 16);
        bytes[0] = b'X';
        assert!(matches!(ContainerReader::new(Cursor::new(bytes)), Err(Error::Format(_))));
    }

    #[test]
    fn version_truncation_and_checksum_errors_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let recs: Vec<_> = (0..3).map(|_| random_pair(&mut rng, 2)).collect();
        let good = encode(&recs, 2);

        let text = String::from_utf8_lossy(&good[8..]).to_string();
        assert!(text.contains("\"format_version\":1"));
        let bumped = {
            let mut b = good.clone();
            let pos = b.windows(18).position(|w| w == b"\"format_version\":1").unwrap();
            b[pos + 17] = b'9';
            b
        };
        assert!(matches!(
            ContainerReader::new(Cursor::new(bumped)),
            Err(Error::Version { found: 9, .. })
        ));

        let truncated = good[..good.len() - 10].to_vec();
        let mut r = ContainerReader::new(Cursor::new(truncated)).unwrap();
        let res: Result<Vec<_>> = r.patches().collect();
        assert!(matches!(res, Err(Error::Truncated(_))));

        let mut flipped = good.clone();
        let n = flipped.len();
        flipped[n - 20] ^= 0x40;
        let mut r = ContainerReader::new(Cursor::new(flipped)).unwrap();
        let res: Result<Vec<_>> = r.patches().collect();
        assert!(matches!(res, Err(Error::Checksum { .. })));
    }

    #[test]
    fn writer_enforces_declared_count() {
        let h = ContainerHeader::patches([2; 3], [1.0; 3], "val", 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = ContainerWriter::new(Vec::new(), h).unwrap();
        w.write_patch(&random_pair(&mut rng, 2)).unwrap();
        assert!(w.finish().is_err());
    }

    #[test]
    fn volume_records_round_trip() {
        let d = [4, 6, 8];
        let rec = VolumeRecord {
            velocity: [
                Volume::from_fn(d, |i, _, _| i as f32),
                Volume::from_fn(d, |_, j, _| j as f32),
                Volume::from_fn(d, |_, _, k| -(k as f32)),
            ],
            magnitude: [Volume::filled(d, 120.0), Volume::filled(d, 120.0), Volume::filled(d, 120.0)],
            mask: Volume::from_fn(d, |i, j, _| i == j),
            venc: [150.0, 100.0, 100.0],
            fluid_fraction: 0.2,
        };
        let h = ContainerHeader::volumes(d, [0.594; 3], "hr", 2, 0);
        let mut w = ContainerWriter::new(Vec::new(), h).unwrap();
        w.write_volume(&rec).unwrap();
        w.write_volume(&rec).unwrap();
        let bytes = w.finish().unwrap();
        let mut r = ContainerReader::new(Cursor::new(bytes)).unwrap();
        let back: Vec<_> = r.volumes().collect::<Result<_>>().unwrap();
        assert_eq!(back, vec![rec.clone(), rec]);
        assert!(r.next_patch().is_some_and(|x| x.is_err()));
    }
}
