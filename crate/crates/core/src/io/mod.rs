//! Minimal on-disk formats: `MVOL1` scalar volumes, `MFLW1` flow fields,
//! landmark CSV and the JSON run configuration.
//!
//! Both binary containers are a 5-byte magic, three little-endian `u32`
//! dims and then little-endian `f32` samples, x fastest, channels
//! interleaved per voxel. Values are narrowed to single precision on write.

mod config;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FlowField, GridSpec, Volume};
use crate::metrics::{LandmarkSet, SegmentationMask};

pub use config::{CascadeConfig, GradcheckSection, OutputPaths, RunConfig, StagesConfig, SCHEMA_VERSION};

pub const VOLUME_MAGIC: &[u8; 5] = b"MVOL1";
pub const FLOW_MAGIC: &[u8; 5] = b"MFLW1";

const HEADER_LEN: usize = 5 + 3 * 4;

fn encode(magic: &[u8; 5], grid: GridSpec, values: impl Iterator<Item = f64>, channels: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * channels * grid.len());
    out.extend_from_slice(magic);
    for d in grid.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode(magic: &[u8; 5], bytes: &[u8], channels: usize) -> Result<(GridSpec, Vec<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file too short for a header ({} bytes)", bytes.len())));
    }
    if &bytes[..5] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..5]),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let o = 5 + 4 * a;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    let grid = GridSpec::from_dims(dims).map_err(|e| Error::Format(e.to_string()))?;
    let expected = grid
        .len()
        .checked_mul(4 * channels)
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, dims {dims:?} x {channels} channel(s) need {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((grid, values))
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    encode(VOLUME_MAGIC, v.grid(), v.data().iter().copied(), 1)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let (grid, values) = decode(VOLUME_MAGIC, bytes, 1)?;
    Volume::new(grid, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_flow(f: &FlowField) -> Vec<u8> {
    encode(FLOW_MAGIC, f.grid(), f.data().iter().flatten().copied(), 3)
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    let (grid, values) = decode(FLOW_MAGIC, bytes, 3)?;
    FlowField::from_interleaved(grid, &values).map_err(|e| Error::Format(e.to_string()))
}

/// The flow exactly as it will read back from an `MFLW1` file.
pub fn quantize_flow(f: &FlowField) -> FlowField {
    FlowField::new(f.grid(), f.data().iter().map(|p| p.map(|c| c as f32 as f64)).collect())
        .expect("narrowing a finite flow keeps it finite")
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    Ok(fs::write(path, encode_volume(v))?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub fn write_flow(path: impl AsRef<Path>, f: &FlowField) -> Result<()> {
    Ok(fs::write(path, encode_flow(f))?)
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flow(&fs::read(path)?)
}

/// Masks travel as `MVOL1` volumes holding 0 and 1.
pub fn write_mask(path: impl AsRef<Path>, m: &SegmentationMask) -> Result<()> {
    write_volume(path, &m.to_volume())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<SegmentationMask> {
    Ok(SegmentationMask::from_volume(&read_volume(path)?, 0.5))
}

pub const LANDMARK_HEADER: &str = "name,x,y,z";

pub fn landmarks_to_csv(set: &LandmarkSet) -> String {
    let mut s = String::from(LANDMARK_HEADER);
    s.push('\n');
    for (name, p) in set.iter() {
        s.push_str(&format!("{name},{},{},{}\n", p[0], p[1], p[2]));
    }
    s
}

pub fn landmarks_from_csv(text: &str) -> Result<LandmarkSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == LANDMARK_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "landmark CSV must start with `{LANDMARK_HEADER}`, got {:?}",
                other.map(|(_, l)| l)
            )))
        }
    }
    let mut set = LandmarkSet::default();
    for (n, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |why: &str| Error::Format(format!("landmark CSV line {}: {why}", n + 1));
        if fields.len() != 4 {
            return Err(bad(&format!("expected 4 fields, got {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (c, f) in p.iter_mut().zip(&fields[1..]) {
            *c = f.parse().map_err(|_| bad(&format!("`{f}` is not a number")))?;
        }
        set.push(fields[0], p).map_err(|e| bad(&e.to_string()))?;
    }
    Ok(set)
}

pub fn write_landmarks(path: impl AsRef<Path>, set: &LandmarkSet) -> Result<()> {
    Ok(fs::write(path, landmarks_to_csv(set))?)
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    landmarks_from_csv(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::new(3, 4, 2).unwrap()
    }

    #[test]
    fn header_layout_is_fixed() {
        let v = Volume::constant(grid(), 1.5);
        let b = encode_volume(&v);
        assert_eq!(&b[..5], b"MVOL1");
        assert_eq!(&b[5..17], &[3, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(b.len(), 17 + 4 * 24);
        assert_eq!(&b[17..21], &1.5f32.to_le_bytes());
    }

    #[test]
    fn flow_channels_interleave() {
        let f = FlowField::from_fn(grid(), |p| [p[0], 10.0 + p[1], 20.0 + p[2]]);
        let b = encode_flow(&f);
        assert_eq!(&b[..5], b"MFLW1");
        let first: Vec<f32> = b[17..17 + 24].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(first, [0.0, 10.0, 20.0, 1.0, 10.0, 20.0]);
    }

    #[test]
    fn rejects_malformed_files() {
        let b = encode_volume(&Volume::constant(grid(), 0.0));
        assert!(matches!(decode_flow(&b), Err(Error::Format(_))));
        assert!(matches!(decode_volume(&b[..b.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode_volume(&b[..10]), Err(Error::Format(_))));
        let mut zero = b.clone();
        zero[5..9].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_volume(&zero), Err(Error::Format(_))));
        let mut nan = b;
        nan[17..21].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_volume(&nan), Err(Error::Format(_))));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = FlowField::from_fn(grid(), |p| [0.1 * p[0], -p[1], 0.3]);
        write_flow(dir.path().join("f.mflw"), &f).unwrap();
        assert_eq!(read_flow(dir.path().join("f.mflw")).unwrap(), quantize_flow(&f));
        let m = SegmentationMask::from_fn(grid(), |p| p[0] > 0.5);
        write_mask(dir.path().join("m.mvol"), &m).unwrap();
        assert_eq!(read_mask(dir.path().join("m.mvol")).unwrap(), m);
        assert!(matches!(read_volume(dir.path().join("missing")), Err(Error::Io(_))));
    }

    #[test]
    fn landmark_csv() {
        let mut set = LandmarkSet::default();
        set.push("a", [1.0, 2.5, -0.125]).unwrap();
        set.push("b", [0.1, 0.2, 0.3]).unwrap();
        let text = landmarks_to_csv(&set);
        assert!(text.starts_with("name,x,y,z\n"));
        assert_eq!(landmarks_from_csv(&text).unwrap(), set);
        assert!(landmarks_from_csv("x,y,z\n").is_err());
        assert!(landmarks_from_csv("name,x,y,z\na,1,2\n").is_err());
        assert!(landmarks_from_csv("name,x,y,z\na,1,2,q\n").is_err());
        assert!(landmarks_from_csv("name,x,y,z\na,1,2,3\na,1,2,3\n").is_err());
    }

    proptest! {
        #[test]
        fn volume_round_trip(dims in prop::array::uniform3(2usize..6), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let g = GridSpec::from_dims(dims).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1e3..1e3f32) as f64).collect();
            let v = Volume::new(g, data).unwrap();
            prop_assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
        }

        #[test]
        fn flow_round_trip(dims in prop::array::uniform3(2usize..6), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let g = GridSpec::from_dims(dims).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = FlowField::from_fn(g, |_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen()]);
            let back = decode_flow(&encode_flow(&f)).unwrap();
            prop_assert_eq!(&back, &quantize_flow(&f));
            prop_assert_eq!(decode_flow(&encode_flow(&back)).unwrap(), back);
        }
    }
}
