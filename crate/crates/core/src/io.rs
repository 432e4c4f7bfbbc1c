//! Binary containers and image output.
//!
//! Every container is an 8-byte magic, a little-endian `u64` header length,
//! a UTF-8 JSON header and a payload of little-endian binary32 values.
//! Missing grid values are stored as NaN.
//!
//! A dataset lives in a directory: `fids.pdmi` holds the samples as
//! interleaved (re, im) pairs, voxel-major with x fastest and time innermost;
//! `mask.grid` and the optional `mri.grid` hold the images.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ArchitectureSpec, NetworkParams};
use crate::signal::{Fid, SpectralGrid};
use crate::space::Dims;
use crate::synth::{DmiDataset, MriVolume};

pub const DATASET_MAGIC: &[u8; 8] = b"PDMIDSET";
pub const WEIGHTS_MAGIC: &[u8; 8] = b"PDMIWGTS";
pub const GRID_MAGIC: &[u8; 8] = b"PDMIGRID";
pub const FORMAT_VERSION: u32 = 1;

const MAX_HEADER: u64 = 1 << 24;

fn write_container<W: Write, H: Serialize>(w: &mut W, magic: &[u8; 8], header: &H, payload: &[f32]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(magic)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_container<R: Read, H: DeserializeOwned>(r: &mut R, magic: &[u8; 8]) -> Result<(H, Vec<f32>)> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if &m != magic {
        return Err(Error::Format(format!(
            "expected magic {}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("truncated header length".into()))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Format(format!("header length {len} too large")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("payload is not a whole number of binary32 values".into()));
    }
    let payload = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, payload))
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {v}")));
    }
    Ok(())
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Format(format!("payload has {got} values, header implies {expected}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub dims: [usize; 3],
    pub fov_mm: [f64; 3],
    pub spectral_width: f64,
    pub n_points: usize,
    pub reference_frequency: f64,
    pub axis_order: String,
    pub endianness: String,
    pub calibration: f64,
    pub noise_sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub version: u32,
    pub endianness: String,
    pub architecture: ArchitectureSpec,
    pub param_count: usize,
    pub created_by: String,
    /// Free-form provenance (training config, seed).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub version: u32,
    pub dims: [usize; 3],
    pub axis_order: String,
    pub endianness: String,
    /// One name per stored channel, channel-major in the payload.
    pub channels: Vec<String>,
}

/// Named per-voxel maps of one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub dims: Dims,
    pub channels: Vec<(String, Vec<Option<f64>>)>,
}

impl GridFile {
    pub fn channel(&self, name: &str) -> Option<&[Option<f64>]> {
        self.channels.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

fn dims_of(d: [usize; 3]) -> Result<Dims> {
    Dims::new(d[0], d[1], d[2]).map_err(|_| Error::Format(format!("bad dims {d:?}")))
}

pub fn write_grid<W: Write>(w: &mut W, grid: &GridFile) -> Result<()> {
    let d = grid.dims;
    let mut payload = Vec::with_capacity(d.len() * grid.channels.len());
    for (name, v) in &grid.channels {
        if v.len() != d.len() {
            return Err(Error::shape(d.len(), format!("{} in channel {name}", v.len())));
        }
        payload.extend(v.iter().map(|x| x.map_or(f32::NAN, |x| x as f32)));
    }
    let header = GridHeader {
        version: FORMAT_VERSION,
        dims: [d.nx, d.ny, d.nz],
        axis_order: "x,y,z".into(),
        endianness: "little".into(),
        channels: grid.channels.iter().map(|(n, _)| n.clone()).collect(),
    };
    write_container(w, GRID_MAGIC, &header, &payload)
}

pub fn read_grid<R: Read>(r: &mut R) -> Result<GridFile> {
    let (h, payload): (GridHeader, Vec<f32>) = read_container(r, GRID_MAGIC)?;
    check_version(h.version)?;
    let dims = dims_of(h.dims)?;
    check_len(dims.len() * h.channels.len(), payload.len())?;
    let channels = h
        .channels
        .into_iter()
        .zip(payload.chunks(dims.len().max(1)))
        .map(|(n, c)| (n, c.iter().map(|&v| (!v.is_nan()).then_some(v as f64)).collect()))
        .collect();
    Ok(GridFile { dims, channels })
}

pub fn write_weights<W: Write>(w: &mut W, params: &NetworkParams<f32>, metadata: serde_json::Value) -> Result<()> {
    let header = WeightsHeader {
        version: FORMAT_VERSION,
        endianness: "little".into(),
        architecture: params.arch().clone(),
        param_count: params.len(),
        created_by: format!("precise-dmi {}", env!("CARGO_PKG_VERSION")),
        metadata,
    };
    write_container(w, WEIGHTS_MAGIC, &header, params.data())
}

pub fn read_weights<R: Read>(r: &mut R) -> Result<(NetworkParams<f32>, WeightsHeader)> {
    let (h, payload): (WeightsHeader, Vec<f32>) = read_container(r, WEIGHTS_MAGIC)?;
    check_version(h.version)?;
    h.architecture
        .validate()
        .map_err(|e| Error::Format(format!("bad architecture: {e}")))?;
    check_len(h.architecture.param_count(), payload.len())?;
    if h.param_count != payload.len() {
        return Err(Error::Format("param_count disagrees with architecture".into()));
    }
    let params = NetworkParams::from_vec(h.architecture.clone(), payload)?;
    Ok((params, h))
}

pub fn save_weights(path: &Path, params: &NetworkParams<f32>, metadata: serde_json::Value) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_weights(&mut f, params, metadata)?;
    f.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<NetworkParams<f32>> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    Ok(read_weights(&mut f)?.0)
}

pub fn write_fids<W: Write>(w: &mut W, ds: &DmiDataset) -> Result<()> {
    let d = ds.dims;
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        dims: [d.nx, d.ny, d.nz],
        fov_mm: ds.fov_mm,
        spectral_width: ds.grid.spectral_width,
        n_points: ds.grid.n_points,
        reference_frequency: ds.grid.reference_frequency,
        axis_order: "x,y,z,t".into(),
        endianness: "little".into(),
        calibration: ds.calibration,
        noise_sd: ds.noise_sd,
    };
    let mut payload = Vec::with_capacity(d.len() * ds.grid.n_points * 2);
    for f in &ds.fids {
        for s in &f.samples {
            payload.push(s.re as f32);
            payload.push(s.im as f32);
        }
    }
    write_container(w, DATASET_MAGIC, &header, &payload)
}

/// FIDs and header of a dataset file. The mask defaults to all voxels.
pub fn read_fids<R: Read>(r: &mut R) -> Result<DmiDataset> {
    let (h, payload): (DatasetHeader, Vec<f32>) = read_container(r, DATASET_MAGIC)?;
    check_version(h.version)?;
    let dims = dims_of(h.dims)?;
    let grid = SpectralGrid::new(h.n_points, h.spectral_width, h.reference_frequency)
        .map_err(|e| Error::Format(format!("bad spectral grid: {e}")))?;
    check_len(dims.len() * h.n_points * 2, payload.len())?;
    let fids = payload
        .chunks(h.n_points * 2)
        .map(|c| Fid {
            samples: c
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0] as f64, p[1] as f64))
                .collect(),
            grid,
        })
        .collect();
    let mut ds = DmiDataset::new(dims, grid, fids, None, vec![true; dims.len()], h.fov_mm)?;
    ds.calibration = h.calibration;
    ds.noise_sd = h.noise_sd;
    Ok(ds)
}

/// Writes `fids.pdmi`, `mask.grid` and, if present, `mri.grid` into `dir`.
pub fn save_dataset(dir: &Path, ds: &DmiDataset) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join("fids.pdmi"))?);
    write_fids(&mut f, ds)?;
    f.flush()?;
    let mask = GridFile {
        dims: ds.dims,
        channels: vec![(
            "mask".into(),
            ds.mask.iter().map(|&m| Some(if m { 1.0 } else { 0.0 })).collect(),
        )],
    };
    write_grid(&mut fs::File::create(dir.join("mask.grid"))?, &mask)?;
    if let Some(mri) = &ds.mri {
        let g = GridFile {
            dims: mri.dims,
            channels: vec![("mri".into(), mri.data.iter().map(|&v| Some(v)).collect())],
        };
        write_grid(&mut fs::File::create(dir.join("mri.grid"))?, &g)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DmiDataset> {
    let mut ds = read_fids(&mut std::io::BufReader::new(fs::File::open(dir.join("fids.pdmi"))?))?;
    let mask_path = dir.join("mask.grid");
    if mask_path.exists() {
        let g = read_grid(&mut fs::File::open(mask_path)?)?;
        let m = g
            .channel("mask")
            .ok_or_else(|| Error::Format("mask.grid has no mask channel".into()))?;
        if g.dims != ds.dims {
            return Err(Error::Format("mask dims differ from dataset dims".into()));
        }
        ds.mask = m.iter().map(|v| v.is_some_and(|v| v > 0.5)).collect();
    }
    let mri_path = dir.join("mri.grid");
    if mri_path.exists() {
        let g = read_grid(&mut fs::File::open(mri_path)?)?;
        let data = g
            .channel("mri")
            .ok_or_else(|| Error::Format("mri.grid has no mri channel".into()))?
            .iter()
            .map(|v| v.unwrap_or(0.0))
            .collect();
        ds.mri = Some(MriVolume::new(g.dims, data)?);
    }
    ds.validate()?;
    Ok(ds)
}

/// Binary 8-bit PGM of one z slice, linearly scaled from `range` to 0..255.
/// Missing voxels are black.
pub fn write_pgm<W: Write>(w: &mut W, map: &[Option<f64>], dims: Dims, z: usize, range: (f64, f64)) -> Result<()> {
    if map.len() != dims.len() {
        return Err(Error::shape(dims.len(), map.len()));
    }
    if z >= dims.nz {
        return Err(Error::invalid(format!("slice {z} outside {} slices", dims.nz)));
    }
    let (lo, hi) = range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    write!(w, "P5\n{} {}\n255\n", dims.nx, dims.ny)?;
    let mut px = Vec::with_capacity(dims.nx * dims.ny);
    // Top row of the image is the largest y.
    for y in (0..dims.ny).rev() {
        for x in 0..dims.nx {
            let v = map[dims.index(x, y, z)];
            px.push(v.map_or(0, |v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    w.write_all(&px)?;
    Ok(())
}

/// Finite min and max of a map, `(0, 1)` if it has no values.
pub fn map_range(map: &[Option<f64>]) -> (f64, f64) {
    let (lo, hi) = map
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_roundtrip_keeps_missing() {
        let g = GridFile {
            dims: Dims::plane(3, 1),
            channels: vec![("a".into(), vec![Some(1.5), None, Some(-2.0)])],
        };
        let mut buf = Vec::new();
        write_grid(&mut buf, &g).unwrap();
        assert_eq!(&buf[..8], GRID_MAGIC);
        assert_eq!(read_grid(&mut buf.as_slice()).unwrap(), g);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let g = GridFile {
            dims: Dims::plane(2, 2),
            channels: vec![("a".into(), vec![Some(0.0); 4])],
        };
        let mut buf = Vec::new();
        write_grid(&mut buf, &g).unwrap();
        assert!(matches!(read_weights(&mut buf.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 4);
        assert!(matches!(read_grid(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_header() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, &[Some(0.0), Some(1.0), None, Some(0.5)], Dims::plane(2, 2), 0, (0.0, 1.0)).unwrap();
        assert!(buf.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&buf[buf.len() - 4..], &[0, 128, 0, 255]);
    }
}
