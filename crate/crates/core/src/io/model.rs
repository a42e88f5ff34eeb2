//! Binary model bundle.
//!
//! Layout (little endian): a 16-byte header `PPTX`, version, M, N; the grid;
//! δ; the departure and destination models; optional tensor sections; and a
//! SHA-256 trailer over everything before it.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::demand::{
    aveprob_tensor, CircularFit, DemandTensor, DepartureTimeModel, DestinationGaussian, DestinationModel,
    Diagnostics, FlowModel, OrderRecord,
};
use crate::error::{Error, Result};
use crate::grid::{travel_matrix_from_orders, GridSpec, TravelTimeMatrix};

pub const MAGIC: [u8; 4] = *b"PPTX";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Everything a planner needs, as trained from one order set.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub grid: GridSpec,
    pub delta: TravelTimeMatrix,
    pub flow: FlowModel,
    pub tensor: Option<DemandTensor>,
    /// Historical-average tensor for the baseline planner.
    pub aveprob: Option<DemandTensor>,
    pub diagnostics: Diagnostics,
}

impl ModelBundle {
    /// Fits both models, materialises the tensor and, if asked, the
    /// historical-average tensor.
    pub fn train(train: &[OrderRecord], grid: &GridSpec, with_aveprob: bool) -> Result<Self> {
        Self::train_smoothed(train, grid, with_aveprob, None)
    }

    /// As [`ModelBundle::train`], with add-α smoothing on the historical-average tensor.
    pub fn train_smoothed(
        train: &[OrderRecord],
        grid: &GridSpec,
        with_aveprob: bool,
        smoothing: Option<f64>,
    ) -> Result<Self> {
        grid.validate()?;
        if smoothing.is_some_and(|a| !(a.is_finite() && a >= 0.0)) {
            return Err(Error::Config("smoothing must be a non-negative number".into()));
        }
        let delta = travel_matrix_from_orders(train, grid)?;
        let flow = FlowModel::fit(train, grid)?;
        let (tensor, diagnostics) = flow.tensor(grid)?;
        let aveprob = with_aveprob.then(|| aveprob_tensor(train, grid, smoothing)).transpose()?;
        Ok(ModelBundle { grid: grid.clone(), delta, flow, tensor: Some(tensor), aveprob, diagnostics })
    }

    /// The stored tensor, or one computed from the fitted models.
    pub fn demand_tensor(&self) -> Result<DemandTensor> {
        match &self.tensor {
            Some(t) => Ok(t.clone()),
            None => Ok(self.flow.tensor(&self.grid)?.0),
        }
    }
}

fn put_tensor(buf: &mut Vec<u8>, t: Option<&DemandTensor>) {
    let Some(t) = t else {
        buf.push(0);
        return;
    };
    buf.push(1);
    for &v in t.raw().iter().chain(t.raw_marginal()) {
        buf.write_f64::<LE>(v).unwrap();
    }
}

pub fn encode_model(b: &ModelBundle) -> Vec<u8> {
    let m = b.grid.block_count();
    let n = b.grid.slot_count;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.write_u32::<LE>(FORMAT_VERSION).unwrap();
    buf.write_u32::<LE>(m as u32).unwrap();
    buf.write_u32::<LE>(n).unwrap();

    let g = &b.grid;
    for v in [g.lng_min, g.lng_max, g.lat_min, g.lat_max] {
        buf.write_f64::<LE>(v).unwrap();
    }
    for v in [g.rows, g.cols, g.slot_count, g.slot_minutes] {
        buf.write_u32::<LE>(v).unwrap();
    }
    for &d in b.delta.raw() {
        buf.write_u32::<LE>(d).unwrap();
    }

    let dep = &b.flow.departures;
    buf.write_u32::<LE>(dep.slot_count).unwrap();
    for (fit, &freq) in dep.fits.iter().zip(&dep.freq) {
        buf.write_u64::<LE>(freq).unwrap();
        match fit {
            None => buf.push(0),
            Some(f) => {
                buf.push(1);
                buf.write_u32::<LE>(f.mu).unwrap();
                buf.write_f64::<LE>(f.sigma2_raw).unwrap();
                buf.write_u32::<LE>(f.samples).unwrap();
            }
        }
    }

    let des = &b.flow.destinations;
    buf.write_u32::<LE>(des.slot_count).unwrap();
    for (fit, &freq) in des.fits.iter().zip(&des.freq) {
        buf.write_u64::<LE>(freq).unwrap();
        match fit {
            None => buf.push(0),
            Some(f) => {
                buf.push(1);
                for v in f.mean.iter().chain(f.cov.iter().flatten()) {
                    buf.write_f64::<LE>(*v).unwrap();
                }
                buf.write_u32::<LE>(f.samples).unwrap();
            }
        }
    }

    let d = &b.diagnostics;
    for v in [d.uniform_departure_slots, d.density_fallback_cells, d.zero_destination_cells] {
        buf.write_u64::<LE>(v).unwrap();
    }
    put_tensor(&mut buf, b.tensor.as_ref());
    put_tensor(&mut buf, b.aveprob.as_ref());

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

fn truncated<T>(_: std::io::Error) -> Result<T> {
    Err(Error::CorruptFile("unexpected end of data".into()))
}

struct Body<'a>(Cursor<&'a [u8]>);

impl Body<'_> {
    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().or_else(truncated)
    }
    fn u32(&mut self) -> Result<u32> {
        self.0.read_u32::<LE>().or_else(truncated)
    }
    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LE>().or_else(truncated)
    }
    fn f64(&mut self) -> Result<f64> {
        self.0.read_f64::<LE>().or_else(truncated)
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::CorruptFile(format!("bad section flag {v}"))),
        }
    }
    fn f64s(&mut self, len: usize) -> Result<Vec<f64>> {
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if remaining < len * 8 {
            return truncated(std::io::ErrorKind::UnexpectedEof.into());
        }
        let mut out = vec![0.0; len];
        self.0.read_f64_into::<LE>(&mut out).or_else(truncated)?;
        Ok(out)
    }
    fn tensor(&mut self, m: usize, n: usize) -> Result<Option<DemandTensor>> {
        if !self.flag()? {
            return Ok(None);
        }
        let p = self.f64s(m * m * n)?;
        let marginal = self.f64s(m * n)?;
        Ok(DemandTensor::from_parts(m, n, p, marginal))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < 16 {
        return Err(Error::CorruptFile("file shorter than its header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::CorruptFile("not a model file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(Error::CorruptFile("missing checksum".into()));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::CorruptFile("checksum mismatch".into()));
    }

    let mut r = Body(Cursor::new(&payload[8..]));
    let m = r.u32()? as usize;
    let n = r.u32()?;
    let mut bounds = [0.0; 4];
    for v in &mut bounds {
        *v = r.f64()?;
    }
    let [lng_min, lng_max, lat_min, lat_max] = bounds;
    let grid = GridSpec {
        lng_min,
        lng_max,
        lat_min,
        lat_max,
        rows: r.u32()?,
        cols: r.u32()?,
        slot_count: r.u32()?,
        slot_minutes: r.u32()?,
    };
    grid.validate().map_err(|e| Error::CorruptFile(e.to_string()))?;
    if grid.block_count() != m || grid.slot_count != n {
        return Err(Error::CorruptFile("header disagrees with the grid".into()));
    }
    let mut raw = Vec::with_capacity(m * m);
    for _ in 0..m * m {
        raw.push(r.u32()?);
    }
    let delta = TravelTimeMatrix::from_raw(m, raw, n).map_err(|e| Error::CorruptFile(e.to_string()))?;

    let dep_slots = r.u32()?;
    let mut fits = Vec::with_capacity(m);
    let mut freq = Vec::with_capacity(m);
    for _ in 0..m {
        freq.push(r.u64()?);
        fits.push(if r.flag()? {
            Some(CircularFit { mu: r.u32()?, sigma2_raw: r.f64()?, samples: r.u32()? })
        } else {
            None
        });
    }
    let departures = DepartureTimeModel { slot_count: dep_slots, fits, freq };

    let des_slots = r.u32()?;
    let mut fits = Vec::with_capacity(m);
    let mut freq = Vec::with_capacity(m);
    for _ in 0..m {
        freq.push(r.u64()?);
        fits.push(if r.flag()? {
            let mut mean = [0.0; 3];
            for v in &mut mean {
                *v = r.f64()?;
            }
            let mut cov = [[0.0; 3]; 3];
            for v in cov.iter_mut().flatten() {
                *v = r.f64()?;
            }
            Some(DestinationGaussian { mean, cov, samples: r.u32()? })
        } else {
            None
        });
    }
    let destinations = DestinationModel { slot_count: des_slots, fits, freq };

    let diagnostics = Diagnostics {
        uniform_departure_slots: r.u64()?,
        density_fallback_cells: r.u64()?,
        zero_destination_cells: r.u64()?,
    };
    let tensor = r.tensor(m, n as usize)?;
    let aveprob = r.tensor(m, n as usize)?;
    let mut rest = Vec::new();
    r.0.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::CorruptFile(format!("{} trailing bytes", rest.len())));
    }
    Ok(ModelBundle {
        grid,
        delta,
        flow: FlowModel { departures, destinations },
        tensor,
        aveprob,
        diagnostics,
    })
}

pub fn save_model(path: impl AsRef<Path>, bundle: &ModelBundle) -> Result<()> {
    fs::write(path, encode_model(bundle))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BlockId;

    fn tiny() -> ModelBundle {
        let grid = GridSpec::new((0.0, 2.0), (0.0, 2.0), 2, 2, 4).unwrap();
        let m = 4;
        let mut tensor = DemandTensor::zeros(m, 4);
        tensor.set(1, 0, 2, 0.125);
        tensor.set_marginal(0, 2, 0.5);
        ModelBundle {
            delta: crate::grid::synthetic_travel_matrix(&grid),
            flow: FlowModel {
                departures: DepartureTimeModel {
                    slot_count: 4,
                    fits: vec![Some(CircularFit { mu: 1, sigma2_raw: 0.3, samples: 7 }), None, None, None],
                    freq: vec![7, 0, 0, 0],
                },
                destinations: DestinationModel {
                    slot_count: 4,
                    fits: vec![
                        None,
                        Some(DestinationGaussian {
                            mean: [0.5, 1.5, 2.0],
                            cov: [[1.0, 0.1, 0.0], [0.1, 1.0, 0.0], [0.0, 0.0, 2.0]],
                            samples: 5,
                        }),
                        None,
                        None,
                    ],
                    freq: vec![0, 5, 0, 0],
                },
            },
            grid,
            tensor: Some(tensor),
            aveprob: None,
            diagnostics: Diagnostics { uniform_departure_slots: 1, ..Default::default() },
        }
    }

    #[test]
    fn round_trip() {
        let b = tiny();
        let bytes = encode_model(&b);
        assert_eq!(&bytes[..4], b"PPTX");
        assert_eq!(decode_model(&bytes).unwrap(), b);
        assert_eq!(b.delta.get(BlockId(0), BlockId(3)), 2);
    }

    #[test]
    fn version_checked_before_checksum() {
        let mut bytes = encode_model(&tiny());
        bytes[4] ^= 0x01;
        assert!(matches!(decode_model(&bytes), Err(Error::VersionMismatch { found: 0, expected: 1 })));
    }

    #[test]
    fn truncation_and_bit_flips_are_corrupt() {
        let bytes = encode_model(&tiny());
        for cut in [0, 3, 15, 16, 40, bytes.len() - 1] {
            assert!(matches!(decode_model(&bytes[..cut]), Err(Error::CorruptFile(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[60] ^= 0x80;
        assert!(matches!(decode_model(&flipped), Err(Error::CorruptFile(_))));
    }
}
