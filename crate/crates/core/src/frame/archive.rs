//! Single-file sample cache per dataset split.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"VQES"
//! version u32 = 1
//! patch_h u32
//! patch_w u32
//! count   u32
//! then per sample:
//!   qp          u8
//!   frame_index u32
//!   target      patch_h*patch_w f32 planes (little-endian)
//!   prev, curr, next   same-size f32 planes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

use super::{FrameTriplet, LumaFrame, QpCode, TrainingSample};

const MAGIC: &[u8; 4] = b"VQES";
const VERSION: u32 = 1;

pub fn write_samples(path: &Path, samples: &[TrainingSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("sample list"));
    }
    let (h, w) = (samples[0].target.height(), samples[0].target.width());
    if samples.iter().any(|s| (s.target.height(), s.target.width()) != (h, w)) {
        return Err(Error::shape("samples in one archive must share patch size"));
    }

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&(samples.len() as u32).to_le_bytes())?;
    for s in samples {
        out.write_all(&[s.qp.qp()])?;
        out.write_all(&(s.degraded.frame_index as u32).to_le_bytes())?;
        write_plane(&mut out, &s.target)?;
        write_plane(&mut out, &s.degraded.prev)?;
        write_plane(&mut out, &s.degraded.curr)?;
        write_plane(&mut out, &s.degraded.next)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<TrainingSample>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::MalformedInput("not a sample archive (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::MalformedInput(format!(
            "sample archive version {version}, expected {VERSION}"
        )));
    }
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;

    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut qp = [0u8; 1];
        r.read_exact(&mut qp)?;
        let qp = QpCode::encode(qp[0])?;
        let frame_index = read_u32(&mut r)? as usize;
        let target = read_plane(&mut r, h, w)?;
        let prev = read_plane(&mut r, h, w)?;
        let curr = read_plane(&mut r, h, w)?;
        let next = read_plane(&mut r, h, w)?;
        samples.push(TrainingSample::new(
            FrameTriplet::new(prev, curr, next, frame_index)?,
            target,
            qp,
        )?);
    }
    Ok(samples)
}

fn write_plane(out: &mut impl Write, frame: &LumaFrame) -> Result<()> {
    for &v in frame.pixels() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_plane(r: &mut impl Read, h: usize, w: usize) -> Result<LumaFrame> {
    let mut buf = vec![0u8; h * w * 4];
    r.read_exact(&mut buf)?;
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    LumaFrame::new(Array2::from_shape_vec((h, w), data).unwrap())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
