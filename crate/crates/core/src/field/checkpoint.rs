//! CSN1 checkpoints: little-endian header, then bounds, parameters and
//! running statistics as f32 in layer order.

use std::io::{Read, Write};
use std::path::Path;

use super::net::{encoded_width, BnStats, Layout};
use super::{FieldModel, FieldSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSN1";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_BATCH_NORM: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for &v in vs {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

impl FieldModel {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let s = self.spec();
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(&mut w, CHECKPOINT_VERSION)?;
        put_u32(&mut w, s.dof as u32)?;
        put_u32(&mut w, s.point_dim as u32)?;
        put_u32(&mut w, s.frequencies as u32)?;
        put_u32(&mut w, s.hidden.len() as u32)?;
        for &h in &s.hidden {
            put_u32(&mut w, h as u32)?;
        }
        put_u32(&mut w, if s.batch_norm { FLAG_BATCH_NORM } else { 0 })?;
        put_f32s(&mut w, &[s.dropout])?;
        put_f32s(&mut w, &s.q_lower)?;
        put_f32s(&mut w, &s.q_upper)?;
        put_f32s(&mut w, &s.p_lower)?;
        put_f32s(&mut w, &s.p_upper)?;
        put_f32s(&mut w, &self.params)?;
        for st in &self.running {
            put_f32s(&mut w, &st.mean)?;
            put_f32s(&mut w, &st.var)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a CSN1 checkpoint".into()));
        }
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let dof = get_u32(&mut r)? as usize;
        let point_dim = get_u32(&mut r)? as usize;
        let frequencies = get_u32(&mut r)? as usize;
        let layers = get_u32(&mut r)? as usize;
        if dof == 0 || dof > 64 || frequencies > 32 || layers > 1024 {
            return Err(Error::Format("implausible checkpoint header".into()));
        }
        let mut hidden = Vec::with_capacity(layers);
        for _ in 0..layers {
            let h = get_u32(&mut r)? as usize;
            if h == 0 || h > 1 << 16 {
                return Err(Error::Format(format!("implausible layer width {h}")));
            }
            hidden.push(h);
        }
        let flags = get_u32(&mut r)?;
        let dropout = get_f32s(&mut r, 1)?[0];
        let q_lower = get_f32s(&mut r, dof)?;
        let q_upper = get_f32s(&mut r, dof)?;
        let p_lower = get_f32s(&mut r, point_dim)?;
        let p_upper = get_f32s(&mut r, point_dim)?;
        let spec = FieldSpec {
            dof,
            point_dim,
            hidden: hidden.clone(),
            frequencies,
            dropout,
            batch_norm: flags & FLAG_BATCH_NORM != 0,
            q_lower,
            q_upper,
            p_lower,
            p_upper,
        };
        let layout = Layout::new(encoded_width(dof + point_dim, frequencies), &hidden, spec.batch_norm);
        let params = get_f32s(&mut r, layout.total)?;
        let mut running = Vec::new();
        if spec.batch_norm {
            for &h in &hidden {
                let mean = get_f32s(&mut r, h)?;
                let var = get_f32s(&mut r, h)?;
                running.push(BnStats { mean, var });
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let mut model = FieldModel::new(spec, 0)?;
        model.params = params;
        model.running = running;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
