//! VNP1 checkpoint container: magic, version, named f32 blobs with shapes,
//! and a trailing CRC32 over everything before it. Configuration rides
//! along as reserved `_meta.*` blobs so a checkpoint is self-describing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pndata::temp_sibling;
use crate::scalar::Scalar;
use crate::tensor::Dims4;
use crate::tucker::TuckerRanks;

use super::{FilterVariant, GcrmConfig, GcrmStage, Param, ParamSet, VnpnetConfig, VnpnetParams};

pub const MAGIC: [u8; 4] = *b"VNP1";
pub const VERSION: u32 = 1;

/// Lossless f64 transport inside an f32 blob: the two bit halves.
fn f64_halves(v: f64) -> [f32; 2] {
    let bits = v.to_bits();
    [
        f32::from_bits((bits >> 32) as u32),
        f32::from_bits(bits as u32),
    ]
}

fn f64_from_halves(h: &[f32]) -> f64 {
    let bits = ((h[0].to_bits() as u64) << 32) | h[1].to_bits() as u64;
    f64::from_bits(bits)
}

fn meta_blobs(cfg: &VnpnetConfig) -> Vec<(String, Vec<f32>)> {
    let d = cfg.dims;
    let r = cfg.ranks;
    let mut blobs = vec![
        (
            "_meta.dims".to_string(),
            vec![d.c as f32, d.t as f32, d.h as f32, d.w as f32],
        ),
        (
            "_meta.ranks".to_string(),
            vec![r.c as f32, r.t as f32, r.h as f32, r.w as f32],
        ),
        ("_meta.embed_dim".to_string(), vec![cfg.embed_dim as f32]),
        (
            "_meta.variant".to_string(),
            vec![match cfg.variant {
                FilterVariant::Tucker => 0.0,
                FilterVariant::Svd => 1.0,
                FilterVariant::Mlp => 2.0,
            }],
        ),
        ("_meta.p_drop".to_string(), f64_halves(cfg.p_drop).to_vec()),
        (
            "_meta.gate_rescale".to_string(),
            vec![if cfg.gate_rescale { 1.0 } else { 0.0 }],
        ),
        (
            "_meta.core_mask_bypass".to_string(),
            vec![if cfg.core_mask_bypass { 1.0 } else { 0.0 }],
        ),
        ("_meta.mlp_hidden".to_string(), vec![cfg.mlp_hidden as f32]),
        ("_meta.gcrm.patch".to_string(), vec![cfg.gcrm.patch as f32]),
        (
            "_meta.gcrm.head_dim".to_string(),
            vec![cfg.gcrm.head_dim as f32],
        ),
        (
            "_meta.gcrm.drop_path".to_string(),
            f64_halves(cfg.gcrm.drop_path).to_vec(),
        ),
    ];
    let mut stages = Vec::new();
    for s in &cfg.gcrm.stages {
        stages.extend_from_slice(&[
            s.depth as f32,
            s.dim as f32,
            s.window.0 as f32,
            s.window.1 as f32,
            s.window.2 as f32,
            if s.global_attn { 1.0 } else { 0.0 },
        ]);
    }
    blobs.push(("_meta.gcrm.stages".to_string(), stages));
    blobs
}

fn config_from_meta(meta: &std::collections::BTreeMap<String, Vec<f32>>) -> Result<VnpnetConfig> {
    let take = |key: &str| -> Result<&Vec<f32>> {
        meta.get(key)
            .ok_or_else(|| Error::invalid(format!("checkpoint missing {key}")))
    };
    let dims = take("_meta.dims")?;
    let ranks = take("_meta.ranks")?;
    let stages_raw = take("_meta.gcrm.stages")?;
    if dims.len() != 4 || ranks.len() != 4 || stages_raw.len() % 6 != 0 {
        return Err(Error::invalid("malformed checkpoint metadata"));
    }
    let stages = stages_raw
        .chunks_exact(6)
        .map(|s| GcrmStage {
            depth: s[0] as usize,
            dim: s[1] as usize,
            window: (s[2] as usize, s[3] as usize, s[4] as usize),
            global_attn: s[5] != 0.0,
        })
        .collect();
    let variant = match take("_meta.variant")?[0] as u32 {
        0 => FilterVariant::Tucker,
        1 => FilterVariant::Svd,
        2 => FilterVariant::Mlp,
        other => return Err(Error::invalid(format!("unknown variant code {other}"))),
    };
    Ok(VnpnetConfig {
        dims: Dims4::new(
            dims[0] as usize,
            dims[1] as usize,
            dims[2] as usize,
            dims[3] as usize,
        ),
        embed_dim: take("_meta.embed_dim")?[0] as usize,
        ranks: TuckerRanks::new(
            ranks[0] as usize,
            ranks[1] as usize,
            ranks[2] as usize,
            ranks[3] as usize,
        ),
        variant,
        gcrm: GcrmConfig {
            patch: take("_meta.gcrm.patch")?[0] as usize,
            stages,
            head_dim: take("_meta.gcrm.head_dim")?[0] as usize,
            drop_path: f64_from_halves(take("_meta.gcrm.drop_path")?),
        },
        p_drop: f64_from_halves(take("_meta.p_drop")?),
        gate_rescale: take("_meta.gate_rescale")?[0] != 0.0,
        core_mask_bypass: take("_meta.core_mask_bypass")?[0] != 0.0,
        mlp_hidden: take("_meta.mlp_hidden")?[0] as usize,
    })
}

fn push_blob(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize parameters and config; payloads stored as f32 little-endian,
/// written via temp file + atomic rename.
pub fn write_checkpoint<T: Scalar>(path: impl AsRef<Path>, params: &VnpnetParams<T>) -> Result<()> {
    let path = path.as_ref();
    let meta = meta_blobs(&params.cfg);
    let blob_count = meta.len() + params.set.len();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(blob_count as u32).to_le_bytes());
    for (name, data) in &meta {
        push_blob(&mut bytes, name, &[data.len()], data);
    }
    for (name, param) in &params.set {
        let data: Vec<f32> = param.data().iter().map(|v| v.as_f32()).collect();
        push_blob(&mut bytes, name, &param.shape, &data);
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());

    let tmp = temp_sibling(path);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&bytes)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Load a checkpoint, validating magic, version, and the trailing CRC.
pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<VnpnetParams<T>> {
    let bytes = std::fs::read(path.as_ref())?;
    if bytes.len() < 12 + 4 {
        return Err(Error::Truncated {
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            record: None,
            detail: format!("bad magic {:02x?}, expected {MAGIC:02x?}", &bytes[..4]),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(body);
    if crc != stored_crc {
        return Err(Error::Corrupt {
            offset: body.len() as u64,
            record: None,
            detail: format!("checkpoint crc mismatch: stored {stored_crc:08x}, computed {crc:08x}"),
        });
    }
    let mut cur = Cursor { bytes: body, pos: 4 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Corrupt {
            offset: 4,
            record: None,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let blob_count = cur.u32()? as usize;
    let mut meta = std::collections::BTreeMap::new();
    let mut set = ParamSet::new();
    for _ in 0..blob_count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Corrupt {
                offset: cur.pos as u64,
                record: None,
                detail: "blob name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = cur.take(4 * count)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(rest) = name.strip_prefix("_meta.") {
            let _ = rest;
            meta.insert(name, data);
        } else {
            set.insert(
                name,
                Param::new(shape, data.iter().map(|&v| T::of_f32(v)).collect()),
            );
        }
    }
    let cfg = config_from_meta(&meta)?;
    Ok(VnpnetParams { cfg, set })
}
