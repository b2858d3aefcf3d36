//! Versioned binary model checkpoints.
//!
//! One file stores the whole variant: a single trajectory-level SAE for
//! concatenated models, or one SAE per timestep block otherwise. Parameter
//! tensors are f64 little-endian. The `.ridge` artifact the models were
//! trained against is referenced by its SHA-256 content hash so downstream
//! stages can refuse mismatched preprocessing.
//!
//! ```text
//! magic "SAEC" | version u32
//! | flags u32 (bit0 residualized, bit1 concatenated, bit2 matryoshka)
//! | t u32 | d_block u32 | k_traj u32 | ridge hash (32 bytes) | n_models u32
//! | per model: d_in u32 | m u32 | k u32 | n_groups u32 | group sizes
//! |   w_enc (m*d_in) | b_enc (m) | w_dec (d_in*m) | b_dec (d_in)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{SaeError, SaeModel};
use crate::wire::{FormatError, Reader, Writer};

pub const SAE_MAGIC: [u8; 4] = *b"SAEC";
pub const SAE_VERSION: u32 = 1;

const FLAG_RESIDUALIZED: u32 = 1;
const FLAG_CONCATENATED: u32 = 1 << 1;
const FLAG_MATRYOSHKA: u32 = 1 << 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub residualized: bool,
    pub concatenated: bool,
    pub matryoshka: bool,
    /// Timestep blocks the variant was trained over.
    pub t: usize,
    /// Channel width of one block.
    pub d_block: usize,
    /// Trajectory-level average sparsity budget.
    pub k_traj: usize,
    /// SHA-256 of the `.ridge` artifact used in preprocessing.
    pub ridge_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// One model (concatenated) or `t` per-block models.
    pub models: Vec<SaeModel>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<(), SaeError> {
        let h = &self.header;
        if h.t < 2 || h.d_block == 0 || h.k_traj == 0 {
            return Err(SaeError::BadConfig(format!(
                "bad checkpoint header: t={}, d_block={}, k_traj={}",
                h.t, h.d_block, h.k_traj
            )));
        }
        if h.concatenated {
            if self.models.len() != 1 {
                return Err(SaeError::BadConfig(format!(
                    "concatenated checkpoint must hold one model, got {}",
                    self.models.len()
                )));
            }
            if self.models[0].input_dim() != h.t * h.d_block {
                return Err(SaeError::ShapeMismatch {
                    expected: format!("input dim {}", h.t * h.d_block),
                    got: format!("input dim {}", self.models[0].input_dim()),
                });
            }
        } else {
            if self.models.len() != h.t {
                return Err(SaeError::BadConfig(format!(
                    "per-block checkpoint must hold {} models, got {}",
                    h.t,
                    self.models.len()
                )));
            }
            for m in &self.models {
                if m.input_dim() != h.d_block {
                    return Err(SaeError::ShapeMismatch {
                        expected: format!("input dim {}", h.d_block),
                        got: format!("input dim {}", m.input_dim()),
                    });
                }
            }
        }
        if h.matryoshka && (!h.concatenated || self.models[0].group_sizes().is_none()) {
            return Err(SaeError::BadConfig(
                "matryoshka checkpoints need a concatenated model with latent groups".into(),
            ));
        }
        Ok(())
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let h = &ckpt.header;
    let mut flags = 0u32;
    if h.residualized {
        flags |= FLAG_RESIDUALIZED;
    }
    if h.concatenated {
        flags |= FLAG_CONCATENATED;
    }
    if h.matryoshka {
        flags |= FLAG_MATRYOSHKA;
    }
    let mut w = Writer::new();
    w.magic(SAE_MAGIC)
        .u32(SAE_VERSION)
        .u32(flags)
        .u32(h.t as u32)
        .u32(h.d_block as u32)
        .u32(h.k_traj as u32)
        .bytes(&h.ridge_hash)
        .u32(ckpt.models.len() as u32);
    for m in &ckpt.models {
        let groups: Vec<u32> = m
            .group_sizes()
            .map(|g| g.iter().map(|s| *s as u32).collect())
            .unwrap_or_default();
        w.u32(m.input_dim() as u32)
            .u32(m.num_latents() as u32)
            .u32(m.k_avg() as u32)
            .u32(groups.len() as u32)
            .u32_slice(&groups);
        w.f64_iter(m.w_enc().iter().copied());
        w.f64_iter(m.b_enc().iter().copied());
        w.f64_iter(m.w_dec().iter().copied());
        w.f64_iter(m.b_dec().iter().copied());
    }
    w.into_bytes()
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, SaeError> {
    let mut r = Reader::new(bytes);
    r.magic(SAE_MAGIC)?;
    r.version(SAE_VERSION)?;
    let flags = r.u32()?;
    if flags & !(FLAG_RESIDUALIZED | FLAG_CONCATENATED | FLAG_MATRYOSHKA) != 0 {
        return Err(FormatError::invalid("flags", format!("unknown bits in {flags:#x}")).into());
    }
    let t = r.u32()? as usize;
    let d_block = r.u32()? as usize;
    let k_traj = r.u32()? as usize;
    let mut ridge_hash = [0u8; 32];
    ridge_hash.copy_from_slice(r.bytes(32)?);
    let n_models = r.u32()? as usize;
    if n_models == 0 || n_models > 4096 {
        return Err(FormatError::invalid("n_models", format!("{n_models}")).into());
    }
    let mut models = Vec::with_capacity(n_models);
    for _ in 0..n_models {
        let d_in = r.u32()? as usize;
        let m = r.u32()? as usize;
        let k = r.u32()? as usize;
        let n_groups = r.u32()? as usize;
        if n_groups > m {
            return Err(FormatError::invalid("groups", "more groups than latents").into());
        }
        let group_sizes: Vec<usize> = r.u32_vec(n_groups)?.iter().map(|v| *v as usize).collect();
        d_in.checked_mul(m)
            .ok_or_else(|| FormatError::invalid("dimensions", "d_in*m overflows"))?;
        let w_enc = r.f64_vec(m.checked_mul(d_in).unwrap())?;
        let b_enc = r.f64_vec(m)?;
        let w_dec = r.f64_vec(d_in * m)?;
        let b_dec = r.f64_vec(d_in)?;
        if !w_enc
            .iter()
            .chain(b_enc.iter())
            .chain(w_dec.iter())
            .chain(b_dec.iter())
            .all(|v| v.is_finite())
        {
            return Err(FormatError::NonFinite("model parameters").into());
        }
        let mut model = SaeModel::from_parts(
            Array2::from_shape_vec((m, d_in), w_enc)
                .map_err(|e| FormatError::invalid("w_enc", e.to_string()))?,
            Array1::from_vec(b_enc),
            Array2::from_shape_vec((d_in, m), w_dec)
                .map_err(|e| FormatError::invalid("w_dec", e.to_string()))?,
            Array1::from_vec(b_dec),
            k,
        )?;
        if n_groups > 0 {
            model.set_groups_raw(group_sizes)?;
        }
        models.push(model);
    }
    r.finish()?;
    let ckpt = Checkpoint {
        header: CheckpointHeader {
            residualized: flags & FLAG_RESIDUALIZED != 0,
            concatenated: flags & FLAG_CONCATENATED != 0,
            matryoshka: flags & FLAG_MATRYOSHKA != 0,
            t,
            d_block,
            k_traj,
            ridge_hash,
        },
        models,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), SaeError> {
    fs::write(path, write_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, SaeError> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::init_model;

    fn fixture() -> Checkpoint {
        let mut model = init_model(12, 6, 2, 3).unwrap();
        model.set_groups(3).unwrap();
        Checkpoint {
            header: CheckpointHeader {
                residualized: false,
                concatenated: true,
                matryoshka: true,
                t: 3,
                d_block: 4,
                k_traj: 2,
                ridge_hash: [7u8; 32],
            },
            models: vec![model],
        }
    }

    #[test]
    fn roundtrip() {
        let ckpt = fixture();
        let bytes = write_checkpoint(&ckpt);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn per_block_roundtrip() {
        let models: Vec<SaeModel> = (0..3)
            .map(|i| init_model(4, 8, 1 + i as usize, i).unwrap())
            .collect();
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                residualized: true,
                concatenated: false,
                matryoshka: false,
                t: 3,
                d_block: 4,
                k_traj: 6,
                ridge_hash: [0u8; 32],
            },
            models,
        };
        let back = read_checkpoint(&write_checkpoint(&ckpt)).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn header_model_consistency_is_enforced() {
        let mut ckpt = fixture();
        ckpt.header.d_block = 5; // 3 * 5 != 12
        let bytes = write_checkpoint(&ckpt);
        assert!(read_checkpoint(&bytes).is_err());
    }

    #[test]
    fn bad_magic_truncation_and_version_are_distinct() {
        let bytes = write_checkpoint(&fixture());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(
            read_checkpoint(&bad),
            Err(SaeError::Format(FormatError::BadMagic { .. }))
        ));
        assert!(matches!(
            read_checkpoint(&bytes[..bytes.len() - 2]),
            Err(SaeError::Format(FormatError::Truncated { .. }))
        ));
        let mut vbad = bytes.clone();
        vbad[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&vbad),
            Err(SaeError::Format(FormatError::UnsupportedVersion { .. }))
        ));
    }
}
