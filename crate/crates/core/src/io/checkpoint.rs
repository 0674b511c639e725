//! Binary parameter checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "HCPC"
//! version u16
//! count   u32      number of parameters
//! repeat count times:
//!   name_len u16, name UTF-8, rows u32, cols u32, rows*cols f64
//! ```
//!
//! Values are written in parameter insertion order, so a checkpoint is a
//! deterministic function of the parameter set.

use std::path::Path;

use super::{ByteReader, FormatError};
use crate::tensor::{FeatureMatrix, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCPC";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn checkpoint_to_bytes(params: &ParamSet) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(params.len())
        .map_err(|_| FormatError::NonFinite { context: "parameter count exceeds u32" })?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, value) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| FormatError::NonFinite { context: "parameter name exceeds u16 bytes" })?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rows = u32::try_from(value.rows()).expect("row count fits u32");
        let cols = u32::try_from(value.cols()).expect("col count fits u32");
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&cols.to_le_bytes());
        for &v in value.data() {
            if !v.is_finite() {
                return Err(FormatError::NonFinite { context: "checkpoint value" });
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Vec<(String, FeatureMatrix)>, FormatError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic { expected: "HCPC" });
    }
    let version = r.u16_le("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            what: "checkpoint",
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let count = r.u32_le("parameter count")? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u16_le("name length")? as usize;
        let name_bytes = r.take(name_len, "parameter name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| FormatError::InvalidUtf8)?
            .to_owned();
        let rows = r.u32_le("rows")? as usize;
        let cols = r.u32_le("cols")? as usize;
        // checked size math before any allocation: a hostile header cannot
        // request more memory than the file actually carries
        let cells = (rows as u64)
            .checked_mul(cols as u64)
            .ok_or(FormatError::Truncated { context: "value matrix" })?;
        let byte_len = cells
            .checked_mul(8)
            .ok_or(FormatError::Truncated { context: "value matrix" })?;
        if byte_len > r.remaining() as u64 {
            return Err(FormatError::Truncated { context: "value matrix" });
        }
        let mut data = Vec::with_capacity(cells as usize);
        for _ in 0..cells {
            let v = r.f64_le("value")?;
            if !v.is_finite() {
                return Err(FormatError::NonFinite { context: "checkpoint value" });
            }
            data.push(v);
        }
        entries.push((name, FeatureMatrix::from_flat(rows, cols, data)));
    }
    if r.remaining() > 0 {
        return Err(FormatError::TrailingData);
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<(), FormatError> {
    Ok(std::fs::write(path, checkpoint_to_bytes(params)?)?)
}

/// Loads a checkpoint into an already-built parameter set. Every stored
/// parameter must exist with a matching shape, and every parameter in the
/// set must be covered, so architecture drift surfaces as a typed error.
pub fn load_checkpoint(path: &Path, params: &mut ParamSet) -> Result<(), FormatError> {
    let entries = checkpoint_from_bytes(&std::fs::read(path)?)?;
    if entries.len() != params.len() {
        return Err(FormatError::Parse {
            line: 0,
            message: format!(
                "checkpoint has {} parameters, model has {}",
                entries.len(),
                params.len()
            ),
        });
    }
    for (name, value) in entries {
        params.load_value(&name, value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_params() -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamSet::new();
        params.add_xavier("encoder.weight", 4, 3, &mut rng).unwrap();
        params.add_zeros("encoder.bias", 1, 3).unwrap();
        params.add_filled("head.gain", 1, 5, 1.0).unwrap();
        params
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = sample_params();
        let bytes = checkpoint_to_bytes(&params).unwrap();
        let entries = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(entries.len(), 3);
        for ((name, value), (ref_name, ref_value)) in entries.iter().zip(params.iter()) {
            assert_eq!(name, ref_name);
            assert_eq!(value.rows(), ref_value.rows());
            assert_eq!(value.cols(), ref_value.cols());
            for (a, b) in value.data().iter().zip(ref_value.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // serialization is deterministic
        assert_eq!(bytes, checkpoint_to_bytes(&params).unwrap());
    }

    #[test]
    fn load_restores_values_into_live_set() {
        let params = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hcpc");
        write_checkpoint(&path, &params).unwrap();

        let mut fresh = sample_params();
        for id in fresh.ids().collect::<Vec<_>>() {
            fresh.get_mut(id).data_mut().iter_mut().for_each(|v| *v = -7.0);
        }
        load_checkpoint(&path, &mut fresh).unwrap();
        for (id, ref_id) in fresh.ids().zip(params.ids()).collect::<Vec<_>>() {
            assert_eq!(fresh.get(id).data(), params.get(ref_id).data());
        }
    }

    #[test]
    fn shape_and_name_mismatches_are_typed_errors() {
        let params = sample_params();
        let bytes = checkpoint_to_bytes(&params).unwrap();

        let mut renamed = ParamSet::new();
        renamed.add_zeros("encoder.weight", 4, 3).unwrap();
        renamed.add_zeros("encoder.bias", 1, 3).unwrap();
        renamed.add_zeros("other.gain", 1, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hcpc");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, &mut renamed),
            Err(FormatError::Tensor(_))
        ));

        let mut reshaped = ParamSet::new();
        reshaped.add_zeros("encoder.weight", 3, 4).unwrap();
        reshaped.add_zeros("encoder.bias", 1, 3).unwrap();
        reshaped.add_zeros("head.gain", 1, 5).unwrap();
        assert!(matches!(
            load_checkpoint(&path, &mut reshaped),
            Err(FormatError::Tensor(_))
        ));

        let mut short = ParamSet::new();
        short.add_zeros("encoder.weight", 4, 3).unwrap();
        assert!(matches!(load_checkpoint(&path, &mut short), Err(FormatError::Parse { .. })));
    }

    #[test]
    fn corrupt_headers_are_distinct_errors() {
        let bytes = checkpoint_to_bytes(&sample_params()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bad_magic),
            Err(FormatError::BadMagic { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            checkpoint_from_bytes(&bad_version),
            Err(FormatError::UnsupportedVersion { .. })
        ));

        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(checkpoint_from_bytes(&trailing), Err(FormatError::TrailingData)));
    }

    #[test]
    fn hostile_shape_header_cannot_force_allocation() {
        // one parameter claiming u32::MAX x u32::MAX cells
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"HCPC");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'w');
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn fuzzed_checkpoints_never_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let base = checkpoint_to_bytes(&sample_params()).unwrap();
        for _ in 0..2000 {
            let mut mutated = base.clone();
            match rng.gen_range(0..3) {
                0 => {
                    let cut = rng.gen_range(0..mutated.len());
                    mutated.truncate(cut);
                }
                1 => {
                    let at = rng.gen_range(0..mutated.len());
                    mutated[at] ^= 1 << rng.gen_range(0..8);
                }
                _ => {
                    mutated.push(rng.gen::<u8>());
                }
            }
            let _ = checkpoint_from_bytes(&mutated);
        }
    }
}
