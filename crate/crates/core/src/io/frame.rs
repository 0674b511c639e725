//! Binary point-cloud frames: magic `HCPF`, version u16, point count u32,
//! then N×4 little-endian f32 (x, y, z, reflectance). Total length is
//! exactly 10 + 16·N bytes.

use std::path::Path;

use super::{ByteReader, FormatError};
use crate::types::{Point, PointCloud};

pub const FRAME_MAGIC: &[u8; 4] = b"HCPF";
pub const FRAME_VERSION: u16 = 1;

pub fn frame_to_bytes(cloud: &PointCloud) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(10 + 16 * cloud.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    let count =
        u32::try_from(cloud.len()).map_err(|_| FormatError::NonFinite { context: "point count" })?;
    out.extend_from_slice(&count.to_le_bytes());
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.r] {
            let f = v as f32;
            if !f.is_finite() {
                return Err(FormatError::NonFinite { context: "frame coordinates" });
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn frame_from_bytes(bytes: &[u8]) -> Result<PointCloud, FormatError> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != FRAME_MAGIC {
        return Err(FormatError::BadMagic { expected: "HCPF" });
    }
    let version = r.u16_le("version")?;
    if version != FRAME_VERSION {
        return Err(FormatError::UnsupportedVersion {
            what: "frame",
            expected: FRAME_VERSION,
            found: version,
        });
    }
    let count = r.u32_le("point count")? as usize;
    // length check before any allocation depending on `count`
    match (r.remaining() as u64).cmp(&(count as u64 * 16)) {
        std::cmp::Ordering::Less => return Err(FormatError::Truncated { context: "points" }),
        std::cmp::Ordering::Greater => return Err(FormatError::TrailingData),
        std::cmp::Ordering::Equal => {}
    }
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = r.f32_le("point")? as f64;
        let y = r.f32_le("point")? as f64;
        let z = r.f32_le("point")? as f64;
        let refl = r.f32_le("point")? as f64;
        if !(x.is_finite() && y.is_finite() && z.is_finite() && refl.is_finite()) {
            return Err(FormatError::NonFinite { context: "frame coordinates" });
        }
        points.push(Point::new(x, y, z, refl));
    }
    Ok(PointCloud::new(points))
}

pub fn write_frame(path: &Path, cloud: &PointCloud) -> Result<(), FormatError> {
    Ok(std::fs::write(path, frame_to_bytes(cloud)?)?)
}

pub fn read_frame(path: &Path) -> Result<PointCloud, FormatError> {
    frame_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cloud whose coordinates are exactly representable in f32, as every
    /// generated frame's are.
    fn f32_exact_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        let points = (0..n)
            .map(|_| {
                Point::new(
                    rng.gen_range(-50.0f32..50.0) as f64,
                    rng.gen_range(-50.0f32..50.0) as f64,
                    rng.gen_range(-3.0f32..3.0) as f64,
                    rng.gen_range(0.0f32..1.0) as f64,
                )
            })
            .collect();
        PointCloud::new(points)
    }

    #[test]
    fn empty_frame_round_trips() {
        let cloud = PointCloud::default();
        let bytes = frame_to_bytes(&cloud).unwrap();
        assert_eq!(bytes.len(), 10);
        assert_eq!(frame_from_bytes(&bytes).unwrap(), cloud);
    }

    #[test]
    fn one_point_frame_is_26_bytes() {
        let cloud = PointCloud::from_raw(&[[1.0, 2.0, 3.0, 0.5]]);
        assert_eq!(frame_to_bytes(&cloud).unwrap().len(), 26);
    }

    #[test]
    fn large_frame_round_trips_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let cloud = f32_exact_cloud(10_000, &mut rng);
        let bytes = frame_to_bytes(&cloud).unwrap();
        assert_eq!(bytes.len(), 10 + 16 * 10_000);
        let back = frame_from_bytes(&bytes).unwrap();
        assert_eq!(back, cloud);
        assert_eq!(frame_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn bad_magic_truncation_and_version_are_distinct_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let bytes = frame_to_bytes(&f32_exact_cloud(3, &mut rng)).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(frame_from_bytes(&wrong_magic), Err(FormatError::BadMagic { .. })));

        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(frame_from_bytes(truncated), Err(FormatError::Truncated { .. })));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            frame_from_bytes(&wrong_version),
            Err(FormatError::UnsupportedVersion { found: 9, .. })
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(frame_from_bytes(&trailing), Err(FormatError::TrailingData)));
    }

    #[test]
    fn inflated_count_does_not_allocate_or_crash() {
        let mut bytes = frame_to_bytes(&PointCloud::default()).unwrap();
        bytes[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(frame_from_bytes(&bytes), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn fuzzed_frames_never_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let base = frame_to_bytes(&f32_exact_cloud(20, &mut rng)).unwrap();
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
                    let extra = rng.gen_range(1..32);
                    mutated.extend((0..extra).map(|_| rng.gen::<u8>()));
                }
            }
            let _ = frame_from_bytes(&mutated);
        }
    }
}
