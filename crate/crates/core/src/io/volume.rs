//! Volume files: `.svh` text header plus sibling `.raw` float32 payload.

use std::path::Path;

use super::header::Header;
use super::{payload_path, read_f32_payload, write_f32_payload, FormatError};
use crate::volume::{Geometry, Volume3D};

const FORMAT: &str = "volume";
const VERSION: u32 = 1;

/// Writes `volume` as a header at `path` (conventionally `.svh`) and the
/// payload in a sibling `.raw` file. Voxels are quantized to float32.
pub fn write_volume(path: &Path, volume: &Volume3D) -> Result<(), FormatError> {
    let raw = payload_path(path);
    let g = volume.geometry();
    let mut h = Header::new();
    h.push_usizes("dims", &g.dims);
    h.push_f64s("spacing", &g.spacing_mm);
    h.push_f64s("origin", &g.origin_mm);
    h.push_str("dtype", "float32");
    h.push_str("byteorder", "little");
    h.push_str(
        "payload",
        raw.file_name()
            .expect("payload path has a file name")
            .to_str()
            .expect("payload file name is utf-8"),
    );
    h.write(path, FORMAT, VERSION)?;
    write_f32_payload(&raw, volume.data())
}

/// Reads a volume written by [`write_volume`].
pub fn read_volume(path: &Path) -> Result<Volume3D, FormatError> {
    let h = Header::read(path, FORMAT, VERSION)?;
    let dims: [usize; 3] = h.require_usizes(path, FORMAT, "dims")?;
    let spacing: [f64; 3] = h.require_f64s(path, FORMAT, "spacing")?;
    let origin: [f64; 3] = h.require_f64s(path, FORMAT, "origin")?;
    let dtype = h.require_str(path, FORMAT, "dtype")?;
    if dtype != "float32" {
        return Err(FormatError::malformed(
            path,
            FORMAT,
            format!("unsupported dtype {dtype:?}"),
        ));
    }
    let order = h.require_str(path, FORMAT, "byteorder")?;
    if order != "little" {
        return Err(FormatError::malformed(
            path,
            FORMAT,
            format!("unsupported byteorder {order:?}"),
        ));
    }
    let payload_name = h.require_str(path, FORMAT, "payload")?;
    let raw = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(payload_name);

    let geometry = Geometry::new(dims, spacing, origin)
        .map_err(|e| FormatError::malformed(path, FORMAT, e.to_string()))?;
    let data = read_f32_payload(&raw, geometry.voxels())?;
    Volume3D::from_data(geometry, data)
        .map_err(|e| FormatError::malformed(path, FORMAT, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn zero_volume_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.svh");
        let g = Geometry::new([2, 2, 2], [1.5, 2.0, 2.5], [-1.0, 0.0, 3.0]).unwrap();
        let v = Volume3D::zeros(g);
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn random_volume_round_trips_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.svh");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let g = Geometry::isotropic([5, 4, 3], 0.8).unwrap();
        let data: Vec<f64> = (0..g.voxels()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v = Volume3D::from_data(g, data).unwrap();

        write_volume(&path, &v).unwrap();
        let header1 = std::fs::read(&path).unwrap();
        let raw1 = std::fs::read(dir.path().join("v.raw")).unwrap();

        // Re-writing what was read back must reproduce both files exactly.
        let back = read_volume(&path).unwrap();
        write_volume(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), header1);
        assert_eq!(std::fs::read(dir.path().join("v.raw")).unwrap(), raw1);
    }

    #[test]
    fn payload_size_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.svh");
        let g = Geometry::isotropic([2, 2, 2], 1.0).unwrap();
        write_volume(&path, &Volume3D::zeros(g)).unwrap();
        std::fs::write(dir.path().join("v.raw"), [0u8; 12]).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(FormatError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn malformed_header_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.svh");
        std::fs::write(&path, "spinemark volume 1\ndims 2 2\n").unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(FormatError::Malformed { .. })
        ));
    }

    #[test]
    fn missing_payload_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.svh");
        let g = Geometry::isotropic([2, 2, 2], 1.0).unwrap();
        write_volume(&path, &Volume3D::zeros(g)).unwrap();
        std::fs::remove_file(dir.path().join("v.raw")).unwrap();
        assert!(matches!(read_volume(&path), Err(FormatError::Io { .. })));
    }
}
