//! Model files: `.svm` text header plus sibling `.raw` float32 payload.
//!
//! The payload holds every parameter in declared layer order (encoder convs
//! shallow to deep, bottleneck, decoder convs deep to shallow, branch convs
//! deep to shallow, final conv; weights before bias within a conv), exactly
//! as [`NetworkParams::flatten`] emits them.

use std::path::Path;

use super::header::Header;
use super::{payload_path, read_f32_payload, write_f32_payload, FormatError};
use crate::net::{NetworkSpec, TrainedModel};

const FORMAT: &str = "model";
const VERSION: u32 = 1;

/// Writes `model` as a header at `path` (conventionally `.svm`) and the
/// parameters in a sibling `.raw` file, quantized to float32.
pub fn write_model(path: &Path, model: &TrainedModel) -> Result<(), FormatError> {
    let raw = payload_path(path);
    let spec = &model.params.spec;
    let mut h = Header::new();
    h.push("labels", &model.labels);
    h.push_usizes("in_channels", &[spec.in_channels]);
    h.push_usizes("out_channels", &[spec.out_channels]);
    h.push_usizes("widths", &spec.widths);
    h.push_f64s("sigma_mm", &[model.sigma_mm]);
    h.push_usizes("param_count", &[model.params.param_count()]);
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
    write_f32_payload(&raw, &model.params.flatten())
}

/// Reads a model written by [`write_model`].
pub fn read_model(path: &Path) -> Result<TrainedModel, FormatError> {
    let h = Header::read(path, FORMAT, VERSION)?;
    let labels: Vec<String> = h.require(path, FORMAT, "labels")?.to_vec();
    let [in_channels] = h.require_usizes(path, FORMAT, "in_channels")?;
    let [out_channels] = h.require_usizes(path, FORMAT, "out_channels")?;
    let widths: Vec<usize> = h
        .require(path, FORMAT, "widths")?
        .iter()
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| FormatError::malformed(path, FORMAT, format!("bad width {v:?}")))
        })
        .collect::<Result<_, _>>()?;
    let [sigma_mm] = h.require_f64s(path, FORMAT, "sigma_mm")?;
    let [param_count] = h.require_usizes(path, FORMAT, "param_count")?;
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

    let spec = NetworkSpec::new(in_channels, out_channels, widths)
        .map_err(|e| FormatError::malformed(path, FORMAT, e.to_string()))?;
    let mut params = spec.zero_params();
    if params.param_count() != param_count {
        return Err(FormatError::malformed(
            path,
            FORMAT,
            format!(
                "param_count {param_count} does not match architecture ({})",
                params.param_count()
            ),
        ));
    }
    let flat = read_f32_payload(&raw, param_count)?;
    params
        .assign_flat(&flat)
        .map_err(|e| FormatError::malformed(path, FORMAT, e.to_string()))?;
    TrainedModel::new(labels, sigma_mm, params)
        .map_err(|e| FormatError::malformed(path, FORMAT, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> TrainedModel {
        let spec = NetworkSpec::new(1, 2, vec![2, 3]).unwrap();
        TrainedModel::new(
            vec!["T1".to_string(), "T2".to_string()],
            2.0,
            spec.init_params(42),
        )
        .unwrap()
    }

    #[test]
    fn model_round_trips_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.svm");
        let model = sample_model();
        write_model(&path, &model).unwrap();
        let header1 = std::fs::read(&path).unwrap();
        let raw1 = std::fs::read(dir.path().join("m.raw")).unwrap();

        let back = read_model(&path).unwrap();
        assert_eq!(back.labels, model.labels);
        assert_eq!(back.sigma_mm, model.sigma_mm);
        assert_eq!(back.params.spec, model.params.spec);

        write_model(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), header1);
        assert_eq!(std::fs::read(dir.path().join("m.raw")).unwrap(), raw1);
    }

    #[test]
    fn parameters_survive_at_float32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.svm");
        let model = sample_model();
        write_model(&path, &model).unwrap();
        let back = read_model(&path).unwrap();
        for (a, b) in model
            .params
            .flatten()
            .iter()
            .zip(back.params.flatten())
        {
            assert_eq!(*a as f32, b as f32);
            assert_eq!(b, (*a as f32) as f64);
        }
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.svm");
        write_model(&path, &sample_model()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("labels T1 T2", "labels T1")).unwrap();
        assert!(matches!(
            read_model(&path),
            Err(FormatError::Malformed { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.svm");
        write_model(&path, &sample_model()).unwrap();
        let raw = dir.path().join("m.raw");
        let bytes = std::fs::read(&raw).unwrap();
        std::fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_model(&path),
            Err(FormatError::SizeMismatch { .. })
        ));
    }
}
