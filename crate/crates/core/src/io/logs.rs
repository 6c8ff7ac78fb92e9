//! Training log CSV: `epoch,loss`, one row per completed epoch, 1-based.

use std::path::Path;

use super::{fmt_f64, FormatError};

const FORMAT: &str = "training-log-csv";

pub fn write_training_log(path: &Path, losses: &[f64]) -> Result<(), FormatError> {
    let mut out = String::from("epoch,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, fmt_f64(*loss)));
    }
    std::fs::write(path, out).map_err(|e| FormatError::io(path, e))
}

pub fn read_training_log(path: &Path) -> Result<Vec<f64>, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("epoch,loss") {
        return Err(FormatError::malformed(path, FORMAT, "bad header row"));
    }
    let mut losses = Vec::new();
    for (n, line) in lines.enumerate() {
        let (epoch, loss) = line.split_once(',').ok_or_else(|| {
            FormatError::malformed(path, FORMAT, format!("row {}: missing comma", n + 2))
        })?;
        let epoch: usize = epoch.parse().map_err(|_| {
            FormatError::malformed(path, FORMAT, format!("row {}: bad epoch", n + 2))
        })?;
        if epoch != n + 1 {
            return Err(FormatError::malformed(
                path,
                FORMAT,
                format!("row {}: epoch {} out of order", n + 2, epoch),
            ));
        }
        losses.push(loss.parse().map_err(|_| {
            FormatError::malformed(path, FORMAT, format!("row {}: bad loss", n + 2))
        })?);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let losses = vec![0.5, 0.25, 0.125];
        write_training_log(&path, &losses).unwrap();
        assert_eq!(read_training_log(&path).unwrap(), losses);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,loss\n1,0.5\n2,0.25\n"));
    }

    #[test]
    fn out_of_order_epochs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        std::fs::write(&path, "epoch,loss\n2,0.5\n").unwrap();
        assert!(read_training_log(&path).is_err());
    }
}
