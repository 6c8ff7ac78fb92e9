//! Text headers for binary artifacts.
//!
//! Line 1: `spinemark <format> <version>`. Remaining lines: `key value...`
//! with space-separated values. Keys may repeat; order is preserved.

use std::path::Path;

use super::FormatError;

pub(crate) struct Header {
    entries: Vec<(String, Vec<String>)>,
}

impl Header {
    pub fn new() -> Header {
        Header {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, values: &[String]) {
        self.entries.push((key.to_string(), values.to_vec()));
    }

    pub fn push_str(&mut self, key: &str, value: &str) {
        self.push(key, &[value.to_string()]);
    }

    pub fn push_usizes(&mut self, key: &str, values: &[usize]) {
        self.push(
            key,
            &values.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
        );
    }

    pub fn push_f64s(&mut self, key: &str, values: &[f64]) {
        self.push(
            key,
            &values.iter().map(|v| super::fmt_f64(*v)).collect::<Vec<_>>(),
        );
    }

    /// Serializes header text including the magic line.
    pub fn render(&self, format: &str, version: u32) -> String {
        let mut out = format!("spinemark {format} {version}\n");
        for (key, values) in &self.entries {
            out.push_str(key);
            for v in values {
                out.push(' ');
                out.push_str(v);
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path, format: &'static str, version: u32) -> Result<(), FormatError> {
        std::fs::write(path, self.render(format, version)).map_err(|e| FormatError::io(path, e))
    }

    /// Parses a header file, checking format name and version.
    pub fn read(path: &Path, format: &'static str, version: u32) -> Result<Header, FormatError> {
        let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        let mut lines = text.lines();
        let magic = lines
            .next()
            .ok_or_else(|| FormatError::malformed(path, format, "empty file"))?;
        let expect = format!("spinemark {format} {version}");
        if magic.trim_end() != expect {
            return Err(FormatError::malformed(
                path,
                format,
                format!("bad magic line {magic:?}, expected {expect:?}"),
            ));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace().map(str::to_string);
            let key = parts.next().ok_or_else(|| {
                FormatError::malformed(path, format, format!("blank key on line {}", n + 2))
            })?;
            entries.push((key, parts.collect()));
        }
        Ok(Header { entries })
    }

    /// All values of every occurrence of `key`, in file order.
    pub fn all(&self, key: &str) -> Vec<&[String]> {
        self.entries
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
            .collect()
    }

    /// Values of the sole occurrence of `key`.
    pub fn require(
        &self,
        path: &Path,
        format: &'static str,
        key: &str,
    ) -> Result<&[String], FormatError> {
        let hits = self.all(key);
        match hits.len() {
            1 => Ok(hits[0]),
            0 => Err(FormatError::malformed(
                path,
                format,
                format!("missing key {key:?}"),
            )),
            n => Err(FormatError::malformed(
                path,
                format,
                format!("key {key:?} appears {n} times"),
            )),
        }
    }

    pub fn require_usizes<const N: usize>(
        &self,
        path: &Path,
        format: &'static str,
        key: &str,
    ) -> Result<[usize; N], FormatError> {
        let vals = self.require(path, format, key)?;
        parse_n(vals, path, format, key)
    }

    pub fn require_f64s<const N: usize>(
        &self,
        path: &Path,
        format: &'static str,
        key: &str,
    ) -> Result<[f64; N], FormatError> {
        let vals = self.require(path, format, key)?;
        parse_n(vals, path, format, key)
    }

    pub fn require_str(
        &self,
        path: &Path,
        format: &'static str,
        key: &str,
    ) -> Result<&str, FormatError> {
        let vals = self.require(path, format, key)?;
        if vals.len() != 1 {
            return Err(FormatError::malformed(
                path,
                format,
                format!("key {key:?} wants 1 value, has {}", vals.len()),
            ));
        }
        Ok(&vals[0])
    }
}

fn parse_n<T: std::str::FromStr + Copy + Default, const N: usize>(
    vals: &[String],
    path: &Path,
    format: &'static str,
    key: &str,
) -> Result<[T; N], FormatError> {
    if vals.len() != N {
        return Err(FormatError::malformed(
            path,
            format,
            format!("key {key:?} wants {N} values, has {}", vals.len()),
        ));
    }
    let mut out = [T::default(); N];
    for (i, v) in vals.iter().enumerate() {
        out[i] = v.parse().map_err(|_| {
            FormatError::malformed(path, format, format!("bad value {v:?} for key {key:?}"))
        })?;
    }
    Ok(out)
}
