//! Output formatting shared by CSV artifacts and checkpoints.
//!
//! All floats cross the filesystem boundary as decimal text with 17
//! significant digits, which round-trips IEEE-754 doubles exactly and is
//! stable across languages. CSV files carry a header row, UTF-8 content,
//! and LF line endings.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// Render a double with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// A CSV document under construction.
pub struct Csv {
    buf: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = String::new();
        buf.push_str(&header.join(","));
        buf.push('\n');
        Self {
            buf,
            columns: header.len(),
        }
    }

    /// Append one row of already-formatted fields.
    pub fn row(&mut self, fields: &[String]) {
        debug_assert_eq!(fields.len(), self.columns);
        let mut first = true;
        for f in fields {
            debug_assert!(!f.contains(',') && !f.contains('\n'));
            if !first {
                self.buf.push(',');
            }
            let _ = write!(self.buf, "{f}");
            first = false;
        }
        self.buf.push('\n');
    }

    pub fn into_string(self) -> String {
        self.buf
    }

    pub fn write(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_round_trips_exactly() {
        for &x in &[0.1, -1.0 / 3.0, 1e-300, 2.0f64.powi(60), 0.5] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(x, back, "{s}");
        }
    }

    #[test]
    fn csv_layout() {
        let mut csv = Csv::new(&["a", "b"]);
        csv.row(&["1".into(), fmt_f64(0.5)]);
        let text = csv.into_string();
        assert_eq!(text, "a,b\n1,5.0000000000000000e-1\n");
    }
}
