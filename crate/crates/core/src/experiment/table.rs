use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labelled numeric table, rendered as aligned text with a JSON twin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub values: Vec<f64>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: Vec<String>) -> Self {
        Self { title: title.into(), columns, rows: Vec::new(), meta: BTreeMap::new() }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push(TableRow { label: label.into(), values });
    }

    pub fn value(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.label == row).map(|r| r.values[c])
    }

    pub fn render(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
        let cells: Vec<Vec<String>> = self.rows.iter().map(|r| r.values.iter().map(|v| format!("{v:.2}")).collect()).collect();
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| cells.iter().map(|r| r[i].len()).chain([c.len()]).max().unwrap_or(0))
            .collect();
        let mut s = format!("{}\n", self.title);
        let _ = write!(s, "{:label_w$}", "system");
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(s, "  {c:>w$}");
        }
        s.push('\n');
        for (r, row) in self.rows.iter().zip(&cells) {
            let _ = write!(s, "{:label_w$}", r.label);
            for (v, w) in row.iter().zip(&widths) {
                let _ = write!(s, "  {v:>w$}");
            }
            s.push('\n');
        }
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# {k}: {v}");
        }
        s
    }

    /// Writes `<stem>.txt` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&txt, self.render()).map_err(|e| Error::io(&txt, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).expect("table serialises");
        fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_aligned_columns() {
        let mut t = Table::new("scores", vec!["reverse".into(), "cipher".into()]);
        t.push("a", vec![100.0, 5.5]);
        t.push("longer name", vec![0.0, 12.345]);
        t.meta.insert("seed".into(), "3".into());
        let s = t.render();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "scores");
        assert_eq!(lines[1], "system       reverse  cipher");
        assert_eq!(lines[2], "a             100.00    5.50");
        assert_eq!(lines[3], "longer name     0.00   12.35");
        assert_eq!(lines[4], "# seed: 3");
        assert_eq!(t.value("a", "cipher"), Some(5.5));
        assert_eq!(t.value("b", "cipher"), None);
    }
}
