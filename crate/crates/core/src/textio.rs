//! Whitespace-separated text formats shared by every model file.
//!
//! A labeled matrix is a header line `<rows> <cols>` followed by one line per
//! row: `<label> <v1> ... <vcols>`. Word embeddings use it directly; model
//! files bundle several labeled matrices under `@name` markers after a
//! `bundle <kind>` line and optional `key=value` metadata lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Real};

/// Row labels plus the matrix they index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMatrix<T> {
    pub labels: Vec<String>,
    pub matrix: DenseMatrix<T>,
}

impl<T: Real> LabeledMatrix<T> {
    pub fn new(labels: Vec<String>, matrix: DenseMatrix<T>) -> Result<Self> {
        if labels.len() != matrix.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                matrix.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| l.is_empty() || l.contains(char::is_whitespace)) {
            return Err(Error::InvalidInput(format!(
                "row label {bad:?} is empty or contains whitespace"
            )));
        }
        Ok(Self { labels, matrix })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out);
        out
    }

    fn render_into(&self, out: &mut String) {
        let _ = writeln!(out, "{} {}", self.matrix.rows(), self.matrix.cols());
        for (r, label) in self.labels.iter().enumerate() {
            out.push_str(label);
            for v in self.matrix.row(r) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let m = parse_block(&mut lines, source)?;
        if let Some((i, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse(source, i + 1, format!("unexpected trailing line {l:?}")));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

fn parse_block<'a, T: Real>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    source: &str,
) -> Result<LabeledMatrix<T>> {
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(source, 0, "missing `<rows> <cols>` header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let parse_count = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::parse(source, hline + 1, format!("bad count {s:?}")))
    };
    if dims.len() != 2 {
        return Err(Error::parse(source, hline + 1, "header must be `<rows> <cols>`"));
    }
    let rows = parse_count(dims[0])?;
    let cols = parse_count(dims[1])?;

    let mut labels = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (ln, line) = lines.next().ok_or_else(|| {
            Error::parse(
                source,
                hline + 1 + r,
                format!("truncated: expected {rows} rows, found {r}"),
            )
        })?;
        let mut fields = line.split_whitespace();
        let label = fields
            .next()
            .ok_or_else(|| Error::parse(source, ln + 1, "empty row"))?;
        let before = data.len();
        for f in fields {
            let v: T = f
                .parse()
                .map_err(|_| Error::parse(source, ln + 1, format!("bad number {f:?}")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::parse(
                source,
                ln + 1,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
        labels.push(label.to_string());
    }
    Ok(LabeledMatrix {
        labels,
        matrix: DenseMatrix::from_vec(rows, cols, data)?,
    })
}

/// A kind tag, string metadata, and named labeled matrices in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixBundle<T> {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub blocks: Vec<(String, LabeledMatrix<T>)>,
}

impl<T: Real> MatrixBundle<T> {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: BTreeMap::new(),
            blocks: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, name: &str, block: LabeledMatrix<T>) {
        self.blocks.push((name.to_string(), block));
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidInput(format!("{} bundle lacks `{key}`", self.kind)))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let s = self.meta_str(key)?;
        s.parse()
            .map_err(|_| Error::InvalidInput(format!("bad value {s:?} for `{key}`")))
    }

    pub fn block(&self, name: &str) -> Result<&LabeledMatrix<T>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::InvalidInput(format!("{} bundle lacks block `{name}`", self.kind)))
    }

    pub fn take_block(&mut self, name: &str) -> Result<LabeledMatrix<T>> {
        let pos = self
            .blocks
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidInput(format!("{} bundle lacks block `{name}`", self.kind)))?;
        Ok(self.blocks.remove(pos).1)
    }

    pub fn render(&self) -> String {
        let mut out = format!("bundle {}\n", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k}={v}");
        }
        for (name, block) in &self.blocks {
            let _ = writeln!(out, "@{name}");
            block.render_into(&mut out);
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::parse(source, 1, "empty model file"))?;
        let kind = first
            .strip_prefix("bundle ")
            .ok_or_else(|| Error::parse(source, 1, "expected `bundle <kind>`"))?
            .trim()
            .to_string();
        let mut bundle = Self::new(kind);
        while let Some(&(i, line)) = lines.peek() {
            if line.starts_with('@') {
                break;
            }
            lines.next();
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, i + 1, "expected `key=value`"))?;
            bundle.meta.insert(k.to_string(), v.to_string());
        }
        while let Some((i, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let name = line
                .strip_prefix('@')
                .ok_or_else(|| Error::parse(source, i + 1, "expected `@<block>`"))?;
            let block = parse_block(&mut lines, source)?;
            bundle.blocks.push((name.to_string(), block));
        }
        Ok(bundle)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Writes a file in one call so a failure never leaves a partial artifact
/// from a half-finished render.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_row_mismatch_is_an_error() {
        let text = "2 3\na 1 2 3\nb 4 5 6\nc 7 8 9\n";
        assert!(LabeledMatrix::<f64>::parse(text, "t").is_err());
        let truncated = "2 3\na 1 2 3\n";
        assert!(LabeledMatrix::<f64>::parse(truncated, "t").is_err());
        let short_row = "1 3\na 1 2\n";
        assert!(LabeledMatrix::<f64>::parse(short_row, "t").is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let mut b = MatrixBundle::<f64>::new("demo");
        b.set("dims", 2);
        b.push(
            "A",
            LabeledMatrix::new(
                vec!["x".into(), "y".into()],
                DenseMatrix::from_rows(&[vec![1.0, -0.5], vec![1e-300, 3.25]]).unwrap(),
            )
            .unwrap(),
        );
        let text = b.render();
        let back = MatrixBundle::<f64>::parse(&text, "t").unwrap();
        assert_eq!(back, b);
        assert_eq!(back.render(), text);
    }

    proptest! {
        #[test]
        fn values_round_trip_exactly(vals in prop::collection::vec(-1e6f64..1e6, 1..30)) {
            let m = DenseMatrix::from_vec(1, vals.len(), vals).unwrap();
            let lm = LabeledMatrix::new(vec!["w".into()], m).unwrap();
            let back = LabeledMatrix::<f64>::parse(&lm.render(), "t").unwrap();
            prop_assert_eq!(back, lm);
        }
    }
}
