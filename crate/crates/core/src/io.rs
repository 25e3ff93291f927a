//! Plain-text matrix I/O: headerless CSV and the keyed block container used for model files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

/// Formats a float so that parsing it back yields the identical bit pattern.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    let t = s.trim();
    match t {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => t
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("not a number: {t:?}"))),
    }
}

fn write_row(out: &mut String, vals: impl Iterator<Item = f64>) {
    let mut first = true;
    for v in vals {
        if !first {
            out.push(',');
        }
        first = false;
        out.push_str(&fmt_f64(v));
    }
    out.push('\n');
}

/// Rows of the matrix become CSV lines. An empty matrix writes an empty file.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::with_capacity(m.len() * 20);
    for i in 0..m.nrows() {
        write_row(&mut s, m.row(i).iter().copied());
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(line.split(',').map(parse_f64).collect::<Result<_>>()?);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse("ragged CSV rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn write_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, matrix_to_csv(m))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    matrix_from_csv(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Dense(DMatrix<f64>),
    Sparse(CsrMatrix),
}

/// Keyed text container: a magic line, `key value` header lines, then named matrix blocks.
///
/// ```text
/// esnmpc-model 1
/// family esn
/// matrix readout 3 1000
/// 0.1,0.2,...
/// sparse reservoir 1000 1000 20013
/// 0,17,-0.0123
/// end
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub header: BTreeMap<String, String>,
    pub blocks: BTreeMap<String, Block>,
}

const MAGIC: &str = "esnmpc-model 1";

impl Container {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, fmt_f64(value));
    }

    pub fn put(&mut self, name: &str, m: DMatrix<f64>) {
        self.blocks.insert(name.to_string(), Block::Dense(m));
    }

    pub fn put_sparse(&mut self, name: &str, m: CsrMatrix) {
        self.blocks.insert(name.to_string(), Block::Sparse(m));
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Parse(format!("missing header key {key:?}")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        parse_f64(self.get(key)?)
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Parse(format!("{key}: not an integer: {v:?}")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Parse(format!("{key}: not an integer: {v:?}")))
    }

    pub fn dense(&self, name: &str) -> Result<&DMatrix<f64>> {
        match self.blocks.get(name) {
            Some(Block::Dense(m)) => Ok(m),
            _ => Err(Error::Parse(format!("missing dense block {name:?}"))),
        }
    }

    pub fn sparse(&self, name: &str) -> Result<&CsrMatrix> {
        match self.blocks.get(name) {
            Some(Block::Sparse(m)) => Ok(m),
            _ => Err(Error::Parse(format!("missing sparse block {name:?}"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MAGIC);
        s.push('\n');
        for (k, v) in &self.header {
            let _ = writeln!(s, "{k} {v}");
        }
        for (name, block) in &self.blocks {
            match block {
                Block::Dense(m) => {
                    let _ = writeln!(s, "matrix {name} {} {}", m.nrows(), m.ncols());
                    s.push_str(&matrix_to_csv(m));
                }
                Block::Sparse(m) => {
                    let _ = writeln!(s, "sparse {name} {} {} {}", m.nrows(), m.ncols(), m.nnz());
                    for (i, j, v) in m.triplets() {
                        let _ = writeln!(s, "{i},{j},{}", fmt_f64(v));
                    }
                }
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(Error::Parse("not a model container".into()));
        }
        let mut c = Container::default();
        let bad = |l: &str| Error::Parse(format!("malformed line {l:?}"));
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse(format!("bad size {s:?}")))
        };
        while let Some(line) = lines.next() {
            let line = line.trim_end();
            if line == "end" {
                return Ok(c);
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.first().copied() {
                Some("matrix") if parts.len() == 4 => {
                    let (r, k) = (num(parts[2])?, num(parts[3])?);
                    let mut data = vec![0.0; r * k];
                    for i in 0..r {
                        let row = lines.next().ok_or_else(|| bad(line))?;
                        let vals: Vec<f64> = if k == 0 {
                            Vec::new()
                        } else {
                            row.split(',').map(parse_f64).collect::<Result<_>>()?
                        };
                        if vals.len() != k {
                            return Err(bad(row));
                        }
                        for (j, v) in vals.into_iter().enumerate() {
                            data[i + j * r] = v;
                        }
                    }
                    c.put(parts[1], DMatrix::from_vec(r, k, data));
                }
                Some("sparse") if parts.len() == 5 => {
                    let (r, k, nnz) = (num(parts[2])?, num(parts[3])?, num(parts[4])?);
                    let mut t = Vec::with_capacity(nnz);
                    for _ in 0..nnz {
                        let row = lines.next().ok_or_else(|| bad(line))?;
                        let f: Vec<&str> = row.split(',').collect();
                        if f.len() != 3 {
                            return Err(bad(row));
                        }
                        t.push((num(f[0])?, num(f[1])?, parse_f64(f[2])?));
                    }
                    let m = CsrMatrix::from_sorted_triplets(r, k, &t)
                        .ok_or_else(|| Error::Parse(format!("bad triplets in {}", parts[1])))?;
                    c.put_sparse(parts[1], m);
                }
                Some(key) if parts.len() >= 2 && key != "matrix" && key != "sparse" => {
                    let value = line[key.len()..].trim();
                    c.header.insert(key.to_string(), value.to_string());
                }
                _ => return Err(bad(line)),
            }
        }
        Err(Error::Parse("missing end marker".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn float_text_round_trip_is_exact(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            prop_assert_eq!(parse_f64(&fmt_f64(v)).unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn container_round_trip() {
        let mut c = Container::default();
        c.set("family", "esn");
        c.set_f64("beta", 1e-7);
        c.put("w", DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3e-9, 0.0, 1e20, 7.0]));
        c.put("empty", DMatrix::zeros(0, 4));
        c.put_sparse(
            "a",
            CsrMatrix::from_sorted_triplets(3, 3, &[(0, 1, 0.5), (2, 0, -1.25)]).unwrap(),
        );
        let back = Container::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get_f64("beta").unwrap(), 1e-7);
    }

    #[test]
    fn csv_is_headerless_and_comma_separated() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -2.0, 3.25]);
        let s = matrix_to_csv(&m);
        assert_eq!(s, "0.5,1\n-2,3.25\n");
        assert_eq!(matrix_from_csv(&s).unwrap(), m);
    }
}
