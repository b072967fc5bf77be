//! Row-oriented observational data and its CSV form.
//!
//! Column layout: `x1..xd` (covariates), `a` (treatment), `y` (outcome),
//! optional `r` (instrument), optional `x2_1..x2_m` and `a2` (second time
//! point). Treatment-like columns must hold 0 or 1.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::InvalidData(format!(
                "matrix of {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidData("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn column(values: Vec<f64>) -> Matrix {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Side-by-side concatenation.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::InvalidData("hstack row mismatch".into()));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Matrix::new(self.rows, self.cols + other.cols, data)
    }
}

/// One observation, borrowed from a [`Dataset`]. Absent columns read as NaN
/// (or an empty slice for covariate blocks).
#[derive(Debug, Clone, Copy)]
pub struct Obs<'a> {
    pub x: &'a [f64],
    pub a: f64,
    pub y: f64,
    pub r: f64,
    pub x2: &'a [f64],
    pub a2: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub x: Matrix,
    pub a: Option<Vec<f64>>,
    pub y: Option<Vec<f64>>,
    pub r: Option<Vec<f64>>,
    pub x2: Option<Matrix>,
    pub a2: Option<Vec<f64>>,
}

fn check_binary(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|&t| t != 0.0 && t != 1.0) {
        Some(i) => Err(Error::InvalidData(format!("column `{name}` row {i}: expected 0 or 1, got {}", v[i]))),
        None => Ok(()),
    }
}

impl Dataset {
    pub fn new(x: Matrix) -> Dataset {
        Dataset {
            x,
            ..Default::default()
        }
    }

    pub fn with_a(mut self, a: Vec<f64>) -> Dataset {
        self.a = Some(a);
        self
    }

    pub fn with_y(mut self, y: Vec<f64>) -> Dataset {
        self.y = Some(y);
        self
    }

    pub fn with_r(mut self, r: Vec<f64>) -> Dataset {
        self.r = Some(r);
        self
    }

    pub fn with_second_stage(mut self, x2: Matrix, a2: Vec<f64>) -> Dataset {
        self.x2 = Some(x2);
        self.a2 = Some(a2);
        self
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    /// Verify shapes, finiteness and binary treatment columns.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::EmptyData);
        }
        if self.x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite covariate".into()));
        }
        let cols: [(&str, Option<&Vec<f64>>); 4] = [
            ("a", self.a.as_ref()),
            ("y", self.y.as_ref()),
            ("r", self.r.as_ref()),
            ("a2", self.a2.as_ref()),
        ];
        for (name, col) in cols {
            if let Some(c) = col {
                if c.len() != n {
                    return Err(Error::InvalidData(format!("column `{name}` has {} rows, expected {n}", c.len())));
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidData(format!("column `{name}` has a non-finite value")));
                }
                if name != "y" {
                    check_binary(name, c)?;
                }
            }
        }
        if let Some(x2) = &self.x2 {
            if x2.rows() != n {
                return Err(Error::InvalidData("x2 block row mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        let col = match name {
            "a" => &self.a,
            "y" => &self.y,
            "r" => &self.r,
            "a2" => &self.a2,
            _ => return Err(Error::MissingColumn(name.into())),
        };
        col.as_deref().ok_or_else(|| Error::MissingColumn(name.into()))
    }

    pub fn obs(&self, i: usize) -> Obs<'_> {
        let get = |c: &Option<Vec<f64>>| c.as_ref().map_or(f64::NAN, |v| v[i]);
        Obs {
            x: self.x.row(i),
            a: get(&self.a),
            y: get(&self.y),
            r: get(&self.r),
            x2: self.x2.as_ref().map_or(&[][..], |m| m.row(i)),
            a2: get(&self.a2),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |c: &Option<Vec<f64>>| c.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect());
        Dataset {
            x: self.x.select(idx),
            a: pick(&self.a),
            y: pick(&self.y),
            r: pick(&self.r),
            x2: self.x2.as_ref().map(|m| m.select(idx)),
            a2: pick(&self.a2),
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (1..=self.x.cols()).map(|j| format!("x{j}")).collect();
        for (name, present) in [("a", self.a.is_some()), ("y", self.y.is_some()), ("r", self.r.is_some())] {
            if present {
                h.push(name.into());
            }
        }
        if let Some(x2) = &self.x2 {
            h.extend((1..=x2.cols()).map(|j| format!("x2_{j}")));
        }
        if self.a2.is_some() {
            h.push("a2".into());
        }
        h
    }

    /// Write with shortest round-trip float formatting.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header())?;
        for i in 0..self.n() {
            let o = self.obs(i);
            let mut rec: Vec<String> = o.x.iter().map(f64::to_string).collect();
            for (v, present) in [(o.a, self.a.is_some()), (o.y, self.y.is_some()), (o.r, self.r.is_some())] {
                if present {
                    rec.push(v.to_string());
                }
            }
            rec.extend(o.x2.iter().map(f64::to_string));
            if self.a2.is_some() {
                rec.push(o.a2.to_string());
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(r);
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let numbered = |prefix: &str| -> Vec<usize> {
            let mut cols: Vec<(usize, usize)> = header
                .iter()
                .enumerate()
                .filter_map(|(i, h)| h.strip_prefix(prefix).and_then(|k| k.parse::<usize>().ok()).map(|k| (k, i)))
                .collect();
            cols.sort_unstable();
            cols.into_iter().map(|(_, i)| i).collect()
        };
        let xs = numbered("x");
        let x2s = numbered("x2_");
        if xs.is_empty() {
            return Err(Error::MissingColumn("x1".into()));
        }
        for (want, cols) in [("x", &xs), ("x2_", &x2s)] {
            for (k, &i) in cols.iter().enumerate() {
                if header[i] != format!("{want}{}", k + 1) {
                    return Err(Error::InvalidData(format!("covariate columns must be numbered from 1: found `{}`", header[i])));
                }
            }
        }
        let find = |name: &str| header.iter().position(|h| h == name);
        let (ia, iy, ir, ia2) = (find("a"), find("y"), find("r"), find("a2"));
        let known = xs.len() + x2s.len() + [ia, iy, ir, ia2].iter().flatten().count();
        if known != header.len() {
            let extra = header
                .iter()
                .enumerate()
                .find(|(i, _)| !xs.contains(i) && !x2s.contains(i) && ![ia, iy, ir, ia2].contains(&Some(*i)))
                .map(|(_, h)| h.clone())
                .unwrap_or_default();
            return Err(Error::InvalidData(format!("unknown column `{extra}`")));
        }

        let (mut x, mut x2) = (Vec::new(), Vec::new());
        let (mut a, mut y, mut rr, mut a2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                let s = rec.get(i).unwrap_or("").trim();
                s.parse::<f64>()
                    .map_err(|_| Error::InvalidData(format!("row {}: column `{}`: `{s}` is not a number", line + 1, header[i])))
            };
            for &i in &xs {
                x.push(num(i)?);
            }
            for &i in &x2s {
                x2.push(num(i)?);
            }
            for (idx, col) in [(ia, &mut a), (iy, &mut y), (ir, &mut rr), (ia2, &mut a2)] {
                if let Some(i) = idx {
                    col.push(num(i)?);
                }
            }
        }
        let n = x.len() / xs.len();
        let mut d = Dataset::new(Matrix::new(n, xs.len(), x)?);
        d.a = ia.map(|_| a);
        d.y = iy.map(|_| y);
        d.r = ir.map(|_| rr);
        d.a2 = ia2.map(|_| a2);
        if !x2s.is_empty() {
            d.x2 = Some(Matrix::new(n, x2s.len(), x2)?);
        }
        d.validate()?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        Dataset::new(Matrix::from_rows(&[vec![0.1, 2.0], vec![0.30000000000000004, -1.5], vec![1e-17, 7.0]]).unwrap())
            .with_a(vec![1.0, 0.0, 1.0])
            .with_y(vec![0.5, 1.0 / 3.0, -2.0])
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = sample();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,a,y\n"));
        assert_eq!(Dataset::read_csv(&buf[..]).unwrap(), d);
    }

    #[test]
    fn second_stage_round_trip() {
        let d = sample().with_second_stage(Matrix::column(vec![0.0, 1.0, 1.0]), vec![0.0, 0.0, 1.0]);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("x1,x2,a,y,x2_1,a2\n"));
        assert_eq!(Dataset::read_csv(&buf[..]).unwrap(), d);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Dataset::read_csv("a,y\n1,2\n".as_bytes()), Err(Error::MissingColumn(_))));
        assert!(Dataset::read_csv("x1,a,y\n0.5,2,1\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("x1,a,y,z\n0.5,1,1,0\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("x1,a,y\n0.5,1,abc\n".as_bytes()).is_err());
        assert!(matches!(Dataset::read_csv("x1,a,y\n".as_bytes()), Err(Error::EmptyData)));
    }

    #[test]
    fn subset_keeps_columns_aligned() {
        let d = sample().subset(&[2, 0]);
        assert_eq!(d.n(), 2);
        assert_eq!(d.obs(0).x, &[1e-17, 7.0]);
        assert_eq!(d.obs(1).y, 0.5);
        assert!(d.obs(0).r.is_nan());
    }
}
