//! Dataset container: i.i.d. triples (X, Y, Z) with named columns and a
//! shared suffix between X and Z.
//!
//! In the proximal benchmark the covariate is X = (W, A, S) and the
//! instrument is Z = (Q, A, S): the trailing `shared_tail` columns of X and Z
//! are the same observed values. The container records that overlap so the
//! first stage can model only the stochastic block of X given Z and the CSV
//! layout can store each column once.

use crate::error::{Error, Result};
use crate::{Mat, Vect, F};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use std::io::{Read as _, Write as _};
use std::path::Path;

/// One experiment's worth of rows. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// n × x_dim covariates.
    pub x: Mat,
    /// n × z_dim instruments.
    pub z: Mat,
    /// Length-n outcomes.
    pub y: Vect,
    /// Number of trailing columns shared (identical) between x and z.
    pub shared_tail: usize,
    /// Column names for x; the last `shared_tail` equal the tail of `z_names`.
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
}

const CACHE_MAGIC: &[u8; 8] = b"RDIVDS01";

impl Dataset {
    pub fn new(
        x: Mat,
        z: Mat,
        y: Vect,
        shared_tail: usize,
        x_names: Vec<String>,
        z_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "row counts differ: x {}, z {}, y {}",
                x.nrows(),
                z.nrows(),
                n
            )));
        }
        if x_names.len() != x.ncols() || z_names.len() != z.ncols() {
            return Err(Error::DimensionMismatch("column name counts differ".into()));
        }
        if shared_tail > x.ncols() || shared_tail > z.ncols() {
            return Err(Error::InvalidArgument("shared_tail exceeds dimensions".into()));
        }
        for k in 0..shared_tail {
            let xn = &x_names[x.ncols() - shared_tail + k];
            let zn = &z_names[z.ncols() - shared_tail + k];
            if xn != zn {
                return Err(Error::InvalidArgument(format!(
                    "shared column names differ: {xn} vs {zn}"
                )));
            }
        }
        Ok(Self { x, z, y, shared_tail, x_names, z_names })
    }

    /// Unnamed dataset with no shared columns (names x_0.., z_0..).
    pub fn unnamed(x: Mat, z: Mat, y: Vect) -> Result<Self> {
        let x_names = (0..x.ncols()).map(|i| format!("x_{i}")).collect();
        let z_names = (0..z.ncols()).map(|i| format!("z_{i}")).collect();
        Self::new(x, z, y, 0, x_names, z_names)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn z_dim(&self) -> usize {
        self.z.ncols()
    }

    /// Row views as owned vectors.
    pub fn x_row(&self, i: usize) -> Vect {
        self.x.row(i).transpose()
    }

    pub fn z_row(&self, i: usize) -> Vect {
        self.z.row(i).transpose()
    }

    /// Subset by row indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        let x = Mat::from_fn(idx.len(), self.x.ncols(), |i, j| self.x[(idx[i], j)]);
        let z = Mat::from_fn(idx.len(), self.z.ncols(), |i, j| self.z[(idx[i], j)]);
        let y = Vect::from_fn(idx.len(), |i, _| self.y[idx[i]]);
        Self {
            x,
            z,
            y,
            shared_tail: self.shared_tail,
            x_names: self.x_names.clone(),
            z_names: self.z_names.clone(),
        }
    }

    /// Deterministic shuffled split into (train, holdout) with `frac` of the
    /// rows in train.
    pub fn split(&self, frac: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::InvalidArgument("split fraction must be in [0,1]".into()));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut crate::stream_rng(seed, 0x5b17));
        let cut = ((self.len() as f64) * frac).round() as usize;
        Ok((self.select(&idx[..cut]), self.select(&idx[cut..])))
    }

    /// Column layout written to CSV: x-unique block, shared block, z-unique
    /// block, then y. Shared columns appear once.
    fn csv_header(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.x_names.clone();
        cols.extend_from_slice(&self.z_names[..self.z.ncols() - self.shared_tail]);
        cols.push("y".to_string());
        cols
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.csv_header())
            .map_err(|e| Error::Serde(e.to_string()))?;
        let zu = self.z.ncols() - self.shared_tail;
        let mut record: Vec<String> = Vec::new();
        for i in 0..self.len() {
            record.clear();
            for j in 0..self.x.ncols() {
                record.push(format!("{}", self.x[(i, j)]));
            }
            for j in 0..zu {
                record.push(format!("{}", self.z[(i, j)]));
            }
            record.push(format!("{}", self.y[i]));
            w.write_record(&record).map_err(|e| Error::Serde(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read back a CSV produced by [`write_csv`]; needs the same structural
    /// metadata (dims, shared_tail, names) that the CSV header does not carry
    /// fully on its own.
    pub fn read_csv(
        path: &Path,
        x_dim: usize,
        z_dim: usize,
        shared_tail: usize,
    ) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers: Vec<String> =
            r.headers().map_err(|e| Error::Serde(e.to_string()))?.iter().map(String::from).collect();
        let zu = z_dim - shared_tail;
        if headers.len() != x_dim + zu + 1 {
            return Err(Error::DimensionMismatch(format!(
                "csv has {} columns, expected {}",
                headers.len(),
                x_dim + zu + 1
            )));
        }
        let x_names = headers[..x_dim].to_vec();
        let mut z_names: Vec<String> = headers[x_dim..x_dim + zu].to_vec();
        z_names.extend_from_slice(&x_names[x_dim - shared_tail..]);
        let mut rows: Vec<Vec<F>> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Serde(e.to_string()))?;
            let vals: std::result::Result<Vec<F>, _> =
                rec.iter().map(|s| s.parse::<F>()).collect();
            rows.push(vals.map_err(|e| Error::Serde(e.to_string()))?);
        }
        let n = rows.len();
        let x = Mat::from_fn(n, x_dim, |i, j| rows[i][j]);
        let z = Mat::from_fn(n, z_dim, |i, j| {
            if j < zu {
                rows[i][x_dim + j]
            } else {
                // shared tail lives in the x block
                rows[i][x_dim - shared_tail + (j - zu)]
            }
        });
        let y = Vect::from_fn(n, |i, _| rows[i][x_dim + zu]);
        Self::new(x, z, y, shared_tail, x_names, z_names)
    }

    /// Compact binary cache; round-trips exactly.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u64::<LittleEndian>(self.x.ncols() as u64)?;
        w.write_u64::<LittleEndian>(self.z.ncols() as u64)?;
        w.write_u64::<LittleEndian>(self.shared_tail as u64)?;
        for name in self.x_names.iter().chain(self.z_names.iter()) {
            let bytes = name.as_bytes();
            w.write_u32::<LittleEndian>(bytes.len() as u32)?;
            w.write_all(bytes)?;
        }
        for v in self.x.iter().chain(self.z.iter()).chain(self.y.iter()) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Serde("bad cache magic".into()));
        }
        let n = r.read_u64::<LittleEndian>()? as usize;
        let x_dim = r.read_u64::<LittleEndian>()? as usize;
        let z_dim = r.read_u64::<LittleEndian>()? as usize;
        let shared_tail = r.read_u64::<LittleEndian>()? as usize;
        let read_name = |r: &mut std::io::BufReader<std::fs::File>| -> Result<String> {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            String::from_utf8(buf).map_err(|e| Error::Serde(e.to_string()))
        };
        let x_names: Vec<String> =
            (0..x_dim).map(|_| read_name(&mut r)).collect::<Result<_>>()?;
        let z_names: Vec<String> =
            (0..z_dim).map(|_| read_name(&mut r)).collect::<Result<_>>()?;
        let read_block = |r: &mut std::io::BufReader<std::fs::File>,
                              rows: usize,
                              cols: usize|
         -> Result<Mat> {
            let mut vals = vec![0.0; rows * cols];
            for v in vals.iter_mut() {
                *v = r.read_f64::<LittleEndian>()?;
            }
            // nalgebra iteration order is column-major; mirror it
            Ok(Mat::from_vec(rows, cols, vals))
        };
        let x = read_block(&mut r, n, x_dim)?;
        let z = read_block(&mut r, n, z_dim)?;
        let mut yv = vec![0.0; n];
        for v in yv.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        Self::new(x, z, Vect::from_vec(yv), shared_tail, x_names, z_names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo(n: usize, seed: u64) -> Dataset {
        let mut rng = crate::stream_rng(seed, 0);
        let shared = Mat::from_fn(n, 2, |_, _| <F as crate::Scalar>::sample_standard_normal(&mut rng));
        let w = Mat::from_fn(n, 1, |_, _| <F as crate::Scalar>::sample_standard_normal(&mut rng));
        let q = Mat::from_fn(n, 1, |_, _| <F as crate::Scalar>::sample_standard_normal(&mut rng));
        let mut x = Mat::zeros(n, 3);
        let mut z = Mat::zeros(n, 3);
        for i in 0..n {
            x[(i, 0)] = w[(i, 0)];
            z[(i, 0)] = q[(i, 0)];
            for j in 0..2 {
                x[(i, j + 1)] = shared[(i, j)];
                z[(i, j + 1)] = shared[(i, j)];
            }
        }
        let y = Vect::from_fn(n, |i, _| x[(i, 0)] + 0.1 * i as f64);
        Dataset::new(
            x,
            z,
            y,
            2,
            vec!["w_0".into(), "a".into(), "s_0".into()],
            vec!["q_0".into(), "a".into(), "s_0".into()],
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_exact() {
        let d = demo(37, 1);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("d.csv");
        d.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, 3, 3, 2).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn cache_round_trip_exact() {
        let d = demo(11, 2);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("d.bin");
        d.write_cache(&path).unwrap();
        let back = Dataset::read_cache(&path).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn split_partitions_rows() {
        let d = demo(100, 3);
        let (a, b) = d.split(0.8, 7).unwrap();
        assert_eq!(a.len(), 80);
        assert_eq!(b.len(), 20);
        let mut ys: Vec<f64> = a.y.iter().chain(b.y.iter()).copied().collect();
        ys.sort_by(f64::total_cmp);
        let mut orig: Vec<f64> = d.y.iter().copied().collect();
        orig.sort_by(f64::total_cmp);
        assert_eq!(ys, orig);
        // determinism
        let (a2, _) = d.split(0.8, 7).unwrap();
        assert_eq!(a.y, a2.y);
    }

    #[test]
    fn mismatched_shared_names_rejected() {
        let d = demo(5, 4);
        let bad = Dataset::new(
            d.x.clone(),
            d.z.clone(),
            d.y.clone(),
            2,
            vec!["w_0".into(), "a".into(), "s_0".into()],
            vec!["q_0".into(), "a".into(), "s_1".into()],
        );
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_random(seed in 0u64..50, n in 1usize..40) {
            let d = demo(n, seed);
            let tmp = tempfile::tempdir().unwrap();
            let path = tmp.path().join("p.csv");
            d.write_csv(&path).unwrap();
            let back = Dataset::read_csv(&path, 3, 3, 2).unwrap();
            prop_assert_eq!(d, back);
        }
    }
}
