//! Candidate pools: structures, cached feature matrices, and the JSON-lines
//! pool file.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::problems::config::ConfigAssignment;
use crate::problems::tsp::Tour;
use crate::types::{FeatureVector, WeightVector};

/// Problem-specific structure of one pool candidate.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Tour(Vec<usize>),
    Choice(Vec<usize>),
}

impl From<&Tour> for Structure {
    fn from(t: &Tour) -> Self {
        Structure::Tour(t.visit_order.clone())
    }
}

impl From<&ConfigAssignment> for Structure {
    fn from(a: &ConfigAssignment) -> Self {
        Structure::Choice(a.choice.clone())
    }
}

/// Row-compressed feature matrix of a pool evaluated in one context.
///
/// Configuration features are one-hot and mostly zero, so only non-zero
/// entries are kept; utilities then cost `nnz` operations per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize) -> Self {
        Self { dim, indptr: vec![0], indices: Vec::new(), values: Vec::new() }
    }

    pub fn from_dense<'a, I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureVector>,
    {
        let mut m = Self::new(dim);
        for r in rows {
            m.push_dense(r)?;
        }
        Ok(m)
    }

    pub fn push_dense(&mut self, row: &FeatureVector) -> Result<()> {
        check_dim(self.dim, row.dim())?;
        for (i, &x) in row.values().iter().enumerate() {
            if x != 0.0 {
                self.indices.push(i as u32);
                self.values.push(x);
            }
        }
        self.indptr.push(self.indices.len());
        Ok(())
    }

    /// Appends a row given as ascending `(index, value)` pairs.
    pub(crate) fn push_sparse(&mut self, entries: &[(u32, f64)]) {
        for &(i, x) in entries {
            debug_assert!((i as usize) < self.dim);
            if x != 0.0 {
                self.indices.push(i);
                self.values.push(x);
            }
        }
        self.indptr.push(self.indices.len());
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_sparse(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn row(&self, i: usize) -> FeatureVector {
        let mut v = vec![0.0; self.dim];
        let (idx, val) = self.row_sparse(i);
        for (&j, &x) in idx.iter().zip(val) {
            v[j as usize] = x;
        }
        FeatureVector::new(v).expect("stored rows are finite")
    }

    pub fn rows_equal(&self, a: usize, b: usize) -> bool {
        self.row_sparse(a) == self.row_sparse(b)
    }

    pub fn utility(&self, i: usize, w: &[f64]) -> f64 {
        let (idx, val) = self.row_sparse(i);
        idx.iter().zip(val).map(|(&j, &x)| w[j as usize] * x).sum()
    }

    /// Utilities of every row under every member: `out[i * m + k]` is the
    /// utility of row `i` under member `k`. `members_t` is the `dim x m`
    /// transposed ensemble.
    pub fn member_utilities(&self, members_t: &[f64], m: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.len() * m, 0.0);
        for i in 0..self.len() {
            let (idx, val) = self.row_sparse(i);
            let acc = &mut out[i * m..(i + 1) * m];
            for (&j, &x) in idx.iter().zip(val) {
                let col = &members_t[j as usize * m..(j as usize + 1) * m];
                for (a, &c) in acc.iter_mut().zip(col) {
                    *a += x * c;
                }
            }
        }
    }

    /// Highest-utility row among those accepted by `keep`; ties go to the
    /// lowest index.
    pub fn argmax_filtered(&self, w: &WeightVector, keep: impl Fn(usize) -> bool) -> Result<Option<usize>> {
        check_dim(self.dim, w.dim())?;
        let mut best: Option<(usize, f64)> = None;
        for i in (0..self.len()).filter(|&i| keep(i)) {
            let u = self.utility(i, w.values());
            if best.is_none_or(|(_, b)| u > b) {
                best = Some((i, u));
            }
        }
        Ok(best.map(|(i, _)| i))
    }
}

/// Id of the pool candidate with the highest utility; lowest id on ties.
pub fn pool_argmax<'a, I>(pool: I, w: &WeightVector) -> Result<usize>
where
    I: IntoIterator<Item = (usize, &'a FeatureVector)>,
{
    let mut best: Option<(usize, f64)> = None;
    for (id, phi) in pool {
        let u = crate::types::utility(w, phi)?;
        let better = match best {
            None => true,
            Some((bid, bu)) => u > bu || (u == bu && id < bid),
        };
        if better {
            best = Some((id, u));
        }
    }
    best.map(|(id, _)| id).ok_or(Error::EmptyPool)
}

/// One line of a pool file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub id: usize,
    pub context_id: usize,
    pub structure: Structure,
    pub features: FeatureVector,
}

pub fn write_pool_jsonl<W: Write>(mut out: W, records: &[PoolRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pool_jsonl<R: BufRead>(input: R) -> Result<Vec<PoolRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;
    use rand::Rng;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn argmax_examples() {
        let w = WeightVector::new(vec![1.0, -1.0]).unwrap();
        let single = [fv(&[0.0, 3.0])];
        assert_eq!(pool_argmax(single.iter().enumerate(), &w).unwrap(), 0);
        let empty: Vec<FeatureVector> = vec![];
        assert!(matches!(pool_argmax(empty.iter().enumerate(), &w), Err(Error::EmptyPool)));
        let tied = [fv(&[1.0, 0.0]), fv(&[0.0, -1.0]), fv(&[2.0, 1.0])];
        assert_eq!(pool_argmax(tied.iter().enumerate(), &w).unwrap(), 0);
        assert_eq!(pool_argmax(vec![(5, &tied[0]), (2, &tied[1])], &w).unwrap(), 2);
    }

    #[test]
    fn argmax_matches_linear_scan() {
        let mut rng = RandomSource::new(31, 0);
        for _ in 0..30 {
            let pool: Vec<FeatureVector> =
                (0..200).map(|_| fv(&(0..4).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<_>>())).collect();
            let w = WeightVector::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut oracle = 0;
            let mut best = f64::NEG_INFINITY;
            for (i, p) in pool.iter().enumerate() {
                let u: f64 = (0..4).map(|k| w.values()[k] * p[k]).sum();
                if u > best {
                    best = u;
                    oracle = i;
                }
            }
            assert_eq!(pool_argmax(pool.iter().enumerate(), &w).unwrap(), oracle);
            let m = FeatureMatrix::from_dense(4, &pool).unwrap();
            assert_eq!(m.argmax_filtered(&w, |_| true).unwrap(), Some(oracle));
        }
    }

    #[test]
    fn sparse_rows_round_trip() {
        let rows = [fv(&[0.0, 1.0, 0.0]), fv(&[2.0, 0.0, -3.0]), fv(&[0.0, 0.0, 0.0])];
        let m = FeatureMatrix::from_dense(3, &rows).unwrap();
        assert_eq!(m.len(), 3);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(&m.row(i), r);
        }
        assert!(!m.rows_equal(0, 1));
        let mut out = Vec::new();
        // Two members, transposed: member0 = [1,2,3], member1 = [0,1,0].
        m.member_utilities(&[1.0, 0.0, 2.0, 1.0, 3.0, 0.0], 2, &mut out);
        assert_eq!(out, vec![2.0, 1.0, -7.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![
            PoolRecord { id: 0, context_id: 0, structure: Structure::Tour(vec![0, 2, 1]), features: fv(&[-1.0, 0.5]) },
            PoolRecord { id: 1, context_id: 0, structure: Structure::Choice(vec![1, 0]), features: fv(&[1.0, 0.0]) },
        ];
        let mut buf = Vec::new();
        write_pool_jsonl(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(r#"{"id":0,"context_id":0,"structure":{"tour":[0,2,1]}"#));
        assert_eq!(read_pool_jsonl(&buf[..]).unwrap(), recs);
    }
}
