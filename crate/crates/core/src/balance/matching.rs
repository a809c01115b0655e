use super::{score_distance, BalanceError, Metric, Result, ScoreTable};
use crate::format::{checked_product, ByteReader, ByteWriter, FormatError};
use crate::numkit::Matrix;
use crate::scmgen::Dataset;
use rayon::prelude::*;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CBMI";
const VERSION: u32 = 1;

/// Nearest alternate-label matches inside one environment. Slot `s` of
/// example `i` covers the `s`-th label other than `y_i`, in increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMatches {
    pub env: usize,
    pub labels: Vec<usize>,
    /// `n × (m − 1)` matched example indices.
    pub matched: Vec<u32>,
    pub distance: Vec<f64>,
}

impl EnvMatches {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn slot(&self, m: usize, i: usize, label: usize) -> Option<usize> {
        let y = self.labels[i];
        if label == y || label >= m {
            return None;
        }
        Some(i * (m - 1) + if label < y { label } else { label - 1 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchIndex {
    pub m: usize,
    pub metric: Metric,
    pub envs: Vec<EnvMatches>,
}

impl MatchIndex {
    pub fn env(&self, id: usize) -> Option<&EnvMatches> {
        self.envs.iter().find(|e| e.env == id)
    }

    /// Match of example `i` in environment `env` for `label ≠ y_i`.
    pub fn lookup(&self, env: usize, i: usize, label: usize) -> Option<(usize, f64)> {
        let e = self.env(env)?;
        if i >= e.len() {
            return None;
        }
        let s = e.slot(self.m, i, label)?;
        Some((e.matched[s] as usize, e.distance[s]))
    }

    /// Checks that the index was built for `data`.
    pub fn covers(&self, data: &Dataset) -> bool {
        self.m == data.m
            && self.envs.len() == data.envs.len()
            && self
                .envs
                .iter()
                .zip(&data.envs)
                .all(|(a, b)| a.env == b.env && a.labels == b.y)
    }
}

fn nearest(scores: &Matrix, i: usize, candidates: &[usize], metric: Metric) -> Result<(u32, f64)> {
    let mut best = (u32::MAX, f64::INFINITY);
    for &j in candidates {
        let d = score_distance(scores.row(i), scores.row(j), metric)?;
        // Candidates are ascending, so strict `<` keeps the lowest index on ties.
        if d < best.1 || best.0 == u32::MAX {
            best = (j as u32, d);
        }
    }
    Ok(best)
}

/// Exhaustive nearest-score search for every example and alternate label.
pub fn precompute_matches(data: &Dataset, scores: &ScoreTable, metric: Metric) -> Result<MatchIndex> {
    let m = data.m;
    let mut envs = Vec::with_capacity(data.envs.len());
    for e in &data.envs {
        if e.len() > u32::MAX as usize {
            return Err(BalanceError::Invalid("environment too large for u32 indices".into()));
        }
        let s = scores
            .env(e.env)
            .ok_or_else(|| BalanceError::Invalid(format!("no scores for environment {}", e.env)))?;
        if s.rows() != e.len() {
            return Err(BalanceError::LengthMismatch(s.rows(), e.len()));
        }
        let groups = e.indices_by_label(m);
        if let Some(label) = groups.iter().position(Vec::is_empty) {
            return Err(BalanceError::EmptyCell { env: e.env, label });
        }
        let per_example: Vec<Vec<(u32, f64)>> = (0..e.len())
            .into_par_iter()
            .map(|i| {
                (0..m)
                    .filter(|&l| l != e.y[i])
                    .map(|l| nearest(s, i, &groups[l], metric))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let (matched, distance) = per_example.into_iter().flatten().unzip();
        envs.push(EnvMatches {
            env: e.env,
            labels: e.y.clone(),
            matched,
            distance,
        });
    }
    Ok(MatchIndex { m, metric, envs })
}

pub fn matches_to_bytes(index: &MatchIndex) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(MAGIC);
    w.u32(VERSION);
    w.u32(index.m as u32);
    w.u32(index.metric.code());
    w.u32(index.envs.len() as u32);
    for e in &index.envs {
        w.u32(e.env as u32);
        w.u32(e.len() as u32);
        for &y in &e.labels {
            w.u16(y as u16);
        }
        for (&j, &d) in e.matched.iter().zip(&e.distance) {
            w.u32(j);
            w.f64(d);
        }
    }
    w.into_bytes()
}

pub fn matches_from_bytes(bytes: &[u8]) -> Result<MatchIndex> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let m = r.u32("m")? as usize;
    if m < 2 {
        return Err(FormatError::Invalid { offset: 8, what: format!("m = {m}") }.into());
    }
    let at = r.offset();
    let metric = Metric::from_code(r.u32("metric")?)
        .ok_or_else(|| FormatError::Invalid { offset: at, what: "unknown metric code".into() })?;
    let n_envs = r.u32("n_envs")? as usize;
    let mut envs = Vec::new();
    for _ in 0..n_envs {
        let env = r.u32("env id")? as usize;
        let n = r.u32("example count")? as usize;
        let slots = checked_product(&[n, m - 1], "match slots")?;
        if checked_product(&[n, 2], "labels")? > r.remaining() {
            return Err(FormatError::Truncated {
                offset: bytes.len(),
                needed: n * 2 - r.remaining(),
                what: "labels",
            }
            .into());
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let y = r.u16("label")? as usize;
            if y >= m {
                return Err(FormatError::Invalid { offset: at, what: format!("label {y} >= m") }.into());
            }
            labels.push(y);
        }
        let needed = checked_product(&[slots, 12], "match records")?;
        if needed > r.remaining() {
            return Err(FormatError::Truncated {
                offset: bytes.len(),
                needed: needed - r.remaining(),
                what: "match records",
            }
            .into());
        }
        let mut matched = Vec::with_capacity(slots);
        let mut distance = Vec::with_capacity(slots);
        for _ in 0..slots {
            let at = r.offset();
            let j = r.u32("matched index")?;
            if j as usize >= n {
                return Err(FormatError::Invalid { offset: at, what: format!("index {j} >= {n}") }.into());
            }
            matched.push(j);
            distance.push(r.f64("distance")?);
        }
        envs.push(EnvMatches { env, labels, matched, distance });
    }
    r.finish()?;
    Ok(MatchIndex { m, metric, envs })
}

pub fn save_matches(index: &MatchIndex, path: &Path) -> Result<()> {
    std::fs::write(path, matches_to_bytes(index)).map_err(|e| BalanceError::Format(FormatError::Io(e)))
}

pub fn load_matches(path: &Path) -> Result<MatchIndex> {
    let bytes = std::fs::read(path).map_err(|e| BalanceError::Format(FormatError::Io(e)))?;
    matches_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scmgen::EnvData;

    fn dataset(y: Vec<usize>, m: usize) -> Dataset {
        let n = y.len();
        Dataset::new(
            m,
            1,
            vec![EnvData { env: 0, x: Matrix::zeros(n, 1), y, latents: None }],
        )
        .unwrap()
    }

    fn table(rows: &[Vec<f64>]) -> ScoreTable {
        ScoreTable { envs: vec![(0, Matrix::from_rows(rows).unwrap())] }
    }

    #[test]
    fn one_example_per_label_is_always_the_match() {
        let d = dataset(vec![0, 1, 2], 3);
        let s = table(&[vec![0.5, 0.3, 0.2], vec![0.1, 0.1, 0.8], vec![0.3, 0.3, 0.4]]);
        let idx = precompute_matches(&d, &s, Metric::L1).unwrap();
        for i in 0..3 {
            for l in (0..3).filter(|&l| l != i) {
                assert_eq!(idx.lookup(0, i, l).unwrap().0, l);
            }
            assert!(idx.lookup(0, i, i).is_none());
        }
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let d = dataset(vec![0, 1, 1], 2);
        let s = table(&[vec![0.5, 0.5], vec![0.6, 0.4], vec![0.4, 0.6]]);
        let idx = precompute_matches(&d, &s, Metric::L2).unwrap();
        assert_eq!(idx.lookup(0, 0, 1).unwrap().0, 1);
    }

    #[test]
    fn empty_cell_is_named() {
        let d = dataset(vec![0, 0, 2], 3);
        let s = table(&vec![vec![1.0, 0.0, 0.0]; 3]);
        match precompute_matches(&d, &s, Metric::L1) {
            Err(BalanceError::EmptyCell { env: 0, label: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let d = dataset(vec![0, 1, 2, 1, 0], 3);
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![0.1 * i as f64, 0.5, 0.5 - 0.1 * i as f64]).collect();
        let idx = precompute_matches(&d, &table(&rows), Metric::Skl).unwrap();
        let bytes = matches_to_bytes(&idx);
        let back = matches_from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert!(back.covers(&d));
        assert_eq!(matches_to_bytes(&back), bytes);
        for cut in [2, 17, bytes.len() - 3] {
            match matches_from_bytes(&bytes[..cut]) {
                Err(BalanceError::Format(FormatError::Truncated { offset, .. })) => assert_eq!(offset, cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }
}
