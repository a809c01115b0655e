use super::{Result, Sampler, TrainConfig, TrainError};
use crate::balance::{sample_alternates, MatchIndex};
use crate::numkit::{Matrix, Rng};
use crate::scmgen::Dataset;

/// Example indices per `(latent value, label)` for each environment.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCells {
    pub values: usize,
    /// `[env position][value * m + label]`.
    pub cells: Vec<Vec<Vec<usize>>>,
    /// `[env position][example]`.
    pub value_of: Vec<Vec<usize>>,
}

impl OracleCells {
    pub fn new(data: &Dataset, column: usize) -> Result<Self> {
        let m = data.m;
        let mut value_of = Vec::with_capacity(data.envs.len());
        for e in &data.envs {
            let lat = e
                .latents
                .as_ref()
                .filter(|l| column < l.cols())
                .ok_or(TrainError::MissingLatents(column))?;
            let vals = (0..e.len())
                .map(|i| {
                    let v = lat.get(i, column);
                    if v >= 0.0 && v.fract() == 0.0 && v < 65536.0 {
                        Ok(v as usize)
                    } else {
                        Err(TrainError::Config(format!("latent value {v} is not a small category")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            value_of.push(vals);
        }
        let values = value_of.iter().flatten().max().map_or(0, |v| v + 1);
        let mut cells = Vec::with_capacity(data.envs.len());
        for (e, vals) in data.envs.iter().zip(&value_of) {
            let mut c = vec![Vec::new(); values * m];
            for (i, (&v, &y)) in vals.iter().zip(&e.y).enumerate() {
                c[v * m + y].push(i);
            }
            cells.push(c);
        }
        Ok(Self { values, cells, value_of })
    }

    fn draw(&self, env_pos: usize, env: usize, value: usize, label: usize, m: usize, rng: &mut Rng) -> Result<usize> {
        let cell = &self.cells[env_pos][value * m + label];
        if cell.is_empty() {
            return Err(TrainError::EmptyOracleCell { env, value, label });
        }
        Ok(cell[rng.below(cell.len())])
    }
}

enum Mode<'a> {
    Random,
    Matched { index: &'a MatchIndex, a: usize, beta: f64 },
    Oracle { cells: OracleCells, a: usize, beta: f64 },
}

/// Produces training mini-batches for one of the [`Sampler`]s.
pub struct BatchSource<'a> {
    mode: Mode<'a>,
    batch: usize,
    group: usize,
}

impl<'a> BatchSource<'a> {
    pub fn new(data: &Dataset, config: &TrainConfig, matches: Option<&'a MatchIndex>) -> Result<Self> {
        let m = data.m;
        let check_a = |a: usize| {
            if a == 0 || a >= m {
                Err(TrainError::Config(format!("a must be in 1..={}, got {a}", m - 1)))
            } else {
                Ok(a)
            }
        };
        let (mode, group) = match &config.sampler {
            Sampler::Random => (Mode::Random, 1),
            Sampler::Balanced { a, beta } => {
                let index = matches.ok_or(TrainError::MissingMatchIndex)?;
                if !index.covers(data) {
                    return Err(TrainError::Config("match index does not cover the training data".into()));
                }
                let a = check_a(*a)?;
                (Mode::Matched { index, a, beta: *beta }, a + 1)
            }
            Sampler::OracleBalanced { beta, a, column } => {
                let a = check_a(a.unwrap_or(m - 1))?;
                let cells = OracleCells::new(data, *column)?;
                // Fail early on cells a balanced group could need.
                if *beta > 0.0 {
                    for (pos, e) in data.envs.iter().enumerate() {
                        for i in 0..e.len() {
                            let v = cells.value_of[pos][i];
                            for label in 0..m {
                                if cells.cells[pos][v * m + label].is_empty() {
                                    return Err(TrainError::EmptyOracleCell { env: e.env, value: v, label });
                                }
                            }
                        }
                    }
                }
                (Mode::Oracle { cells, a, beta: *beta }, a + 1)
            }
        };
        if data.envs.iter().any(|e| e.is_empty()) {
            return Err(TrainError::Config("training environments must be non-empty".into()));
        }
        Ok(Self { mode, batch: config.batch, group })
    }

    /// Examples per environment per batch.
    pub fn per_env(&self) -> usize {
        self.batch * self.group
    }

    fn balanced_groups(&self, beta: f64) -> usize {
        ((beta * self.batch as f64).round() as usize).min(self.batch)
    }

    /// `(env position, example index)` references for one batch.
    pub fn sample_refs(&mut self, data: &Dataset, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
        let m = data.m;
        let mut refs = Vec::with_capacity(self.per_env() * data.envs.len());
        for (pos, e) in data.envs.iter().enumerate() {
            let n_groups = match &self.mode {
                Mode::Random => 0,
                Mode::Matched { beta, .. } | Mode::Oracle { beta, .. } => self.balanced_groups(*beta),
            };
            for _ in 0..n_groups {
                let anchor = rng.below(e.len());
                refs.push((pos, anchor));
                match &self.mode {
                    Mode::Matched { index, a, .. } => {
                        for l in sample_alternates(e.y[anchor], *a, m, rng) {
                            let (j, _) = index.lookup(e.env, anchor, l).expect("covered index");
                            refs.push((pos, j));
                        }
                    }
                    Mode::Oracle { cells, a, .. } => {
                        let v = cells.value_of[pos][anchor];
                        for l in sample_alternates(e.y[anchor], *a, m, rng) {
                            refs.push((pos, cells.draw(pos, e.env, v, l, m, rng)?));
                        }
                    }
                    Mode::Random => unreachable!(),
                }
            }
            for _ in 0..self.per_env() - n_groups * self.group {
                refs.push((pos, rng.below(e.len())));
            }
        }
        Ok(refs)
    }

    pub fn sample(&mut self, data: &Dataset, rng: &mut Rng) -> Result<(Matrix, Vec<usize>)> {
        let refs = self.sample_refs(data, rng)?;
        let mut x = Matrix::zeros(refs.len(), data.dim);
        let mut y = Vec::with_capacity(refs.len());
        for (r, &(pos, i)) in refs.iter().enumerate() {
            let e = &data.envs[pos];
            x.row_mut(r).copy_from_slice(e.x.row(i));
            y.push(e.y[i]);
        }
        Ok((x, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scmgen::{gen_colored_dataset, ColoredSpec, COLOR_COLUMN};

    fn config(sampler: Sampler) -> TrainConfig {
        TrainConfig { batch: 20, sampler, ..Default::default() }
    }

    #[test]
    fn oracle_groups_share_color_and_cover_labels() {
        let spec = ColoredSpec { m: 3, pattern_dim: 6, ..ColoredSpec::binary(500) };
        let data = gen_colored_dataset(&spec, 1).unwrap();
        let cfg = config(Sampler::OracleBalanced { beta: 1.0, a: None, column: COLOR_COLUMN });
        let mut src = BatchSource::new(&data, &cfg, None).unwrap();
        let refs = src.sample_refs(&data, &mut Rng::new(2)).unwrap();
        assert_eq!(refs.len(), 2 * 20 * 3);
        for g in refs.chunks(3) {
            let lat = data.envs[g[0].0].latents.as_ref().unwrap();
            let colors: Vec<f64> = g.iter().map(|&(_, i)| lat.get(i, COLOR_COLUMN)).collect();
            assert!(colors.iter().all(|&c| c == colors[0]));
            let mut labels: Vec<usize> = g.iter().map(|&(p, i)| data.envs[p].y[i]).collect();
            labels.sort();
            assert_eq!(labels, vec![0, 1, 2]);
            assert!(g.iter().all(|&(p, _)| p == g[0].0));
        }
    }

    #[test]
    fn beta_controls_the_balanced_fraction() {
        let data = gen_colored_dataset(&ColoredSpec::binary(300), 1).unwrap();
        for (beta, groups) in [(0.0, 0), (0.25, 5), (0.5, 10), (1.0, 20)] {
            let cfg = config(Sampler::OracleBalanced { beta, a: None, column: COLOR_COLUMN });
            let src = BatchSource::new(&data, &cfg, None).unwrap();
            assert_eq!(src.balanced_groups(beta), groups);
            assert_eq!(src.per_env(), 40);
        }
        let src = BatchSource::new(&data, &config(Sampler::Random), None).unwrap();
        assert_eq!(src.per_env(), 20);
    }

    #[test]
    fn balanced_without_index_fails() {
        let data = gen_colored_dataset(&ColoredSpec::binary(50), 1).unwrap();
        assert!(matches!(
            BatchSource::new(&data, &config(Sampler::Balanced { a: 1, beta: 1.0 }), None),
            Err(TrainError::MissingMatchIndex)
        ));
    }

    #[test]
    fn oracle_without_latents_fails() {
        let mut data = gen_colored_dataset(&ColoredSpec::binary(50), 1).unwrap();
        data.envs[0].latents = None;
        let cfg = config(Sampler::OracleBalanced { beta: 1.0, a: None, column: 0 });
        assert!(matches!(BatchSource::new(&data, &cfg, None), Err(TrainError::MissingLatents(0))));
    }
}
