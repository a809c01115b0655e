use super::{Dataset, EnvData, Result, ScmError};
use crate::format::{checked_product, ByteReader, ByteWriter, FormatError};
use crate::numkit::Matrix;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CBDS";
const VERSION: u32 = 1;
const HEADER_BYTES: usize = 24;

/// Serializes `data`. Features are stored as `f32`; values produced by the
/// generators are already `f32`-exact.
pub fn dataset_to_bytes(data: &Dataset) -> Result<Vec<u8>> {
    let too_big = |what: &str| ScmError::Format(FormatError::DimensionOverflow(what.to_string()));
    let n = u32::try_from(data.n_examples()).map_err(|_| too_big("n_examples"))?;
    let dim = u32::try_from(data.dim).map_err(|_| too_big("dim"))?;
    let m = u32::try_from(data.m).map_err(|_| too_big("m"))?;
    if data.m > u16::MAX as usize + 1 || data.envs.iter().any(|e| e.env > u16::MAX as usize) {
        return Err(too_big("labels and env ids must fit in u16"));
    }
    let mut w = ByteWriter::new();
    w.magic(MAGIC);
    w.u32(VERSION);
    w.u32(n);
    w.u32(dim);
    w.u32(m);
    w.u32(data.envs.len() as u32);
    for e in &data.envs {
        for i in 0..e.len() {
            for &v in e.x.row(i) {
                w.f32(v as f32);
            }
            w.u16(e.y[i] as u16);
            w.u16(e.env as u16);
        }
    }
    Ok(w.into_bytes())
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let n = r.u32("n_examples")? as usize;
    let dim = r.u32("dim")? as usize;
    let m = r.u32("m")? as usize;
    let n_envs = r.u32("n_envs")? as usize;
    let record = dim
        .checked_mul(4)
        .and_then(|b| b.checked_add(4))
        .ok_or_else(|| FormatError::DimensionOverflow(format!("dim {dim}")))?;
    let payload = checked_product(&[n, record], "n_examples × record size")?;
    if payload
        .checked_add(HEADER_BYTES)
        .is_none()
    {
        return Err(FormatError::DimensionOverflow(format!("{n} examples of dim {dim}")).into());
    }
    let mut envs: Vec<EnvData> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<Vec<usize>> = Vec::new();
    for _ in 0..n {
        let start = r.offset();
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(r.f32("example features")? as f64);
        }
        let y = r.u16("example label")? as usize;
        let env = r.u16("example env")? as usize;
        if y >= m {
            return Err(FormatError::Invalid {
                offset: start,
                what: format!("label {y} >= m = {m}"),
            }
            .into());
        }
        let slot = match envs.iter().position(|e| e.env == env) {
            Some(s) => s,
            None => {
                envs.push(EnvData {
                    env,
                    x: Matrix::zeros(0, dim),
                    y: Vec::new(),
                    latents: None,
                });
                rows.push(Vec::new());
                labels.push(Vec::new());
                envs.len() - 1
            }
        };
        rows[slot].extend(row);
        labels[slot].push(y);
    }
    r.finish()?;
    if envs.len() != n_envs {
        return Err(FormatError::Invalid {
            offset: 20,
            what: format!("header declares {n_envs} environments, found {}", envs.len()),
        }
        .into());
    }
    for ((e, data), ys) in envs.iter_mut().zip(rows).zip(labels) {
        e.x = Matrix::from_vec(ys.len(), dim, data)?;
        e.y = ys;
    }
    Dataset::new(m, dim, envs)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(data)?).map_err(FormatError::from)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(FormatError::from)?;
    dataset_from_bytes(&bytes)
}

/// Sidecar of raw little-endian `f32` latents in dataset order; the latent
/// width is the file length divided by the example count.
pub fn write_latents(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = ByteWriter::new();
    for e in &data.envs {
        let l = e
            .latents
            .as_ref()
            .ok_or_else(|| ScmError::InvalidSpec(format!("env {} has no latents", e.env)))?;
        for &v in l.data() {
            w.f32(v as f32);
        }
    }
    w.write_to(path)?;
    Ok(())
}

pub fn read_latents(path: &Path, data: &mut Dataset) -> Result<()> {
    let bytes = std::fs::read(path).map_err(FormatError::from)?;
    let n = data.n_examples();
    if n == 0 || bytes.len() % (4 * n) != 0 {
        return Err(FormatError::Invalid {
            offset: bytes.len(),
            what: format!("latent sidecar length {} is not a multiple of 4 × {n}", bytes.len()),
        }
        .into());
    }
    let width = bytes.len() / (4 * n);
    let mut r = ByteReader::new(&bytes);
    for e in &mut data.envs {
        let mut v = Vec::with_capacity(e.len() * width);
        for _ in 0..e.len() * width {
            v.push(r.f32("latent")? as f64);
        }
        e.latents = Some(Matrix::from_vec(e.len(), width, v)?);
    }
    r.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scmgen::{gen_colored_dataset, ColoredSpec};
    use proptest::prelude::*;

    fn strip_latents(mut d: Dataset) -> Dataset {
        d.envs.iter_mut().for_each(|e| e.latents = None);
        d
    }

    #[test]
    fn colored_round_trip_with_sidecar() {
        let d = gen_colored_dataset(&ColoredSpec::binary(300), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.cbds");
        write_dataset(&p, &d).unwrap();
        write_latents(&p.with_extension("latents"), &d).unwrap();
        let mut back = read_dataset(&p).unwrap();
        assert_eq!(back, strip_latents(d.clone()));
        read_latents(&p.with_extension("latents"), &mut back).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn magic_mismatch() {
        let d = gen_colored_dataset(&ColoredSpec::binary(5), 3).unwrap();
        let mut b = dataset_to_bytes(&d).unwrap();
        b[0] = b'X';
        assert!(matches!(
            dataset_from_bytes(&b),
            Err(ScmError::Format(FormatError::BadMagic { .. }))
        ));
    }

    #[test]
    fn truncation_names_offset() {
        let d = gen_colored_dataset(&ColoredSpec::binary(5), 3).unwrap();
        let b = dataset_to_bytes(&d).unwrap();
        let record = d.dim * 4 + 4;
        // cut in the middle of the third example
        let cut = HEADER_BYTES + 2 * record + 7;
        match dataset_from_bytes(&b[..cut]) {
            Err(ScmError::Format(FormatError::Truncated { offset, .. })) => assert_eq!(offset, cut),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_overflow_detected() {
        let mut w = ByteWriter::new();
        w.magic(MAGIC);
        w.u32(VERSION);
        w.u32(u32::MAX);
        w.u32(u32::MAX);
        w.u32(2);
        w.u32(1);
        let res = dataset_from_bytes(&w.into_bytes());
        if usize::BITS == 32 {
            assert!(matches!(res, Err(ScmError::Format(FormatError::DimensionOverflow(_)))));
        } else {
            // 64-bit hosts can represent the product; the read then fails as truncation
            assert!(matches!(
                res,
                Err(ScmError::Format(FormatError::DimensionOverflow(_)))
                    | Err(ScmError::Format(FormatError::Truncated { .. }))
            ));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn arbitrary_f32_datasets_round_trip(
            m in 2usize..5,
            dim in 1usize..6,
            per_env in prop::collection::vec(1usize..20, 1..4),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::numkit::Rng::new(seed);
            let envs = per_env.iter().enumerate().map(|(env, &n)| EnvData {
                env: env * 3,
                x: Matrix::from_vec(n, dim, (0..n * dim).map(|_| (rng.normal() * 100.0) as f32 as f64).collect()).unwrap(),
                y: (0..n).map(|_| rng.below(m)).collect(),
                latents: None,
            }).collect();
            let d = Dataset::new(m, dim, envs).unwrap();
            let back = dataset_from_bytes(&dataset_to_bytes(&d).unwrap()).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
