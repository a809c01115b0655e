use super::{CoVae, Result, VaeError};
use crate::expfam::{ExpFamilyPrior, GaussianParams};
use crate::format::{checked_product, ByteReader, ByteWriter, FormatError};
use crate::numkit::{Activation, Matrix, Mlp};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CBVA";
const VERSION: u32 = 1;

fn write_mlp(w: &mut ByteWriter, mlp: &Mlp) {
    for (weights, bias) in mlp.weights().iter().zip(mlp.biases()) {
        w.f64s(weights.data());
        w.f64s(bias);
    }
}

fn read_sizes(r: &mut ByteReader<'_>) -> Result<Vec<usize>> {
    let count = r.u32("layer count")? as usize;
    if count < 2 {
        return Err(FormatError::Invalid {
            offset: r.offset(),
            what: "an MLP needs at least two layer sizes".into(),
        }
        .into());
    }
    if count > r.remaining() / 4 {
        return Err(FormatError::Truncated {
            offset: r.offset() + r.remaining(),
            needed: count * 4 - r.remaining(),
            what: "layer sizes",
        }
        .into());
    }
    (0..count)
        .map(|_| Ok(r.u32("layer size")? as usize))
        .collect()
}

fn read_mlp(r: &mut ByteReader<'_>, sizes: &[usize], act: Activation) -> Result<Mlp> {
    let mut weights = Vec::with_capacity(sizes.len() - 1);
    let mut biases = Vec::with_capacity(sizes.len() - 1);
    for pair in sizes.windows(2) {
        let len = checked_product(pair, "layer weights")?;
        let w = r.f64s(len, "weights")?;
        weights.push(Matrix::from_vec(pair[0], pair[1], w)?);
        biases.push(r.f64s(pair[1], "biases")?);
    }
    Ok(Mlp::from_parts(act, weights, biases)?)
}

pub fn model_to_bytes(model: &CoVae) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(MAGIC);
    w.u32(VERSION);
    for v in [model.n, model.k, model.m, model.dim, model.n_envs] {
        w.u32(v as u32);
    }
    w.u32(model.encoder.activation().code());
    for mlp in [&model.encoder, &model.decoder] {
        w.u32(mlp.layer_sizes().len() as u32);
        for &s in mlp.layer_sizes() {
            w.u32(s as u32);
        }
    }
    write_mlp(&mut w, &model.encoder);
    write_mlp(&mut w, &model.decoder);
    for g in model.prior.table() {
        w.f64s(&g.mu);
    }
    for g in model.prior.table() {
        w.f64s(&g.log_var);
    }
    w.into_bytes()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<CoVae> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let n = r.u32("n")? as usize;
    let k = r.u32("k")? as usize;
    let m = r.u32("m")? as usize;
    let dim = r.u32("dim")? as usize;
    let n_envs = r.u32("n_envs")? as usize;
    let act_offset = r.offset();
    let act = Activation::from_code(r.u32("activation")?).ok_or_else(|| FormatError::Invalid {
        offset: act_offset,
        what: "unknown activation code".into(),
    })?;
    let enc_sizes = read_sizes(&mut r)?;
    let dec_sizes = read_sizes(&mut r)?;
    let encoder = read_mlp(&mut r, &enc_sizes, act)?;
    let decoder = read_mlp(&mut r, &dec_sizes, act)?;
    let cells = checked_product(&[n_envs, m], "prior cells")?;
    checked_product(&[cells, n, 8], "prior table")?;
    let mus: Vec<Vec<f64>> = (0..cells)
        .map(|_| r.f64s(n, "prior means"))
        .collect::<std::result::Result<_, _>>()?;
    let lvs: Vec<Vec<f64>> = (0..cells)
        .map(|_| r.f64s(n, "prior log-variances"))
        .collect::<std::result::Result<_, _>>()?;
    r.finish()?;
    let table = mus
        .into_iter()
        .zip(lvs)
        .map(|(mu, log_var)| GaussianParams { mu, log_var })
        .collect();
    let prior = ExpFamilyPrior::from_table(n, k, n_envs, m, table)?;
    let model = CoVae {
        encoder,
        decoder,
        prior,
        n,
        k,
        m,
        dim,
        n_envs,
    };
    model.check_shapes()?;
    Ok(model)
}

pub fn save_model(model: &CoVae, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)).map_err(|e| VaeError::Format(FormatError::Io(e)))
}

pub fn load_model(path: &Path) -> Result<CoVae> {
    let bytes = std::fs::read(path).map_err(|e| VaeError::Format(FormatError::Io(e)))?;
    model_from_bytes(&bytes)
}
