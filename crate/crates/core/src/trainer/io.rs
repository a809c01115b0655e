use super::{Classifier, Result, TrainError};
use crate::format::{checked_product, ByteReader, ByteWriter, FormatError};
use crate::numkit::{Activation, Matrix, Mlp};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CBCL";
const VERSION: u32 = 1;

pub fn classifier_to_bytes(clf: &Classifier) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(MAGIC);
    w.u32(VERSION);
    w.u32(clf.net.activation().code());
    w.u32(clf.net.layer_sizes().len() as u32);
    for &s in clf.net.layer_sizes() {
        w.u32(s as u32);
    }
    for (weights, bias) in clf.net.weights().iter().zip(clf.net.biases()) {
        w.f64s(weights.data());
        w.f64s(bias);
    }
    w.into_bytes()
}

pub fn classifier_from_bytes(bytes: &[u8]) -> Result<Classifier> {
    let fmt = |e: FormatError| TrainError::Format(e);
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC).map_err(fmt)?;
    r.expect_version(VERSION).map_err(fmt)?;
    let at = r.offset();
    let act = Activation::from_code(r.u32("activation").map_err(fmt)?)
        .ok_or_else(|| fmt(FormatError::Invalid { offset: at, what: "unknown activation code".into() }))?;
    let count = r.u32("layer count").map_err(fmt)? as usize;
    if count < 2 || count > r.remaining() / 4 {
        return Err(fmt(FormatError::Invalid { offset: r.offset(), what: format!("layer count {count}") }));
    }
    let sizes = (0..count)
        .map(|_| r.u32("layer size").map(|v| v as usize))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(fmt)?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in sizes.windows(2) {
        let len = checked_product(pair, "layer weights").map_err(fmt)?;
        let w = r.f64s(len, "weights").map_err(fmt)?;
        weights.push(Matrix::from_vec(pair[0], pair[1], w)?);
        biases.push(r.f64s(pair[1], "biases").map_err(fmt)?);
    }
    r.finish().map_err(fmt)?;
    Ok(Classifier { net: Mlp::from_parts(act, weights, biases)? })
}

pub fn save_classifier(clf: &Classifier, path: &Path) -> Result<()> {
    std::fs::write(path, classifier_to_bytes(clf)).map_err(|e| TrainError::Format(FormatError::Io(e)))
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::Format(FormatError::Io(e)))?;
    classifier_from_bytes(&bytes)
}
