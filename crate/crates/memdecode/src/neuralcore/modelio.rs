//! Model persistence: a plain-text header (layer specs, seed, metadata)
//! followed by the parameters as little-endian f32 in declaration order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::net::{LayerSpec, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &str = "memdecode-model v1";

/// Free-form metadata stored alongside the layer stack.
pub type ModelMeta = BTreeMap<String, String>;

pub fn save_network<T: Scalar>(net: &Network<T>, meta: &ModelMeta, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{MODEL_MAGIC}")?;
    for (key, value) in meta {
        if key.contains(char::is_whitespace) || value.contains('\n') {
            return Err(Error::ModelFile(format!("unencodable metadata key {key:?}")));
        }
        writeln!(w, "meta {key} {value}")?;
    }
    for spec in &net.specs {
        match *spec {
            LayerSpec::Conv1d {
                in_ch,
                kernel,
                out_ch,
            } => writeln!(w, "layer conv1d {in_ch} {kernel} {out_ch}")?,
            LayerSpec::MaxPool { size, stride } => writeln!(w, "layer maxpool {size} {stride}")?,
            LayerSpec::GlobalMaxPool => writeln!(w, "layer global_maxpool")?,
            LayerSpec::Flatten => writeln!(w, "layer flatten")?,
            LayerSpec::Dense { inputs, outputs } => writeln!(w, "layer dense {inputs} {outputs}")?,
            LayerSpec::Relu => writeln!(w, "layer relu")?,
            LayerSpec::L2Norm => writeln!(w, "layer l2norm")?,
        }
    }
    let flat = net.flat_params();
    writeln!(w, "floats {}", flat.len())?;
    for v in flat {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_network<T: Scalar>(path: &Path) -> Result<(Network<T>, ModelMeta)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MODEL_MAGIC {
        return Err(Error::ModelFile(format!(
            "{}: bad magic line {:?}",
            path.display(),
            line.trim_end()
        )));
    }
    let mut meta = ModelMeta::new();
    let mut specs = Vec::new();
    let n_floats;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::ModelFile("unexpected end of header".into()));
        }
        let fields: Vec<&str> = line.trim_end().split(' ').collect();
        match fields.as_slice() {
            ["meta", key, rest @ ..] => {
                meta.insert(key.to_string(), rest.join(" "));
            }
            ["layer", kind, args @ ..] => specs.push(parse_layer(kind, args)?),
            ["floats", n] => {
                n_floats = n
                    .parse::<usize>()
                    .map_err(|_| Error::ModelFile(format!("bad float count {n:?}")))?;
                break;
            }
            other => {
                return Err(Error::ModelFile(format!(
                    "unrecognized header line {:?}",
                    other.join(" ")
                )))
            }
        }
    }
    let mut net = Network::<T>::new(specs, 0);
    if net.param_count() != n_floats {
        return Err(Error::ModelFile(format!(
            "layer stack implies {} parameters but file declares {n_floats}",
            net.param_count()
        )));
    }
    let mut bytes = vec![0u8; n_floats * 4];
    r.read_exact(&mut bytes)?;
    let flat: Vec<T> = bytes
        .chunks_exact(4)
        .map(|b| T::of_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    net.set_flat_params(&flat)?;
    Ok((net, meta))
}

fn parse_layer(kind: &str, args: &[&str]) -> Result<LayerSpec> {
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::ModelFile(format!("bad layer argument {s:?}")))
    };
    match (kind, args) {
        ("conv1d", [a, b, c]) => Ok(LayerSpec::Conv1d {
            in_ch: parse(a)?,
            kernel: parse(b)?,
            out_ch: parse(c)?,
        }),
        ("maxpool", [a, b]) => Ok(LayerSpec::MaxPool {
            size: parse(a)?,
            stride: parse(b)?,
        }),
        ("global_maxpool", []) => Ok(LayerSpec::GlobalMaxPool),
        ("flatten", []) => Ok(LayerSpec::Flatten),
        ("dense", [a, b]) => Ok(LayerSpec::Dense {
            inputs: parse(a)?,
            outputs: parse(b)?,
        }),
        ("relu", []) => Ok(LayerSpec::Relu),
        ("l2norm", []) => Ok(LayerSpec::L2Norm),
        _ => Err(Error::ModelFile(format!(
            "unrecognized layer {kind:?} with {} arguments",
            args.len()
        ))),
    }
}

/// Writes a flat little-endian f32 vector (the embedding file format).
pub fn write_f32_values(values: &[f32], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_f32_values(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::ModelFile(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}
