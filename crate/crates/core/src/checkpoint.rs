//! Parameter checkpoints: a tar archive holding `manifest.json` and one
//! `params/<name>.f32` entry per parameter, each a flat little-endian
//! 32-bit float array.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelzoo::{LocalModel, VtcDecoder};
use crate::nn::Sequential;
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// `"local_model"` or `"decoder"`.
    pub kind: String,
    pub arch_id: Option<usize>,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

fn append<W: std::io::Write>(tar: &mut tar::Builder<W>, name: &str, bytes: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    tar.append_data(&mut header, name, bytes)?;
    Ok(())
}

fn collect<'a, T: Scalar>(parts: &[(&str, &'a Sequential<T>)]) -> Vec<(String, &'a crate::nn::Param<T>)> {
    parts
        .iter()
        .flat_map(|(prefix, net)| {
            net.named_params()
                .into_iter()
                .map(move |(n, p)| (format!("{prefix}.{n}"), p))
        })
        .collect()
}

fn write_archive<T: Scalar>(
    path: &Path,
    kind: &str,
    arch_id: Option<usize>,
    seed: u64,
    parts: &[(&str, &Sequential<T>)],
) -> Result<()> {
    let params = collect(parts);
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        arch_id,
        seed,
        params: params
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let mut tar = tar::Builder::new(BufWriter::new(File::create(path)?));
    append(&mut tar, MANIFEST, &serde_json::to_vec_pretty(&manifest)?)?;
    for (name, p) in &params {
        let bytes: Vec<u8> = p.value.iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect();
        append(&mut tar, &format!("params/{name}.f32"), &bytes)?;
    }
    tar.into_inner()?.into_inner().map_err(|e| e.into_error())?;
    Ok(())
}

pub fn save_local_model<T: Scalar>(path: &Path, model: &LocalModel<T>, seed: u64) -> Result<()> {
    write_archive(
        path,
        "local_model",
        Some(model.arch.id),
        seed,
        &[("extractor", &model.extractor), ("head", &model.head)],
    )
}

pub fn save_decoder<T: Scalar>(path: &Path, decoder: &VtcDecoder<T>, seed: u64) -> Result<()> {
    write_archive(path, "decoder", None, seed, &[("decoder", &decoder.net)])
}

/// Reads the manifest and every parameter array of a checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointManifest, BTreeMap<String, Vec<f32>>)> {
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut archive = tar::Archive::new(BufReader::new(File::open(path)?));
    let mut manifest = None;
    let mut arrays = BTreeMap::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes)?;
        if name == MANIFEST {
            manifest = Some(serde_json::from_slice::<CheckpointManifest>(&bytes)?);
        } else if let Some(param) = name.strip_prefix("params/").and_then(|n| n.strip_suffix(".f32")) {
            if bytes.len() % 4 != 0 {
                return Err(bad(format!("{name} is not a whole number of floats")));
            }
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.insert(param.to_string(), values);
        }
    }
    let manifest = manifest.ok_or_else(|| bad("missing manifest".into()))?;
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        match arrays.get(&e.name) {
            Some(a) if a.len() == n => {}
            Some(a) => return Err(bad(format!("{} has {} values, shape says {n}", e.name, a.len()))),
            None => return Err(bad(format!("{} listed but absent", e.name))),
        }
    }
    Ok((manifest, arrays))
}

/// Copies arrays named `<prefix>.<param>` into `net`.
pub fn restore<T: Scalar>(net: &mut Sequential<T>, prefix: &str, arrays: &BTreeMap<String, Vec<f32>>) -> Result<()> {
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(net.params_mut()) {
        let key = format!("{prefix}.{name}");
        let src = arrays
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {key}")))?;
        if src.len() != p.value.len() {
            return Err(Error::Checkpoint(format!(
                "{key}: {} values for a parameter of {}",
                src.len(),
                p.value.len()
            )));
        }
        for (d, &s) in p.value.iter_mut().zip(src) {
            *d = T::of(s as f64);
        }
    }
    Ok(())
}
