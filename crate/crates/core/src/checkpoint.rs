//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (model configuration, taxonomy, hyperparameters, text vocabulary and a
//! tensor index), then the raw little-endian `f64` data of every tensor.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attr_text::AttributeTaxonomy;
use crate::error::{Error, Result};
use crate::model::{FrozenTextEncoder, LookupTextEncoder, ModelConfig, SegModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LUNGCKPT";
const TEXT_TABLE: &str = "frozen.text.table";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    taxonomy: AttributeTaxonomy,
    #[serde(default)]
    hyperparameters: serde_json::Value,
    vocabulary: Vec<String>,
    text_seed: u64,
    tensors: Vec<TensorEntry>,
}

/// Contents of a checkpoint besides the weights.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub taxonomy: AttributeTaxonomy,
    pub hyperparameters: serde_json::Value,
}

pub fn save(model: &SegModel, path: &Path) -> Result<()> {
    save_with(
        model,
        &AttributeTaxonomy::default(),
        serde_json::Value::Null,
        path,
    )
}

pub fn save_with(
    model: &SegModel,
    taxonomy: &AttributeTaxonomy,
    hyperparameters: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = model
        .named_parameters()
        .into_iter()
        .map(|(n, p)| (n, &p.value))
        .collect();
    tensors.push((TEXT_TABLE.to_string(), model.text_encoder().table()));
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        version: 1,
        model: model.config().clone(),
        taxonomy: taxonomy.clone(),
        hyperparameters,
        vocabulary: model.text_encoder().vocabulary(),
        text_seed: model.text_encoder().seed(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, t) in &tensors {
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(SegModel, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
    let body = &bytes[body_start..];
    let read = |e: &TensorEntry| -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let end = start + n * 8;
        if end > body.len() {
            return Err(bad(&format!("tensor {} runs past end of file", e.name)));
        }
        let data = body[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::from_vec(&e.shape, data)
    };
    let index: BTreeMap<&str, &TensorEntry> = header
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();

    let mut model = SegModel::new(header.model.clone(), &header.taxonomy)?;
    let text = LookupTextEncoder::from_vocab(
        header.vocabulary.clone(),
        header.model.text_dim,
        header.model.text_len,
        header.text_seed,
    );
    let stored_table = read(
        index
            .get(TEXT_TABLE)
            .ok_or_else(|| bad("missing text table"))?,
    )?;
    if &stored_table != text.table() || text.dim() != header.model.text_dim {
        return Err(bad(
            "stored text table does not match its vocabulary and seed",
        ));
    }
    model.set_text_encoder(text)?;
    for (name, p) in model.trainable_parameters() {
        let e = index
            .get(name.as_str())
            .ok_or_else(|| bad(&format!("missing tensor {name}")))?;
        if e.shape != p.value.shape() {
            return Err(Error::shape(
                "checkpoint tensor",
                format!("{name} {:?}", p.value.shape()),
                format!("{:?}", e.shape),
            ));
        }
        p.value = read(e)?;
    }
    Ok((
        model,
        CheckpointMeta {
            taxonomy: header.taxonomy,
            hyperparameters: header.hyperparameters,
        },
    ))
}
