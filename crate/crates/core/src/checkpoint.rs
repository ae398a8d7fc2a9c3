//! Versioned model checkpoints.
//!
//! A checkpoint is a single JSON document holding every parameter under its
//! canonical name as shape plus row-major 64-bit values, the configuration
//! echo, and the vocabulary with integrity hashes. Values survive a
//! save/load round trip bit-exactly (f32 parameters are widened losslessly
//! and narrow back to the identical bits).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ContextMechanism, ModelConfig, ModelParams};
use crate::scalar::Scalar;

pub const FORMAT: &str = "slotfill-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DimsEcho {
    pub embed_dim: usize,
    pub hidden: usize,
    pub label_embed_dim: usize,
    pub decoder_hidden: usize,
    pub peepholes: bool,
    pub vocab_size: usize,
    pub tag_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format: String,
    pub version: u32,
    /// Scalar width the model was trained in ("f32" or "f64"); loading
    /// requires the same width so evaluations reproduce training-time
    /// numbers exactly.
    pub precision: String,
    pub mechanism: String,
    pub config: DimsEcho,
    pub words: Vec<String>,
    pub tags: Vec<String>,
    pub word_hash: String,
    pub tag_hash: String,
    pub params: Vec<ParamEntry>,
}

fn precision_name<F: Scalar>() -> &'static str {
    match F::BITS {
        32 => "f32",
        _ => "f64",
    }
}

/// Builds the serializable form. Fails if any parameter is non-finite
/// (JSON cannot carry NaN/inf, and such a model is broken anyway).
pub fn to_file<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    mechanism: ContextMechanism,
) -> Result<CheckpointFile> {
    let mut entries = Vec::new();
    for (name, tensor) in params.named_tensors() {
        if !tensor.is_finite() {
            return Err(Error::numeric(name, "refusing to checkpoint non-finite values"));
        }
        entries.push(ParamEntry {
            name,
            shape: tensor.shape().to_vec(),
            data: tensor.data().iter().map(|v| v.to_f()).collect(),
        });
    }
    Ok(CheckpointFile {
        format: FORMAT.to_string(),
        version: VERSION,
        precision: precision_name::<F>().to_string(),
        mechanism: mechanism.name().to_string(),
        config: DimsEcho {
            embed_dim: params.config.embed_dim,
            hidden: params.config.hidden,
            label_embed_dim: params.config.label_embed_dim,
            decoder_hidden: params.config.decoder_hidden,
            peepholes: params.config.peepholes,
            vocab_size: params.vocab_size(),
            tag_count: params.tag_count(),
        },
        words: vocab.words().to_vec(),
        tags: vocab.tags().to_vec(),
        word_hash: vocab.word_hash(),
        tag_hash: vocab.tag_hash(),
        params: entries,
    })
}

pub fn save<F: Scalar>(
    path: impl AsRef<Path>,
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    mechanism: ContextMechanism,
) -> Result<()> {
    let file = to_file(params, vocab, mechanism)?;
    let mut json = serde_json::to_string(&file)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<CheckpointFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unexpected format {:?} (expected {FORMAT:?})",
            file.format
        )));
    }
    if file.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (this build reads {VERSION})",
            file.version
        )));
    }
    Ok(file)
}

/// Reconstructs the model, vocabulary and mechanism, verifying precision,
/// vocabulary hashes, parameter completeness and shapes.
pub fn from_file<F: Scalar>(
    file: &CheckpointFile,
) -> Result<(ModelParams<F>, Vocabulary, ContextMechanism)> {
    let wanted = precision_name::<F>();
    if file.precision != wanted {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {} does not match requested {wanted}",
            file.precision
        )));
    }
    let vocab = Vocabulary::from_lists(file.words.clone(), file.tags.clone())
        .map_err(|e| Error::Checkpoint(format!("vocabulary: {e}")))?;
    if vocab.word_hash() != file.word_hash || vocab.tag_hash() != file.tag_hash {
        return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
    }
    let mechanism: ContextMechanism = file
        .mechanism
        .parse()
        .map_err(|e| Error::Checkpoint(format!("{e}")))?;
    let config = ModelConfig {
        embed_dim: file.config.embed_dim,
        hidden: file.config.hidden,
        label_embed_dim: file.config.label_embed_dim,
        decoder_hidden: file.config.decoder_hidden,
        peepholes: file.config.peepholes,
    };
    if file.config.vocab_size != vocab.word_count() || file.config.tag_count != vocab.tag_count() {
        return Err(Error::Checkpoint("config echo disagrees with vocabulary".into()));
    }
    let mut params: ModelParams<F> =
        ModelParams::zeros(config, file.config.vocab_size, file.config.tag_count)
            .map_err(|e| Error::Checkpoint(format!("{e}")))?;

    let mut by_name: std::collections::HashMap<&str, &ParamEntry> = file
        .params
        .iter()
        .map(|entry| (entry.name.as_str(), entry))
        .collect();
    if by_name.len() != file.params.len() {
        return Err(Error::Checkpoint("duplicate parameter names".into()));
    }
    let mut problem: Option<String> = None;
    params.for_each_tensor_mut(|name, tensor| {
        if problem.is_some() {
            return;
        }
        let Some(entry) = by_name.remove(name) else {
            problem = Some(format!("missing parameter {name}"));
            return;
        };
        if entry.shape != tensor.shape() {
            problem = Some(format!(
                "parameter {name}: shape {:?} does not match expected {:?}",
                entry.shape,
                tensor.shape()
            ));
            return;
        }
        if entry.data.len() != tensor.len() {
            problem = Some(format!("parameter {name}: wrong number of values"));
            return;
        }
        if entry.data.iter().any(|v| !v.is_finite()) {
            problem = Some(format!("parameter {name}: non-finite value"));
            return;
        }
        for (slot, &v) in tensor.data_mut().iter_mut().zip(&entry.data) {
            *slot = F::from_f(v);
        }
    });
    if let Some(msg) = problem {
        return Err(Error::Checkpoint(msg));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unknown parameter {extra}")));
    }
    Ok((params, vocab, mechanism))
}

pub fn load<F: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(ModelParams<F>, Vocabulary, ContextMechanism)> {
    from_file(&read_file(path)?)
}
