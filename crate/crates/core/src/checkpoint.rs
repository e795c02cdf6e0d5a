//! Versioned JSON checkpoints.
//!
//! Every floating-point parameter is written in scientific notation with 17
//! significant digits, which round-trips any `f64` exactly. Matrices are
//! stored row-major as `{"rows", "cols", "data"}`. Object keys are sorted, so
//! identical models produce identical bytes.

use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde_json::{json, Map, Number, Value};

use crate::data::{SplitSpec, Standardizer};
use crate::experts::ExpertEnsemble;
use crate::nn::{HiddenActivation, Mlp, OutputActivation};
use crate::trainer::{TrainConfig, TrainedModel};
use crate::{Error, Result};

pub const FORMAT_NAME: &str = "expertnet-checkpoint";
pub const FORMAT_VERSION: u64 = 1;

/// A model read back from disk together with the split it was trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TrainedModel,
    pub split: Option<SplitSpec>,
}

fn num(v: f64) -> Result<Value> {
    if !v.is_finite() {
        return Err(Error::Checkpoint(format!("cannot store non-finite value {v}")));
    }
    Number::from_str(&format!("{v:.16e}"))
        .map(Value::Number)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

fn nums<'a>(vals: impl IntoIterator<Item = &'a f64>) -> Result<Value> {
    vals.into_iter().map(|&v| num(v)).collect::<Result<Vec<_>>>().map(Value::Array)
}

fn matrix(m: &Array2<f64>) -> Result<Value> {
    Ok(json!({ "rows": m.nrows(), "cols": m.ncols(), "data": nums(m.iter())? }))
}

fn network(net: &Mlp) -> Result<Value> {
    let layers = net
        .weights()
        .iter()
        .zip(net.biases())
        .map(|(w, b)| Ok(json!({ "weights": matrix(w)?, "bias": nums(b.iter())? })))
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({
        "layer_dims": net.layer_dims(),
        "hidden_activation": net.hidden_activation().name(),
        "output_activation": net.output_activation().name(),
        "layers": layers,
    }))
}

fn standardizer(s: &Standardizer) -> Result<Value> {
    Ok(json!({ "means": nums(&s.means)?, "stds": nums(&s.stds)? }))
}

/// Serializes a model (and optionally its data split) to the checkpoint text.
pub fn to_string(model: &TrainedModel, split: Option<&SplitSpec>) -> Result<String> {
    let config = serde_json::to_value(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let split = serde_json::to_value(split).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let doc = json!({
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": config,
        "split": split,
        "feature_names": model.feature_names,
        "label_names": model.label_names,
        "standardizer": match &model.standardizer {
            Some(s) => standardizer(s)?,
            None => Value::Null,
        },
        "encoder": network(&model.encoder)?,
        "decoder": network(&model.decoder)?,
        "experts": model.experts.experts().iter().map(network).collect::<Result<Vec<_>>>()?,
        "centroids": matrix(&model.centroids)?,
        "best_epoch": model.best_epoch,
    });
    let mut out = serde_json::to_string_pretty(&doc).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.push('\n');
    Ok(out)
}

pub fn save(model: &TrainedModel, split: Option<&SplitSpec>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_string(model, split)?)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| bad(format!("missing field `{key}`")))
}

fn object<'a>(v: &'a Value, what: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| bad(format!("`{what}` must be an object")))
}

fn array<'a>(v: &'a Value, what: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| bad(format!("`{what}` must be an array")))
}

fn read_f64(v: &Value) -> Result<f64> {
    match v {
        Value::Number(n) => n
            .to_string()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| bad(format!("`{n}` is not a finite number"))),
        _ => Err(bad("expected a number")),
    }
}

fn read_usize(v: &Value, what: &str) -> Result<usize> {
    v.as_u64()
        .and_then(|x| usize::try_from(x).ok())
        .ok_or_else(|| bad(format!("`{what}` must be a nonnegative integer")))
}

fn read_vec(v: &Value, what: &str) -> Result<Vec<f64>> {
    array(v, what)?.iter().map(read_f64).collect()
}

fn read_strings(v: &Value, what: &str) -> Result<Vec<String>> {
    array(v, what)?
        .iter()
        .map(|s| s.as_str().map(str::to_string).ok_or_else(|| bad(format!("`{what}` must hold strings"))))
        .collect()
}

fn read_matrix(v: &Value, what: &str) -> Result<Array2<f64>> {
    let obj = object(v, what)?;
    let rows = read_usize(field(obj, "rows")?, "rows")?;
    let cols = read_usize(field(obj, "cols")?, "cols")?;
    let data = read_vec(field(obj, "data")?, "data")?;
    Array2::from_shape_vec((rows, cols), data).map_err(|_| bad(format!("`{what}` data does not match its shape")))
}

fn read_network(v: &Value, what: &str) -> Result<Mlp> {
    let obj = object(v, what)?;
    let dims = array(field(obj, "layer_dims")?, "layer_dims")?
        .iter()
        .map(|d| read_usize(d, "layer_dims"))
        .collect::<Result<Vec<_>>>()?;
    let hidden_name = field(obj, "hidden_activation")?.as_str().unwrap_or_default();
    let hidden = HiddenActivation::from_name(hidden_name)
        .ok_or_else(|| bad(format!("unknown hidden activation `{hidden_name}`")))?;
    let output_name = field(obj, "output_activation")?.as_str().unwrap_or_default();
    let output = OutputActivation::from_name(output_name)
        .ok_or_else(|| bad(format!("unknown output activation `{output_name}`")))?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for layer in array(field(obj, "layers")?, "layers")? {
        let layer = object(layer, "layer")?;
        weights.push(read_matrix(field(layer, "weights")?, "weights")?);
        biases.push(Array1::from(read_vec(field(layer, "bias")?, "bias")?));
    }
    Mlp::from_parts(dims, weights, biases, hidden, output).map_err(|e| bad(format!("{what}: {e}")))
}

/// Parses checkpoint text. The training history is not stored and comes back empty.
pub fn from_str(text: &str) -> Result<Checkpoint> {
    let doc: Value = serde_json::from_str(text).map_err(|e| bad(format!("invalid JSON: {e}")))?;
    let root = object(&doc, "checkpoint")?;
    if field(root, "format")?.as_str() != Some(FORMAT_NAME) {
        return Err(bad("not an expertnet checkpoint"));
    }
    let version = field(root, "version")?.as_u64().ok_or_else(|| bad("`version` must be an integer"))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let config: TrainConfig =
        serde_json::from_value(field(root, "config")?.clone()).map_err(|e| bad(format!("config: {e}")))?;
    let split: Option<SplitSpec> =
        serde_json::from_value(field(root, "split")?.clone()).map_err(|e| bad(format!("split: {e}")))?;
    let standardizer = match field(root, "standardizer")? {
        Value::Null => None,
        v => {
            let obj = object(v, "standardizer")?;
            Some(Standardizer {
                means: read_vec(field(obj, "means")?, "means")?,
                stds: read_vec(field(obj, "stds")?, "stds")?,
            })
        }
    };
    let encoder = read_network(field(root, "encoder")?, "encoder")?;
    let decoder = read_network(field(root, "decoder")?, "decoder")?;
    let experts = array(field(root, "experts")?, "experts")?
        .iter()
        .map(|e| read_network(e, "expert"))
        .collect::<Result<Vec<_>>>()?;
    let experts = ExpertEnsemble::from_experts(experts).map_err(|e| bad(e.to_string()))?;
    let centroids = read_matrix(field(root, "centroids")?, "centroids")?;
    let best_epoch = match field(root, "best_epoch")? {
        Value::Null => None,
        v => Some(read_usize(v, "best_epoch")?),
    };
    let feature_names = read_strings(field(root, "feature_names")?, "feature_names")?;
    let label_names = read_strings(field(root, "label_names")?, "label_names")?;

    if centroids.nrows() != experts.k() || centroids.ncols() != encoder.output_dim() {
        return Err(bad("centroids do not match the encoder and expert count"));
    }
    if experts.latent_dim() != encoder.output_dim() || decoder.input_dim() != encoder.output_dim() {
        return Err(bad("encoder, decoder and experts disagree on the latent size"));
    }
    if decoder.output_dim() != encoder.input_dim() || feature_names.len() != encoder.input_dim() {
        return Err(bad("feature count does not match the networks"));
    }
    if label_names.len() != experts.class_count() {
        return Err(bad("label names do not match the expert output size"));
    }
    if let Some(s) = &standardizer {
        if s.means.len() != encoder.input_dim() || s.stds.len() != encoder.input_dim() {
            return Err(bad("standardizer does not match the feature count"));
        }
    }
    Ok(Checkpoint {
        model: TrainedModel {
            encoder,
            decoder,
            experts,
            centroids,
            config,
            history: Vec::new(),
            best_epoch,
            feature_names,
            label_names,
            standardizer,
        },
        split,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_str(&std::fs::read_to_string(path)?)
}
