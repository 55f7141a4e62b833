//! Command implementations and the file helpers they share.

pub mod analyze;
pub mod attack;
pub mod data;
pub mod train;

use std::path::Path;

use flowattack::blackbox::ToyClassifier;
use flowattack::data::Dataset;
use flowattack::diffcore::Tensor;
use flowattack::domain::Bounds;
use flowattack::flow::FlowModel;
use flowattack::io::{read_tensor_file, write_tensor_file};
use flowattack::{Error, Result};
use serde::Serialize;

/// Names the offending file in I/O and format errors.
pub fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    let name = path.display().to_string();
    r.map_err(|e| match e {
        Error::Io(io) if !io.to_string().starts_with(&name) => {
            Error::Io(std::io::Error::new(io.kind(), format!("{name}: {io}")))
        }
        Error::Format { offset, msg } if !msg.starts_with(&name) => Error::Format {
            offset,
            msg: format!("{name}: {msg}"),
        },
        other => other,
    })
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    with_path(path, read_tensor_file(path))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    with_path(path, write_tensor_file(path, t))
}

pub fn load_flow(path: &Path) -> Result<FlowModel> {
    with_path(path, FlowModel::load(path))
}

pub fn load_classifier(path: &Path) -> Result<ToyClassifier> {
    with_path(path, ToyClassifier::load(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}

pub fn read_text(path: &Path) -> Result<String> {
    with_path(path, std::fs::read_to_string(path).map_err(Error::from))
}

/// Inputs must lie in the unit box every generated kind uses.
pub fn check_unit_box(x: &Tensor, path: &Path) -> Result<()> {
    match x.data().iter().position(|&v| !Bounds::UNIT.contains(v)) {
        Some(i) => Err(Error::Contract(format!(
            "{}: value {} at flat index {i} lies outside [0, 1]",
            path.display(),
            x.data()[i]
        ))),
        None => Ok(()),
    }
}

/// Loads inputs and labels. With `num_classes == 0` the class count is
/// one more than the largest label.
pub fn load_dataset(data: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let x = load_tensor(data)?;
    check_unit_box(&x, data)?;
    let y = load_tensor(labels)?;
    let k = if num_classes == 0 {
        y.data().iter().cloned().fold(0.0f64, f64::max) as usize + 1
    } else {
        num_classes
    };
    with_path(labels, Dataset::from_tensors(x, &y, k, Bounds::UNIT))
}
