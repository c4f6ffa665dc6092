//! Weights on disk: one CWMT file per kernel and bias plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::spec::NetworkSpec;
use crate::cwm::Conv2d;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{read_any, Tensor};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "cwm-weights";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub network: NetworkSpec,
    pub tensors: Vec<WeightEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub layer: String,
    pub kernel: String,
    pub kernel_shape: Vec<usize>,
    pub bias: Option<String>,
}

pub fn save_weights<T: Scalar>(net: &Network<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::Io(e).in_file(dir))?;
    let mut tensors = Vec::new();
    for ((_, layer, _), conv) in net.spec().conv_layers().zip(net.convs()) {
        let kernel = format!("{}.kernel.cwmt", layer.name);
        conv.kernel.save(dir.join(&kernel))?;
        let bias = match &conv.bias {
            Some(b) => {
                let name = format!("{}.bias.cwmt", layer.name);
                b.save(dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        tensors.push(WeightEntry {
            layer: layer.name.clone(),
            kernel,
            kernel_shape: conv.kernel.shape().to_vec(),
            bias,
        });
    }
    let manifest = WeightsManifest {
        format: FORMAT.into(),
        version: 1,
        dtype: T::DTYPE,
        network: net.spec().clone(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::Io(e).in_file(&path))
}

fn read_manifest(dir: &Path) -> Result<WeightsManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Io(e).in_file(&path))?;
    let manifest: WeightsManifest =
        serde_json::from_str(&text).map_err(|e| Error::Json(e).in_file(&path))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported manifest {} v{}",
            manifest.format, manifest.version
        ))
        .in_file(&path));
    }
    Ok(manifest)
}

fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::Io(e).in_file(path))?;
    Ok(read_any(bytes.as_slice())
        .map_err(|e| e.in_file(path))?
        .into_scalar())
}

/// Loads the weights in `dir` for `spec`, checking every layer's shapes.
/// Nothing is returned unless every tensor loads.
pub fn load_weights<T: Scalar>(dir: impl AsRef<Path>, spec: &NetworkSpec) -> Result<Network<T>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut convs = Vec::new();
    for (_, layer, c) in spec.conv_layers() {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.layer == layer.name)
            .ok_or_else(|| Error::WeightMismatch {
                layer: layer.name.clone(),
                detail: "not present in manifest".into(),
            })?;
        let expected = c.kernel_shape();
        if entry.kernel_shape != expected {
            return Err(Error::WeightMismatch {
                layer: layer.name.clone(),
                detail: format!(
                    "stored kernel {:?}, spec wants {expected:?}",
                    entry.kernel_shape
                ),
            });
        }
        let kernel: Tensor<T> = read_tensor(&dir.join(&entry.kernel))?;
        if kernel.shape() != expected {
            return Err(Error::WeightMismatch {
                layer: layer.name.clone(),
                detail: format!("kernel file has shape {:?}", kernel.shape()),
            });
        }
        let bias = entry
            .bias
            .as_ref()
            .map(|b| read_tensor::<T>(&dir.join(b)))
            .transpose()?;
        let conv =
            Conv2d::new(kernel, bias, c.stride, c.padding).map_err(|e| Error::WeightMismatch {
                layer: layer.name.clone(),
                detail: e.to_string(),
            })?;
        convs.push(conv);
    }
    Network::new(spec.clone(), convs)
}

/// Loads weights together with the spec recorded in the manifest.
pub fn load_network<T: Scalar>(dir: impl AsRef<Path>) -> Result<Network<T>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    load_weights(dir, &manifest.network)
}
