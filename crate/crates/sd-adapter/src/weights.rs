//! Tensor store backed by a single safetensors file.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use cellstyle_core::{Error, Result, Scalar};
use half::{bf16, f16};
use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

/// `format` metadata value written by the conversion step.
pub const FORMAT: &str = "cellstyle-sd";
/// Layout version this adapter reads.
pub const FORMAT_VERSION: &str = "1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Every tensor of a checkpoint converted to `T`, plus its string metadata.
pub struct Weights<T> {
    tensors: HashMap<String, ArrayD<T>>,
    metadata: HashMap<String, String>,
}

impl<T: Scalar> Weights<T> {
    /// Reads `path` and checks the format tag and version.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let metadata = meta.metadata().clone().unwrap_or_default();
        match (metadata.get("format").map(String::as_str), metadata.get("version").map(String::as_str)) {
            (Some(FORMAT), Some(FORMAT_VERSION)) => {}
            (Some(FORMAT), Some(v)) => {
                return Err(bad(format!("{} has layout version {v}, this adapter reads {FORMAT_VERSION}", path.display())))
            }
            _ => {
                return Err(bad(format!(
                    "{} lacks the `format = {FORMAT}` metadata; convert the pretrained weights first",
                    path.display()
                )))
            }
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            let arr = to_array::<T>(&view).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            tensors.insert(name, arr);
        }
        Ok(Self { tensors, metadata })
    }

    #[cfg(test)]
    pub(crate) fn from_tensors(tensors: Vec<(&str, ArrayD<T>)>) -> Self {
        Self {
            tensors: tensors.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            metadata: HashMap::new(),
        }
    }

    pub fn metadata(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    /// Parsed metadata value, `default` when absent.
    pub fn meta_or<V: std::str::FromStr>(&self, key: &str, default: V) -> Result<V> {
        match self.metadata(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| bad(format!("metadata {key} = {s:?} does not parse"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.tensors.get(name).ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    /// Sorted integer path segments directly below `prefix`,
    /// e.g. the block indices of `unet.down_blocks.`.
    pub fn indices(&self, prefix: &str) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .tensors
            .keys()
            .filter_map(|k| k.strip_prefix(prefix))
            .filter_map(|rest| rest.split('.').next()?.parse().ok())
            .collect();
        set.into_iter().collect()
    }
}

fn to_array<T: Scalar>(view: &TensorView<'_>) -> std::result::Result<ArrayD<T>, String> {
    let data = view.data();
    let vals: Vec<T> = match view.dtype() {
        Dtype::F32 => data.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
        Dtype::F64 => data.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        Dtype::F16 => data
            .chunks_exact(2)
            .map(|c| T::of(f16::from_le_bytes([c[0], c[1]]).to_f64()))
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|c| T::of(bf16::from_le_bytes([c[0], c[1]]).to_f64()))
            .collect(),
        other => return Err(format!("unsupported dtype {other:?}")),
    };
    ArrayD::from_shape_vec(IxDyn(view.shape()), vals).map_err(|e| e.to_string())
}

/// Writes `tensors` as little-endian f32 with the format tag and `extra` metadata.
pub fn save_weights(path: &Path, tensors: &[(String, ArrayD<f32>)], extra: &[(&str, String)]) -> Result<()> {
    let bytes: Vec<Vec<u8>> = tensors
        .iter()
        .map(|(_, a)| a.iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((name, a), b)| {
            TensorView::new(Dtype::F32, a.shape().to_vec(), b)
                .map(|v| (name.clone(), v))
                .map_err(|e| bad(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta: HashMap<String, String> =
        [("format".to_string(), FORMAT.to_string()), ("version".to_string(), FORMAT_VERSION.to_string())].into();
    meta.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    let out = safetensors::serialize(views, &Some(meta)).map_err(|e| bad(e.to_string()))?;
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
