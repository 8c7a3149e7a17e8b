//! Checkpoint archives: a safetensors file holding every named parameter as
//! little-endian `f64` plus the architecture under a single metadata key.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{ModelError, UNet, UNetConfig};

const METADATA_KEY: &str = "tumorseg.unet";
const FORMAT_VERSION: &str = "1";

fn encode_config(config: &UNetConfig, seed: u64) -> String {
    format!(
        "format={FORMAT_VERSION};in_channels={};num_classes={};base_features={};depth={};input_h={};input_w={};seed={seed}",
        config.in_channels,
        config.num_classes,
        config.base_features,
        config.depth,
        config.input_size.0,
        config.input_size.1,
    )
}

fn decode_config(text: &str) -> Result<(UNetConfig, u64), String> {
    let fields: HashMap<&str, &str> = text
        .split(';')
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let get = |key: &str| -> Result<u64, String> {
        fields
            .get(key)
            .ok_or_else(|| format!("missing '{key}'"))?
            .parse::<u64>()
            .map_err(|e| format!("bad '{key}': {e}"))
    };
    if fields.get("format") != Some(&FORMAT_VERSION) {
        return Err(format!("unsupported format {:?}", fields.get("format")));
    }
    let config = UNetConfig {
        in_channels: get("in_channels")? as usize,
        num_classes: get("num_classes")? as usize,
        base_features: get("base_features")? as usize,
        depth: get("depth")? as usize,
        input_size: (get("input_h")? as usize, get("input_w")? as usize),
    };
    Ok((config, get("seed")?))
}

/// Writes `model` to `path`. Identical models produce identical bytes.
pub fn save_checkpoint(model: &UNet, path: &Path) -> Result<(), ModelError> {
    let err = |reason: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    let params = model.parameters();
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .iter()
        .map(|(name, p)| {
            let bytes = p.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), p.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| err(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let metadata = HashMap::from([(
        METADATA_KEY.to_string(),
        encode_config(model.config(), model.seed()),
    )]);
    let bytes = safetensors::tensor::serialize(views, Some(metadata)).map_err(|e| err(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| ModelError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Restores a model saved by [`save_checkpoint`]; parameters are bit-identical.
pub fn load_checkpoint(path: &Path) -> Result<UNet, ModelError> {
    let err = |reason: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| err(e.to_string()))?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| err(format!("missing '{METADATA_KEY}' metadata")))?;
    let (config, seed) = decode_config(text).map_err(err)?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| err(e.to_string()))?;

    let mut model = UNet::new(config, seed)?;
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    if tensors.len() != names.len() {
        return Err(err(format!(
            "expected {} tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for (name, mut dst) in names.iter().zip(model.parameters_mut()) {
        let view = tensors.tensor(name).map_err(|e| err(format!("{name}: {e}")))?;
        if view.dtype() != Dtype::F64 || view.shape() != dst.shape() {
            return Err(err(format!(
                "{name}: expected f64 {:?}, found {:?} {:?}",
                dst.shape(),
                view.dtype(),
                view.shape()
            )));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let src = ArrayD::from_shape_vec(view.shape().to_vec(), values).map_err(|e| err(e.to_string()))?;
        dst.assign(&src);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let config = UNetConfig {
            base_features: 2,
            depth: 2,
            input_size: (16, 16),
            ..UNetConfig::default()
        };
        let model = UNet::new(config, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, model);
        let again = dir.path().join("m2.ckpt");
        save_checkpoint(&loaded, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint { .. })));
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing.ckpt")),
            Err(ModelError::Io { .. })
        ));
    }
}
