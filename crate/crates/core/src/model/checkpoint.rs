//! Checkpoint directories: `model.json` plus one tensor file per parameter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerKind, Model, ModelConfig};
use crate::data::{load_tensor, save_tensor};
use crate::error::{Error, Result};
use crate::tensor::{ConvWeights, Tensor};

const FORMAT: &str = "sharp-unet-checkpoint";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";

/// Training metadata stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    /// Best validation loss observed, which selected these weights.
    pub metric: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: [usize; 4],
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    epoch: usize,
    metric: f64,
    params: Vec<ParamRecord>,
}

/// Writes `model.json` and `params/*.tensor` under `dir`, creating it.
pub fn save_checkpoint(model: &Model, meta: CheckpointMeta, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut records = Vec::new();
    for layer in model.layers() {
        let bias = Tensor::from_vec(
            [1, layer.weights.bias.len(), 1, 1],
            layer.weights.bias.clone(),
        )?;
        for (suffix, tensor) in [("weight", &layer.weights.kernel), ("bias", &bias)] {
            let name = format!("{}.{suffix}", layer.spec.name);
            let file = format!("params/{name}.tensor");
            save_tensor(dir.join(&file), tensor)?;
            records.push(ParamRecord {
                name,
                shape: tensor.shape().dims(),
                file,
            });
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        epoch: meta.epoch,
        metric: meta.metric,
        params: records,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn read_manifest(dir: &Path) -> Result<(PathBuf, Manifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::format(
            &path,
            format!("unknown format tag `{}`", manifest.format),
        ));
    }
    if manifest.version != VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint version {}", manifest.version),
        ));
    }
    Ok((path, manifest))
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let dir = dir.as_ref();
    let (path, manifest) = read_manifest(dir)?;
    let specs = manifest.config.layer_specs();
    if manifest.params.len() != 2 * specs.len() {
        return Err(Error::format(
            &path,
            format!(
                "expected {} parameter records, found {}",
                2 * specs.len(),
                manifest.params.len()
            ),
        ));
    }
    let mut weights = Vec::with_capacity(specs.len());
    for (spec, pair) in specs.iter().zip(manifest.params.chunks_exact(2)) {
        let [kernel_rec, bias_rec] = pair else {
            unreachable!()
        };
        for (rec, suffix) in [(kernel_rec, "weight"), (bias_rec, "bias")] {
            let want = format!("{}.{suffix}", spec.name);
            if rec.name != want {
                return Err(Error::format(
                    &path,
                    format!("expected record `{want}`, found `{}`", rec.name),
                ));
            }
        }
        let kernel = load_record(dir, kernel_rec)?;
        let bias = load_record(dir, bias_rec)?.into_vec();
        weights.push(match spec.kind {
            LayerKind::UpConv2x2 => ConvWeights::new_transposed(kernel, bias)?,
            _ => ConvWeights::new(kernel, bias)?,
        });
    }
    let model = Model::from_weights(manifest.config, weights)?;
    Ok((
        model,
        CheckpointMeta {
            epoch: manifest.epoch,
            metric: manifest.metric,
        },
    ))
}

fn load_record(dir: &Path, rec: &ParamRecord) -> Result<Tensor<f32>> {
    let path = dir.join(&rec.file);
    let t = load_tensor(&path)?;
    if t.shape().dims() != rec.shape {
        return Err(Error::format(
            &path,
            format!("manifest says {:?}, file holds {}", rec.shape, t.shape()),
        ));
    }
    Ok(t)
}

/// Like [`load_checkpoint`], but fails unless the stored config equals
/// `expected`.
pub fn load_checkpoint_expecting(
    dir: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<(Model, CheckpointMeta)> {
    let (_, manifest) = read_manifest(dir.as_ref())?;
    if &manifest.config != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {:?}, expected {:?}",
            manifest.config, expected
        )));
    }
    load_checkpoint(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Connection};

    fn small(connection: Connection) -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            num_classes: 2,
            widths: [2, 3, 4, 5, 6],
            connection,
            seed: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&small(Connection::Sharp)).unwrap();
        let meta = CheckpointMeta {
            epoch: 7,
            metric: 0.125,
        };
        save_checkpoint(&m, meta, dir.path()).unwrap();
        let (back, meta_back) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta, meta_back);
        assert_eq!(back, m);
        let x = crate::testutil::random_tensor([1, 1, 16, 16], 1).cast::<f32>();
        let (a, b) = (m.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn config_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&small(Connection::Plain)).unwrap();
        save_checkpoint(
            &m,
            CheckpointMeta {
                epoch: 0,
                metric: 1.0,
            },
            dir.path(),
        )
        .unwrap();
        let err = load_checkpoint_expecting(dir.path(), &small(Connection::Sharp)).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)));
        assert!(load_checkpoint_expecting(dir.path(), &small(Connection::Plain)).is_ok());
    }

    #[test]
    fn corrupted_blob_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&small(Connection::Plain)).unwrap();
        save_checkpoint(
            &m,
            CheckpointMeta {
                epoch: 0,
                metric: 1.0,
            },
            dir.path(),
        )
        .unwrap();
        let blob = dir.path().join("params/enc1.conv1.weight.tensor");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn wrong_format_tag_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&small(Connection::Plain)).unwrap();
        save_checkpoint(
            &m,
            CheckpointMeta {
                epoch: 0,
                metric: 1.0,
            },
            dir.path(),
        )
        .unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace(FORMAT, "something-else");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&small(Connection::Plain)).unwrap();
        save_checkpoint(
            &m,
            CheckpointMeta {
                epoch: 0,
                metric: 1.0,
            },
            dir.path(),
        )
        .unwrap();
        let blob = dir.path().join("params/head.weight.tensor");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Format { .. })
        ));
    }
}
