//! Model archives: one JSON document holding the flow configuration, every
//! parameter tensor keyed by path (shape + row-major f64 data), the task
//! codebook, and the robot-state normalization. The format is plain JSON so
//! any language can load a checkpoint.

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelArchive {
    version: u32,
    model: FlowModel,
}

pub fn save_model(path: &Path, model: &FlowModel) -> Result<()> {
    let archive = ModelArchive {
        version: ARCHIVE_VERSION,
        model: model.clone(),
    };
    let text = serde_json::to_string(&archive)?;
    crate::fileio::write_atomic(path, &text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FlowModel> {
    let text = std::fs::read_to_string(path)?;
    let archive: ModelArchive = serde_json::from_str(&text)?;
    if archive.version != ARCHIVE_VERSION {
        return Err(Error::InvalidConfig(format!(
            "unsupported checkpoint version {}",
            archive.version
        )));
    }
    let model = archive.model;
    model.config.validate()?;
    if model.codebook.dim != model.config.window {
        return Err(Error::InvalidConfig(
            "checkpoint codebook dimension mismatch".into(),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{channel_groups, FlowConfig};
    use crate::rcpqnet::RcpqConfig;
    use crate::task_codec::optimize_codebook;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    #[test]
    fn roundtrip_preserves_scores_exactly() {
        let config = FlowConfig {
            window: 4,
            n_points: 2,
            n_steps: 2,
            joints: 7,
            groups: channel_groups(2),
            rcpq: RcpqConfig {
                d_model: 8,
                heads: 2,
                gru_layers: 1,
                mlp_hidden: 8,
                point_hidden: 8,
                dropout: 0.0,
            },
            score_per_dim: false,
        };
        let codebook = optimize_codebook(3, 4, 2.0, 5).unwrap();
        let mut model = FlowModel::new(config, codebook, 5).unwrap();
        model.mark_actnorm_identity();
        let mut rng = crate::util::rng_from(6, "ckpt");
        for flat in 0..model.store.num_scalars() {
            let v: f64 = rng.gen::<f64>() * 0.4 - 0.2;
            model.store.set_flat(flat, v);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();

        let x = Array3::from_shape_fn((4, 2, 2), |_| rng.gen::<f64>());
        let s = Array2::from_shape_fn((4, 15), |_| rng.gen::<f64>());
        let a = crate::flow::anomaly_score(&model, &x, &s, "task00").unwrap();
        let b = crate::flow::anomaly_score(&loaded, &x, &s, "task00").unwrap();
        assert_eq!(a, b, "loaded checkpoint must reproduce scores bitwise");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"version": 99, "model": {}}"#).unwrap();
        assert!(load_model(&path).is_err());
    }
}
