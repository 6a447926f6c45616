//! Trained-stack persistence: a JSON manifest plus one binary checkpoint
//! per network.

use crate::levels::PowerLevelSet;
use crate::mpd::Mpd;
use crate::pipeline::EnsembleStack;
use crate::{DefenseError, Result};
use rome_models::{Classifier, SemanticEncoder};
use rome_nn::checkpoint;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    encoder: String,
    classifiers: Vec<String>,
    detector: String,
    boundaries: Vec<f64>,
    symbols: usize,
    power: f64,
    classes: usize,
    feature_shape: Vec<usize>,
}

const MANIFEST: &str = "manifest.json";

pub fn save_bundle(stack: &EnsembleStack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| DefenseError::Io(e.to_string()))?;

    let manifest = BundleManifest {
        encoder: "encoder.ckpt".into(),
        classifiers: (0..stack.classifiers.len())
            .map(|i| format!("classifier_{i}.ckpt"))
            .collect(),
        detector: "detector.ckpt".into(),
        boundaries: stack.levels.boundaries().to_vec(),
        symbols: stack.encoder.symbols,
        power: stack.encoder.power,
        classes: stack.classifiers[0].classes,
        feature_shape: stack.encoder.feature_shape.clone(),
    };

    checkpoint::save(&stack.encoder.graph, dir.join(&manifest.encoder))?;
    for (name, cls) in manifest.classifiers.iter().zip(&stack.classifiers) {
        checkpoint::save(&cls.graph, dir.join(name))?;
    }
    checkpoint::save(&stack.mpd.graph, dir.join(&manifest.detector))?;

    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DefenseError::Io(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST), json).map_err(|e| DefenseError::Io(e.to_string()))?;
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<EnsembleStack> {
    let dir = dir.as_ref();
    let raw = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| DefenseError::Io(format!("{}: {e}", dir.display())))?;
    let manifest: BundleManifest =
        serde_json::from_str(&raw).map_err(|e| DefenseError::Io(e.to_string()))?;

    let encoder = SemanticEncoder {
        graph: checkpoint::load(dir.join(&manifest.encoder))?,
        symbols: manifest.symbols,
        power: manifest.power,
        feature_shape: manifest.feature_shape.clone(),
    };
    let classifiers = manifest
        .classifiers
        .iter()
        .map(|name| {
            Ok(Classifier {
                graph: checkpoint::load(dir.join(name))?,
                classes: manifest.classes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let levels = PowerLevelSet::from_boundaries(manifest.boundaries)?;
    let mpd = Mpd {
        graph: checkpoint::load(dir.join(&manifest.detector))?,
        levels: levels.count(),
    };
    Ok(EnsembleStack {
        encoder,
        classifiers,
        mpd,
        levels,
    })
}
