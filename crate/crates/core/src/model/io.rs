use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FasModel, ModelDims, Optimizers};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    dims: ModelDims,
    frozen_prefix: usize,
    parameters: BTreeMap<String, Tensor>,
    optimizer: Optimizers,
}

pub fn save_model(path: &Path, model: &FasModel) -> Result<()> {
    let file = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        dims: model.dims.clone(),
        frozen_prefix: model.frozen_prefix,
        parameters: model.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        optimizer: model.optim.clone(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let json = serde_json::to_string(&file)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<FasModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::load(path, e.line(), e.to_string()))?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::load(
            path,
            0,
            format!(
                "model schema version {} is not supported (expected {MODEL_SCHEMA_VERSION})",
                file.schema_version
            ),
        ));
    }
    let mut model = FasModel::new(file.dims, &RngStream::new(0));
    let names = model.param_names();
    let mut params = file.parameters;
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let value = params
            .remove(name)
            .ok_or_else(|| Error::load(path, 0, format!("parameter `{name}` is missing")))?;
        if value.shape() != slot.shape() {
            return Err(Error::load(
                path,
                0,
                format!("parameter `{name}` has shape {:?}, expected {:?}", value.shape(), slot.shape()),
            ));
        }
        *slot = value;
    }
    if let Some(extra) = params.keys().next() {
        return Err(Error::load(path, 0, format!("unknown parameter `{extra}`")));
    }
    model.frozen_prefix = file.frozen_prefix;
    model.optim = file.optimizer;
    model.validate().map_err(|e| Error::load(path, 0, e.to_string()))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{extract_features, train_source, SourceTrainConfig};
    use crate::parallel::Exec;
    use crate::synthdata::{generate_dataset, Modality, SynthConfig};

    fn trained() -> (FasModel, Vec<crate::synthdata::MultiModalSample>) {
        let cfg = SynthConfig {
            source_domains: 1,
            source_per_class: 8,
            val_per_class: 1,
            target_per_class: 1,
            ..SynthConfig::default()
        };
        let data = generate_dataset(&cfg, 1, Exec::Sequential).unwrap().source_train;
        let mut model = FasModel::new(ModelDims::default(), &RngStream::new(2));
        let tc = SourceTrainConfig {
            epochs: 2,
            batch_size: 4,
            ..SourceTrainConfig::default()
        };
        train_source(&mut model, &data, &tc, &RngStream::new(3)).unwrap();
        (model, data)
    }

    #[test]
    fn round_trip_is_exact() {
        let (mut model, data) = trained();
        model.frozen_prefix = 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
        assert!(back.optim.main.steps() > 0);
        let a = extract_features(&model, &data[0]).unwrap();
        let b = extract_features(&back, &data[0]).unwrap();
        assert_eq!(a, b);
        let f = a.get(Modality::Rgb).unwrap();
        assert_eq!(model.classify(Modality::Rgb, f).to_bits(), back.classify(Modality::Rgb, f).to_bits());
    }

    #[test]
    fn truncated_file_is_load_error() {
        let (model, _) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &model).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Load { .. })));
    }

    #[test]
    fn schema_mismatch_is_load_error() {
        let (model, _) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &model).unwrap();
        let text = fs::read_to_string(&path).unwrap().replacen("\"schema_version\":1", "\"schema_version\":9", 1);
        fs::write(&path, text).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("schema version 9"), "{err}");
    }
}
