use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{read_archive, write_archive, ParamStore};

/// Writes the parameters with the model configuration as metadata.
pub fn save_checkpoint(path: &Path, model: &Model, store: &ParamStore<f32>) -> Result<()> {
    write_archive(path, store, &model.config.to_text())
}

/// Reads a checkpoint and rebinds it to a freshly built model of the stored
/// configuration. Extra entries (e.g. classifier heads) are ignored.
pub fn load_checkpoint(path: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (archive, meta) = read_archive(path)?;
    let config = ModelConfig::from_text(&meta).map_err(|e| Error::format(path, 12, format!("bad metadata: {e}")))?;
    let (model, mut store) = Model::init::<f32>(&config, 0)?;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let src = archive
            .id(&name)
            .ok_or_else(|| Error::format(path, 0, format!("missing parameter `{name}`")))?;
        store
            .set(id, archive.value(src).clone())
            .map_err(|e| Error::format(path, 0, e.to_string()))?;
    }
    Ok((model, store))
}
