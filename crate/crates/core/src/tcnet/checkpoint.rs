use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::network::Network;
use super::train::History;
use crate::dataio::{read_tensor, write_tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: NetworkConfig,
    pub epoch: usize,
    pub checksum: u64,
    pub params: Vec<CheckpointEntry>,
    pub history: History,
}

fn param_file(i: usize) -> String {
    format!("params/{i:04}.tcnt")
}

/// Write every parameter and a manifest into `dir`, replacing any previous
/// checkpoint there only once the new one is complete.
pub fn save_checkpoint(net: &Network<f32>, dir: &Path, epoch: usize, history: &History) -> Result<()> {
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let stem = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let tmp: PathBuf = parent.join(format!(".{stem}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(tmp.join("params")).map_err(|e| Error::io(&tmp, e))?;
    let mut params = Vec::new();
    for (i, id) in net.store.ids().enumerate() {
        let file = param_file(i);
        let value = net.store.get(id);
        write_tensor(tmp.join(&file), value)?;
        params.push(CheckpointEntry {
            name: net.store.name(id).to_string(),
            file,
            shape: value.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        config: net.config.clone(),
        epoch,
        checksum: net.store.checksum(),
        params,
        history: history.clone(),
    };
    let path = tmp.join(CHECKPOINT_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuild the network from a checkpoint and verify its checksum.
pub fn load_checkpoint(dir: &Path) -> Result<(Network<f32>, CheckpointManifest)> {
    let manifest = read_checkpoint_manifest(dir)?;
    let mut net = Network::<f32>::build(&manifest.config, 0)?;
    if manifest.params.len() != net.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, configuration expects {}",
            manifest.params.len(),
            net.store.len()
        )));
    }
    for entry in &manifest.params {
        let id = net
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {}", entry.name)))?;
        let t = read_tensor(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter {} has shape {:?}",
                entry.name,
                t.shape()
            )));
        }
        net.store.assign(id, t)?;
    }
    if net.store.checksum() != manifest.checksum {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    Ok((net, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcnet::config::NetworkConfig;

    #[test]
    fn round_trip_restores_exact_parameters() {
        let config = NetworkConfig::compact();
        let net = Network::<f32>::build(&config, 9).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("best");
        save_checkpoint(&net, &dir, 3, &History::default()).unwrap();
        // second save replaces the first cleanly
        save_checkpoint(&net, &dir, 4, &History::default()).unwrap();
        let (back, m) = load_checkpoint(&dir).unwrap();
        assert_eq!(m.epoch, 4);
        assert_eq!(back.store.checksum(), net.store.checksum());
        assert!(!tmp.path().join(".best.tmp").exists());
    }

    #[test]
    fn corrupted_parameter_is_detected() {
        let net = Network::<f32>::build(&NetworkConfig::compact(), 1).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_checkpoint(&net, tmp.path().join("c").as_path(), 0, &History::default()).unwrap();
        let p = tmp.path().join("c").join(param_file(0));
        let mut t = read_tensor(&p).unwrap();
        t.data_mut()[0] += 1.0;
        write_tensor(&p, &t).unwrap();
        assert!(matches!(load_checkpoint(&tmp.path().join("c")), Err(Error::Format(_))));
    }
}
