use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Architecture, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// One layer's parameters as little-endian `f64` bytes, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBlob {
    pub layer: String,
    pub len: usize,
    pub data: String,
}

/// Self-describing parameter container. Parameters round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub explanation_layer_id: String,
    pub parameters: Vec<ParameterBlob>,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_network(network: &Network, step: u64) -> Self {
        let parameters = network
            .architecture()
            .layers
            .iter()
            .filter_map(|layer| {
                let range = network.layer_param_range(&layer.name)?;
                if range.is_empty() {
                    return None;
                }
                let bytes: Vec<u8> = network.params()[range.clone()]
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect();
                Some(ParameterBlob {
                    layer: layer.name.clone(),
                    len: range.len(),
                    data: STANDARD.encode(bytes),
                })
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture: network.architecture().clone(),
            explanation_layer_id: network.explanation_layer_id().to_string(),
            parameters,
            step,
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        let mut net = Network::new(
            self.architecture.clone(),
            Some(self.explanation_layer_id.as_str()),
        )?;
        let mut seen = 0;
        for blob in &self.parameters {
            let range = net
                .layer_param_range(&blob.layer)
                .ok_or_else(|| Error::Checkpoint(format!("unknown layer `{}`", blob.layer)))?;
            let bytes = STANDARD
                .decode(&blob.data)
                .map_err(|e| Error::Checkpoint(format!("layer `{}`: {e}", blob.layer)))?;
            if blob.len != range.len() || bytes.len() != range.len() * 8 {
                return Err(Error::Checkpoint(format!(
                    "layer `{}` expects {} parameters",
                    blob.layer,
                    range.len()
                )));
            }
            for (dst, chunk) in net.params_mut()[range.clone()]
                .iter_mut()
                .zip(bytes.chunks_exact(8))
            {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            seen += range.len();
        }
        if seen != net.num_params() {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {seen} of {} parameters",
                net.num_params()
            )));
        }
        if net.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
        let tmp = path.with_extension("tmp");
        if let Some(dir) = dir {
            fs::create_dir_all(dir)?;
        }
        let mut file = fs::File::create(&tmp)?;
        serde_json::to_writer_pretty(&mut file, self)?;
        file.write_all(b"\n")?;
        file.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InputShape;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Network::reference(
            InputShape {
                height: 8,
                width: 8,
                channels: 3,
            },
            3,
            5,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/model.json");
        Checkpoint::from_network(&net, 17).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.explanation_layer_id, "pool2");
        let back = loaded.to_network().unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn rejects_wrong_version_and_truncated_blob() {
        let net = Network::reference(
            InputShape {
                height: 8,
                width: 8,
                channels: 1,
            },
            2,
            5,
        )
        .unwrap();
        let mut ck = Checkpoint::from_network(&net, 0);
        ck.format_version = 99;
        assert!(ck.to_network().is_err());
        let mut ck = Checkpoint::from_network(&net, 0);
        ck.parameters[0].len -= 1;
        assert!(ck.to_network().is_err());
        let mut ck = Checkpoint::from_network(&net, 0);
        ck.parameters.pop();
        assert!(ck.to_network().is_err());
    }
}
