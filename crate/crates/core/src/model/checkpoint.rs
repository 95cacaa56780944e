//! Checkpoint files: magic line, little-endian u64 header length, JSON header
//! (config echo, layout, active head), then the raw little-endian f64 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_network, ActiveHead, DualHeadNetwork, NetworkConfig, ParamLayout};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"CEMTCKPT1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub active_head: ActiveHead,
    pub layout: ParamLayout,
    pub dtype: String,
    pub endianness: String,
    pub count: usize,
}

pub fn save_checkpoint(path: &Path, net: &DualHeadNetwork) -> Result<()> {
    let header = Checkpoint {
        config: net.config().clone(),
        active_head: net.active_head(),
        layout: net.layout().clone(),
        dtype: "float64".into(),
        endianness: "little".into(),
        count: net.num_params(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * net.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in net.params() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DualHeadNetwork> {
    let bytes = fs::read(path)?;
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Format(format!("{} is not a checkpoint", path.display())))?;
    if rest.len() < 8 {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: Checkpoint = serde_json::from_slice(&rest[..hlen])?;
    if header.dtype != "float64" || header.endianness != "little" {
        return Err(Error::Format(format!(
            "unsupported checkpoint encoding {} / {}",
            header.dtype, header.endianness
        )));
    }
    let raw = &rest[hlen..];
    if raw.len() != header.count * 8 {
        return Err(Error::Format(format!(
            "checkpoint holds {} bytes for {} values",
            raw.len(),
            header.count
        )));
    }
    let mut net = build_network(&header.config, 0)?;
    net.layout().ensure_matches(&header.layout)?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    net.copy_params_from(&values)?;
    net.set_active_head(header.active_head);
    Ok(net)
}
