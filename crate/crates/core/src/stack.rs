//! Manifest-driven assembly of the multichannel feature stack.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::read_nifti;
use crate::volume::{ensure_compatible, Intent, Volume};

pub const DEFAULT_EXPECTED_CHANNELS: usize = 68;

/// One manifest entry: a pipeline product id or a NIfTI path, and
/// optionally a single channel of it (all channels when absent).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSource {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<usize>,
}

impl ChannelSource {
    pub fn all(source: &str) -> Self {
        Self { source: source.to_string(), channel: None }
    }

    pub fn single(source: &str, channel: usize) -> Self {
        Self { source: source.to_string(), channel: Some(channel) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackManifest {
    pub sources: Vec<ChannelSource>,
    #[serde(default = "default_expected")]
    pub expected_channels: usize,
}

fn default_expected() -> usize {
    DEFAULT_EXPECTED_CHANNELS
}

impl Default for StackManifest {
    /// Multi-TI sweep, PD, T1, AD, FA, RD, trace, three eigenvalues, three
    /// Westin measures and the 5D orientation field.
    fn default() -> Self {
        let ids = ["multi_ti", "pd", "t1", "ad", "fa", "rd", "trace", "evals", "westin", "k5"];
        Self { sources: ids.iter().map(|s| ChannelSource::all(s)).collect(), expected_channels: DEFAULT_EXPECTED_CHANNELS }
    }
}

impl StackManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::json("stack manifest", e))?;
        if m.sources.is_empty() {
            return Err(Error::Manifest("manifest lists no sources".into()));
        }
        Ok(m)
    }
}

/// Where one stack channel came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelProvenance {
    pub index: usize,
    pub source: String,
    pub channel: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub volume: Volume,
    pub provenance: Vec<ChannelProvenance>,
}

impl FeatureStack {
    pub fn provenance_json(&self) -> String {
        serde_json::to_string_pretty(&self.provenance).expect("provenance serializes")
    }

    pub fn write_provenance(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.provenance_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Sidecar path for a stack file: `stack.nii.gz` → `stack.channels.json`.
pub fn provenance_path(stack_path: &Path) -> PathBuf {
    let name = stack_path.file_name().and_then(|n| n.to_str()).unwrap_or("stack");
    let stem = name.trim_end_matches(".gz").trim_end_matches(".nii");
    stack_path.with_file_name(format!("{stem}.channels.json"))
}

/// Concatenate manifest channels in order. Sources are looked up in
/// `products` first, then read as NIfTI files relative to `base_dir`.
pub fn assemble_feature_stack(
    manifest: &StackManifest,
    products: &BTreeMap<String, Volume>,
    base_dir: &Path,
) -> Result<FeatureStack> {
    let mut loaded: BTreeMap<String, Volume> = BTreeMap::new();
    for s in &manifest.sources {
        if !products.contains_key(&s.source) && !loaded.contains_key(&s.source) {
            let path = base_dir.join(&s.source);
            if !path.exists() {
                return Err(Error::Manifest(format!("unknown product or missing file `{}`", s.source)));
            }
            loaded.insert(s.source.clone(), read_nifti(&path)?);
        }
    }
    let get = |id: &str| products.get(id).or_else(|| loaded.get(id)).expect("resolved above");

    let first_id = &manifest.sources.first().ok_or_else(|| Error::Manifest("manifest lists no sources".into()))?.source;
    let first = get(first_id);
    let mut picks: Vec<(&Volume, usize, &str)> = Vec::new();
    for s in &manifest.sources {
        let v = get(&s.source);
        ensure_compatible(first, v, first_id, &s.source)?;
        match s.channel {
            Some(c) if c >= v.channels() => {
                return Err(Error::Manifest(format!(
                    "`{}` has {} channels, channel {c} requested",
                    s.source,
                    v.channels()
                )))
            }
            Some(c) => picks.push((v, c, &s.source)),
            None => picks.extend((0..v.channels()).map(|c| (v, c, s.source.as_str()))),
        }
    }
    if picks.len() != manifest.expected_channels {
        return Err(Error::Manifest(format!(
            "manifest yields {} channels, expected {}",
            picks.len(),
            manifest.expected_channels
        )));
    }
    let n = first.n_voxels();
    let mut data = Vec::with_capacity(n * picks.len());
    let mut provenance = Vec::with_capacity(picks.len());
    for (index, (v, c, src)) in picks.into_iter().enumerate() {
        data.extend_from_slice(v.channel(c));
        provenance.push(ChannelProvenance { index, source: src.to_string(), channel: c });
    }
    let volume = first.like_channels(provenance.len(), Intent::VectorChannel, data)?;
    Ok(FeatureStack { volume, provenance })
}
