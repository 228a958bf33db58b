//! Dataset discovery, split sidecars and self-describing outputs.

use anyhow::{bail, Context, Result};
use serde::Serialize;
use shiftscan::panel::{split_patients_stratified, IngestionSchema, PanelDataset, SplitFractions};
use shiftscan::rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SPLITS_SUFFIX: &str = ".splits.jsonl";

/// `data.jsonl` → `data.splits.jsonl`.
pub fn splits_path(data: &Path) -> PathBuf {
    let name = data.file_name().and_then(|n| n.to_str()).unwrap_or("data");
    let stem = name.strip_suffix(".jsonl").unwrap_or(name);
    data.with_file_name(format!("{stem}{SPLITS_SUFFIX}"))
}

/// Outcome identifier of a data file: its name without `.jsonl`.
pub fn outcome_id(data: &Path) -> String {
    let name = data.file_name().and_then(|n| n.to_str()).unwrap_or("outcome");
    name.strip_suffix(".jsonl").unwrap_or(name).to_string()
}

/// Load a panel file and attach splits from `splits`, from the sidecar next
/// to the file, or from a seeded stratified split when neither exists.
pub fn load_dataset(path: &Path, splits: Option<&Path>, seed: u64) -> Result<PanelDataset> {
    if !path.is_file() {
        bail!("data file {} does not exist", path.display());
    }
    let mut ds = PanelDataset::load(path, &IngestionSchema::default())
        .with_context(|| format!("reading data file {}", path.display()))?;
    let sidecar = splits.map(Path::to_path_buf).unwrap_or_else(|| splits_path(path));
    if sidecar.is_file() {
        let file = std::fs::File::open(&sidecar).with_context(|| format!("opening {}", sidecar.display()))?;
        ds.read_splits(std::io::BufReader::new(file))
            .with_context(|| format!("reading split file {}", sidecar.display()))?;
    } else if let Some(s) = splits {
        bail!("split file {} does not exist", s.display());
    } else {
        let seed = rng::derive(seed, &format!("split:{}", outcome_id(path)));
        ds = split_patients_stratified(&ds, SplitFractions::default(), seed)
            .with_context(|| format!("splitting {}", path.display()))?;
    }
    Ok(ds)
}

/// Every `*.jsonl` panel file of a directory keyed by outcome identifier.
pub fn load_data_dir(dir: &Path, seed: u64) -> Result<BTreeMap<String, PanelDataset>> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".jsonl") && !name.ends_with(SPLITS_SUFFIX) {
            out.insert(outcome_id(&path), load_dataset(&path, None, seed)?);
        }
    }
    if out.is_empty() {
        bail!("data directory {} holds no .jsonl panel files", dir.display());
    }
    Ok(out)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Tabular outputs carry their settings in `<file>.meta.json`.
pub fn write_meta(table: &Path, meta: &impl Serialize) -> Result<()> {
    let mut name = table.as_os_str().to_owned();
    name.push(".meta.json");
    write_json(Path::new(&name), meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_names() {
        assert_eq!(splits_path(Path::new("d/a.jsonl")), PathBuf::from("d/a.splits.jsonl"));
        assert_eq!(outcome_id(Path::new("d/sepsis.jsonl")), "sepsis");
    }
}
