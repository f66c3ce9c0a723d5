use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use orthoproto::data::{ingest_csv, recordings_to_dataset, Ingested, LabeledDataset, OpenSetSplit, Provenance};
use orthoproto::{Error, Result};
use serde::Serialize;

use crate::config::DatasetSource;

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn with_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes the resolved config to `<out>/config.json` and prints it.
pub fn echo_config<T: Serialize>(out: &Path, cfg: &T) -> Result<()> {
    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    println!("config: {}", serde_json::to_string(cfg)?);
    Ok(())
}

/// Sidecar holding the provenance of a generated dataset CSV.
pub fn meta_path(csv: &Path) -> std::path::PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.meta.json"))
}

pub fn load_dataset(src: &DatasetSource) -> Result<LabeledDataset> {
    let path = src.path.as_deref().ok_or_else(|| Error::Config("no dataset path".into()))?;
    let mut ds = match ingest_csv(path, None)? {
        Ingested::Vectors(ds) => ds,
        Ingested::Signals(recs) => recordings_to_dataset(&recs, src.window, src.stride, &path.display().to_string())?,
    };
    let meta = meta_path(path);
    if meta.exists() {
        let p: Provenance = serde_json::from_str(&fs::read_to_string(&meta)?)
            .map_err(|e| Error::Data(format!("{}: {e}", meta.display())))?;
        ds.provenance = p;
    }
    Ok(ds)
}

pub fn load_split(path: &Path, ds: &LabeledDataset) -> Result<OpenSetSplit> {
    let s = OpenSetSplit::from_json(&fs::read_to_string(path)?)
        .map_err(|e| Error::Data(format!("split {}: {e}", path.display())))?;
    s.validate(ds)?;
    Ok(s)
}
