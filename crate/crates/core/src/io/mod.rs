//! On-disk artifacts: atomic writes, checkpoints and attention-map dumps.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointHeader, Stage, MAGIC};

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{forward, AdaptiveModel, Batch, SubNetSpec};

/// Writes `bytes` to a sibling temporary file, syncs it, then renames it
/// over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Formats a row-major matrix as CSV using round-trip float formatting.
pub fn matrix_csv(values: &[f64], cols: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// Runs `tokens` through the sub-network and writes one `n×n` CSV per
/// executed layer and kept head, named `layer{LL}_head{HH}.csv` (1-based,
/// physical layer index). Returns the written paths.
pub fn dump_attention(
    model: &AdaptiveModel,
    spec: SubNetSpec,
    tokens: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let batch = Batch::from_sequences(&[tokens.to_vec()], vec![])?;
    let trace = forward(model, spec, &batch, false)?;
    std::fs::create_dir_all(out_dir)?;
    let n = tokens.len();
    let mut written = Vec::new();
    for (layer, maps) in trace.layers.iter().zip(&trace.attention_maps) {
        for (h, map) in maps.iter().enumerate() {
            let path = out_dir.join(format!("layer{layer:02}_head{:02}.csv", h + 1));
            write_atomic(&path, matrix_csv(&map.data()[..n * n], n).as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn attention_dump_counts_and_rows() {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden: 8,
            num_heads: 2,
            head_dim: 4,
            ffn_dim: 8,
            width_list: vec![1.0, 0.5],
            depth_list: vec![1.0, 0.5],
            ..ModelConfig::default()
        };
        let m = AdaptiveModel::new(cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = dump_attention(&m, SubNetSpec::FULL, &[1, 2, 3], dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        assert!(files[3].ends_with("layer02_head02.csv"));
        for f in &files {
            let text = std::fs::read_to_string(f).unwrap();
            let rows: Vec<&str> = text.lines().collect();
            assert_eq!(rows.len(), 3);
            for r in rows {
                let s: f64 = r.split(',').map(|c| c.parse::<f64>().unwrap()).sum();
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
        let half = dump_attention(&m, SubNetSpec { width: 0.5, depth: 0.5 }, &[1, 2], dir.path())
            .unwrap();
        assert_eq!(half.len(), 1);
    }
}
