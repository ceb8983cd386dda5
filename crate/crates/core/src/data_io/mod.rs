//! Dataset ingestion (IDX files, synthetic Gaussians) and checkpoint
//! persistence.

mod checkpoint;
mod dataset;
mod idx;
mod synth;

pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, Checkpoint, Manifest, TensorEntry,
    CHECKPOINT_FORMAT,
};
pub use dataset::Dataset;
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels};
pub use synth::{synth_gaussian, synth_split, SynthSpec};

use std::io::Write;
use std::path::Path;

use crate::config::{DataConfig, DataSource};

/// Train and test splits described by `cfg`, with sample limits applied.
pub fn load_data(cfg: &DataConfig) -> crate::Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match cfg.source {
        DataSource::Synth => synth_split(&cfg.synth, cfg.seed)?,
        DataSource::Idx => {
            let need = |p: &Option<std::path::PathBuf>, field: &str| {
                p.clone().ok_or_else(|| crate::Error::Config(format!("data.{field}: required for idx data")))
            };
            let train = load_idx(&need(&cfg.train_images, "train_images")?, &need(&cfg.train_labels, "train_labels")?, "train")?;
            let test = load_idx(&need(&cfg.test_images, "test_images")?, &need(&cfg.test_labels, "test_labels")?, "test")?;
            (train, test)
        }
    };
    if let Some(n) = cfg.train_limit {
        train.truncate(n)?;
    }
    if let Some(n) = cfg.test_limit {
        test.truncate(n)?;
    }
    Ok((train, test))
}

/// Writes `bytes` to `path` so the file is either complete or absent: the
/// data goes to a sibling temp file that is renamed into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| crate::Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_data_applies_seed_and_limits() {
        let mut cfg = DataConfig {
            synth: SynthSpec { n_train: 40, n_test: 20, classes: 3, dim: 9, ..SynthSpec::default() },
            train_limit: Some(25),
            ..DataConfig::default()
        };
        let (tr, te) = load_data(&cfg).unwrap();
        assert_eq!((tr.len(), te.len()), (25, 20));
        assert_eq!(load_data(&cfg).unwrap().0, tr);
        cfg.seed = 1;
        assert_ne!(load_data(&cfg).unwrap().0, tr);
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn atomic_write_into_missing_dir_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope").join("out.txt");
        assert!(atomic_write(&p, b"x").is_err());
        assert!(!p.exists());
    }
}
