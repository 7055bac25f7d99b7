//! Config files, dataset resolution and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use vit_som::data::{Dataset, DatasetKind, Split};
use vit_som::trainer::TrainConfig;
use vit_som::{Error, Result};

pub const DATA_ROOT_ENV: &str = "VITSOM_DATA_ROOT";

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A parsed config file and the digest of its bytes.
pub struct LoadedConfig {
    pub config: TrainConfig,
    pub sha256: String,
}

/// Parses a TOML training config. Syntax errors and unknown keys come back
/// as configuration errors carrying the line and the offending key.
/// A relative `data.root` is resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut config = parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    if let Some(root) = config.data.root.as_mut() {
        if root.is_relative() {
            *root = path.parent().unwrap_or(Path::new(".")).join(&*root);
        }
    }
    Ok(LoadedConfig {
        config,
        sha256: hex::encode(Sha256::digest(text.as_bytes())),
    })
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Dataset directory: the command line (or `VITSOM_DATA_ROOT`, which clap
/// folds into the flag) wins over the config.
pub fn data_root(flag: Option<&Path>, config: Option<&Path>) -> Result<PathBuf> {
    flag.or(config).map(Path::to_path_buf).ok_or_else(|| {
        Error::Data(format!(
            "no dataset directory: pass --dataset-root, set {DATA_ROOT_ENV}, or set data.root in the config"
        ))
    })
}

pub fn load_split(kind: DatasetKind, root: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let ds = Dataset::load(kind, root, split)?;
    match limit {
        Some(n) if n < ds.len() => ds.take(n),
        _ => Ok(ds),
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Provenance record written to `<out>/manifest.json` before any work starts
/// and rewritten with the outcome when the command ends.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: &'static str,
    pub config_path: Option<PathBuf>,
    pub config_sha256: Option<String>,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: &'static str,
    pub exit_code: Option<i32>,
}

impl RunManifest {
    pub fn start(command: &str, out_dir: &Path, config: Option<(&Path, &str)>) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
        let m = RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION"),
            config_path: config.map(|(p, _)| p.to_path_buf()),
            config_sha256: config.map(|(_, h)| h.to_string()),
            out_dir: out_dir.to_path_buf(),
            started_unix: unix_now(),
            finished_unix: None,
            status: "running",
            exit_code: None,
        };
        m.write()?;
        Ok(m)
    }

    pub fn finish(mut self, code: i32) -> Result<()> {
        self.finished_unix = Some(unix_now());
        self.status = if code == 0 { "ok" } else { "failed" };
        self.exit_code = Some(code);
        self.write()
    }

    fn write(&self) -> Result<()> {
        let path = self.out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Export(e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named_with_their_line() {
        let err = parse_config("task = \"clustering\"\n\n[optim]\nstpes = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("stpes") && msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse_config("task = \"classification\"\n[data]\ndataset = \"cifar10\"\n").unwrap();
        assert_eq!(c.data.dataset, DatasetKind::Cifar10);
        assert_eq!(c.optim.batch_size, 64);
        assert!(parse_config("task = \"clustering\"\n[optim]\nsteps = 0\n").is_err());
    }

    #[test]
    fn flag_wins_over_config_root() {
        let r = data_root(Some(Path::new("/a")), Some(Path::new("/b"))).unwrap();
        assert_eq!(r, PathBuf::from("/a"));
        assert!(matches!(data_root(None, None), Err(Error::Data(_))));
    }
}
