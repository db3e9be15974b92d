use std::fs;
use std::path::{Path, PathBuf};

use patchrot::config::RunConfig;
use patchrot::optim::{metrics_csv, MetricsRow};
use patchrot::{Error, Result};

/// `<output_dir>/<command>-<hash>` with `checkpoints/`, `reports/` and
/// `attmaps/`. Every file a training command writes lives in here.
pub struct RunDir {
    pub root: PathBuf,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl RunDir {
    pub fn create(command: &str, cfg: &RunConfig) -> Result<Self> {
        let root = cfg.output_dir.join(format!("{command}-{}", cfg.short_hash()));
        for sub in ["checkpoints", "reports", "attmaps"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
        }
        let dir = Self { root };
        dir.write("config.resolved", &cfg.pretty())?;
        Ok(dir)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn attmaps(&self) -> PathBuf {
        self.root.join("attmaps")
    }

    pub fn write(&self, rel: &str, text: &str) -> Result<()> {
        let path = self.root.join(rel);
        fs::write(&path, text).map_err(|e| io(&path, e))
    }

    pub fn write_metrics(&self, rows: &[MetricsRow]) -> Result<()> {
        self.write("metrics.csv", &metrics_csv(rows))
    }

    pub fn report(&self, name: &str, csv: &str) -> Result<()> {
        self.write(&format!("reports/{name}"), csv)?;
        println!("report: {}", self.root.join("reports").join(name).display());
        Ok(())
    }
}
