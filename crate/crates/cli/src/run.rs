//! Output directory of one command: resolved config plus a line-oriented log.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mambareg::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "run.log";

pub struct RunDir {
    pub dir: PathBuf,
    log: File,
}

impl RunDir {
    /// Creates `dir`, writes the resolved config and starts a fresh log.
    /// With `exclusive`, a non-empty `dir` is an error unless `force` is set.
    pub fn create(dir: &Path, cfg: &RunConfig, exclusive: bool, force: bool) -> Result<Self> {
        if exclusive && !force && dir.is_dir() && dir.read_dir()?.next().is_some() {
            bail!("{} already exists and is not empty (pass --force to write into it)", dir.display());
        }
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, cfg.to_toml()).with_context(|| format!("writing {}", cfg_path.display()))?;
        let log_path = dir.join(LOG_FILE);
        let log = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
        Ok(RunDir { dir: dir.to_path_buf(), log })
    }

    /// Appends one line to the run log and echoes it to the console logger.
    pub fn line(&mut self, s: &str) -> Result<()> {
        log::info!("{s}");
        writeln!(self.log, "{s}")?;
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}
