//! Run directories, manifests and config layering.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use denoise_lab::config::Config;
use denoise_lab::forward::PRNG_ALGORITHM;

use crate::{Common, Failure, EXIT_IO};

pub const RUN: &str = "run";
const RUN_KEYS: &[&str] = &["command", "version", "prng", "out_dir"];

/// Loads `--config` (if any) and checks that a replayed manifest belongs to
/// `command`.
pub fn load_config(common: &Common, command: &str) -> Result<Config, Failure> {
    let Some(path) = &common.config else {
        return Ok(Config::new());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| io_failure(format!("reading {}: {e}", path.display())))?;
    let cfg = Config::parse(&text)?;
    cfg.reject_unknown(RUN, RUN_KEYS)?;
    if let Some(c) = cfg.raw(RUN, "command") {
        if c != command {
            return Err(io_failure(format!(
                "{} is a `{c}` manifest, not `{command}`",
                path.display()
            )));
        }
    }
    Ok(cfg)
}

/// Sets `section.key` when the flag was given.
pub fn put<T: Display>(cfg: &mut Config, section: &str, key: &str, flag: &Option<T>) {
    if let Some(v) = flag {
        cfg.set(section, key, v);
    }
}

pub fn io_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_IO,
        message: message.into(),
    }
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Resolves the output directory (flag, then manifest, then
    /// `runs/<command>`), records it in `[run]` and creates it.
    pub fn create(common: &Common, cfg: &mut Config, command: &str) -> Result<Self, Failure> {
        let path = match (&common.out_dir, cfg.raw(RUN, "out_dir")) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => PathBuf::from(p),
            (None, None) => Path::new("runs").join(command),
        };
        cfg.set(RUN, "command", command);
        cfg.set(RUN, "version", env!("CARGO_PKG_VERSION"));
        cfg.set(RUN, "prng", PRNG_ALGORITHM);
        cfg.set(RUN, "out_dir", path.display());
        fs::create_dir_all(&path)
            .map_err(|e| io_failure(format!("creating {}: {e}", path.display())))?;
        Ok(RunDir { path })
    }

    /// Writes `manifest.txt`: the full resolved config plus the content hash
    /// of everything outside `[run]`.
    pub fn write_manifest(&self, cfg: &Config) -> Result<(), Failure> {
        let mut hashed = cfg.clone();
        hashed.remove_section(RUN);
        let text = cfg.to_manifest().replacen(
            '\n',
            &format!("\n# content_hash: {}\n", hashed.content_hash()),
            1,
        );
        self.write("manifest.txt", &text)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), Failure> {
        let p = self.path.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| io_failure(format!("creating {}: {e}", parent.display())))?;
        }
        fs::write(&p, contents).map_err(|e| io_failure(format!("writing {}: {e}", p.display())))
    }
}
