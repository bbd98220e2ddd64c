//! Run directories. Every command writes into one, and the contents follow
//! one convention: `config.json` is the fully resolved config, `run.json`
//! identifies the command, seed and source revision, CSV logs carry a
//! schema header line. Nothing in a run directory is time-stamped, so a
//! rerun with the same inputs reproduces it byte for byte.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};

use crate::error::{io_err, CliError, Result};

/// Environment variable naming the directory that relative `--out` paths
/// and defaults are resolved under.
pub const RUN_ROOT_ENV: &str = "TACGEN_RUN_ROOT";

pub const RUN_SCHEMA: &str = "tacgen-run-v1";

/// `--out` if given (relative paths land under the run root), otherwise
/// `<run root>/<command>`. The run root defaults to `runs`.
pub fn resolve_out(out: Option<&Path>, command: &str) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into());
    match out {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) => root.join(p),
        None => root.join(command),
    }
}

/// Best-effort source identification; falls back when git or the repo are
/// unavailable. Stable on one machine as long as the checkout is.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unversioned".into())
}

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates the directory (reruns overwrite in place) and writes the
    /// config snapshot plus the run identification record.
    pub fn create(path: &Path, command: &str, seed: u64, config: &Value) -> Result<RunDir> {
        std::fs::create_dir_all(path).map_err(io_err(path))?;
        let run = RunDir { path: path.to_path_buf() };
        run.write_json("config.json", config)?;
        run.write_json(
            "run.json",
            &json!({
                "schema": RUN_SCHEMA,
                "command": command,
                "seed": seed,
                "source": git_describe(),
            }),
        )?;
        Ok(run)
    }

    /// Opens an existing run directory without touching its contents.
    pub fn open(path: &Path) -> Result<RunDir> {
        if !path.is_dir() {
            return Err(CliError::run(format!("{}: not a run directory", path.display())));
        }
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let p = self.path.join(name);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
        Ok(p)
    }

    pub fn write_json(&self, name: &str, value: &Value) -> Result<()> {
        let path = self.file(name);
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::run(format!("{name}: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn read_json(&self, name: &str) -> Result<Value> {
        let path = self.file(name);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::run(format!("{}: {e}", path.display())))
    }

    /// CSV with the versioned schema line on top. Cells must not contain
    /// commas or newlines; all our values are identifiers and numbers.
    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.file(name);
        write_csv_file(&path, header, rows)
    }

    /// Per-step loss trace of a training run.
    pub fn write_losses(&self, name: &str, losses: &[f64]) -> Result<()> {
        let rows: Vec<Vec<String>> = losses
            .iter()
            .enumerate()
            .map(|(i, l)| vec![i.to_string(), format!("{l:.6}")])
            .collect();
        self.write_csv(name, &["step", "loss"], &rows)
    }
}

pub fn write_csv_file(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = String::new();
    s.push_str(tacgen_core::metrics::REPORT_SCHEMA);
    s.push('\n');
    s.push_str(&header.join(","));
    s.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len(), "csv row width");
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rerun_reproduces_identical_bytes() {
        let dir = std::env::temp_dir().join(format!("tacgen-rundir-{}", std::process::id()));
        let cfg = json!({"seed": 5, "x": [1, 2]});
        for _ in 0..2 {
            let run = RunDir::create(&dir, "demo", 5, &cfg).unwrap();
            run.write_csv("t.csv", &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        }
        let a = std::fs::read(dir.join("config.json")).unwrap();
        let b = std::fs::read(dir.join("run.json")).unwrap();
        let c = std::fs::read(dir.join("t.csv")).unwrap();
        let run = RunDir::create(&dir, "demo", 5, &cfg).unwrap();
        run.write_csv("t.csv", &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        assert_eq!(a, std::fs::read(dir.join("config.json")).unwrap());
        assert_eq!(b, std::fs::read(dir.join("run.json")).unwrap());
        assert_eq!(c, std::fs::read(dir.join("t.csv")).unwrap());
        assert!(String::from_utf8(c).unwrap().starts_with("# tacgen-report-v1\na,b\n"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
