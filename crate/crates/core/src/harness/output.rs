//! CSV and JSON emission.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

use crate::error::Result;
use crate::harness::config::{Experiment, RunConfig};

/// Writes `rows` with a header row derived from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a header and raw records.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Collects written files so the manifest can list them.
pub struct OutputDir {
    pub dir: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        write_csv(&self.dir.join(name), rows)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn table(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        write_table(&self.dir.join(name), header, rows)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        fs::write(self.dir.join(name), serde_json::to_string_pretty(value)?)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// `manifest.json`: the effective configuration, the crate version, the
    /// files written, the overall status and a wall-clock timestamp.
    pub fn manifest(
        &self,
        experiment: Experiment,
        config: &RunConfig,
        passed: bool,
        extra: serde_json::Value,
    ) -> Result<()> {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let m = json!({
            "experiment": experiment.name(),
            "package": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "created_unix": created,
            "passed": passed,
            "files": self.files,
            "config": config,
            "summary": extra,
        });
        fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_string_pretty(&m)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        name: String,
        value: f64,
        missing: Option<f64>,
    }

    #[test]
    fn csv_quotes_per_rfc4180() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(
            &p,
            &[Row {
                name: "a,\"b\"".into(),
                value: 1.5,
                missing: None,
            }],
        )
        .unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "name,value,missing\n\"a,\"\"b\"\"\",1.5,\n");
    }

    #[test]
    fn manifest_lists_files_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(&dir.path().join("x")).unwrap();
        out.table("a.csv", &["k".into()], &[vec!["1".into()]]).unwrap();
        let cfg = RunConfig::defaults(Experiment::Clutter);
        out.manifest(Experiment::Clutter, &cfg, true, json!({})).unwrap();
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["files"][0], "a.csv");
        assert_eq!(m["config"]["clients"], 5);
        assert_eq!(m["passed"], true);
    }
}
