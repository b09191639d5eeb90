use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

use crate::config::ExperimentConfig;

/// One directory per command and config: `<out>/<command>-<digest>/`.
pub struct RunDir {
    pub path: PathBuf,
    pub digest: String,
    pub seed: u64,
    summary: String,
}

impl RunDir {
    pub fn create(cfg: &ExperimentConfig, command: &str) -> anyhow::Result<Self> {
        let digest = cfg.digest();
        let path = cfg.paths.out_dir.join(format!("{command}-{digest}"));
        fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        let snapshot = serde_json::to_string_pretty(cfg)?;
        write(&path.join("config.json"), snapshot.as_bytes())?;
        Ok(Self {
            path,
            digest,
            seed: cfg.seed,
            summary: String::new(),
        })
    }

    /// CSV preceded by `#` lines naming the config digest and seed.
    pub fn write_csv<R, S>(&self, name: &str, header: &[&str], rows: R) -> anyhow::Result<PathBuf>
    where
        R: IntoIterator<Item = Vec<S>>,
        S: AsRef<str>,
    {
        let mut out = format!("# config_digest={}\n# seed={}\n", self.digest, self.seed).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(header)?;
            for row in rows {
                w.write_record(row.iter().map(AsRef::as_ref))?;
            }
            w.flush()?;
        }
        let path = self.path.join(name);
        write(&path, &out)?;
        Ok(path)
    }

    /// JSON sidecar; the digest and seed are always included.
    pub fn write_meta(&self, name: &str, mut meta: serde_json::Value) -> anyhow::Result<()> {
        if let Some(obj) = meta.as_object_mut() {
            obj.insert("config_digest".into(), self.digest.clone().into());
            obj.insert("seed".into(), self.seed.into());
        }
        write(&self.path.join(name), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    pub fn note(&mut self, line: impl AsRef<str>) {
        println!("{}", line.as_ref());
        self.summary.push_str(line.as_ref());
        self.summary.push('\n');
    }

    pub fn finish(self) -> anyhow::Result<PathBuf> {
        write(&self.path.join("summary.txt"), self.summary.as_bytes())?;
        println!("results in {}", self.path.display());
        Ok(self.path)
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Shortest round-trip decimal; empty for undefined values.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_carries_digest_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.paths.out_dir = dir.path().to_path_buf();
        cfg.seed = 11;
        let run = RunDir::create(&cfg, "t").unwrap();
        let p = run.write_csv("a.csv", &["x", "y"], vec![vec![num(0.5), opt(None)]]).unwrap();
        let text = fs::read_to_string(p).unwrap();
        assert_eq!(text, format!("# config_digest={}\n# seed=11\nx,y\n0.5,\n", cfg.digest()));
        assert!(run.path.join("config.json").exists());
    }
}
