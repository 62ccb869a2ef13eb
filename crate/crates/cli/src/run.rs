use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dcl_core::config::ExperimentConfig;
use dcl_core::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_ECHO: &str = "config.toml";

/// Record of one command invocation and every file it wrote.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub version: String,
    /// Extra `key: value` facts, e.g. the source checkpoint.
    pub facts: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub config_echo: String,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "command: {}\nconfig_path: {}\nseed: {}\ntoolkit_version: {}\n",
            self.command,
            self.config_path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into()),
            self.seed,
            self.version
        );
        for (k, v) in &self.facts {
            s.push_str(&format!("{k}: {v}\n"));
        }
        s.push_str("artifacts:\n");
        for a in &self.artifacts {
            s.push_str(&format!("  - {a}\n"));
        }
        s.push_str("[config]\n");
        s.push_str(&self.config_echo);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("malformed manifest: {m}"));
        let (head, echo) = text.split_once("[config]\n").ok_or_else(|| bad("no [config] section"))?;
        let mut m = RunManifest { config_echo: echo.to_string(), ..Default::default() };
        let mut in_artifacts = false;
        for line in head.lines() {
            if let Some(a) = line.strip_prefix("  - ") {
                if !in_artifacts {
                    return Err(bad("artifact outside the artifact list"));
                }
                m.artifacts.push(a.to_string());
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| bad(line))?;
            let v = v.trim();
            in_artifacts = k == "artifacts";
            match k {
                "command" => m.command = v.into(),
                "config_path" => m.config_path = (v != "-").then(|| PathBuf::from(v)),
                "seed" => m.seed = v.parse().map_err(|_| bad("seed"))?,
                "toolkit_version" => m.version = v.into(),
                "artifacts" => {}
                other => {
                    m.facts.insert(other.to_string(), v.to_string());
                }
            }
        }
        Ok(m)
    }
}

/// Output directory of one command.
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    /// Creates `<out>/<label>_<seed>_<timestamp>`, suffixed if it exists.
    pub fn create(
        out: &Path,
        label: &str,
        command: &str,
        seed: u64,
        config_path: Option<&Path>,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{label}_{seed}_{stamp}");
        let mut path = out.join(&base);
        let mut k = 2;
        while path.exists() {
            path = out.join(format!("{base}-{k}"));
            k += 1;
        }
        fs::create_dir_all(&path)?;
        let mut dir = RunDir {
            path,
            manifest: RunManifest {
                command: command.into(),
                config_path: config_path.map(Path::to_path_buf),
                seed,
                version: env!("CARGO_PKG_VERSION").into(),
                config_echo: cfg.canonical(),
                ..Default::default()
            },
        };
        dir.write(CONFIG_ECHO, cfg.canonical().as_bytes())?;
        Ok(dir)
    }

    /// Reopens a run directory to add artifacts.
    pub fn open(path: &Path) -> Result<Self> {
        let mpath = path.join(MANIFEST);
        if !mpath.exists() {
            return Err(Error::Missing(mpath));
        }
        Ok(RunDir { path: path.to_path_buf(), manifest: RunManifest::parse(&fs::read_to_string(mpath)?)? })
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.manifest.artifacts.iter().any(|a| a == name) {
            self.manifest.artifacts.push(name.to_string());
        }
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.file(name);
        fs::write(p, bytes)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.file(MANIFEST);
        fs::write(self.path.join(MANIFEST), self.manifest.to_text())?;
        Ok(self.path)
    }
}

/// Loads the resolved config echoed into a run directory.
pub fn load_echo(dir: &Path) -> Result<ExperimentConfig> {
    let p = dir.join(CONFIG_ECHO);
    if !p.exists() {
        return Err(Error::Missing(p));
    }
    ExperimentConfig::parse(&fs::read_to_string(p)?, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut m = RunManifest {
            command: "adapt".into(),
            config_path: Some("exp.toml".into()),
            seed: 3,
            version: "0.1.0".into(),
            artifacts: vec!["metrics.csv".into(), "final.ckpt".into()],
            config_echo: "adapt.seed = 3\n".into(),
            ..Default::default()
        };
        m.facts.insert("source".into(), "/tmp/s.ckpt".into());
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
    }
}
