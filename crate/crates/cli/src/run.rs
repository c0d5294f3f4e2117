//! Run directories: everything needed to rebuild a trained net.
//!
//! ```text
//! net.net         net description
//! run.cfg         classes, loss, input mean, seed
//! checkpoint.bin  parameters
//! log.txt         evaluation log (reproducible)
//! timing.txt      the same log with wall-clock seconds
//! metrics.txt     final metrics per split
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use fcn_core::losses::{LossConfig, LossKind};
use fcn_core::skipnet::{build_from_description, BuildOptions, NetDescription, SkipNet};

use crate::config;

pub struct RunDir {
    root: PathBuf,
}

pub struct LoadedRun {
    pub net: SkipNet,
    pub loss: LossConfig,
    pub n_classes: usize,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("{}", root.display()))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let cfg = root.join("run.cfg");
        if !cfg.exists() {
            return Err(crate::usage(format!("{} is not a run directory (no run.cfg)", root.display())));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.root.join(name);
        std::fs::write(&path, text).with_context(|| format!("{}", path.display()))
    }

    pub fn save(&self, desc: &NetDescription, net: &SkipNet, loss: &LossConfig, n_classes: usize, seed: u64) -> Result<()> {
        self.write("net.net", &desc.to_string())?;
        let mut cfg = BTreeMap::new();
        cfg.insert("classes".to_string(), n_classes.to_string());
        let kind = match loss.kind {
            LossKind::SoftmaxSum => "softmax",
            LossKind::SigmoidCe => "sigmoid",
        };
        cfg.insert("loss".into(), kind.into());
        cfg.insert("null-background".into(), loss.null_background.to_string());
        // `{:?}` prints the shortest string that parses back to the same f64.
        let mean: Vec<String> = net.options.mean.iter().map(|m| format!("{m:?}")).collect();
        cfg.insert("mean".into(), mean.join(","));
        cfg.insert("seed".into(), seed.to_string());
        self.write("run.cfg", &config::render(&cfg))?;
        net.graph.save_checkpoint(self.root.join("checkpoint.bin"))?;
        Ok(())
    }

    pub fn load(&self) -> Result<LoadedRun> {
        let cfg = config::load(&self.root.join("run.cfg"))?;
        let get = |k: &str| cfg.get(k).ok_or_else(|| anyhow!("run.cfg lacks `{k}`"));
        let n_classes: usize = get("classes")?.parse().context("classes")?;
        let null_background: bool = get("null-background")?.parse().context("null-background")?;
        let kind = match get("loss")?.as_str() {
            "softmax" => LossKind::SoftmaxSum,
            "sigmoid" => LossKind::SigmoidCe,
            other => return Err(anyhow!("run.cfg: unknown loss `{other}`")),
        };
        let mean = get("mean")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse::<f64>().context("mean"))
            .collect::<Result<Vec<_>>>()?;
        let desc = NetDescription::load(self.root.join("net.net"))?;
        let opts = BuildOptions {
            n_classes: if null_background { n_classes - 1 } else { n_classes },
            mean,
            ..Default::default()
        };
        let mut net = build_from_description(&desc, &opts)?;
        net.graph.load_checkpoint(self.root.join("checkpoint.bin"))?;
        Ok(LoadedRun {
            net,
            loss: LossConfig {
                kind,
                null_background,
                ..Default::default()
            },
            n_classes,
        })
    }
}
