//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use picanet_core::net::NetworkSpec;
use picanet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Train,
    Infer,
    Eval,
    Gradcheck,
    Attnviz,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// If present, must name the subcommand being run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<CommandKind>,
    /// Training or evaluation data: a directory of `<name>.png` +
    /// `<name>_mask.png` pairs, or `synthetic:<seed>:<n>`.
    #[serde(default)]
    pub data: Option<String>,
    /// Held-out set scored after every epoch of training (defaults to `data`).
    #[serde(default)]
    pub eval_data: Option<String>,
    #[serde(default = "one")]
    pub eval_every_epochs: usize,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Inputs for `infer`: a directory of PNGs or a synthetic stream.
    #[serde(default)]
    pub images: Option<String>,
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    /// `attnviz` input: a PNG path or `synthetic:<seed>:<index>`.
    #[serde(default)]
    pub image: Option<String>,
    /// `attnviz` query pixels as (x, y) in input-image coordinates.
    #[serde(default)]
    pub pixels: Vec<(usize, usize)>,
    #[serde(default = "five")]
    pub gradcheck_seeds: usize,
    /// Overrides `network.placement`.
    #[serde(default)]
    pub placement: Option<String>,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default = "TrainConfig::toy")]
    pub train: TrainConfig,
}

fn one() -> usize {
    1
}

fn five() -> usize {
    5
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// Values given on the command line; each replaces its config counterpart.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub placement: Option<String>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub data: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Config for `command`: the file if given, else the checkpoint's
    /// sibling `run_config.json`, else defaults; then overrides, then validation.
    pub fn resolve(command: CommandKind, path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::read(p)?,
            None => match o.checkpoint.as_deref().and_then(sibling_config) {
                Some(p) => {
                    let mut c = Self::read(&p)?;
                    c.command = None;
                    c
                }
                None => Self::default(),
            },
        };
        if let Some(c) = cfg.command {
            if c != command {
                bail!("config is for `{}`, not `{}`", name(c), name(command));
            }
        }
        if let Some(s) = o.seed {
            cfg.train.seed = s;
        }
        if let Some(s) = o.steps {
            cfg.train.max_steps = s;
        }
        if let Some(p) = &o.placement {
            cfg.placement = Some(p.clone());
        }
        if let Some(p) = &o.out {
            cfg.out = Some(p.clone());
        }
        if let Some(d) = &o.data {
            cfg.data = Some(d.clone());
        }
        if let Some(c) = &o.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if let Some(p) = cfg.placement.take() {
            cfg.network = cfg.network.clone().with_placement(&p)?;
        }
        cfg.network.validate()?;
        if command == CommandKind::Train {
            cfg.train.validate()?;
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("no output directory: pass --out or set `out`")
    }
}

fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join("run_config.json");
    p.is_file().then_some(p)
}

pub fn name(c: CommandKind) -> &'static str {
    match c {
        CommandKind::Train => "train",
        CommandKind::Infer => "infer",
        CommandKind::Eval => "eval",
        CommandKind::Gradcheck => "gradcheck",
        CommandKind::Attnviz => "attnviz",
    }
}
