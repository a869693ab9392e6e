//! Line-based `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Every key has a default, and
//! unknown keys are rejected so typos cannot silently fall back to defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Dataset, SceneConfig};
use crate::error::{Error, Result};
use crate::grad::Surrogate;
use crate::network::NetConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataMode {
    Synth,
    Dir,
}

impl FromStr for DataMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(Self::Synth),
            "dir" => Ok(Self::Dir),
            other => Err(Error::Config(format!("data.mode must be synth or dir, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub mode: DataMode,
    /// Square scene size for synthetic data; also the network input size.
    pub size: usize,
    /// Synthetic training scenes.
    pub count: usize,
    pub val_count: usize,
    pub dir: Option<PathBuf>,
    /// Scene generator seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mode: DataMode::Synth,
            size: 64,
            count: 200,
            val_count: 50,
            dir: None,
            seed: SceneConfig::default().seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            net: NetConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        };
        cfg.sync();
        cfg
    }
}

pub const KEYS: &[&str] = &[
    "net.stage_channels",
    "net.blocks",
    "train.epochs",
    "train.lr",
    "train.batch",
    "train.seed",
    "train.weight_decay",
    "data.mode",
    "data.size",
    "data.count",
    "data.val_count",
    "data.dir",
    "data.seed",
    "ste.surrogate",
    "ste.k_init",
    "eval.threshold",
    "eval.match_dist",
];

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: `{key}` cannot parse `{value}`")))
}

fn parse_list<const N: usize>(key: &str, value: &str, line: usize) -> Result<[usize; N]> {
    let items: Vec<usize> = value
        .split(',')
        .map(|s| parse(key, s.trim(), line))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("line {line}: `{key}` needs {N} comma-separated integers")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got `{content}`")))?;
            cfg.set(key.trim(), value.trim(), line)?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "net.stage_channels" => self.net.stage_channels = parse_list(key, value, line)?,
            "net.blocks" => self.net.set_blocks(parse_list(key, value, line)?),
            "train.epochs" => self.train.epochs = parse(key, value, line)?,
            "train.lr" => self.train.lr = parse(key, value, line)?,
            "train.batch" => self.train.batch = parse(key, value, line)?,
            "train.seed" => self.train.seed = parse(key, value, line)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value, line)?,
            "data.mode" => self.data.mode = value.parse()?,
            "data.size" => self.data.size = parse(key, value, line)?,
            "data.count" => self.data.count = parse(key, value, line)?,
            "data.val_count" => self.data.val_count = parse(key, value, line)?,
            "data.dir" => self.data.dir = Some(PathBuf::from(value)),
            "data.seed" => self.data.seed = parse(key, value, line)?,
            "ste.surrogate" => self.net.surrogate = value.parse::<Surrogate>()?,
            "ste.k_init" => self.net.k_init = parse(key, value, line)?,
            "eval.threshold" => self.train.threshold = parse(key, value, line)?,
            "eval.match_dist" => self.train.match_dist = parse(key, value, line)?,
            _ => {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    line,
                })
            }
        }
        Ok(())
    }

    /// Propagates shared settings: the training seed also seeds weight init,
    /// and the data size is the network input size.
    fn sync(&mut self) {
        self.net.seed = self.train.seed;
        self.net.input_size = (self.data.size, self.data.size);
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        if self.data.val_count == 0 {
            return Err(Error::Config("data.val_count must be positive".into()));
        }
        match self.data.mode {
            DataMode::Synth if self.data.count == 0 => Err(Error::Config("data.count must be positive".into())),
            DataMode::Synth => self.scene_config().validate(),
            DataMode::Dir if self.data.dir.is_none() => Err(Error::Config("data.mode = dir requires data.dir".into())),
            DataMode::Dir => Ok(()),
        }?;
        if !(self.train.threshold > 0.0 && self.train.threshold < 1.0) || !(self.train.match_dist >= 0.0) {
            return Err(Error::Config(format!(
                "eval.threshold must lie in (0, 1) and eval.match_dist be >= 0, got {} and {}",
                self.train.threshold, self.train.match_dist
            )));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            size: (self.data.size, self.data.size),
            seed: self.data.seed,
            ..SceneConfig::default()
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match (self.data.mode, &self.data.dir) {
            (DataMode::Dir, Some(dir)) => Dataset::from_dir(dir, self.data.val_count),
            _ => Dataset::synthetic(&self.scene_config(), self.data.count, self.data.val_count),
        }
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("net.stage_channels", join(&self.net.stage_channels));
        kv("net.blocks", join(&self.net.blocks()));
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.lr", self.train.lr.to_string());
        kv("train.batch", self.train.batch.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("train.weight_decay", self.train.weight_decay.to_string());
        kv(
            "data.mode",
            match self.data.mode {
                DataMode::Synth => "synth".into(),
                DataMode::Dir => "dir".into(),
            },
        );
        kv("data.size", self.data.size.to_string());
        kv("data.count", self.data.count.to_string());
        kv("data.val_count", self.data.val_count.to_string());
        if let Some(dir) = &self.data.dir {
            kv("data.dir", dir.display().to_string());
        }
        kv("data.seed", self.data.seed.to_string());
        kv("ste.surrogate", self.net.surrogate.to_string());
        kv("ste.k_init", self.net.k_init.to_string());
        kv("eval.threshold", self.train.threshold.to_string());
        kv("eval.match_dist", self.train.match_dist.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.net.stage_channels, [16, 32, 64]);
        assert_eq!(cfg.train.epochs, 60);
        assert_eq!(cfg.data.count, 200);
        assert_eq!(cfg.data.val_count, 50);
        assert_eq!(cfg.net.input_size, (64, 64));
    }

    #[test]
    fn parses_every_key() {
        let text = "\
# comment
net.stage_channels = 8, 16, 32
net.blocks = 1,2,3,2,1   # trailing comment
train.epochs = 5
train.lr = 0.01
train.batch = 4
train.seed = 7
train.weight_decay = 0
data.mode = synth
data.size = 32
data.count = 10
data.val_count = 3
data.seed = 5
ste.surrogate = clip
ste.k_init = 0.5
eval.threshold = 0.4
eval.match_dist = 2.5
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.net.stage_channels, [8, 16, 32]);
        assert_eq!(cfg.net.blocks(), [1, 2, 3, 2, 1]);
        assert_eq!((cfg.train.epochs, cfg.train.batch, cfg.train.seed), (5, 4, 7));
        assert_eq!((cfg.train.lr, cfg.train.weight_decay), (0.01, 0.0));
        assert_eq!(cfg.net.seed, 7);
        assert_eq!(cfg.net.input_size, (32, 32));
        assert_eq!((cfg.data.count, cfg.data.val_count, cfg.data.seed), (10, 3, 5));
        assert_eq!(cfg.net.surrogate, Surrogate::Clip);
        assert_eq!(cfg.net.k_init, 0.5);
        assert_eq!((cfg.train.threshold, cfg.train.match_dist), (0.4, 2.5));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn to_text_covers_every_key() {
        let mut cfg = RunConfig::default();
        cfg.data.dir = Some("x".into());
        let text = cfg.to_text();
        for key in KEYS {
            assert!(text.contains(&format!("{key} = ")), "{key}");
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("train.epochs = 3\ntrian.lr = 0.1\n").unwrap_err();
        match &err {
            Error::UnknownKey { key, line } => assert_eq!((key.as_str(), *line), ("trian.lr", 2)),
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("trian.lr"));
    }

    #[test]
    fn malformed_values_are_rejected() {
        for text in [
            "train.epochs = many",
            "net.blocks = 1,2",
            "net.stage_channels = 16,30,64",
            "data.mode = web",
            "data.mode = dir",
            "ste.surrogate = sigmoid",
            "eval.threshold = 1.5",
            "data.size = 30",
            "no equals sign",
            "train.epochs = 0",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
