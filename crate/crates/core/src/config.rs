//! Flat `key = value` configuration files for training and scene
//! generation. `#` starts a comment; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SceneSpec;
use crate::error::{Result, ScdError};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

/// Parsed key/value pairs with the line each came from.
#[derive(Debug)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ScdError::Config(format!("line {}: expected `key = value`", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ScdError::Config(format!("line {}: empty key", i + 1)));
            }
            if let Some((first, _)) = entries.insert(k.to_string(), (i + 1, v.to_string())) {
                return Err(ScdError::Config(format!("line {}: `{k}` already set on line {first}", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ScdError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn take_str(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    /// Remove and parse `key`, keeping `target` when absent.
    pub fn take<V: FromStr>(&mut self, key: &str, target: &mut V) -> Result<()>
    where
        V::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.take_str(key) {
            *target = v.parse().map_err(|e| ScdError::Config(format!("line {line}: `{key}`: {e}")))?;
        }
        Ok(())
    }

    pub fn take_bool(&mut self, key: &str, target: &mut bool) -> Result<()> {
        if let Some((line, v)) = self.take_str(key) {
            *target = match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => true,
                "false" | "no" | "off" | "0" => false,
                _ => return Err(ScdError::Config(format!("line {line}: `{key}` expects a boolean, got `{v}`"))),
            };
        }
        Ok(())
    }

    pub fn take_path(&mut self, key: &str) -> Option<PathBuf> {
        self.take_str(key).map(|(_, v)| PathBuf::from(v))
    }

    /// Error on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            Some((k, (line, _))) => Err(ScdError::Config(format!("line {line}: unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn take_scene(kv: &mut KeyValues, spec: &mut SceneSpec) -> Result<()> {
    kv.take("height", &mut spec.height)?;
    kv.take("width", &mut spec.width)?;
    kv.take("classes", &mut spec.classes)?;
    kv.take("shapes_min", &mut spec.num_shapes.0)?;
    kv.take("shapes_max", &mut spec.num_shapes.1)?;
    kv.take("change_ratio", &mut spec.change_ratio)?;
    kv.take("max_mutations", &mut spec.max_mutations)?;
    kv.take("noise_std", &mut spec.noise_std)?;
    Ok(())
}

/// Scene-generation spec file (`synth --spec`).
pub fn parse_scene_spec(text: &str) -> Result<SceneSpec> {
    let mut kv = KeyValues::parse(text)?;
    let mut spec = SceneSpec::default();
    take_scene(&mut kv, &mut spec)?;
    kv.take("seed", &mut spec.seed)?;
    kv.finish()?;
    spec.validate().map_err(|e| ScdError::Config(e.to_string()))?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic { spec: SceneSpec, train_count: usize, val_count: usize },
    /// Dataset directories; validation falls back to the training set.
    Directory { train: PathBuf, val: Option<PathBuf> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    /// Seed for shuffling and augmentation.
    pub seed: u64,
    pub augment: bool,
    pub prior_weights: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic { spec: SceneSpec::default(), train_count: 200, val_count: 50 },
            model: ModelConfig::default(),
            epochs: 5,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            seed: 7,
            augment: true,
            prior_weights: None,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn classes(&self) -> usize {
        self.model.classes
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ScdError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) || self.optimizer.weight_decay < 0.0 {
            return Err(ScdError::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        let w = &self.loss.weights;
        if [w.sem, w.change, w.boundary, w.similarity, self.loss.boundary_pos_weight].iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(ScdError::Config("loss weights must be positive".into()));
        }
        if let DataSource::Synthetic { spec, train_count, val_count } = &self.data {
            spec.validate().map_err(|e| ScdError::Config(e.to_string()))?;
            if *train_count == 0 || *val_count == 0 {
                return Err(ScdError::Config("train_count and val_count must be positive".into()));
            }
            if spec.classes != self.model.classes {
                return Err(ScdError::Config("scene and model class counts differ".into()));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = TrainConfig::default();
        let m = &mut c.model;
        kv.take("classes", &mut m.classes)?;
        kv.take("channels_shallow", &mut m.channels_shallow)?;
        kv.take("channels_deep", &mut m.channels_deep)?;
        kv.take("channels_msa", &mut m.channels_msa)?;
        kv.take("decoder_width", &mut m.decoder_width)?;
        if let Some((line, v)) = kv.take_str("depths") {
            let parts: Vec<usize> = v
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| ScdError::Config(format!("line {line}: `depths`: {e}")))?;
            m.depths = parts.try_into().map_err(|_| ScdError::Config(format!("line {line}: `depths` needs four comma-separated values")))?;
        }
        kv.take("alpha", &mut m.alpha)?;
        kv.take_bool("use_sam_branch", &mut m.use_sam_branch)?;
        kv.take_bool("use_gspm", &mut m.use_gspm)?;
        kv.take_bool("use_btam", &mut m.use_btam)?;
        kv.take_bool("canonical_order", &mut m.canonical_order)?;
        kv.take("prior_seed", &mut m.prior_seed)?;
        kv.take("init_seed", &mut m.init_seed)?;
        kv.take("change_threshold", &mut m.change_threshold)?;

        kv.take("epochs", &mut c.epochs)?;
        kv.take("batch_size", &mut c.batch_size)?;
        kv.take("learning_rate", &mut c.optimizer.lr)?;
        kv.take("weight_decay", &mut c.optimizer.weight_decay)?;
        let w = &mut c.loss.weights;
        kv.take("lambda_sem", &mut w.sem)?;
        kv.take("lambda_cd", &mut w.change)?;
        kv.take("lambda_bd", &mut w.boundary)?;
        kv.take("lambda_sim", &mut w.similarity)?;
        kv.take("boundary_pos_weight", &mut c.loss.boundary_pos_weight)?;
        kv.take("similarity_margin", &mut c.loss.similarity_margin)?;
        kv.take("seed", &mut c.seed)?;
        kv.take_bool("augment", &mut c.augment)?;
        c.prior_weights = kv.take_path("prior_weights");
        c.output_dir = kv.take_path("output_dir");

        if let Some(train) = kv.take_path("data_root") {
            c.data = DataSource::Directory { train, val: kv.take_path("val_root") };
        } else {
            let mut spec = SceneSpec { classes: c.model.classes, ..SceneSpec::default() };
            let (mut train_count, mut val_count) = (200, 50);
            take_scene(&mut kv, &mut spec)?;
            if spec.classes != c.model.classes {
                c.model.classes = spec.classes;
            }
            kv.take("synth_seed", &mut spec.seed)?;
            kv.take("train_count", &mut train_count)?;
            kv.take("val_count", &mut val_count)?;
            c.data = DataSource::Synthetic { spec, train_count, val_count };
        }
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ScdError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Render back to the file format; `parse(to_text())` reproduces the
    /// config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let d = m.depths;
        let _ = writeln!(s, "classes = {}", m.classes);
        let _ = writeln!(s, "channels_shallow = {}\nchannels_deep = {}\nchannels_msa = {}\ndecoder_width = {}", m.channels_shallow, m.channels_deep, m.channels_msa, m.decoder_width);
        let _ = writeln!(s, "depths = {},{},{},{}", d[0], d[1], d[2], d[3]);
        let _ = writeln!(s, "alpha = {}\nuse_sam_branch = {}\nuse_gspm = {}\nuse_btam = {}\ncanonical_order = {}", m.alpha, m.use_sam_branch, m.use_gspm, m.use_btam, m.canonical_order);
        let _ = writeln!(s, "prior_seed = {}\ninit_seed = {}\nchange_threshold = {}", m.prior_seed, m.init_seed, m.change_threshold);
        let _ = writeln!(s, "epochs = {}\nbatch_size = {}\nlearning_rate = {}\nweight_decay = {}", self.epochs, self.batch_size, self.optimizer.lr, self.optimizer.weight_decay);
        let w = &self.loss.weights;
        let _ = writeln!(s, "lambda_sem = {}\nlambda_cd = {}\nlambda_bd = {}\nlambda_sim = {}", w.sem, w.change, w.boundary, w.similarity);
        let _ = writeln!(s, "boundary_pos_weight = {}\nsimilarity_margin = {}", self.loss.boundary_pos_weight, self.loss.similarity_margin);
        let _ = writeln!(s, "seed = {}\naugment = {}", self.seed, self.augment);
        if let Some(p) = &self.prior_weights {
            let _ = writeln!(s, "prior_weights = {}", p.display());
        }
        if let Some(p) = &self.output_dir {
            let _ = writeln!(s, "output_dir = {}", p.display());
        }
        match &self.data {
            DataSource::Directory { train, val } => {
                let _ = writeln!(s, "data_root = {}", train.display());
                if let Some(v) = val {
                    let _ = writeln!(s, "val_root = {}", v.display());
                }
            }
            DataSource::Synthetic { spec, train_count, val_count } => {
                let _ = writeln!(s, "height = {}\nwidth = {}\nshapes_min = {}\nshapes_max = {}", spec.height, spec.width, spec.num_shapes.0, spec.num_shapes.1);
                let _ = writeln!(s, "change_ratio = {}\nmax_mutations = {}\nnoise_std = {}\nsynth_seed = {}", spec.change_ratio, spec.max_mutations, spec.noise_std, spec.seed);
                let _ = writeln!(s, "train_count = {train_count}\nval_count = {val_count}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_protocol() {
        let c = TrainConfig::parse("").unwrap();
        assert_eq!(c.optimizer.lr, 0.001);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.optimizer.weight_decay, 0.01);
        assert_eq!(c.model.alpha, 0.5);
        assert_eq!((c.model.channels_shallow, c.model.channels_deep, c.model.channels_msa), (64, 256, 256));
    }

    #[test]
    fn parses_values_and_comments() {
        let c = TrainConfig::parse("# smoke\nepochs = 2   # short\nuse_btam = false\ndepths = 1, 2, 1, 1\ntrain_count=10\nclasses = 6\n").unwrap();
        assert_eq!(c.epochs, 2);
        assert!(!c.model.use_btam);
        assert_eq!(c.model.depths, [1, 2, 1, 1]);
        assert_eq!(c.model.classes, 6);
        match &c.data {
            DataSource::Synthetic { spec, train_count, .. } => {
                assert_eq!(*train_count, 10);
                assert_eq!(spec.classes, 6);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for bad in ["epoch = 3", "epochs = 3\nepochs = 4", "epochs", "epochs = three", "use_btam = maybe", "depths = 1,2", "use_sam_branch = false"] {
            assert!(matches!(TrainConfig::parse(bad), Err(ScdError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn text_round_trip() {
        let c = TrainConfig::parse("epochs = 3\nalpha = 0.25\noutput_dir = /tmp/x\ndata_root = /data/a\nval_root = /data/b\n").unwrap();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        let d = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn scene_spec_file() {
        let s = parse_scene_spec("height = 32\nwidth = 48\nseed = 9\nchange_ratio = 0.3").unwrap();
        assert_eq!((s.height, s.width, s.seed, s.change_ratio), (32, 48, 9, 0.3));
        assert!(parse_scene_spec("height = 30").is_err());
        assert!(parse_scene_spec("colour = red").is_err());
    }
}
