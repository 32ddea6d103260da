use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::acoustic::{StreamLayout, FRAME_SHIFT};
use crate::dnn::{TrainingSchedule, HIDDEN_LAYERS, HIDDEN_UNITS};
use crate::eigentongues::{DEFAULT_MAX_COMPONENTS, DEFAULT_VARIANCE_TARGET};
use crate::error::{Error, Result};

use super::{parse_systems, System};

/// Everything one experiment run depends on.
///
/// Serialized as `[section]` headers followed by `key = value` lines.
/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub speaker: String,
    pub ultrasound_dir: Option<PathBuf>,
    pub label_dir: PathBuf,
    pub acoustic_dir: PathBuf,
    pub question_file: PathBuf,
    pub output_dir: PathBuf,

    pub systems: Vec<System>,
    pub seed: u64,
    pub workers: usize,

    pub split_ratios: [f64; 3],

    pub resize_rows: usize,
    pub resize_cols: usize,
    pub pca_variance: f64,
    pub pca_max_components: usize,
    /// Frames are subsampled evenly down to this many before fitting.
    pub pca_max_frames: usize,

    pub layout: StreamLayout,
    pub frame_shift: f64,

    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub schedule: TrainingSchedule,

    pub heatmap_cell: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            speaker: "speaker".into(),
            ultrasound_dir: Some(PathBuf::from("ult")),
            label_dir: PathBuf::from("lab"),
            acoustic_dir: PathBuf::from("acoustic"),
            question_file: PathBuf::from("questions.hed"),
            output_dir: PathBuf::from("run"),
            systems: System::ALL.to_vec(),
            seed: 1234,
            workers: 4,
            split_ratios: [0.85, 0.10, 0.05],
            resize_rows: 64,
            resize_cols: 128,
            pca_variance: DEFAULT_VARIANCE_TARGET,
            pca_max_components: DEFAULT_MAX_COMPONENTS,
            pca_max_frames: 4000,
            layout: StreamLayout::default(),
            frame_shift: FRAME_SHIFT,
            hidden_layers: HIDDEN_LAYERS,
            hidden_units: HIDDEN_UNITS,
            schedule: TrainingSchedule::default(),
            heatmap_cell: 8,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for {key}")))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
            let full = format!("{section}.{}", key.trim());
            if entries.insert(full.clone(), (line_no, value.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {line_no}: duplicate key {full}")));
            }
        }

        let mut cfg = Self::default();
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        // relative defaults resolve against the config directory as well
        cfg.ultrasound_dir = cfg.ultrasound_dir.map(|p| base_dir.join(p));
        cfg.label_dir = base_dir.join(&cfg.label_dir);
        cfg.acoustic_dir = base_dir.join(&cfg.acoustic_dir);
        cfg.question_file = base_dir.join(&cfg.question_file);
        cfg.output_dir = base_dir.join(&cfg.output_dir);

        for (key, (line_no, value)) in &entries {
            let v = value.as_str();
            let k = key.as_str();
            let res: Result<()> = (|| {
                match k {
                    "data.speaker" => cfg.speaker = v.to_string(),
                    "data.ultrasound_dir" => {
                        cfg.ultrasound_dir = if v.is_empty() || v == "none" { None } else { Some(path(v)) }
                    }
                    "data.label_dir" => cfg.label_dir = path(v),
                    "data.acoustic_dir" => cfg.acoustic_dir = path(v),
                    "data.question_file" => cfg.question_file = path(v),
                    "experiment.output_dir" => cfg.output_dir = path(v),
                    "experiment.system" => cfg.systems = parse_systems(v)?,
                    "experiment.seed" => cfg.seed = parse_num(k, v)?,
                    "experiment.workers" => cfg.workers = parse_num(k, v)?,
                    "split.train" => cfg.split_ratios[0] = parse_num(k, v)?,
                    "split.dev" => cfg.split_ratios[1] = parse_num(k, v)?,
                    "split.test" => cfg.split_ratios[2] = parse_num(k, v)?,
                    "ultrasound.resize_rows" => cfg.resize_rows = parse_num(k, v)?,
                    "ultrasound.resize_cols" => cfg.resize_cols = parse_num(k, v)?,
                    "ultrasound.pca_variance" => cfg.pca_variance = parse_num(k, v)?,
                    "ultrasound.pca_max_components" => cfg.pca_max_components = parse_num(k, v)?,
                    "ultrasound.pca_max_frames" => cfg.pca_max_frames = parse_num(k, v)?,
                    "acoustic.mgc_dim" => cfg.layout.mgc_dim = parse_num(k, v)?,
                    "acoustic.bap_dim" => cfg.layout.bap_dim = parse_num(k, v)?,
                    "acoustic.frame_shift" => cfg.frame_shift = parse_num(k, v)?,
                    "training.hidden_layers" => cfg.hidden_layers = parse_num(k, v)?,
                    "training.hidden_units" => cfg.hidden_units = parse_num(k, v)?,
                    "training.max_epochs" => cfg.schedule.max_epochs = parse_num(k, v)?,
                    "training.warmup_epochs" => cfg.schedule.warmup_epochs = parse_num(k, v)?,
                    "training.learning_rate" => cfg.schedule.base_lr = parse_num(k, v)?,
                    "training.decay" => cfg.schedule.decay = parse_num(k, v)?,
                    "training.batch_size" => cfg.schedule.batch_size = parse_num(k, v)?,
                    "training.patience" => cfg.schedule.patience = parse_num(k, v)?,
                    "misalign.heatmap_cell" => cfg.heatmap_cell = parse_num(k, v)?,
                    _ => return Err(Error::Config(format!("unknown key {k}"))),
                }
                Ok(())
            })();
            res.map_err(|e| Error::Config(format!("line {line_no}: {e}")))?;
        }
        cfg.schedule.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {:?} sum to {sum}, not 1",
                self.split_ratios
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.systems.is_empty() {
            return Err(Error::Config("no system selected".into()));
        }
        if self.needs_ultrasound() && self.ultrasound_dir.is_none() {
            return Err(Error::Config("ultrasound systems need data.ultrasound_dir".into()));
        }
        if self.resize_rows == 0 || self.resize_cols == 0 {
            return Err(Error::Config("resize dimensions must be >= 1".into()));
        }
        if !(self.pca_variance > 0.0 && self.pca_variance <= 1.0) {
            return Err(Error::Config("pca_variance must be in (0, 1]".into()));
        }
        if self.pca_max_components == 0 || self.pca_max_frames < 2 {
            return Err(Error::Config("pca_max_components >= 1 and pca_max_frames >= 2 required".into()));
        }
        if !(self.frame_shift > 0.0) {
            return Err(Error::Config("frame_shift must be > 0".into()));
        }
        if self.hidden_layers == 0 || self.hidden_units == 0 {
            return Err(Error::Config("hidden layer count and width must be >= 1".into()));
        }
        if self.schedule.seed != self.seed {
            return Err(Error::Config("training seed must equal experiment seed".into()));
        }
        self.schedule.validate()
    }

    pub fn needs_ultrasound(&self) -> bool {
        self.systems.iter().any(|s| s.uses_ultrasound())
    }

    /// Checks that every referenced input path exists.
    pub fn check_paths(&self) -> Result<()> {
        let mut paths = vec![&self.label_dir, &self.acoustic_dir, &self.question_file];
        if let Some(u) = &self.ultrasound_dir {
            paths.push(u);
        }
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Serializes every field; parsing the output yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let p = |p: &Path| p.display().to_string();
        let systems: Vec<&str> = self.systems.iter().map(|s| s.name()).collect();
        let _ = writeln!(out, "[data]");
        let _ = writeln!(out, "speaker = {}", self.speaker);
        let _ = writeln!(
            out,
            "ultrasound_dir = {}",
            self.ultrasound_dir.as_deref().map(p).unwrap_or_else(|| "none".into())
        );
        let _ = writeln!(out, "label_dir = {}", p(&self.label_dir));
        let _ = writeln!(out, "acoustic_dir = {}", p(&self.acoustic_dir));
        let _ = writeln!(out, "question_file = {}", p(&self.question_file));
        let _ = writeln!(out, "\n[experiment]");
        let _ = writeln!(out, "output_dir = {}", p(&self.output_dir));
        let _ = writeln!(out, "system = {}", systems.join(","));
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "workers = {}", self.workers);
        let _ = writeln!(out, "\n[split]");
        let _ = writeln!(out, "train = {}", self.split_ratios[0]);
        let _ = writeln!(out, "dev = {}", self.split_ratios[1]);
        let _ = writeln!(out, "test = {}", self.split_ratios[2]);
        let _ = writeln!(out, "\n[ultrasound]");
        let _ = writeln!(out, "resize_rows = {}", self.resize_rows);
        let _ = writeln!(out, "resize_cols = {}", self.resize_cols);
        let _ = writeln!(out, "pca_variance = {}", self.pca_variance);
        let _ = writeln!(out, "pca_max_components = {}", self.pca_max_components);
        let _ = writeln!(out, "pca_max_frames = {}", self.pca_max_frames);
        let _ = writeln!(out, "\n[acoustic]");
        let _ = writeln!(out, "mgc_dim = {}", self.layout.mgc_dim);
        let _ = writeln!(out, "bap_dim = {}", self.layout.bap_dim);
        let _ = writeln!(out, "frame_shift = {}", self.frame_shift);
        let _ = writeln!(out, "\n[training]");
        let _ = writeln!(out, "hidden_layers = {}", self.hidden_layers);
        let _ = writeln!(out, "hidden_units = {}", self.hidden_units);
        let _ = writeln!(out, "max_epochs = {}", self.schedule.max_epochs);
        let _ = writeln!(out, "warmup_epochs = {}", self.schedule.warmup_epochs);
        let _ = writeln!(out, "learning_rate = {}", self.schedule.base_lr);
        let _ = writeln!(out, "decay = {}", self.schedule.decay);
        let _ = writeln!(out, "batch_size = {}", self.schedule.batch_size);
        let _ = writeln!(out, "patience = {}", self.schedule.patience);
        let _ = writeln!(out, "\n[misalign]");
        let _ = writeln!(out, "heatmap_cell = {}", self.heatmap_cell);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_recipe() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.split_ratios, [0.85, 0.10, 0.05]);
        assert_eq!(cfg.pca_variance, 0.70);
        assert_eq!(cfg.pca_max_components, 128);
        assert_eq!((cfg.resize_rows, cfg.resize_cols), (64, 128));
        assert_eq!((cfg.hidden_layers, cfg.hidden_units), (6, 1024));
        assert_eq!(cfg.layout.width(), 199);
    }

    #[test]
    fn parse_resolves_relative_paths() {
        let text = "[data]\nlabel_dir = labels\nultrasound_dir = /abs/ult\n[experiment]\nsystem = txt2wav\nseed = 7\n";
        let cfg = ExperimentConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.label_dir, PathBuf::from("/base/labels"));
        assert_eq!(cfg.ultrasound_dir, Some(PathBuf::from("/abs/ult")));
        assert_eq!(cfg.acoustic_dir, PathBuf::from("/base/acoustic"));
        assert_eq!(cfg.systems, vec![System::Text]);
        assert_eq!(cfg.schedule.seed, 7);
    }

    #[test]
    fn echo_round_trip() {
        let text = "[experiment]\nsystem = all\nseed = 3\n[training]\nlearning_rate = 0.0125\nhidden_units = 64\n[split]\ntrain = 0.8\ndev = 0.1\ntest = 0.1\n";
        let cfg = ExperimentConfig::parse(text, Path::new("/tmp/x")).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_input() {
        let base = Path::new("/");
        assert!(ExperimentConfig::parse("[split]\ntrain = 0.9\n", base).is_err());
        assert!(ExperimentConfig::parse("[x]\ny = 1\n", base).is_err());
        assert!(ExperimentConfig::parse("[experiment]\nseed = abc\n", base).is_err());
        assert!(ExperimentConfig::parse("[experiment]\nseed = 1\nseed = 2\n", base).is_err());
        assert!(ExperimentConfig::parse("[training]\nwarmup_epochs = 30\n", base).is_err());
    }
}
