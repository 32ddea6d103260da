//! Experiment orchestration: dataset split, per-system input assembly and the
//! stage graph `prepare -> pca -> train -> generate -> evaluate -> misalign`.

mod config;
mod stages;

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::lingfeat::N_POSITIONAL;

pub use config::ExperimentConfig;
pub use stages::{
    evaluate_stage, generate_stage, gather_pca_frames, misalign_stage, pca_stage, prepare_stage, run_all,
    train_stage, RunLayout, SplitIds, GENERATIONS,
};

/// Network input configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum System {
    /// Ultrasound coefficients plus label-timing features.
    Ultrasound,
    /// Linguistic features only.
    Text,
    /// Linguistic features followed by ultrasound coefficients.
    Combined,
}

impl System {
    pub const ALL: [System; 3] = [System::Ultrasound, System::Text, System::Combined];

    pub fn name(&self) -> &'static str {
        match self {
            System::Ultrasound => "ult2wav",
            System::Text => "txt2wav",
            System::Combined => "txt+ult2wav",
        }
    }

    pub fn uses_ultrasound(&self) -> bool {
        !matches!(self, System::Text)
    }

    /// Directory-safe name.
    pub fn dir_name(&self) -> &'static str {
        match self {
            System::Ultrasound => "ult2wav",
            System::Text => "txt2wav",
            System::Combined => "txt_ult2wav",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ult2wav" | "ult" => Ok(System::Ultrasound),
            "txt2wav" | "txt" => Ok(System::Text),
            "txt+ult2wav" | "txt_ult2wav" | "txt+ult" => Ok(System::Combined),
            other => Err(Error::Config(format!(
                "unknown system `{other}` (expected ult2wav, txt2wav or txt+ult2wav)"
            ))),
        }
    }
}

/// Parses a comma-separated system list; `all` expands to every system.
pub fn parse_systems(s: &str) -> Result<Vec<System>> {
    if s.trim() == "all" {
        return Ok(System::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let sys: System = part.parse()?;
        if !out.contains(&sys) {
            out.push(sys);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no system selected".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// Contiguous blocks in recording order: `floor(r_train * n)` training,
/// `floor(r_dev * n)` development, the remainder for testing.
pub fn split_dataset(ids: &[String], ratios: [f64; 3]) -> Result<SplitIds> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = ids.len();
    // guard against 0.85 * 20 landing just under 17
    let n_train = ((ratios[0] * n as f64) + 1e-9).floor() as usize;
    let n_dev = ((ratios[1] * n as f64) + 1e-9).floor() as usize;
    let n_train = n_train.min(n);
    let n_dev = n_dev.min(n - n_train);
    let n_test = n - n_train - n_dev;
    if n_train == 0 || n_dev == 0 || n_test == 0 {
        return Err(Error::Config(format!(
            "split of {n} utterances with ratios {ratios:?} leaves an empty block ({n_train}/{n_dev}/{n_test})"
        )));
    }
    Ok(SplitIds {
        train: ids[..n_train].to_vec(),
        dev: ids[n_train..n_train + n_dev].to_vec(),
        test: ids[n_train + n_dev..].to_vec(),
    })
}

/// Builds one utterance's network input. `linguistic` always ends with the
/// positional columns, which are all the ultrasound-only system keeps.
pub fn assemble_inputs(
    system: System,
    linguistic: Option<ArrayView2<f64>>,
    ultrasound: Option<ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    let need = |what: &str| Error::Data(format!("{system} needs {what} features"));
    match system {
        System::Text => Ok(linguistic.ok_or_else(|| need("linguistic"))?.to_owned()),
        System::Ultrasound | System::Combined => {
            let ling = linguistic.ok_or_else(|| need("linguistic"))?;
            let ult = ultrasound.ok_or_else(|| need("ultrasound"))?;
            if ling.nrows() != ult.nrows() {
                return Err(Error::Data(format!(
                    "frame count mismatch: {} linguistic vs {} ultrasound",
                    ling.nrows(),
                    ult.nrows()
                )));
            }
            let text_part = if system == System::Ultrasound {
                if ling.ncols() < N_POSITIONAL {
                    return Err(Error::Data(format!(
                        "linguistic features have {} columns, fewer than the {N_POSITIONAL} positional ones",
                        ling.ncols()
                    )));
                }
                ling.slice(s![.., ling.ncols() - N_POSITIONAL..])
            } else {
                ling
            };
            concatenate(Axis(1), &[text_part, ult]).map_err(|e| Error::Data(e.to_string()))
        }
    }
}
