//! Synthetic corpus generator for end-to-end checks.
//!
//! A 3-D latent articulatory trajectory drives both the ultrasound images and
//! the spectral envelope. The latent is the coarticulated place target of each
//! phone plus a slow per-utterance drift that no label reveals. Phones come in
//! voiced/voiceless pairs sharing a place of articulation, so voicing is
//! visible in the labels but not in the tongue images.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::acoustic::{AcousticStreams, StreamFiles, StreamLayout, FRAME_SHIFT, LF0_UNVOICED};
use crate::error::{Error, Result};
use crate::lingfeat::TICKS_PER_SECOND;
use crate::pipeline::{ExperimentConfig, System};
use crate::ultra_io::{UltrasoundFiles, UltrasoundMetadata, UltrasoundSequence};

struct Phone {
    name: &'static str,
    place: usize,
    voiced: bool,
}

const PHONES: [Phone; 11] = [
    Phone { name: "sil", place: 0, voiced: false },
    Phone { name: "ba", place: 1, voiced: true },
    Phone { name: "pa", place: 1, voiced: false },
    Phone { name: "da", place: 2, voiced: true },
    Phone { name: "ta", place: 2, voiced: false },
    Phone { name: "ga", place: 3, voiced: true },
    Phone { name: "ka", place: 3, voiced: false },
    Phone { name: "ma", place: 4, voiced: true },
    Phone { name: "fa", place: 4, voiced: false },
    Phone { name: "la", place: 5, voiced: true },
    Phone { name: "ha", place: 5, voiced: false },
];

/// Latent targets per place of articulation.
const PLACE_TARGETS: [[f64; 3]; 6] = [
    [0.0, 0.0, 0.0],
    [-1.0, 0.6, -0.4],
    [0.9, 0.8, 0.3],
    [0.2, -1.0, 0.9],
    [-0.6, -0.5, -1.0],
    [1.0, -0.3, -0.8],
];

/// Fixed seed for the "language": the spectral maps shared by every corpus.
const LANGUAGE_SEED: u64 = 0x5eed_1a46;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_utterances: usize,
    pub seed: u64,
    pub phones_per_utterance: (usize, usize),
    /// Phone duration range in acoustic frames.
    pub phone_frames: (usize, usize),
    pub num_vectors: usize,
    pub pix_per_vector: usize,
    pub frame_rate: f64,
    pub first_frame_offset: f64,
    pub layout: StreamLayout,
    /// Amplitude of the label-invisible latent drift.
    pub drift_amplitude: f64,
    /// Scale of the voicing-dependent spectral component.
    pub voicing_strength: f64,
    pub spectral_noise: f64,
    pub image_noise: f64,
    /// From utterance index `.0` on, the tongue surface sits `.1` pixels deeper.
    pub probe_shift: Option<(usize, f64)>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_utterances: 60,
            seed: 1,
            phones_per_utterance: (8, 14),
            phone_frames: (12, 30),
            num_vectors: 32,
            pix_per_vector: 64,
            frame_rate: 81.5,
            first_frame_offset: 0.0,
            layout: StreamLayout::default(),
            drift_amplitude: 0.5,
            voicing_strength: 1.6,
            spectral_noise: 0.05,
            image_noise: 6.0,
            probe_shift: None,
        }
    }
}

/// Paths of a generated corpus.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub config: PathBuf,
}

struct Language {
    /// MGC loading of the latent, `mgc_dim x 3`.
    latent_map: Array2<f64>,
    /// MGC offset of voiced frames.
    voicing: Array1<f64>,
    /// Per-phone spectral colour, shared by both members of a pair.
    place_colour: Array2<f64>,
}

impl Language {
    fn new(mgc_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LANGUAGE_SEED);
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        Self {
            latent_map: Array2::from_shape_fn((mgc_dim, 3), |_| n.sample(&mut rng)),
            voicing: Array1::from_shape_fn(mgc_dim, |_| n.sample(&mut rng)),
            place_colour: Array2::from_shape_fn((PLACE_TARGETS.len(), mgc_dim), |_| 0.3 * n.sample(&mut rng)),
        }
    }
}

struct Utterance {
    /// (phone index, start frame, end frame)
    segments: Vec<(usize, usize, usize)>,
    n_frames: usize,
}

fn draw_utterance(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Utterance {
    let n_inner = rng.gen_range(spec.phones_per_utterance.0..=spec.phones_per_utterance.1);
    let mut phones = vec![0];
    phones.extend((0..n_inner).map(|_| rng.gen_range(1..PHONES.len())));
    phones.push(0);
    let mut segments = Vec::with_capacity(phones.len());
    let mut t = 0;
    for p in phones {
        let d = rng.gen_range(spec.phone_frames.0..=spec.phone_frames.1);
        segments.push((p, t, t + d));
        t += d;
    }
    Utterance { segments, n_frames: t }
}

fn context(segments: &[(usize, usize, usize)], i: usize) -> String {
    let name = |k: isize| {
        if k < 0 || k as usize >= segments.len() {
            "x"
        } else {
            PHONES[segments[k as usize].0].name
        }
    };
    let k = i as isize;
    format!(
        "{}^{}-{}+{}={}@{}_{}",
        name(k - 2),
        name(k - 1),
        name(k),
        name(k + 1),
        name(k + 2),
        i + 1,
        segments.len()
    )
}

/// Moving average with edge replication.
fn smooth(values: &Array2<f64>, half: usize) -> Array2<f64> {
    let n = values.nrows();
    Array2::from_shape_fn(values.dim(), |(t, c)| {
        let mut acc = 0.0;
        for o in 0..=2 * half {
            let idx = (t + o).saturating_sub(half).min(n - 1);
            acc += values[[idx, c]];
        }
        acc / (2 * half + 1) as f64
    })
}

/// Per-frame latent (targets + drift) and voicing.
fn latent_track(spec: &SynthSpec, utt: &Utterance, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array1<f64>) {
    let mut targets = Array2::zeros((utt.n_frames, 3));
    let mut voiced = Array1::zeros(utt.n_frames);
    for &(p, s, e) in &utt.segments {
        for t in s..e {
            for c in 0..3 {
                targets[[t, c]] = PLACE_TARGETS[PHONES[p].place][c];
            }
            voiced[t] = if PHONES[p].voiced { 1.0 } else { 0.0 };
        }
    }
    let mut z = smooth(&targets, 4);
    let freqs: Vec<f64> = (0..3).map(|_| rng.gen_range(0.4..1.5)).collect();
    let phases: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    for t in 0..utt.n_frames {
        let secs = t as f64 * FRAME_SHIFT;
        for c in 0..3 {
            z[[t, c]] += spec.drift_amplitude * (2.0 * PI * freqs[c] * secs + phases[c]).sin();
        }
    }
    (z, voiced)
}

fn render_frames(
    spec: &SynthSpec,
    z: &Array2<f64>,
    shift_px: f64,
    rng: &mut ChaCha8Rng,
) -> Result<UltrasoundSequence> {
    let meta = UltrasoundMetadata::new(spec.num_vectors, spec.pix_per_vector, spec.frame_rate, spec.first_frame_offset)?;
    let duration = z.nrows() as f64 * FRAME_SHIFT;
    let n_frames = ((duration - spec.first_frame_offset) * spec.frame_rate).floor().max(0.0) as usize + 1;
    let noise = Normal::new(0.0, spec.image_noise.max(1e-12)).map_err(|e| Error::Argument(e.to_string()))?;
    let depth = spec.pix_per_vector as f64;
    let width = depth / 16.0;
    let mut frames = Vec::with_capacity(n_frames);
    for j in 0..n_frames {
        let secs = spec.first_frame_offset + j as f64 / spec.frame_rate;
        let t = ((secs / FRAME_SHIFT).round() as usize).min(z.nrows() - 1);
        let (a, b, c) = (z[[t, 0]], z[[t, 1]], z[[t, 2]]);
        let frame = Array2::from_shape_fn((spec.num_vectors, spec.pix_per_vector), |(v, px)| {
            let theta = v as f64 / (spec.num_vectors - 1).max(1) as f64;
            let surface = depth * (0.5 + 0.12 * a + 0.1 * b * (PI * theta).cos() + 0.08 * c * (2.0 * PI * theta).sin())
                + shift_px;
            let x = (px as f64 - surface) / width;
            let v = 30.0 + 190.0 * (-0.5 * x * x).exp() + noise.sample(rng);
            v.round().clamp(0.0, 255.0) as u8
        });
        frames.push(frame);
    }
    Ok(UltrasoundSequence { metadata: meta, frames })
}

fn acoustic_streams(
    spec: &SynthSpec,
    lang: &Language,
    utt: &Utterance,
    z: &Array2<f64>,
    voiced: &Array1<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<AcousticStreams> {
    let n = utt.n_frames;
    let noise = Normal::new(0.0, spec.spectral_noise.max(1e-12)).map_err(|e| Error::Argument(e.to_string()))?;
    let mut place = Array2::zeros((n, PLACE_TARGETS.len()));
    for &(p, s, e) in &utt.segments {
        for t in s..e {
            place[[t, PHONES[p].place]] = 1.0;
        }
    }
    let place = smooth(&place, 3);
    let voicing = smooth(&voiced.clone().insert_axis(ndarray::Axis(1)), 3);
    let (md, bd) = (spec.layout.mgc_dim, spec.layout.bap_dim);
    let mgc = Array2::from_shape_fn((n, md), |(t, d)| {
        let scale = 1.0 / (1.0 + d as f64 / 8.0);
        let mut v = spec.voicing_strength * lang.voicing[d] * voicing[[t, 0]];
        for c in 0..3 {
            v += lang.latent_map[[d, c]] * z[[t, c]];
        }
        for k in 0..PLACE_TARGETS.len() {
            v += lang.place_colour[[k, d]] * place[[t, k]];
        }
        scale * v + noise.sample(rng)
    });
    let bap = Array2::from_shape_fn((n, bd), |(t, d)| {
        let base = if voiced[t] > 0.5 { -8.0 } else { -2.0 };
        base - 0.5 * d as f64 + 0.3 * z[[t, 1]] + noise.sample(rng)
    });
    let lf0 = Array1::from_shape_fn(n, |t| {
        if voiced[t] > 0.5 {
            (120.0f64).ln() + 0.08 * z[[t, 0]] + 0.1 * noise.sample(rng)
        } else {
            LF0_UNVOICED
        }
    });
    AcousticStreams::new(mgc, bap, lf0, FRAME_SHIFT)
}

/// HTS-style question file covering every context slot and phone.
pub fn question_file() -> String {
    let mut out = String::new();
    for (slot, pattern) in [("LL", "{p}^*"), ("L", "*^{p}-*"), ("C", "*-{p}+*"), ("R", "*+{p}=*"), ("RR", "*={p}@*")] {
        for ph in &PHONES {
            let _ = writeln!(out, "QS \"{slot}-{}\" {{{}}}", ph.name, pattern.replace("{p}", ph.name));
        }
    }
    let voiced: Vec<String> = PHONES.iter().filter(|p| p.voiced).map(|p| format!("*-{}+*", p.name)).collect();
    let _ = writeln!(out, "QS \"C-Voiced\" {{{}}}", voiced.join(","));
    let _ = writeln!(out, "CQS \"Pos_in_utt\" {{@(\\d+)_}}");
    let _ = writeln!(out, "CQS \"Utt_len\" {{_(\\d+)}}");
    out
}

/// Training settings sized for a desktop-scale synthetic run.
pub fn synthetic_config(root: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        speaker: "synth".into(),
        ultrasound_dir: Some(root.join("ult")),
        label_dir: root.join("lab"),
        acoustic_dir: root.join("acoustic"),
        question_file: root.join("questions.hed"),
        output_dir: root.join("run"),
        systems: System::ALL.to_vec(),
        seed,
        workers: 4,
        resize_rows: 16,
        resize_cols: 32,
        pca_max_frames: 2000,
        hidden_units: 64,
        heatmap_cell: 4,
        ..ExperimentConfig::default()
    };
    cfg.schedule.seed = seed;
    cfg.schedule.batch_size = 32;
    cfg.schedule.base_lr = 0.01;
    cfg
}

/// Writes `ult/`, `lab/`, `acoustic/`, `questions.hed` and `experiment.cfg` under `root`.
pub fn generate_corpus(root: &Path, spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.n_utterances == 0 || spec.phone_frames.0 == 0 || spec.num_vectors < 2 || spec.pix_per_vector < 2 {
        return Err(Error::Argument("synthetic corpus needs utterances, phones and at least 2x2 frames".into()));
    }
    let lang = Language::new(spec.layout.mgc_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dirs = ["ult", "lab", "acoustic"].map(|d| root.join(d));
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut ids = Vec::with_capacity(spec.n_utterances);
    for i in 0..spec.n_utterances {
        let id = format!("utt{i:04}");
        let utt = draw_utterance(spec, &mut rng);
        let (z, voiced) = latent_track(spec, &utt, &mut rng);
        let shift_px = match spec.probe_shift {
            Some((from, px)) if i >= from => px,
            _ => 0.0,
        };
        let seq = render_frames(spec, &z, shift_px, &mut rng)?;
        UltrasoundFiles::in_dir(&dirs[0], &id).write(&seq)?;

        let mut lab = String::new();
        let ticks = |frame: usize| (frame as f64 * FRAME_SHIFT * TICKS_PER_SECOND).round() as u64;
        for (k, &(_, s, e)) in utt.segments.iter().enumerate() {
            let _ = writeln!(lab, "{} {} {}", ticks(s), ticks(e), context(&utt.segments, k));
        }
        let lab_path = dirs[1].join(format!("{id}.lab"));
        fs::write(&lab_path, lab).map_err(|e| Error::io(&lab_path, e))?;

        acoustic_streams(spec, &lang, &utt, &z, &voiced, &mut rng)?.write(&StreamFiles::in_dir(&dirs[2], &id))?;
        ids.push(id);
    }
    let qpath = root.join("questions.hed");
    fs::write(&qpath, question_file()).map_err(|e| Error::io(&qpath, e))?;
    let mut cfg = synthetic_config(root, spec.seed);
    cfg.layout = spec.layout;
    let cpath = root.join("experiment.cfg");
    fs::write(&cpath, cfg.to_text()).map_err(|e| Error::io(&cpath, e))?;
    Ok(SynthCorpus {
        root: root.to_path_buf(),
        ids,
        config: cpath,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lingfeat::{parse_labels, parse_questions};

    #[test]
    fn contexts_are_well_formed() {
        let segs = vec![(0, 0, 5), (1, 5, 9), (2, 9, 12)];
        assert_eq!(context(&segs, 0), "x^x-sil+ba=pa@1_3");
        assert_eq!(context(&segs, 2), "sil^ba-pa+x=x@3_3");
    }

    #[test]
    fn question_file_parses() {
        let qs = parse_questions(&question_file()).unwrap();
        assert_eq!(qs.binary.len(), 5 * PHONES.len() + 1);
        assert_eq!(qs.numeric.len(), 2);
        assert_eq!(qs.numeric[0].value("x^x-sil+ba=pa@7_9"), 7.0);
        assert_eq!(qs.numeric[1].value("x^x-sil+ba=pa@7_9"), 9.0);
    }

    #[test]
    fn small_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_utterances: 3,
            ..SynthSpec::default()
        };
        let corpus = generate_corpus(dir.path(), &spec).unwrap();
        assert_eq!(corpus.ids.len(), 3);
        let cfg = ExperimentConfig::from_file(&corpus.config).unwrap();
        let labels = parse_labels(&fs::read_to_string(cfg.label_dir.join("utt0000.lab")).unwrap()).unwrap();
        let streams = AcousticStreams::read(&StreamFiles::in_dir(&cfg.acoustic_dir, "utt0000"), cfg.layout, FRAME_SHIFT).unwrap();
        let end = labels.last().unwrap().end_secs();
        assert!((end - streams.n_frames() as f64 * FRAME_SHIFT).abs() < 1e-9);
        let seq = UltrasoundFiles::in_dir(cfg.ultrasound_dir.as_ref().unwrap(), "utt0000").read().unwrap();
        assert!((seq.len() as f64 / 81.5 - end).abs() < 2.0 / 81.5);
    }
}
