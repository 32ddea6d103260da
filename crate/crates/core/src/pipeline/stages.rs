use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::acoustic::{build_targets, AcousticStreams, NormKind, NormalizationStats, StreamFiles};
use crate::binio::{read_matrix_f64, write_matrix_f64};
use crate::dnn::{architecture, predict_utterance, train, Dataset, MlpModel};
use crate::eigentongues::{fit_pca, EigenTonguesModel};
use crate::error::{Error, Result};
use crate::eval::{aggregate, format_tables, reports_to_csv, score_utterance, utterance_scores_to_csv, ReportRow};
use crate::lingfeat::{extract_features, parse_labels, parse_questions};
use crate::misalign::{block_summary, build_matrix, mean_image, render_heatmap, BlockSummary, MisalignmentMatrix};
use crate::ultra_io::{resample_to_frame_clock, resize_frame_u8, UltrasoundFiles};

use super::{assemble_inputs, split_dataset, ExperimentConfig, Split, System};

pub const GENERATIONS: [&str; 2] = ["mlpg", "static"];

/// Utterance ids of each contiguous block, in recording order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitIds {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// All ids in recording order.
    pub fn all(&self) -> Vec<String> {
        self.train.iter().chain(&self.dev).chain(&self.test).cloned().collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for split in [Split::Train, Split::Dev, Split::Test] {
            for id in self.get(split) {
                let _ = writeln!(out, "{id}\t{split}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut ids = SplitIds {
            train: vec![],
            dev: vec![],
            test: vec![],
        };
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (id, split) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("split file line {}: expected `id<TAB>split`", n + 1)))?;
            match split.trim().parse()? {
                Split::Train => ids.train.push(id.to_string()),
                Split::Dev => ids.dev.push(id.to_string()),
                Split::Test => ids.test.push(id.to_string()),
            }
        }
        Ok(ids)
    }
}

/// File locations inside one run's output directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved")
    }
    pub fn prepare_dir(&self) -> PathBuf {
        self.root.join("prepare")
    }
    pub fn split_file(&self) -> PathBuf {
        self.prepare_dir().join("split.txt")
    }
    pub fn manifest(&self) -> PathBuf {
        self.prepare_dir().join("manifest.csv")
    }
    pub fn linguistic(&self, id: &str) -> PathBuf {
        self.prepare_dir().join("ling").join(format!("{id}.f64m"))
    }
    pub fn targets(&self, id: &str) -> PathBuf {
        self.prepare_dir().join("targets").join(format!("{id}.f64m"))
    }
    pub fn pca_dir(&self) -> PathBuf {
        self.root.join("pca")
    }
    pub fn pca_model(&self) -> PathBuf {
        self.pca_dir().join("eigentongues.bin")
    }
    pub fn coefficients(&self, id: &str) -> PathBuf {
        self.pca_dir().join("coeffs").join(format!("{id}.f64m"))
    }
    pub fn train_dir(&self, system: System) -> PathBuf {
        self.root.join(system.dir_name()).join("train")
    }
    pub fn input_norm(&self, system: System) -> PathBuf {
        self.train_dir(system).join("input_norm.bin")
    }
    pub fn output_norm(&self, system: System) -> PathBuf {
        self.train_dir(system).join("output_norm.bin")
    }
    pub fn model(&self, system: System) -> PathBuf {
        self.train_dir(system).join("model.bin")
    }
    pub fn history(&self, system: System) -> PathBuf {
        self.train_dir(system).join("history.csv")
    }
    pub fn gen_dir(&self, system: System, generation: &str) -> PathBuf {
        self.root.join(system.dir_name()).join("gen").join(generation)
    }
    pub fn vuv(&self, system: System, generation: &str, id: &str) -> PathBuf {
        self.gen_dir(system, generation).join(format!("{id}.vuv"))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn report(&self) -> PathBuf {
        self.eval_dir().join("report.csv")
    }
    pub fn misalign_dir(&self) -> PathBuf {
        self.root.join("misalign")
    }
    pub fn heatmap(&self) -> PathBuf {
        self.misalign_dir().join("heatmap.ppm")
    }

    pub fn read_split(&self) -> Result<SplitIds> {
        let path = self.split_file();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        SplitIds::parse(&text)
    }

    /// Network inputs for one utterance, before normalization.
    pub fn inputs(&self, system: System, id: &str) -> Result<Array2<f64>> {
        let ling = read_matrix_f64(&self.linguistic(id))?;
        let ult = if system.uses_ultrasound() {
            Some(read_matrix_f64(&self.coefficients(id))?)
        } else {
            None
        };
        assemble_inputs(system, Some(ling.view()), ult.as_ref().map(|u| u.view()))
            .map_err(|e| Error::Data(format!("utterance {id}: {e}")))
    }

    pub fn target_frames(&self, id: &str) -> Result<Array2<f64>> {
        read_matrix_f64(&self.targets(id))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Runs `f` over `items` on `workers` threads; results keep input order.
fn parallel_map<T, R, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

fn stack(parts: &[Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Data(e.to_string()))
}

/// Utterance ids with a label file, sorted, i.e. in recording order.
fn discover_ids(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let dir = &cfg.label_dir;
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "lab") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!("no .lab files in {}", dir.display())));
    }
    Ok(ids)
}

/// Linguistic features, acoustic targets, split and manifest.
pub fn prepare_stage(cfg: &ExperimentConfig) -> Result<SplitIds> {
    (|| -> Result<_> {
        cfg.check_paths()?;
        let layout = RunLayout::new(&cfg.output_dir);
        let questions = parse_questions(&read_text(&cfg.question_file)?)?;
        let ids = discover_ids(cfg)?;
        let split = split_dataset(&ids, cfg.split_ratios)?;
        create_dir(&layout.prepare_dir().join("ling"))?;
        create_dir(&layout.prepare_dir().join("targets"))?;

        let counts = parallel_map(cfg.workers, &ids, |id| {
            let wrap = |e: Error| Error::Data(format!("utterance {id}: {e}"));
            let streams =
                AcousticStreams::read(&StreamFiles::in_dir(&cfg.acoustic_dir, id), cfg.layout, cfg.frame_shift)
                    .map_err(wrap)?;
            let n = streams.n_frames();
            let labels = parse_labels(&read_text(&cfg.label_dir.join(format!("{id}.lab")))?).map_err(wrap)?;
            let ling = extract_features(&labels, &questions, cfg.frame_shift, n).map_err(wrap)?;
            let targets = build_targets(&streams).map_err(wrap)?;
            write_matrix_f64(&layout.linguistic(id), &ling.frames)?;
            write_matrix_f64(&layout.targets(id), &targets.frames)?;
            let ult_frames = match &cfg.ultrasound_dir {
                Some(dir) if cfg.needs_ultrasound() => Some(UltrasoundFiles::in_dir(dir, id).frame_count().map_err(wrap)?),
                _ => None,
            };
            Ok((n, ult_frames))
        })?;

        let mut manifest = String::from("id,split,acoustic_frames,ultrasound_frames\n");
        let all = split.all();
        let split_of: BTreeMap<&str, Split> = [Split::Train, Split::Dev, Split::Test]
            .into_iter()
            .flat_map(|s| split.get(s).iter().map(move |id| (id.as_str(), s)))
            .collect();
        for (id, (n, ult)) in all.iter().zip(&counts) {
            let ult = ult.map(|u| u.to_string()).unwrap_or_default();
            let _ = writeln!(manifest, "{id},{},{n},{ult}", split_of[id.as_str()]);
        }
        write_text(&layout.manifest(), &manifest)?;
        write_text(&layout.split_file(), &split.to_text())?;
        Ok(split)
    })()
    .map_err(|e| e.in_stage("prepare"))
}

/// Resized ultrasound frames of one utterance, indexed by target frame.
/// Only distinct source frames are resized; the returned index maps each
/// target frame to a row of the matrix.
fn resampled_frames(cfg: &ExperimentConfig, id: &str, n_target: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let dir = cfg
        .ultrasound_dir
        .as_ref()
        .ok_or_else(|| Error::Config("no ultrasound directory configured".into()))?;
    let seq = UltrasoundFiles::in_dir(dir, id).read()?;
    let source = resample_to_frame_clock(&seq, cfg.frame_shift, n_target)?;
    let mut unique = source.clone();
    unique.dedup();
    let d = cfg.resize_rows * cfg.resize_cols;
    let mut rows = Array2::zeros((unique.len(), d));
    for (row, &src) in rows.outer_iter_mut().zip(&unique) {
        let img = resize_frame_u8(&seq.frames[src], cfg.resize_rows, cfg.resize_cols)?;
        row.into_shape_with_order(d)
            .map_err(|e| Error::Data(e.to_string()))?
            .assign(&Array1::from_iter(img.iter().copied()));
    }
    let mut map = Vec::with_capacity(n_target);
    let mut u = 0;
    for &src in &source {
        while unique[u] != src {
            u += 1;
        }
        map.push(u);
    }
    Ok((rows, map))
}

fn acoustic_frame_count(layout: &RunLayout, id: &str) -> Result<usize> {
    Ok(layout.target_frames(id)?.nrows())
}

/// The PCA fitting matrix: distinct resampled, resized frames of the given
/// utterances, subsampled evenly to at most `pca_max_frames` rows.
pub fn gather_pca_frames(cfg: &ExperimentConfig, ids: &[String]) -> Result<Array2<f64>> {
    let layout = RunLayout::new(&cfg.output_dir);
    let parts = parallel_map(cfg.workers, ids, |id| {
        let n = acoustic_frame_count(&layout, id)?;
        resampled_frames(cfg, id, n).map(|(rows, _)| rows)
    })?;
    let all = stack(&parts)?;
    let total = all.nrows();
    if total <= cfg.pca_max_frames {
        return Ok(all);
    }
    let keep: Vec<usize> = (0..cfg.pca_max_frames).map(|i| i * total / cfg.pca_max_frames).collect();
    Ok(all.select(Axis(0), &keep))
}

/// Fits the eigentongue basis on training utterances and projects every utterance.
pub fn pca_stage(cfg: &ExperimentConfig) -> Result<EigenTonguesModel> {
    (|| -> Result<_> {
        let layout = RunLayout::new(&cfg.output_dir);
        let split = layout.read_split()?;
        let frames = gather_pca_frames(cfg, &split.train)?;
        let model = fit_pca(frames.view(), cfg.pca_variance, Some(cfg.pca_max_components))?;
        create_dir(&layout.pca_dir().join("coeffs"))?;
        model.save(&layout.pca_model())?;

        let all = split.all();
        parallel_map(cfg.workers, &all, |id| {
            let n = acoustic_frame_count(&layout, id)?;
            let (rows, map) = resampled_frames(cfg, id, n)?;
            let coeffs = model.transform_rows(rows.view())?;
            write_matrix_f64(&layout.coefficients(id), &coeffs.select(Axis(0), &map))
        })?;

        let summary = format!(
            "fit_frames = {}\ndim = {}\ncomponents = {}\nvariance_target = {}\nvariance_retained = {}\ntotal_variance = {}\n",
            frames.nrows(),
            model.dim(),
            model.n_components(),
            model.variance_target,
            model.variance_retained,
            model.total_variance
        );
        write_text(&layout.pca_dir().join("summary.txt"), &summary)?;
        Ok(model)
    })()
    .map_err(|e| e.in_stage("pca"))
}

/// Stacked inputs and targets of a set of utterances.
fn load_rows(cfg: &ExperimentConfig, system: System, ids: &[String]) -> Result<(Array2<f64>, Array2<f64>)> {
    let layout = RunLayout::new(&cfg.output_dir);
    let pairs = parallel_map(cfg.workers, ids, |id| {
        let x = layout.inputs(system, id)?;
        let y = layout.target_frames(id)?;
        if x.nrows() != y.nrows() {
            return Err(Error::Data(format!(
                "utterance {id}: {} input frames vs {} target frames",
                x.nrows(),
                y.nrows()
            )));
        }
        Ok((x, y))
    })?;
    let (xs, ys): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok((stack(&xs)?, stack(&ys)?))
}

/// Fits normalization on training rows, trains with dev as validation.
pub fn train_stage(cfg: &ExperimentConfig, system: System) -> Result<(MlpModel, crate::dnn::TrainingHistory)> {
    (|| -> Result<_> {
        let layout = RunLayout::new(&cfg.output_dir);
        let split = layout.read_split()?;
        let (x_train, y_train) = load_rows(cfg, system, &split.train)?;
        let (x_dev, y_dev) = load_rows(cfg, system, &split.dev)?;
        let in_stats = NormalizationStats::fit(x_train.view(), NormKind::MinMax)?;
        let out_stats = NormalizationStats::fit(y_train.view(), NormKind::MeanVariance)?;
        let xt = in_stats.apply(x_train.view())?;
        let yt = out_stats.apply(y_train.view())?;
        let xd = in_stats.apply(x_dev.view())?;
        let yd = out_stats.apply(y_dev.view())?;

        let sizes = architecture(xt.ncols(), cfg.hidden_layers, cfg.hidden_units, yt.ncols());
        let model = MlpModel::init(&sizes, cfg.seed)?;
        let (model, history) = train(
            model,
            Dataset::new(xt.view(), yt.view())?,
            Dataset::new(xd.view(), yd.view())?,
            &cfg.schedule,
        )?;
        create_dir(&layout.train_dir(system))?;
        in_stats.save(&layout.input_norm(system))?;
        out_stats.save(&layout.output_norm(system))?;
        model.save(&layout.model(system))?;
        write_text(&layout.history(system), &history.to_csv())?;
        Ok((model, history))
    })()
    .map_err(|e| e.in_stage("train"))
}

/// Writes MLPG and static parameter streams for dev and test utterances.
pub fn generate_stage(cfg: &ExperimentConfig, system: System) -> Result<()> {
    (|| -> Result<_> {
        let layout = RunLayout::new(&cfg.output_dir);
        let split = layout.read_split()?;
        let in_stats = NormalizationStats::load(&layout.input_norm(system))?;
        let out_stats = NormalizationStats::load(&layout.output_norm(system))?;
        let model = MlpModel::load(&layout.model(system))?;
        for generation in GENERATIONS {
            create_dir(&layout.gen_dir(system, generation))?;
        }
        let ids: Vec<String> = split.dev.iter().chain(&split.test).cloned().collect();
        parallel_map(cfg.workers, &ids, |id| {
            let x = in_stats.apply(layout.inputs(system, id)?.view())?;
            let pred = predict_utterance(&model, x.view(), &out_stats, cfg.layout, cfg.frame_shift)?;
            let vuv = pred.vuv.view().insert_axis(Axis(1)).to_owned();
            for (generation, streams) in GENERATIONS.iter().zip([&pred.mlpg, &pred.raw]) {
                streams.write(&StreamFiles::in_dir(&layout.gen_dir(system, generation), id))?;
                crate::acoustic::write_stream_file(&layout.vuv(system, generation, id), vuv.view())?;
            }
            Ok(())
        })?;
        Ok(())
    })()
    .map_err(|e| e.in_stage("generate"))
}

/// Scores generated streams of every configured system against the references.
pub fn evaluate_stage(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    (|| -> Result<_> {
        let layout = RunLayout::new(&cfg.output_dir);
        let split = layout.read_split()?;
        let mut rows = Vec::new();
        for &system in &cfg.systems {
            for generation in GENERATIONS {
                for s in [Split::Dev, Split::Test] {
                    let scores = parallel_map(cfg.workers, split.get(s), |id| {
                        let reference = AcousticStreams::read(
                            &StreamFiles::in_dir(&cfg.acoustic_dir, id),
                            cfg.layout,
                            cfg.frame_shift,
                        )?;
                        let dir = layout.gen_dir(system, generation);
                        let predicted = AcousticStreams::read(&StreamFiles::in_dir(&dir, id), cfg.layout, cfg.frame_shift)?;
                        let vuv = crate::acoustic::read_stream_file(&layout.vuv(system, generation, id), 1)?;
                        score_utterance(id, &reference, &predicted, vuv.column(0))
                            .map_err(|e| Error::Data(format!("utterance {id}: {e}")))
                    })?;
                    write_text(
                        &layout
                            .eval_dir()
                            .join(format!("utterances_{}_{generation}_{s}.csv", system.dir_name())),
                        &utterance_scores_to_csv(system, s, generation, &scores),
                    )?;
                    rows.push(ReportRow {
                        speaker: cfg.speaker.clone(),
                        generation: generation.to_string(),
                        report: aggregate(&scores, s, system)?,
                    });
                }
            }
        }
        write_text(&layout.report(), &reports_to_csv(&rows))?;
        for generation in GENERATIONS {
            write_text(
                &layout.eval_dir().join(format!("tables_{generation}.txt")),
                &format_tables(&rows, generation),
            )?;
        }
        Ok(rows)
    })()
    .map_err(|e| e.in_stage("evaluate"))
}

/// Pairwise mean-image MSE over the whole session, heatmap and block summary.
pub fn misalign_stage(cfg: &ExperimentConfig) -> Result<(MisalignmentMatrix, BlockSummary)> {
    (|| -> Result<_> {
        let dir = cfg
            .ultrasound_dir
            .as_ref()
            .ok_or_else(|| Error::Config("misalignment analysis needs data.ultrasound_dir".into()))?;
        let layout = RunLayout::new(&cfg.output_dir);
        let split = layout.read_split()?;
        let ids = split.all();
        let images = parallel_map(cfg.workers, &ids, |id| {
            let seq = UltrasoundFiles::in_dir(dir, id).read()?;
            Ok((id.clone(), mean_image(&seq).map_err(|e| Error::Data(format!("utterance {id}: {e}")))?))
        })?;
        let matrix = build_matrix(&images)?;
        let (a, b) = (split.train.len(), split.train.len() + split.dev.len());
        let summary = block_summary(&matrix, 0..a, a..b, b..ids.len())?;
        create_dir(&layout.misalign_dir())?;
        write_text(&layout.misalign_dir().join("matrix.csv"), &matrix.to_csv())?;
        write_text(&layout.misalign_dir().join("summary.txt"), &summary.to_text())?;
        let heatmap = render_heatmap(&matrix, cfg.heatmap_cell);
        fs::write(layout.heatmap(), heatmap).map_err(|e| Error::io(layout.heatmap(), e))?;
        Ok((matrix, summary))
    })()
    .map_err(|e| e.in_stage("misalign"))
}

/// Every stage in order. Misalignment runs whenever ultrasound is configured.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let layout = RunLayout::new(&cfg.output_dir);
    write_text(&layout.resolved_config(), &cfg.to_text()).map_err(|e| e.in_stage("prepare"))?;
    prepare_stage(cfg)?;
    if cfg.needs_ultrasound() {
        pca_stage(cfg)?;
    }
    for &system in &cfg.systems {
        train_stage(cfg, system)?;
        generate_stage(cfg, system)?;
    }
    let rows = evaluate_stage(cfg)?;
    if cfg.ultrasound_dir.is_some() {
        misalign_stage(cfg)?;
    }
    Ok(rows)
}
