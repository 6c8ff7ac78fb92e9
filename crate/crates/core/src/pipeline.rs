//! End-to-end pipeline commands behind the CLI.
//!
//! Each command takes one [`PipelineConfig`], reads the artifacts it names,
//! and writes outputs only under the configured output directory, so a run
//! is reproducible from its config alone. Failures carry the stage they
//! happened in and classify into config / artifact / numeric exit codes at
//! the process boundary.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::eval::{self, EvalError, EvalReport, LabelScore};
use crate::heatmap::{HeatmapStack, StackError};
use crate::io::{self, FormatError, ManifestEntry, ReportRow};
use crate::landmarks::{LandmarkError, LandmarkSet};
use crate::message::{run_passing, ChainGraph, MessageError};
use crate::net::{
    forward,
    ops::FeatureMap,
    train::{train, TrainOptions, TrainSample},
    NetError, NetworkSpec, TrainedModel,
};
use crate::par;
use crate::plot::{render_error_chart, ErrorSeries};
use crate::rng;
use crate::sparse::{refine, RefineOptions, ShapeDictionary, SparseError};
use crate::synth::{corrupt_stack, generate_dataset, Injection};
use crate::volume::{Geometry, Volume3D, VolumeError};

/// Exit code for configuration errors: bad keys, values, or artifact wiring.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for artifact errors: missing, unreadable, or malformed files.
pub const EXIT_ARTIFACT: i32 = 3;
/// Exit code for numeric failures: training divergence, solver breakdown.
pub const EXIT_NUMERIC: i32 = 4;

/// Method names as they appear in the report's `method` column, in
/// cumulative-stage order.
pub const METHOD_NET: &str = "net-only";
pub const METHOD_MP: &str = "+mp";
pub const METHOD_FULL: &str = "+mp+sparsity";

/// Peak height of the injected false positive relative to the channel's
/// true peak. Above 1 so the corrupted channel's raw argmax actually moves.
pub const FALSE_POSITIVE_AMPLITUDE: f64 = 1.2;
/// How far along z the false positive sits from the channel's truth.
pub const FALSE_POSITIVE_OFFSET_MM: f64 = 40.0;

/// What went wrong, independent of the stage it happened in.
#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Landmarks(#[from] LandmarkError),
    #[error(transparent)]
    Stack(#[from] StackError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    /// Inconsistent wiring between config and artifacts (a config-class
    /// failure that no single artifact parser can see).
    #[error("{0}")]
    Invalid(String),
}

/// A stage-tagged pipeline failure.
#[derive(Debug, Error)]
#[error("{stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: StageError,
}

impl PipelineError {
    /// Classifies into the process exit code contract.
    pub fn exit_code(&self) -> i32 {
        match &self.source {
            StageError::Config(_) | StageError::Invalid(_) => EXIT_CONFIG,
            StageError::Format(_) => EXIT_ARTIFACT,
            StageError::Net(NetError::Diverged { .. }) => EXIT_NUMERIC,
            StageError::Sparse(SparseError::NonConvergence { .. }) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        }
    }
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> Stage<T> for Result<T, E> {
    fn stage(self, name: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage: name,
            source: e.into(),
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> StageError {
    StageError::Format(FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_dir(path: &Path) -> Result<(), StageError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), StageError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Records the exact settings a command ran with next to its outputs.
fn write_effective_config(cfg: &PipelineConfig) -> Result<PathBuf, StageError> {
    let path = cfg.out_dir.join("config.txt");
    write_text(&path, &cfg.dump())?;
    Ok(path)
}

fn case_stem(index: usize) -> String {
    format!("case_{index:04}")
}

fn output_name(input: &Path, suffix: &str) -> String {
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume");
    format!("{stem}.{suffix}")
}

/// The leading `count` manifest entries starting at `start`.
fn manifest_slice<'a>(
    entries: &'a [ManifestEntry],
    start: usize,
    count: usize,
    what: &str,
) -> Result<&'a [ManifestEntry], StageError> {
    let end = start + count;
    if entries.len() < end {
        return Err(StageError::Invalid(format!(
            "manifest holds {} cases but {what} wants cases {start}..{end}",
            entries.len()
        )));
    }
    Ok(&entries[start..end])
}

fn read_cases(entries: &[ManifestEntry]) -> Result<(Vec<Volume3D>, Vec<LandmarkSet>), StageError> {
    let mut volumes = Vec::with_capacity(entries.len());
    let mut sets = Vec::with_capacity(entries.len());
    for e in entries {
        volumes.push(io::read_volume(&e.volume)?);
        sets.push(io::read_landmarks(&e.landmarks)?);
    }
    Ok((volumes, sets))
}

fn read_sets(entries: &[ManifestEntry]) -> Result<Vec<LandmarkSet>, StageError> {
    entries
        .iter()
        .map(|e| Ok(io::read_landmarks(&e.landmarks)?))
        .collect()
}

/// One-channel network input holding the volume's voxels.
pub fn volume_features(volume: &Volume3D) -> FeatureMap {
    let mut map = FeatureMap::zeros(1, volume.dims());
    map.channel_mut(0).copy_from_slice(volume.data());
    map
}

/// Multi-channel feature map holding the stack's channels in label order.
pub fn stack_features(stack: &HeatmapStack) -> FeatureMap {
    let dims = stack.geometry().dims;
    let mut map = FeatureMap::zeros(stack.len(), dims);
    for (c, vol) in stack.channels().iter().enumerate() {
        map.channel_mut(c).copy_from_slice(vol.data());
    }
    map
}

/// Labeled heatmap stack over `geometry` holding the feature map's channels.
pub fn stack_from_features(
    labels: Vec<String>,
    geometry: Geometry,
    out: &FeatureMap,
) -> Result<HeatmapStack, StageError> {
    let mut channels = Vec::with_capacity(out.channels);
    for c in 0..out.channels {
        channels.push(Volume3D::from_data(geometry, out.channel(c).to_vec())?);
    }
    Ok(HeatmapStack::new(labels, channels)?)
}

/// Runs the network on one volume and reshapes the output into a labeled
/// heatmap stack on the volume's grid.
pub fn infer_stack(model: &TrainedModel, volume: &Volume3D) -> Result<HeatmapStack, PipelineError> {
    infer_stack_inner(model, volume).stage("infer")
}

fn infer_stack_inner(model: &TrainedModel, volume: &Volume3D) -> Result<HeatmapStack, StageError> {
    let pass = forward(&model.params, &volume_features(volume))?;
    stack_from_features(model.labels.clone(), *volume.geometry(), &pass.final_out)
}

fn refine_options(cfg: &PipelineConfig) -> RefineOptions {
    RefineOptions {
        lambda: cfg.lambda,
        constant_column: cfg.constant_column,
        orientation: cfg.orientation,
        ..RefineOptions::default()
    }
}

fn read_dictionary(cfg: &PipelineConfig) -> Result<ShapeDictionary, StageError> {
    let paths = [
        cfg.resolve(&cfg.dict_x),
        cfg.resolve(&cfg.dict_y),
        cfg.resolve(&cfg.dict_z),
    ];
    Ok(io::read_dictionary([&paths[0], &paths[1], &paths[2]])?)
}

/// What [`cmd_synth`] produced.
#[derive(Debug)]
pub struct SynthSummary {
    pub cases: usize,
    pub manifest_path: PathBuf,
}

/// Generates the synthetic dataset: `train_count + eval_count` volumes and
/// ground-truth landmark sets under `out_dir/cases`, plus one manifest
/// listing training cases first.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SynthSummary, PipelineError> {
    cfg.validate().stage("config")?;
    let geometry = cfg.geometry().stage("config")?;
    let spine = cfg.spine_model().stage("config")?;

    let cases_dir = cfg.out_dir.join("cases");
    ensure_dir(&cases_dir).stage("synth")?;
    write_effective_config(cfg).stage("synth")?;

    let total = cfg.train_count + cfg.eval_count;
    let cases = generate_dataset(&spine, &geometry, cfg.sigma_mm, cfg.noise_sigma, total);

    let mut entries = Vec::with_capacity(total);
    for (i, case) in cases.iter().enumerate() {
        let stem = case_stem(i);
        let volume_rel = PathBuf::from(format!("cases/{stem}.svh"));
        let marks_rel = PathBuf::from(format!("cases/{stem}.landmarks.csv"));
        io::write_volume(&cfg.out_dir.join(&volume_rel), &case.volume).stage("synth")?;
        io::write_landmarks(&cfg.out_dir.join(&marks_rel), &case.landmarks).stage("synth")?;
        entries.push(ManifestEntry {
            volume: volume_rel,
            landmarks: marks_rel,
        });
    }
    let manifest_path = cfg.resolve(&cfg.manifest);
    io::write_manifest(&manifest_path, &entries).stage("synth")?;
    Ok(SynthSummary {
        cases: total,
        manifest_path,
    })
}

/// What [`cmd_train`] produced.
#[derive(Debug)]
pub struct TrainSummary {
    pub model_path: PathBuf,
    pub log_path: PathBuf,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Trains the localization network on the manifest's training cases and
/// writes the model plus the per-epoch loss curve.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainSummary, PipelineError> {
    cfg.validate().stage("config")?;
    let chain = cfg.chain().stage("config")?;
    ensure_dir(&cfg.out_dir).stage("train")?;
    write_effective_config(cfg).stage("train")?;

    let entries = io::read_manifest(&cfg.resolve(&cfg.manifest)).stage("train")?;
    let train_entries = manifest_slice(&entries, 0, cfg.train_count, "training").stage("train")?;
    let (volumes, sets) = read_cases(train_entries).stage("train")?;

    let spec = NetworkSpec::new(1, chain.len(), cfg.widths.clone()).stage("config")?;
    let mut samples = Vec::with_capacity(volumes.len());
    for (volume, marks) in volumes.iter().zip(&sets) {
        marks.validate_chain(&chain).stage("train")?;
        spec.check_dims(volume.dims()).stage("train")?;
        let targets =
            HeatmapStack::gaussian_targets(volume.geometry(), marks, cfg.sigma_mm).stage("train")?;
        samples.push(TrainSample {
            input: volume_features(volume),
            target: stack_features(&targets),
        });
    }

    let opts = TrainOptions {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
    };
    let (params, curve) = train(&spec, cfg.seed, &samples, &opts).stage("train")?;
    let model =
        TrainedModel::new(chain.names().to_vec(), cfg.sigma_mm, params).stage("train")?;

    let model_path = cfg.resolve(&cfg.model);
    let log_path = cfg.out_dir.join("training_log.csv");
    io::write_model(&model_path, &model).stage("train")?;
    io::write_training_log(&log_path, &curve).stage("train")?;
    Ok(TrainSummary {
        model_path,
        log_path,
        first_loss: curve.first().copied().unwrap_or(f64::NAN),
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
    })
}

/// What [`cmd_learn_kernels`] produced.
#[derive(Debug)]
pub struct LearnSummary {
    pub kernels_path: PathBuf,
    pub dictionary_paths: [PathBuf; 3],
    pub atoms: usize,
}

/// Learns the chain's displacement kernels and the shape dictionary from the
/// manifest's training cases.
pub fn cmd_learn_kernels(cfg: &PipelineConfig) -> Result<LearnSummary, PipelineError> {
    cfg.validate().stage("config")?;
    let chain = cfg.chain().stage("config")?;
    let geometry = cfg.geometry().stage("config")?;
    ensure_dir(&cfg.out_dir).stage("learn-kernels")?;
    write_effective_config(cfg).stage("learn-kernels")?;

    let entries = io::read_manifest(&cfg.resolve(&cfg.manifest)).stage("learn-kernels")?;
    let train_entries =
        manifest_slice(&entries, 0, cfg.train_count, "kernel learning").stage("learn-kernels")?;
    let sets = read_sets(train_entries).stage("learn-kernels")?;
    for marks in &sets {
        marks.validate_chain(&chain).stage("learn-kernels")?;
    }

    let graph = ChainGraph::learn(
        chain.names(),
        &sets,
        geometry.spacing_mm,
        cfg.kernel_half_width,
        cfg.kernel_smoothing_sigma,
        cfg.alpha,
        cfg.iterations,
    )
    .stage("learn-kernels")?;
    let kernels_path = cfg.resolve(&cfg.kernels);
    io::write_kernels(&kernels_path, &graph).stage("learn-kernels")?;

    let dict = ShapeDictionary::from_training(chain.names(), &sets).stage("learn-kernels")?;
    let paths = [
        cfg.resolve(&cfg.dict_x),
        cfg.resolve(&cfg.dict_y),
        cfg.resolve(&cfg.dict_z),
    ];
    io::write_dictionary([&paths[0], &paths[1], &paths[2]], &dict).stage("learn-kernels")?;
    Ok(LearnSummary {
        kernels_path,
        dictionary_paths: paths,
        atoms: dict.atoms(),
    })
}

/// What [`cmd_infer`] produced.
#[derive(Debug)]
pub struct InferSummary {
    pub stack: HeatmapStack,
    pub landmarks: LandmarkSet,
    pub landmarks_path: PathBuf,
}

/// Runs the trained network on one volume and writes the raw (argmax,
/// presence-thresholded) landmark predictions.
pub fn cmd_infer(cfg: &PipelineConfig, volume_path: &Path) -> Result<InferSummary, PipelineError> {
    cfg.validate().stage("config")?;
    ensure_dir(&cfg.out_dir).stage("infer")?;
    let model = io::read_model(&cfg.resolve(&cfg.model)).stage("infer")?;
    let volume = io::read_volume(volume_path).stage("infer")?;
    let stack = infer_stack(&model, &volume)?;
    let landmarks = eval::extract_landmarks(&stack, cfg.threshold);
    let landmarks_path = cfg.out_dir.join(output_name(volume_path, "pred.csv"));
    io::write_landmarks(&landmarks_path, &landmarks).stage("infer")?;
    Ok(InferSummary {
        stack,
        landmarks,
        landmarks_path,
    })
}

/// What [`cmd_refine`] produced.
#[derive(Debug)]
pub struct RefineSummary {
    pub landmarks: LandmarkSet,
    pub subspace: Vec<usize>,
    pub extrapolated: Vec<String>,
    pub lambda: f64,
    pub refined_path: PathBuf,
}

/// Refines one predicted landmark file against the learned shape dictionary.
pub fn cmd_refine(
    cfg: &PipelineConfig,
    landmarks_path: &Path,
) -> Result<RefineSummary, PipelineError> {
    cfg.validate().stage("config")?;
    ensure_dir(&cfg.out_dir).stage("refine")?;
    let dict = read_dictionary(cfg).stage("refine")?;
    let pred = io::read_landmarks(landmarks_path).stage("refine")?;
    let outcome = refine(&pred, &dict, &refine_options(cfg)).stage("refine")?;
    let refined_path = cfg.out_dir.join(output_name(landmarks_path, "refined.csv"));
    io::write_landmarks(&refined_path, &outcome.landmarks).stage("refine")?;
    Ok(RefineSummary {
        landmarks: outcome.landmarks,
        subspace: outcome.subspace,
        extrapolated: outcome.extrapolated,
        lambda: outcome.lambda,
        refined_path,
    })
}

/// The corruption applied to one evaluation case's network output: one
/// interior channel dropped and one remote false positive injected.
#[derive(Debug, Clone, Default)]
pub struct CorruptionPlan {
    pub drop: Vec<String>,
    pub inject: Vec<Injection>,
}

/// Draws the standard per-case corruption from the `CORRUPT` stream.
///
/// The dropped channel is uniform over interior chain positions present in
/// the ground truth; the false positive lands on a different present channel
/// at [`FALSE_POSITIVE_OFFSET_MM`] along z from its truth (toward the volume
/// center, clamped one voxel inside the grid) with relative amplitude
/// [`FALSE_POSITIVE_AMPLITUDE`].
pub fn plan_corruption(
    gt: &LandmarkSet,
    geometry: &Geometry,
    base_seed: u64,
    case_index: u64,
) -> CorruptionPlan {
    use rand::Rng;
    let mut r = rng::stream(base_seed, rng::tag::CORRUPT, case_index);
    let m = gt.len();
    let present: Vec<bool> = gt.iter().map(|mark| mark.present).collect();
    let mut plan = CorruptionPlan::default();

    let interior: Vec<usize> = (1..m.saturating_sub(1)).filter(|&i| present[i]).collect();
    let Some(&drop_idx) = interior.get(r.random_range(0..interior.len().max(1))) else {
        return plan;
    };
    plan.drop.push(gt.entries()[drop_idx].label.clone());

    let pool: Vec<usize> = (0..m).filter(|&i| present[i] && i != drop_idx).collect();
    let Some(&fp_idx) = pool.get(r.random_range(0..pool.len().max(1))) else {
        return plan;
    };
    let mark = &gt.entries()[fp_idx];
    let z_lo = geometry.voxel_to_world([0, 0, 0])[2];
    let z_hi = geometry.voxel_to_world([0, 0, geometry.dims[2] - 1])[2];
    let offset = if mark.position_mm[2] < 0.5 * (z_lo + z_hi) {
        FALSE_POSITIVE_OFFSET_MM
    } else {
        -FALSE_POSITIVE_OFFSET_MM
    };
    let z = (mark.position_mm[2] + offset).clamp(
        z_lo + geometry.spacing_mm[2],
        z_hi - geometry.spacing_mm[2],
    );
    plan.inject.push(Injection {
        label: mark.label.clone(),
        position_mm: [mark.position_mm[0], mark.position_mm[1], z],
        amplitude: FALSE_POSITIVE_AMPLITUDE,
    });
    plan
}

/// What [`cmd_eval`] produced: one region report per ablation method, in
/// [`METHOD_NET`], [`METHOD_MP`], [`METHOD_FULL`] order.
#[derive(Debug)]
pub struct EvalSummary {
    pub methods: Vec<(String, EvalReport)>,
    pub report_path: PathBuf,
    pub chart_path: PathBuf,
}

/// Evaluates the ablation ladder on the manifest's held-out cases.
///
/// Every case's network output is corrupted by [`plan_corruption`], then
/// scored three ways: raw argmax extraction, after message passing, and
/// after message passing plus shape refinement. Writes the region/method
/// report and a per-label before/after-refinement error chart.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalSummary, PipelineError> {
    cfg.validate().stage("config")?;
    let chain = cfg.chain().stage("config")?;
    ensure_dir(&cfg.out_dir).stage("eval")?;
    write_effective_config(cfg).stage("eval")?;

    let model = io::read_model(&cfg.resolve(&cfg.model)).stage("eval")?;
    let graph = io::read_kernels(&cfg.resolve(&cfg.kernels)).stage("eval")?;
    let dict = read_dictionary(cfg).stage("eval")?;
    for (what, labels) in [
        ("model", model.labels.as_slice()),
        ("kernel bundle", graph.labels()),
        ("dictionary", dict.labels()),
    ] {
        if labels != chain.names() {
            return Err(StageError::Invalid(format!(
                "{what} labels {labels:?} do not match the configured chain"
            )))
            .stage("eval");
        }
    }

    let entries = io::read_manifest(&cfg.resolve(&cfg.manifest)).stage("eval")?;
    let eval_entries =
        manifest_slice(&entries, cfg.train_count, cfg.eval_count, "evaluation").stage("eval")?;
    let (volumes, gts) = read_cases(eval_entries).stage("eval")?;
    for marks in &gts {
        marks.validate_chain(&chain).stage("eval")?;
    }

    let opts = refine_options(cfg);
    let per_case = par::map_indexed(volumes.len(), |j| -> Result<_, StageError> {
        let stack = infer_stack_inner(&model, &volumes[j])?;
        let plan = plan_corruption(
            &gts[j],
            volumes[j].geometry(),
            cfg.seed,
            (cfg.train_count + j) as u64,
        );
        let corrupted = corrupt_stack(&stack, &plan.drop, &plan.inject, cfg.sigma_mm);
        let net_marks = eval::extract_landmarks(&corrupted, cfg.threshold);
        let (passed, _) = run_passing(&corrupted, &graph)?;
        let mp_marks = eval::extract_landmarks(&passed, cfg.mp_threshold);
        let full_marks = refine(&mp_marks, &dict, &opts)?.landmarks;
        Ok((net_marks, mp_marks, full_marks))
    });
    let mut net_preds = Vec::with_capacity(volumes.len());
    let mut mp_preds = Vec::with_capacity(volumes.len());
    let mut full_preds = Vec::with_capacity(volumes.len());
    for r in per_case {
        let (net_marks, mp_marks, full_marks) = r.stage("eval")?;
        net_preds.push(net_marks);
        mp_preds.push(mp_marks);
        full_preds.push(full_marks);
    }

    let mut rows = Vec::new();
    let mut methods = Vec::new();
    let mut before_mm = Vec::new();
    let mut after_mm = Vec::new();
    for (name, preds) in [
        (METHOD_NET, &net_preds),
        (METHOD_MP, &mp_preds),
        (METHOD_FULL, &full_preds),
    ] {
        let scores = eval::score_cases(preds, &gts, cfg.id_radius_mm).stage("eval")?;
        if name == METHOD_MP {
            before_mm = max_label_errors(chain.len(), &scores);
        }
        if name == METHOD_FULL {
            after_mm = max_label_errors(chain.len(), &scores);
        }
        let report = eval::region_report(scores);
        for (region, stats) in &report.regions {
            rows.push(ReportRow {
                region: region.clone(),
                method: name.to_string(),
                mean_mm: stats.as_ref().and_then(|s| s.mean_mm),
                std_mm: stats.as_ref().and_then(|s| s.std_mm),
                id_rate: stats.as_ref().and_then(|s| s.id_rate),
            });
        }
        methods.push((name.to_string(), report));
    }

    let report_path = cfg.out_dir.join("report.csv");
    io::write_report(&report_path, &rows).stage("eval")?;
    let chart_path = cfg.out_dir.join("report.svg");
    let chart = render_error_chart(&ErrorSeries {
        labels: chain.names(),
        before_mm: &before_mm,
        after_mm: &after_mm,
    });
    write_text(&chart_path, &chart).stage("eval")?;
    Ok(EvalSummary {
        methods,
        report_path,
        chart_path,
    })
}

/// Worst localization error per chain position across cases; positions with
/// no measurable error anywhere report 0.
fn max_label_errors(chain_len: usize, scores: &[Vec<LabelScore>]) -> Vec<f64> {
    let mut worst = vec![0.0f64; chain_len];
    for case in scores {
        assert_eq!(case.len(), chain_len, "one score per chain position");
        for (slot, score) in worst.iter_mut().zip(case) {
            if let Some(err) = score.error_mm {
                *slot = slot.max(err);
            }
        }
    }
    worst
}
