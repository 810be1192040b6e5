//! Run configuration, ablation variants and the end-to-end commands
//! (generate, train, sample, evaluate, ablate) as library calls.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{ControlMode, KalmanDit, ModelConfig, ModelError, ParamStore};
use crate::eval::{error_curves_svg, evaluate_video, Aggregate, EvalError, EvalReport};
use crate::flow::{draw_batch, sample_example, train_step, FlowConfig, FlowError, StepRecord, TrainingExample};
use crate::io::{self, Checkpoint, IoError, Manifest, ManifestEntry};
use crate::latentcodec::{decode, CodecError, Video};
use crate::optim::Adam;
use crate::rng::derive_seed;
use crate::scenegen::{make_scene, SceneError, SceneSample, SceneSpec};

pub const DEFAULT_SAMPLE_STEPS: usize = 50;
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Numerical(_) => 3,
        }
    }
}

impl From<IoError> for PipelineError {
    fn from(e: IoError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<SceneError> for PipelineError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Spec(_) => PipelineError::Usage(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => PipelineError::Usage(e.to_string()),
            ModelError::NonFinite(_) => PipelineError::Numerical(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<FlowError> for PipelineError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::NonFiniteLoss { .. } | FlowError::NonFiniteVelocity(_) => PipelineError::Numerical(e.to_string()),
            FlowError::Config(_) => PipelineError::Usage(e.to_string()),
            FlowError::Model(m) => m.into(),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<CodecError> for PipelineError {
    fn from(e: CodecError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

/// Ablation rows: the full model and variants (a)–(h).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Full,
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
}

impl Variant {
    pub const ALL: [Variant; 9] =
        [Variant::Full, Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F, Variant::G, Variant::H];

    pub fn describe(self) -> &'static str {
        match self {
            Variant::Full => "full model",
            Variant::A => "w/o noise init",
            Variant::B => "w/o confidence",
            Variant::C => "w/o update",
            Variant::D => "w/o update and noise init",
            Variant::E => "w/o gradient loss",
            Variant::F => "camera pose only",
            Variant::G => "camera pose + projection",
            Variant::H => "w/o last-frame conditioning",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Variant::Full => {}
            Variant::A => f.noise_init = false,
            Variant::B => f.confidence_weighting = false,
            Variant::C => f.update = false,
            Variant::D => {
                f.update = false;
                f.noise_init = false;
            }
            Variant::E => f.grad_loss = false,
            Variant::F => f.control = ControlMode::CameraOnly,
            Variant::G => f.control = ControlMode::Additive,
            Variant::H => f.last_frame_conditioning = false,
        }
        f
    }

    /// Writes this variant's flags into the configs; untouched fields keep
    /// their values.
    pub fn apply(self, model: &mut ModelConfig, flow: &mut FlowConfig) {
        let f = self.flags();
        let d = AblationFlags::default();
        if f.noise_init != d.noise_init {
            flow.lambda1 = 0.0;
        }
        if f.confidence_weighting != d.confidence_weighting {
            flow.confidence_weighting = false;
        }
        if f.grad_loss != d.grad_loss {
            flow.lambda_grad = 0.0;
        }
        if f.update != d.update {
            model.update = false;
        }
        if f.control != d.control {
            model.control = f.control;
        }
        if f.last_frame_conditioning != d.last_frame_conditioning {
            model.last_frame_conditioning = false;
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
            Variant::F => "f",
            Variant::G => "g",
            Variant::H => "h",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| PipelineError::Usage(format!("unknown variant {s:?}, expected one of full,a,b,c,d,e,f,g,h")))
    }
}

/// Which components a variant keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub noise_init: bool,
    pub confidence_weighting: bool,
    pub update: bool,
    pub grad_loss: bool,
    pub control: ControlMode,
    pub last_frame_conditioning: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            noise_init: true,
            confidence_weighting: true,
            update: true,
            grad_loss: true,
            control: ControlMode::CrossAttention,
            last_frame_conditioning: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data_dir: "data".into(), checkpoint: "run/checkpoint.safetensors".into(), report_dir: "run/report".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub variant: Variant,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(s).map_err(|e| PipelineError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let s = fs::read_to_string(path).map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    /// Model and flow settings with the variant applied and the latent
    /// geometry taken from the given frames.
    pub fn resolve(&self, frames: usize, height: usize, width: usize) -> Result<(ModelConfig, FlowConfig), PipelineError> {
        let geometry = ModelConfig::for_video(frames, height, width, self.model.patch_size);
        let mut model = ModelConfig {
            frames: geometry.frames,
            latent_channels: geometry.latent_channels,
            latent_height: geometry.latent_height,
            latent_width: geometry.latent_width,
            ..self.model.clone()
        };
        let mut flow = self.flow.clone();
        self.variant.apply(&mut model, &mut flow);
        model.validate()?;
        flow.validate()?;
        Ok((model, flow))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), PipelineError> {
        io::write_json(&dir.join(RESOLVED_CONFIG), self)?;
        Ok(())
    }
}

fn progress(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

pub fn scene_name(i: usize) -> String {
    format!("scene_{i:04}")
}

/// Writes `num` scenes and a manifest into `out`. Scene `i` uses seed
/// `derive_seed(base.seed, "scene/i")`.
pub fn gen_scenes(out: &Path, base: &SceneSpec, num: usize, force: bool, quiet: bool) -> Result<Manifest, PipelineError> {
    base.validate()?;
    let manifest_path = out.join(io::MANIFEST);
    if manifest_path.exists() {
        if !force {
            return Err(PipelineError::Data(format!("{} already holds a dataset (use --force to overwrite)", out.display())));
        }
        let old: Result<Manifest, _> = io::read_json(&manifest_path);
        if let Ok(old) = old {
            for e in old.scenes {
                let _ = fs::remove_dir_all(out.join(e.name));
            }
        }
        let _ = fs::remove_file(&manifest_path);
    }
    let mut scenes = Vec::with_capacity(num);
    for i in 0..num {
        let spec = SceneSpec { seed: derive_seed(base.seed, &format!("scene/{i}")), ..base.clone() };
        let scene = make_scene(&spec)?;
        let name = scene_name(i);
        io::write_scene(&out.join(&name), &scene)?;
        progress(quiet, format!("wrote {name}"));
        scenes.push(ManifestEntry { name, seed: spec.seed, sigma: spec.depth_noise_sigma, noiseless: spec.depth_noise_sigma == 0.0 });
    }
    let manifest = Manifest { base: base.clone(), scenes };
    io::write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(data_dir: &Path) -> Result<Vec<(String, SceneSample)>, PipelineError> {
    let manifest = io::read_manifest(data_dir)?;
    manifest
        .scenes
        .into_iter()
        .map(|e| Ok((e.name.clone(), io::read_scene(&data_dir.join(&e.name))?)))
        .collect()
}

fn dataset_geometry(scenes: &[(String, SceneSample)]) -> Result<(usize, usize, usize), PipelineError> {
    let (_, first) = scenes.first().ok_or_else(|| PipelineError::Data("dataset has no scenes".into()))?;
    let g = (first.frames.frames, first.frames.height, first.frames.width);
    for (name, s) in scenes {
        if (s.frames.frames, s.frames.height, s.frames.width) != g {
            return Err(PipelineError::Data(format!("{name}: frame geometry differs from the rest of the dataset")));
        }
    }
    Ok(g)
}

pub fn examples_of(scenes: &[(String, SceneSample)], patch: usize) -> Result<Vec<TrainingExample>, PipelineError> {
    scenes.iter().map(|(_, s)| Ok(TrainingExample::from_scene(s, patch)?)).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: u64,
    /// 0 saves only at the end.
    pub save_every: u64,
    pub resume: bool,
    pub quiet: bool,
}

/// In-memory training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: Adam,
}

impl TrainState {
    pub fn fresh(model: &KalmanDit, flow: &FlowConfig) -> Self {
        TrainState { step: 0, params: model.init_params(flow.seed), adam: Adam::new(flow.learning_rate) }
    }
}

/// Runs steps `state.step..until`; `on_step` sees every record and the state
/// after it.
pub fn train_loop(
    model: &KalmanDit,
    flow: &FlowConfig,
    examples: &[TrainingExample],
    state: &mut TrainState,
    until: u64,
    mut on_step: impl FnMut(&StepRecord, &TrainState) -> Result<(), PipelineError>,
) -> Result<(), PipelineError> {
    if examples.is_empty() && until > state.step {
        return Err(PipelineError::Data("no training examples".into()));
    }
    while state.step < until {
        let items = draw_batch(examples, flow, state.step);
        let rec = train_step(model, &mut state.params, &mut state.adam, &items, flow, state.step)?;
        if !state.params.all_finite() {
            return Err(PipelineError::Numerical(format!("parameters became non-finite at step {}", state.step)));
        }
        state.step += 1;
        on_step(&rec, state)?;
    }
    Ok(())
}

/// Trains on the dataset at `cfg.paths.data_dir`, writing the checkpoint,
/// a JSONL log and the resolved config next to it.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainState, PipelineError> {
    let scenes = load_dataset(&cfg.paths.data_dir)?;
    let (t, h, w) = dataset_geometry(&scenes)?;
    let (model_cfg, flow) = cfg.resolve(t, h, w)?;
    let model = KalmanDit::new(model_cfg.clone())?;
    let examples = examples_of(&scenes, model_cfg.patch_size)?;
    let ck_path = &cfg.paths.checkpoint;
    let out_dir = ck_path.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(&out_dir).map_err(|e| PipelineError::Data(format!("{}: {e}", out_dir.display())))?;
    cfg.write_resolved(&out_dir)?;
    let resumed = opts.resume && ck_path.exists();
    let mut state = if resumed {
        let ck = Checkpoint::load(ck_path)?;
        check_compatible(&ck, &model_cfg, cfg.variant)?;
        ck.params.check(&model.param_specs())?;
        progress(opts.quiet, format!("resuming from step {}", ck.step));
        TrainState { step: ck.step, params: ck.params, adam: ck.adam }
    } else {
        TrainState::fresh(&model, &flow)
    };
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resumed)
        .write(true)
        .truncate(!resumed)
        .open(&log_path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", log_path.display())))?;
    let save = |state: &TrainState| -> Result<(), PipelineError> {
        let ck = Checkpoint {
            model: model_cfg.clone(),
            flow: flow.clone(),
            variant: cfg.variant,
            step: state.step,
            params: state.params.clone(),
            adam: state.adam.clone(),
        };
        ck.save(ck_path)?;
        Ok(())
    };
    if !resumed {
        save(&state)?;
    }
    train_loop(&model, &flow, &examples, &mut state, opts.steps, |rec, st| {
        let line = serde_json::to_string(rec).expect("step record");
        writeln!(log, "{line}").map_err(|e| PipelineError::Data(format!("{}: {e}", log_path.display())))?;
        if rec.step % 100 == 0 {
            progress(opts.quiet, format!("step {} rf {:.5} grad {:.5}", rec.step, rec.rf_loss, rec.grad_loss));
        }
        if opts.save_every > 0 && st.step % opts.save_every == 0 {
            save(st)?;
        }
        Ok(())
    })?;
    save(&state)?;
    Ok(state)
}

fn check_compatible(ck: &Checkpoint, model: &ModelConfig, variant: Variant) -> Result<(), PipelineError> {
    if &ck.model != model || ck.variant != variant {
        return Err(PipelineError::Usage(format!(
            "checkpoint was trained with variant {} and a different model config than requested (variant {variant})",
            ck.variant
        )));
    }
    Ok(())
}

/// Samples every dataset scene with the trained model.
pub fn sample_scenes(
    model: &KalmanDit,
    params: &ParamStore<f32>,
    flow: &FlowConfig,
    scenes: &[(String, SceneSample)],
    steps: usize,
    seed: u64,
) -> Result<Vec<(String, Video)>, PipelineError> {
    let patch = model.config().patch_size;
    scenes
        .iter()
        .map(|(name, scene)| {
            let ex = TrainingExample::from_scene(scene, patch)?;
            let z = sample_example(model, params, &ex, flow, steps, derive_seed(seed, &format!("sample/{name}")))?;
            Ok((name.clone(), decode(&z)?.clamped()))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub quiet: bool,
}

/// Writes `out/<scene>/frames/*.png` and `out/<scene>/latent.safetensors`.
pub fn sample(cfg: &RunConfig, opts: &SampleOptions) -> Result<Vec<String>, PipelineError> {
    if opts.steps == 0 {
        return Err(PipelineError::Usage("--steps must be at least 1".into()));
    }
    let scenes = load_dataset(&cfg.paths.data_dir)?;
    let (t, h, w) = dataset_geometry(&scenes)?;
    let (model_cfg, flow) = cfg.resolve(t, h, w)?;
    let ck = Checkpoint::load(&cfg.paths.checkpoint)?;
    check_compatible(&ck, &model_cfg, cfg.variant)?;
    let model = KalmanDit::new(model_cfg)?;
    ck.params.check(&model.param_specs())?;
    cfg.write_resolved(&opts.out)?;
    let mut names = Vec::new();
    for (name, scene) in &scenes {
        let ex = TrainingExample::from_scene(scene, model.config().patch_size)?;
        let z = sample_example(&model, &ck.params, &ex, &flow, opts.steps, derive_seed(opts.seed, &format!("sample/{name}")))?;
        let dir = opts.out.join(name);
        io::write_latent(&dir.join("latent.safetensors"), &z)?;
        io::write_video(&dir.join("frames"), &decode(&z)?.clamped())?;
        progress(opts.quiet, format!("sampled {name}"));
        names.push(name.clone());
    }
    Ok(names)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFailure {
    pub scene: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub scenes: Vec<EvalReport>,
    pub failures: Vec<SceneFailure>,
    /// Absent when no scene could be evaluated.
    pub aggregate: Option<Aggregate>,
}

impl DatasetReport {
    pub fn of(scenes: Vec<EvalReport>, failures: Vec<SceneFailure>) -> Self {
        let aggregate = (!scenes.is_empty()).then(|| Aggregate::of(&scenes));
        DatasetReport { scenes, failures, aggregate }
    }
}

pub fn evaluate_videos(videos: &[(String, Video)], scenes: &[(String, SceneSample)]) -> DatasetReport {
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (name, scene) in scenes {
        match videos.iter().find(|(n, _)| n == name) {
            None => failures.push(SceneFailure { scene: name.clone(), error: "no generated video".into() }),
            Some((_, v)) => match evaluate_video(name, v, scene) {
                Ok(r) => reports.push(r),
                Err(e) => failures.push(SceneFailure { scene: name.clone(), error: e.to_string() }),
            },
        }
    }
    DatasetReport::of(reports, failures)
}

/// Evaluates `generated/<scene>/frames` against the dataset; writes
/// `report.json` and `pose_errors.svg` into `report_dir`.
pub fn evaluate(data_dir: &Path, generated: &Path, report_dir: &Path) -> Result<DatasetReport, PipelineError> {
    let scenes = load_dataset(data_dir)?;
    let mut videos = Vec::new();
    let mut failures = Vec::new();
    for (name, scene) in &scenes {
        match io::read_video(&generated.join(name).join("frames"), scene.frames.frames) {
            Ok(v) => videos.push((name.clone(), v)),
            Err(e) => failures.push(SceneFailure { scene: name.clone(), error: e.to_string() }),
        }
    }
    let mut report = evaluate_videos(&videos, &scenes);
    report.failures.retain(|f| !failures.iter().any(|g| g.scene == f.scene));
    report.failures.extend(failures);
    report.failures.sort_by(|a, b| a.scene.cmp(&b.scene));
    io::write_json(&report_dir.join("report.json"), &report)?;
    io::write_bytes(&report_dir.join("pose_errors.svg"), error_curves_svg(&report.scenes).as_bytes())?;
    Ok(report)
}

/// One variant trained and evaluated with one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_rf_loss: f64,
    pub aggregate: Aggregate,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Stat {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Stat { mean, std: var.sqrt() }
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub flags: AblationFlags,
    pub seeds: Vec<SeedResult>,
    pub psnr: Option<Stat>,
    pub ssim: Option<Stat>,
    pub e_t: Option<Stat>,
    pub e_r: Option<Stat>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub variants: Vec<Variant>,
    pub seeds: usize,
    pub steps: u64,
    pub sample_steps: usize,
    pub quiet: bool,
}

/// Per-run seed: the base flow seed for run 0, derived seeds after that.
pub fn run_seed(base: u64, k: usize) -> u64 {
    if k == 0 {
        base
    } else {
        derive_seed(base, &format!("run/{k}"))
    }
}

/// Trains one variant from scratch on `train` and evaluates it on `test`.
pub fn run_variant(
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    steps: u64,
    sample_steps: usize,
    train: &[(String, SceneSample)],
    test: &[(String, SceneSample)],
) -> Result<(SeedResult, DatasetReport), PipelineError> {
    let (t, h, w) = dataset_geometry(train)?;
    let run = RunConfig { variant, flow: FlowConfig { seed, ..cfg.flow.clone() }, ..cfg.clone() };
    let (model_cfg, flow) = run.resolve(t, h, w)?;
    let model = KalmanDit::new(model_cfg.clone())?;
    let examples = examples_of(train, model_cfg.patch_size)?;
    let mut state = TrainState::fresh(&model, &flow);
    let mut last = f64::NAN;
    train_loop(&model, &flow, &examples, &mut state, steps, |rec, _| {
        last = rec.rf_loss;
        Ok(())
    })?;
    let videos = sample_scenes(&model, &state.params, &flow, test, sample_steps, seed)?;
    let report = evaluate_videos(&videos, test);
    let aggregate = report
        .aggregate
        .clone()
        .ok_or_else(|| PipelineError::Data(format!("variant {variant}: no scene could be evaluated")))?;
    Ok((SeedResult { seed, final_rf_loss: last, aggregate }, report))
}

pub fn ablation_row(variant: Variant, results: Result<Vec<SeedResult>, PipelineError>) -> AblationRow {
    match results {
        Err(e) => AblationRow { variant, flags: variant.flags(), seeds: vec![], psnr: None, ssim: None, e_t: None, e_r: None, error: Some(e.to_string()) },
        Ok(seeds) => {
            let stat = |f: fn(&Aggregate) -> f64| Some(Stat::of(&seeds.iter().map(|s| f(&s.aggregate)).collect::<Vec<_>>()));
            AblationRow {
                variant,
                flags: variant.flags(),
                psnr: stat(|a| a.psnr_intermediate),
                ssim: stat(|a| a.ssim_intermediate),
                e_t: stat(|a| a.e_t),
                e_r: stat(|a| a.e_r),
                seeds,
                error: None,
            }
        }
    }
}

/// Trains and evaluates each variant over `seeds` runs on the dataset.
/// A failing variant yields a row with `error` set.
pub fn ablate(cfg: &RunConfig, opts: &AblateOptions) -> Result<Vec<AblationRow>, PipelineError> {
    let scenes = load_dataset(&cfg.paths.data_dir)?;
    dataset_geometry(&scenes)?;
    let mut rows = Vec::new();
    for &variant in &opts.variants {
        let results: Result<Vec<SeedResult>, PipelineError> = (0..opts.seeds)
            .map(|k| {
                let seed = run_seed(cfg.flow.seed, k);
                let (r, _) = run_variant(cfg, variant, seed, opts.steps, opts.sample_steps, &scenes, &scenes)?;
                progress(opts.quiet, format!("variant {variant} seed {seed}: E_t {:.4} E_r {:.4}", r.aggregate.e_t, r.aggregate.e_r));
                Ok(r)
            })
            .collect();
        rows.push(ablation_row(variant, results));
    }
    fs::create_dir_all(&cfg.paths.report_dir).map_err(|e| PipelineError::Data(format!("{}: {e}", cfg.paths.report_dir.display())))?;
    cfg.write_resolved(&cfg.paths.report_dir)?;
    io::write_json(&cfg.paths.report_dir.join("ablation.json"), &rows)?;
    io::write_bytes(&cfg.paths.report_dir.join("ablation.md"), ablation_table(&rows).as_bytes())?;
    Ok(rows)
}

/// Markdown table, one row per variant.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | description | PSNR | SSIM | E_t | E_r |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let cell = |x: &Option<Stat>| x.map(|v| v.to_string()).unwrap_or_else(|| "failed".into());
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.variant,
            r.variant.describe(),
            cell(&r.psnr),
            cell(&r.ssim),
            cell(&r.e_t),
            cell(&r.e_r)
        ));
    }
    s
}
