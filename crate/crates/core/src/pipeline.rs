//! End-to-end reconstruction runs and the camera-count × map-mode ablation.
//!
//! Each stage is exposed on its own so that a run driven through files, one
//! stage at a time, reproduces an in-memory run exactly: probability maps are
//! rounded to their 16-bit file precision and the voxel grid to `f32` at the
//! stage boundaries in both cases.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, AggregateConfig, GridSpec, OutOfFramePolicy, VoxelGrid};
use crate::cameras::{load_rig, make_rig, save_rig, Camera, RigKind, RigLayout};
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::metrics::{evaluate, EvalReport};
use crate::particleflow::{simulate, FlowConfig, RawTraceGraph};
use crate::plantgen::{generate_plant, PlantGenConfig, PlantModel};
use crate::probmap::{
    load_prob_map, render_masks, save_mask, save_prob_map, simulate_prob_map, InferenceSimConfig, ProbMap2D,
    RenderedMasks,
};
use crate::refine::{refine, RefineConfig};
use crate::rng::derive_seed;

const SIM_STREAM: u64 = 0x51;
const FLOW_STREAM: u64 = 0xF1;

/// Source of the per-view probability maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    /// Ground-truth unoccluded branch masks.
    VisibleBranch,
    /// Ground-truth silhouettes of branches and leaves together.
    WholePlant,
    /// One simulated inference sample per view.
    I2iSingleSample,
    /// Mean of `n_samples` simulated inference samples per view.
    I2iBayesian,
    /// Maps read from files.
    External,
}

impl MapMode {
    pub const ALL: [MapMode; 5] = [
        MapMode::VisibleBranch,
        MapMode::WholePlant,
        MapMode::I2iSingleSample,
        MapMode::I2iBayesian,
        MapMode::External,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MapMode::VisibleBranch => "visible_branch",
            MapMode::WholePlant => "whole_plant",
            MapMode::I2iSingleSample => "i2i_single_sample",
            MapMode::I2iBayesian => "i2i_bayesian",
            MapMode::External => "external",
        }
    }
}

impl fmt::Display for MapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MapMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown map mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantSource {
    /// Generate a plant; the seed defaults to the run seed.
    Generate {
        #[serde(default)]
        config: PlantGenConfig,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Load a plant document.
    File(PathBuf),
}

impl Default for PlantSource {
    fn default() -> Self {
        PlantSource::Generate {
            config: PlantGenConfig::default(),
            seed: None,
        }
    }
}

/// Rig settings; unset fields are derived from the camera count and the plant's bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSettings {
    pub camera_count: usize,
    pub kind: Option<RigKind>,
    pub radius: Option<f64>,
    pub look_at: Option<[f64; 3]>,
    pub width: u32,
    pub height: u32,
    pub hfov: f64,
    /// Load the cameras from a rig document instead.
    pub file: Option<PathBuf>,
}

impl Default for RigSettings {
    fn default() -> Self {
        RigSettings {
            camera_count: 72,
            kind: None,
            radius: None,
            look_at: None,
            width: 256,
            height: 256,
            hfov: 50.0,
            file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSettings {
    /// Voxels along each axis of the cubic grid.
    pub resolution: usize,
    /// Padding around the plant's bounding box, as a fraction of its longest side.
    pub padding: f64,
    pub eps_floor: f64,
    pub out_of_frame: OutOfFramePolicy,
    /// Explicit placement; overrides `resolution` and `padding`.
    pub grid: Option<GridSpec>,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            resolution: 128,
            padding: 0.1,
            eps_floor: 1e-4,
            out_of_frame: OutOfFramePolicy::Floor,
            grid: None,
        }
    }
}

/// Particle-flow settings with lengths in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowSettings {
    pub particle_count: usize,
    pub neighborhood_radius: f64,
    pub lambda_r: f64,
    pub step_length: f64,
    /// Defaults to four times the largest grid dimension.
    pub max_steps: Option<usize>,
    pub root_capture_radius: f64,
    pub merge_radius: f64,
    pub min_weight_to_live: f64,
    pub root_threshold: f64,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            particle_count: 10_000,
            neighborhood_radius: 2.5,
            lambda_r: 0.1,
            step_length: 1.0,
            max_steps: None,
            root_capture_radius: 2.0,
            merge_radius: 1.5,
            min_weight_to_live: 0.05,
            root_threshold: 0.5,
        }
    }
}

impl FlowSettings {
    pub fn to_config(&self, grid: &VoxelGrid) -> FlowConfig {
        let s = grid.spacing;
        FlowConfig {
            particle_count: self.particle_count,
            neighborhood_radius: self.neighborhood_radius * s,
            lambda_r: self.lambda_r,
            step_length: self.step_length * s,
            max_steps: self
                .max_steps
                .unwrap_or(4 * grid.dims.iter().copied().max().unwrap_or(1)),
            root_capture_radius: self.root_capture_radius * s,
            merge_radius: self.merge_radius * s,
            min_weight_to_live: self.min_weight_to_live,
            root_threshold: self.root_threshold,
        }
    }
}

/// Refinement settings with lengths in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineSettings {
    pub iterations: usize,
    pub unify_radius: f64,
    pub prune_threshold: f64,
    pub min_branch_length: f64,
    pub ridge_search_radius: f64,
}

impl Default for RefineSettings {
    fn default() -> Self {
        RefineSettings {
            iterations: 3,
            unify_radius: 2.5,
            prune_threshold: 0.5,
            min_branch_length: 6.0,
            ridge_search_radius: 1.0,
        }
    }
}

impl RefineSettings {
    pub fn to_config(&self, grid: &VoxelGrid) -> RefineConfig {
        let s = grid.spacing;
        RefineConfig {
            iterations: self.iterations,
            unify_radius: self.unify_radius * s,
            prune_threshold: self.prune_threshold,
            min_branch_length: self.min_branch_length * s,
            ridge_search_radius: self.ridge_search_radius * s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub plant: PlantSource,
    /// Drop the leaf discs, which removes all occlusion.
    pub leafless: bool,
    pub rig: RigSettings,
    pub mode: MapMode,
    /// Probability maps for mode `external`, one per camera in rig order.
    pub external_maps: Vec<PathBuf>,
    pub inference: InferenceSimConfig,
    pub aggregate: GridSettings,
    pub flow: FlowSettings,
    pub refine: RefineSettings,
    /// Edge sampling step for evaluation; defaults to 0.5% of the reference diagonal.
    pub eval_spacing: Option<f64>,
    pub seed: u64,
    /// Where artifacts go; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            plant: PlantSource::default(),
            leafless: false,
            rig: RigSettings::default(),
            mode: MapMode::I2iBayesian,
            external_maps: Vec::new(),
            inference: InferenceSimConfig::default(),
            aggregate: GridSettings::default(),
            flow: FlowSettings::default(),
            refine: RefineSettings::default(),
            eval_spacing: None,
            seed: 0,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::MissingFile {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let PlantSource::Generate { config, .. } = &self.plant {
            config.validate()?;
        }
        if self.rig.file.is_none() && self.rig.camera_count == 0 {
            return Err(Error::config("rig.camera_count", "must be at least 1"));
        }
        if self.mode == MapMode::External {
            if self.external_maps.is_empty() {
                return Err(Error::config("external_maps", "mode `external` needs probability-map paths"));
            }
            if let Some(missing) = self.external_maps.iter().find(|p| !p.is_file()) {
                return Err(Error::config(
                    "external_maps",
                    format!("map file `{}` does not exist", missing.display()),
                ));
            }
        }
        self.inference.validate()?;
        if self.aggregate.grid.is_none() && self.aggregate.resolution == 0 {
            return Err(Error::config("aggregate.resolution", "must be at least 1"));
        }
        Ok(())
    }

    /// Inference settings actually used by the map stage.
    pub fn effective_inference(&self) -> InferenceSimConfig {
        let mut sim = self.inference.clone();
        if self.mode == MapMode::I2iSingleSample {
            sim.n_samples = 1;
        }
        sim
    }

    /// The run's settings without its destination, so saved copies do not depend on where they were written.
    pub fn without_output_dir(&self) -> Self {
        PipelineConfig {
            output_dir: None,
            ..self.clone()
        }
    }

    pub fn plant_seed(&self) -> u64 {
        match &self.plant {
            PlantSource::Generate { seed, .. } => seed.unwrap_or(self.seed),
            PlantSource::File(_) => self.seed,
        }
    }
}

/// Generates or loads the ground-truth plant.
pub fn stage_plant(cfg: &PipelineConfig) -> Result<PlantModel> {
    let plant = match &cfg.plant {
        PlantSource::Generate { config, .. } => generate_plant(config, cfg.plant_seed())?,
        PlantSource::File(path) => {
            if !path.is_file() {
                return Err(Error::config("plant", format!("plant file `{}` does not exist", path.display())));
            }
            PlantModel::load_json(path)?
        }
    };
    Ok(if cfg.leafless { plant.leafless() } else { plant })
}

/// Rig layout framing `plant`: aimed at its bounding-box centre from far
/// enough that the whole box fits in the field of view.
pub fn rig_layout_for(settings: &RigSettings, plant: &PlantModel) -> RigLayout {
    let (lo, hi) = plant.bounding_box();
    let center = (lo + hi) / 2.0;
    let half_diagonal = (hi - lo).norm() / 2.0;
    let half_fov = (settings.hfov / 2.0).to_radians();
    let radius = settings
        .radius
        .unwrap_or(1.1 * half_diagonal / half_fov.sin());
    let mut layout = RigLayout::new(
        settings.kind.unwrap_or(RigKind::for_camera_count(settings.camera_count)),
        settings.camera_count,
        radius,
        settings.look_at.map(Vector3::from).unwrap_or(center),
    );
    layout.width = settings.width;
    layout.height = settings.height;
    layout.hfov = settings.hfov;
    layout
}

pub fn stage_rig(cfg: &PipelineConfig, plant: &PlantModel) -> Result<Vec<Camera>> {
    match &cfg.rig.file {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::config("rig.file", format!("rig file `{}` does not exist", path.display())));
            }
            load_rig(path)
        }
        None => make_rig(&rig_layout_for(&cfg.rig, plant)),
    }
}

pub fn stage_render(plant: &PlantModel, cams: &[Camera]) -> Vec<RenderedMasks> {
    cams.par_iter().map(|c| render_masks(plant, c)).collect()
}

/// Rounds a map to the 16-bit precision of its file form.
pub fn quantize_map(map: &ProbMap2D) -> ProbMap2D {
    ProbMap2D {
        width: map.width,
        height: map.height,
        values: map
            .values
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() / 65535.0)
            .collect(),
    }
}

/// Probability map of one view for a ground-truth or simulated mode.
pub fn view_map(cfg: &PipelineConfig, masks: &RenderedMasks, view: usize) -> Result<ProbMap2D> {
    let map = match cfg.mode {
        MapMode::VisibleBranch => ProbMap2D::from_mask(&masks.visible_branch),
        MapMode::WholePlant => ProbMap2D::from_mask(&masks.whole_plant),
        MapMode::I2iSingleSample | MapMode::I2iBayesian => simulate_prob_map(
            &masks.full_branch,
            &masks.visible_branch,
            &cfg.effective_inference(),
            derive_seed(cfg.seed, &[SIM_STREAM, view as u64]),
        )?,
        MapMode::External => {
            return Err(Error::Usage("external maps are loaded, not derived from masks".into()))
        }
    };
    Ok(quantize_map(&map))
}

pub fn stage_maps(cfg: &PipelineConfig, masks: &[RenderedMasks]) -> Result<Vec<ProbMap2D>> {
    if cfg.mode == MapMode::External {
        return cfg.external_maps.iter().map(load_prob_map).collect();
    }
    // Views run one after another; samples within a view are already parallel.
    masks.iter().enumerate().map(|(v, m)| view_map(cfg, m, v)).collect()
}

/// Aggregation settings for a grid framing `plant` unless one is given explicitly.
pub fn aggregate_config_for(settings: &GridSettings, plant: &PlantModel) -> AggregateConfig {
    let grid = settings.grid.clone().unwrap_or_else(|| {
        let (lo, hi) = plant.bounding_box();
        GridSpec::around_box(lo, hi, settings.resolution, settings.padding)
    });
    AggregateConfig {
        grid,
        eps_floor: settings.eps_floor,
        out_of_frame: settings.out_of_frame,
    }
}

/// Aggregates and rounds the grid to the `f32` precision of its dump.
pub fn stage_aggregate(maps: &[ProbMap2D], cams: &[Camera], cfg: &AggregateConfig) -> Result<VoxelGrid> {
    Ok(aggregate(maps, cams, cfg)?.quantized())
}

pub fn stage_flow(cfg: &PipelineConfig, grid: &VoxelGrid) -> Result<RawTraceGraph> {
    simulate(grid, &cfg.flow.to_config(grid), derive_seed(cfg.seed, &[FLOW_STREAM]))
}

pub fn stage_refine(cfg: &PipelineConfig, raw: &RawTraceGraph, grid: &VoxelGrid) -> Result<SkeletonGraph> {
    refine(&raw.to_skeleton()?, grid, &cfg.refine.to_config(grid))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub seed: u64,
    pub plant_seed: u64,
    pub config: PipelineConfig,
    pub timings: Vec<StageTiming>,
    pub runtime_seconds: f64,
    pub metrics: EvalReport,
    pub camera_count: usize,
    pub raw_vertex_count: usize,
    pub skeleton_vertex_count: usize,
    /// Distance between the recovered and the true root.
    pub root_error: f64,
    pub grid_spacing: f64,
}

/// Everything produced by a run, for callers that need more than the report.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub plant: PlantModel,
    pub cameras: Vec<Camera>,
    pub grid: VoxelGrid,
    pub raw: RawTraceGraph,
    pub skeleton: SkeletonGraph,
}

struct Clock {
    timings: Vec<StageTiming>,
    start: Instant,
}

impl Clock {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

fn artifact(dir: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    dir.as_ref().map(|d| d.join(name))
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    run_pipeline_full(cfg).map(|o| o.report)
}

/// Runs every stage and, when `output_dir` is set, writes each intermediate
/// artifact as soon as it exists.
pub fn run_pipeline_full(cfg: &PipelineConfig) -> Result<RunOutput> {
    let mut clock = Clock {
        timings: Vec::new(),
        start: Instant::now(),
    };
    clock.run("config", || cfg.validate())?;
    let out = &cfg.output_dir;
    if let Some(dir) = out {
        clock.run("config", || Ok(fs::create_dir_all(dir.join("maps"))?))?;
        clock.run("config", || {
            Ok(fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg.without_output_dir())?)?)
        })?;
    }

    let plant = clock.run("plant", || {
        let plant = stage_plant(cfg)?;
        if let Some(p) = artifact(out, "plant.json") {
            plant.save_json(p)?;
        }
        Ok(plant)
    })?;
    let cams = clock.run("rig", || {
        let cams = stage_rig(cfg, &plant)?;
        if let Some(p) = artifact(out, "rig.json") {
            save_rig(&cams, p)?;
        }
        Ok(cams)
    })?;
    let masks = if cfg.mode == MapMode::External {
        Vec::new()
    } else {
        clock.run("render", || {
            let masks = stage_render(&plant, &cams);
            if let Some(dir) = out {
                let dir = dir.join("masks");
                fs::create_dir_all(&dir)?;
                for (v, m) in masks.iter().enumerate() {
                    save_mask(&m.full_branch, dir.join(format!("view_{v:03}_full.pgm")))?;
                    save_mask(&m.visible_branch, dir.join(format!("view_{v:03}_visible.pgm")))?;
                    save_mask(&m.whole_plant, dir.join(format!("view_{v:03}_whole.pgm")))?;
                }
            }
            Ok(masks)
        })?
    };
    let maps = clock.run("maps", || {
        let maps = stage_maps(cfg, &masks)?;
        if let Some(dir) = out {
            for (v, m) in maps.iter().enumerate() {
                save_prob_map(m, dir.join("maps").join(format!("view_{v:03}.pgm")))?;
            }
        }
        Ok(maps)
    })?;
    let grid = clock.run("aggregate", || {
        let grid = stage_aggregate(&maps, &cams, &aggregate_config_for(&cfg.aggregate, &plant))?;
        if let Some(p) = artifact(out, "grid") {
            grid.save(p)?;
        }
        Ok(grid)
    })?;
    drop(maps);
    let raw = clock.run("flow", || {
        let raw = stage_flow(cfg, &grid)?;
        if let Some(p) = artifact(out, "raw_trace.json") {
            raw.to_skeleton()?.save_json(p)?;
        }
        Ok(raw)
    })?;
    let skeleton = clock.run("refine", || {
        let sk = stage_refine(cfg, &raw, &grid)?;
        if let Some(dir) = out {
            sk.save_json(dir.join("skeleton.json"))?;
            sk.save_ply(dir.join("skeleton.ply"))?;
        }
        Ok(sk)
    })?;
    let truth = plant.skeleton();
    let metrics = clock.run("eval", || evaluate(&skeleton, &truth, cfg.eval_spacing))?;

    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        plant_seed: cfg.plant_seed(),
        config: cfg.without_output_dir(),
        runtime_seconds: clock.start.elapsed().as_secs_f64(),
        timings: clock.timings,
        metrics,
        camera_count: cams.len(),
        raw_vertex_count: raw.vertices.len(),
        skeleton_vertex_count: skeleton.len(),
        root_error: (skeleton.vertices[skeleton.root] - truth.vertices[truth.root]).norm(),
        grid_spacing: grid.spacing,
    };
    if let Some(p) = artifact(out, "report.json") {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(RunOutput {
        report,
        plant,
        cameras: cams,
        grid,
        raw,
        skeleton,
    })
}

/// One `(camera count, mode, seed)` cell of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub plant_id: String,
    pub camera_count: usize,
    pub mode: MapMode,
    pub seed: u64,
    pub geometric_error_normalized: Option<f64>,
    pub structure_error: Option<usize>,
    pub runtime_seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub camera_counts: Vec<usize>,
    pub modes: Vec<MapMode>,
    pub rows: Vec<AblationRow>,
}

pub const CSV_HEADER: &str = "plant_id,camera_count,mode,geometric_error_normalized,structure_error,runtime_seconds";

impl AblationRow {
    /// The evaluation CSV row; failed runs leave the metric fields empty.
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.plant_id,
            self.camera_count,
            self.mode,
            self.geometric_error_normalized.map_or(String::new(), |g| format!("{g:.6}")),
            self.structure_error.map_or(String::new(), |s| s.to_string()),
            self.runtime_seconds
        )
    }
}

impl AblationTable {
    /// Successful rows of one cell.
    pub fn cell(&self, mode: MapMode, count: usize) -> impl Iterator<Item = &AblationRow> {
        self.rows
            .iter()
            .filter(move |r| r.mode == mode && r.camera_count == count && r.error.is_none())
    }

    pub fn mean_geometric(&self, mode: MapMode, count: usize) -> Option<f64> {
        mean(self.cell(mode, count).filter_map(|r| r.geometric_error_normalized))
    }

    pub fn mean_structure(&self, mode: MapMode, count: usize) -> Option<f64> {
        mean(self.cell(mode, count).filter_map(|r| r.structure_error.map(|s| s as f64)))
    }

    /// Per-run rows, each failure noted in a trailing column.
    pub fn rows_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER},seed,error\n");
        for r in &self.rows {
            let error = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            out.push_str(&format!("{},{},{}\n", r.csv(), r.seed, error));
        }
        out
    }

    /// Cell means with modes as rows and camera counts as columns, written as
    /// `geometric/structure`; cells where every run failed read `failed`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("mode");
        for c in &self.camera_counts {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for &m in &self.modes {
            out.push_str(m.as_str());
            for &c in &self.camera_counts {
                match (self.mean_geometric(m, c), self.mean_structure(m, c)) {
                    (Some(g), Some(s)) => out.push_str(&format!(",{g:.6}/{s:.2}")),
                    _ => out.push_str(",failed"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs `base` once per `(count, mode, seed)`; the seed picks both the plant
/// and the run's random streams. Failed runs are recorded, not propagated.
pub fn run_ablation(
    base: &PipelineConfig,
    camera_counts: &[usize],
    modes: &[MapMode],
    seeds: &[u64],
) -> Result<AblationTable> {
    if camera_counts.is_empty() || modes.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("ablation needs camera counts, modes and seeds".into()));
    }
    let mut cells = Vec::new();
    for &count in camera_counts {
        for &mode in modes {
            for &seed in seeds {
                cells.push((count, mode, seed));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(count, mode, seed)| {
            let mut cfg = base.clone();
            cfg.rig.camera_count = count;
            cfg.mode = mode;
            cfg.seed = seed;
            if let PlantSource::Generate { seed: plant_seed, .. } = &mut cfg.plant {
                *plant_seed = Some(seed);
            }
            cfg.output_dir = base
                .output_dir
                .as_ref()
                .map(|d| d.join(format!("{mode}_{count}_{seed}")));
            let start = Instant::now();
            let result = run_pipeline(&cfg);
            let runtime_seconds = start.elapsed().as_secs_f64();
            let (g, s, error) = match result {
                Ok(r) => (
                    Some(r.metrics.geometric_error_normalized),
                    Some(r.metrics.structure_error),
                    None,
                ),
                Err(e) => (None, None, Some(e.to_string())),
            };
            AblationRow {
                plant_id: format!("plant{seed}"),
                camera_count: count,
                mode,
                seed,
                geometric_error_normalized: g,
                structure_error: s,
                runtime_seconds,
                error,
            }
        })
        .collect();
    Ok(AblationTable {
        camera_counts: camera_counts.to_vec(),
        modes: modes.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.plant = PlantSource::Generate {
            config: PlantGenConfig {
                max_depth: 3,
                ..Default::default()
            },
            seed: Some(4),
        };
        cfg.rig.camera_count = 12;
        cfg.rig.width = 64;
        cfg.rig.height = 64;
        cfg.mode = MapMode::VisibleBranch;
        cfg.leafless = true;
        cfg.aggregate.resolution = 40;
        cfg.flow.particle_count = 600;
        cfg
    }

    #[test]
    fn mode_names_round_trip() {
        for m in MapMode::ALL {
            assert_eq!(m.as_str().parse::<MapMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("bayes".parse::<MapMode>().is_err());
    }

    #[test]
    fn config_defaults_fill_in() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"seed": 3, "mode": "whole_plant"}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.mode, MapMode::WholePlant);
        assert_eq!(cfg.rig.camera_count, 72);
        assert_eq!(cfg.inference.n_samples, 100);
        assert_eq!(cfg.flow.particle_count, 10_000);
        assert_eq!(cfg.flow.lambda_r, 0.1);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn single_sample_mode_uses_one_sample() {
        let mut cfg = PipelineConfig::default();
        cfg.mode = MapMode::I2iSingleSample;
        assert_eq!(cfg.effective_inference().n_samples, 1);
        cfg.mode = MapMode::I2iBayesian;
        assert_eq!(cfg.effective_inference().n_samples, 100);
    }

    #[test]
    fn missing_external_map_names_the_path() {
        let mut cfg = small();
        cfg.mode = MapMode::External;
        cfg.external_maps = vec![PathBuf::from("/nonexistent/view_000.pgm")];
        match run_pipeline(&cfg) {
            Err(Error::Stage { source, .. }) => match *source {
                Error::Config { field, reason } => {
                    assert_eq!(field, "external_maps");
                    assert!(reason.contains("/nonexistent/view_000.pgm"));
                }
                other => panic!("{other:?}"),
            },
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn small_run_is_reproducible() {
        let cfg = small();
        let a = run_pipeline_full(&cfg).unwrap();
        let b = run_pipeline_full(&cfg).unwrap();
        assert_eq!(a.skeleton, b.skeleton);
        assert_eq!(a.report.metrics, b.report.metrics);
        a.skeleton.validate().unwrap();
    }

    #[test]
    fn artifacts_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.output_dir = Some(dir.path().to_path_buf());
        let out = run_pipeline_full(&cfg).unwrap();
        for name in [
            "config.json",
            "plant.json",
            "rig.json",
            "grid.f32",
            "grid.json",
            "raw_trace.json",
            "skeleton.json",
            "skeleton.ply",
            "report.json",
            "maps/view_000.pgm",
            "masks/view_011_visible.pgm",
        ] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        assert_eq!(SkeletonGraph::load_json(dir.path().join("skeleton.json")).unwrap(), out.skeleton);
        assert_eq!(VoxelGrid::load(dir.path().join("grid")).unwrap(), out.grid);
    }

    #[test]
    fn ablation_shapes() {
        let cfg = small();
        assert!(matches!(
            run_ablation(&cfg, &[12], &[MapMode::VisibleBranch], &[]),
            Err(Error::Usage(_))
        ));
        let t = run_ablation(&cfg, &[12], &[MapMode::VisibleBranch], &[4]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows_csv().lines().count(), 2);
        assert!(t.rows_csv().starts_with(CSV_HEADER));
        assert_eq!(t.summary_csv().lines().count(), 2);
    }

    #[test]
    fn failed_cells_are_recorded() {
        let mut cfg = small();
        // Blank maps leave every voxel at the floor, so no root can be found.
        cfg.mode = MapMode::I2iSingleSample;
        cfg.inference.visible_recall = 0.0;
        cfg.inference.occluded_recall = 0.0;
        cfg.inference.false_positive_rate = 0.0;
        let t = run_ablation(&cfg, &[6, 12], &[MapMode::I2iSingleSample], &[1]).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows.iter().all(|r| r.error.is_some()));
        assert!(t.summary_csv().contains("failed"));
    }
}
