//! Command-line driver. Every stage reads and writes the same files that a
//! full `pipeline` run leaves in its output directory, so a run can be
//! replayed or resumed one stage at a time.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use branchflow::aggregate::{OutOfFramePolicy, VoxelGrid};
use branchflow::cameras::{load_rig, save_rig, Camera};
use branchflow::metrics::evaluate;
use branchflow::pipeline::{
    aggregate_config_for, run_ablation, run_pipeline, stage_aggregate, stage_flow, stage_maps, stage_plant,
    stage_render, stage_rig, MapMode, PipelineConfig, PlantSource, CSV_HEADER,
};
use branchflow::plantgen::PlantModel;
use branchflow::probmap::{load_mask, load_prob_map, save_mask, save_prob_map, RenderedMasks};
use branchflow::refine::refine;
use branchflow::SkeletonGraph;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "branchflow", version, about = "3D branch skeletons from multi-view branch-probability maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a plant and write plant.json.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Build the camera rig for a plant and write rig.json.
    Rig {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        plant: PathBuf,
    },
    /// Render branch, visible-branch and whole-plant masks for every camera.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        plant: PathBuf,
        #[arg(long)]
        rig: PathBuf,
    },
    /// Derive per-view probability maps from rendered masks for the configured mode.
    InferSim {
        #[command(flatten)]
        common: Common,
        /// Directory holding view_XXX_{full,visible,whole}.pgm.
        #[arg(long)]
        masks: PathBuf,
        /// Overrides the configured map mode.
        #[arg(long)]
        mode: Option<MapMode>,
    },
    /// Back-project probability maps into a log-probability voxel grid.
    Aggregate {
        #[command(flatten)]
        common: Common,
        /// Plant whose bounds place the grid.
        #[arg(long)]
        plant: PathBuf,
        #[arg(long)]
        rig: PathBuf,
        /// Directory holding view_XXX.pgm, one per camera.
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        out_of_frame: Option<OutOfFramePolicy>,
    },
    /// Trace particles through a voxel grid and write raw_trace.json.
    Flow {
        #[command(flatten)]
        common: Common,
        /// Grid dump, by stem or either file.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        particles: Option<usize>,
        /// Neighbourhood radius in voxels.
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        lambda_r: Option<f64>,
        /// Step length in voxels.
        #[arg(long)]
        step: Option<f64>,
    },
    /// Refine raw traces into skeleton.json and skeleton.ply.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        raw: PathBuf,
    },
    /// Score a skeleton against a reference and print a CSV row.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        skeleton: PathBuf,
        /// Reference plant or skeleton document.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        plant_id: Option<String>,
        /// Run report whose runtime goes into the row.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run every stage and write all artifacts plus report.json.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Run the camera-count by mode table and write rows.csv and summary.csv.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [72, 36, 12, 6])]
        counts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [MapMode::VisibleBranch, MapMode::WholePlant, MapMode::I2iSingleSample, MapMode::I2iBayesian])]
        modes: Vec<MapMode>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        /// Keep every run's artifacts under the output directory.
        #[arg(long)]
        keep_artifacts: bool,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn view_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list `{}`", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("view_") && n.ends_with(suffix))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no view_*{suffix} files in `{}`", dir.display());
    }
    Ok(files)
}

fn load_masks(dir: &Path) -> Result<Vec<RenderedMasks>> {
    view_files(dir, "_full.pgm")?
        .into_iter()
        .map(|full| {
            let name = full.to_string_lossy();
            let sibling = |kind: &str| PathBuf::from(name.replace("_full.pgm", kind));
            let full_branch = load_mask(&full)?;
            Ok(RenderedMasks {
                out_of_frame: full_branch.count() == 0,
                full_branch,
                visible_branch: load_mask(sibling("_visible.pgm"))?,
                whole_plant: load_mask(sibling("_whole.pgm"))?,
            })
        })
        .collect()
}

fn load_reference(path: &Path) -> Result<SkeletonGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read `{}`", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("leaves").is_some() {
        Ok(PlantModel::load_json(path)?.skeleton())
    } else {
        Ok(SkeletonGraph::load_json(path)?)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&common.out)?;
            stage_plant(&cfg)?.save_json(common.out.join("plant.json"))?;
        }
        Command::Rig { common, plant } => {
            let mut cfg = load_config(&common)?;
            cfg.plant = PlantSource::File(plant);
            let plant = stage_plant(&cfg)?;
            fs::create_dir_all(&common.out)?;
            save_rig(&stage_rig(&cfg, &plant)?, common.out.join("rig.json"))?;
        }
        Command::Render { common, plant, rig } => {
            let mut cfg = load_config(&common)?;
            cfg.plant = PlantSource::File(plant);
            let plant = stage_plant(&cfg)?;
            let cams = load_rig(&rig)?;
            let dir = common.out.join("masks");
            fs::create_dir_all(&dir)?;
            for (v, m) in stage_render(&plant, &cams).iter().enumerate() {
                save_mask(&m.full_branch, dir.join(format!("view_{v:03}_full.pgm")))?;
                save_mask(&m.visible_branch, dir.join(format!("view_{v:03}_visible.pgm")))?;
                save_mask(&m.whole_plant, dir.join(format!("view_{v:03}_whole.pgm")))?;
            }
        }
        Command::InferSim { common, masks, mode } => {
            let mut cfg = load_config(&common)?;
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            if cfg.mode == MapMode::External {
                bail!("mode `external` reads maps from disk; there is nothing to simulate");
            }
            cfg.inference.validate()?;
            let maps = stage_maps(&cfg, &load_masks(&masks)?)?;
            let dir = common.out.join("maps");
            fs::create_dir_all(&dir)?;
            for (v, m) in maps.iter().enumerate() {
                save_prob_map(m, dir.join(format!("view_{v:03}.pgm")))?;
            }
        }
        Command::Aggregate {
            common,
            plant,
            rig,
            maps,
            out_of_frame,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(policy) = out_of_frame {
                cfg.aggregate.out_of_frame = policy;
            }
            cfg.plant = PlantSource::File(plant);
            let plant = stage_plant(&cfg)?;
            let cams: Vec<Camera> = load_rig(&rig)?;
            let maps = view_files(&maps, ".pgm")?
                .iter()
                .map(load_prob_map)
                .collect::<branchflow::Result<Vec<_>>>()?;
            fs::create_dir_all(&common.out)?;
            stage_aggregate(&maps, &cams, &aggregate_config_for(&cfg.aggregate, &plant))?.save(common.out.join("grid"))?;
        }
        Command::Flow {
            common,
            grid,
            particles,
            radius,
            lambda_r,
            step,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = particles {
                cfg.flow.particle_count = n;
            }
            if let Some(r) = radius {
                cfg.flow.neighborhood_radius = r;
            }
            if let Some(l) = lambda_r {
                cfg.flow.lambda_r = l;
            }
            if let Some(s) = step {
                cfg.flow.step_length = s;
            }
            let grid = VoxelGrid::load(&grid)?;
            fs::create_dir_all(&common.out)?;
            stage_flow(&cfg, &grid)?
                .to_skeleton()?
                .save_json(common.out.join("raw_trace.json"))?;
        }
        Command::Refine { common, grid, raw } => {
            let cfg = load_config(&common)?;
            let grid = VoxelGrid::load(&grid)?;
            let raw = SkeletonGraph::load_json(&raw)?;
            let sk = refine(&raw, &grid, &cfg.refine.to_config(&grid))?;
            fs::create_dir_all(&common.out)?;
            sk.save_json(common.out.join("skeleton.json"))?;
            sk.save_ply(common.out.join("skeleton.ply"))?;
        }
        Command::Eval {
            common,
            skeleton,
            reference,
            plant_id,
            report,
        } => {
            let start = Instant::now();
            let cfg = load_config(&common)?;
            let rec = SkeletonGraph::load_json(&skeleton)?;
            let truth = load_reference(&reference)?;
            let metrics = evaluate(&rec, &truth, cfg.eval_spacing)?;
            let runtime = match report {
                Some(path) => {
                    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
                    r["runtime_seconds"].as_f64().context("report has no runtime_seconds")?
                }
                None => start.elapsed().as_secs_f64(),
            };
            let id = plant_id.unwrap_or_else(|| format!("plant{}", cfg.plant_seed()));
            println!("{CSV_HEADER}");
            println!(
                "{id},{},{},{:.6},{},{runtime:.3}",
                cfg.rig.camera_count, cfg.mode, metrics.geometric_error_normalized, metrics.structure_error
            );
        }
        Command::Pipeline { common } => {
            let mut cfg = load_config(&common)?;
            cfg.output_dir = Some(common.out.clone());
            let r = run_pipeline(&cfg)?;
            println!(
                "geometric_error_normalized {:.6} structure_error {} joints {}/{} runtime {:.1}s",
                r.metrics.geometric_error_normalized,
                r.metrics.structure_error,
                r.metrics.reconstructed_joints,
                r.metrics.reference_joints,
                r.runtime_seconds
            );
        }
        Command::Ablation {
            common,
            counts,
            modes,
            seeds,
            keep_artifacts,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.output_dir = keep_artifacts.then(|| common.out.join("runs"));
            let table = run_ablation(&cfg, &counts, &modes, &seeds)?;
            fs::create_dir_all(&common.out)?;
            fs::write(common.out.join("rows.csv"), table.rows_csv())?;
            fs::write(common.out.join("summary.csv"), table.summary_csv())?;
            print!("{}", table.summary_csv());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
