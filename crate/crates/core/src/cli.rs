//! Command-line surface: `register`, `evaluate`, `synth`, `snapshots`.
//!
//! Exit codes: 0 success, 1 general failure, 2 grid mismatch, 3 optimization
//! divergence (a partial manifest is still written), 4 folding synthetic
//! deformation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{evaluate_field, make_bump_deformation, make_phantom, mean_displacement_voxels, synth_pair};
use crate::flow::{intermediate_warps, FlowConfig};
use crate::io::{
    load_config, load_synth_spec, read_checkpoint, read_mask, read_scalar, read_vector, write_checkpoint,
    write_loss_table, write_volume, InputDigest, RunManifest, StageRecord, SynthSpec,
};
use crate::registration::{apply_final, coarse_to_fine, RegistrationConfig, Stage};
use crate::volume::VectorField3;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_GRID_MISMATCH: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_FOLDING: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::GridMismatch(_) => EXIT_GRID_MISMATCH,
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::FoldingDeformation(_) => EXIT_FOLDING,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowreg", version, about = "Diffeomorphic registration with a coordinate-network velocity field")]
pub struct Cli {
    /// Run configuration (flat `key = value` file).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a moving image onto a fixed image.
    Register { moving: PathBuf, fixed: PathBuf },
    /// Score a displacement field against label masks.
    Evaluate {
        field: PathBuf,
        moving_mask: PathBuf,
        fixed_mask: PathBuf,
        /// Ground-truth field for endpoint error.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Report path (defaults to `<out>/eval.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic phantom pair with a known deformation.
    Synth {
        /// Phantom and deformation settings; defaults apply when omitted.
        spec: Option<PathBuf>,
    },
    /// Write the moving image at every integration step.
    Snapshots { moving: PathBuf, params: PathBuf },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FAILURE } else { EXIT_OK };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_FAILURE;
        }
    };
    pool.install(|| match &cli.command {
        Command::Register { moving, fixed } => cmd_register(moving, fixed, cli.config.as_deref(), &cli.out, cli.seed),
        Command::Evaluate {
            field,
            moving_mask,
            fixed_mask,
            gt,
            report,
        } => {
            let report = report.clone().unwrap_or_else(|| cli.out.join("eval.json"));
            cmd_evaluate(field, moving_mask, fixed_mask, gt.as_deref(), &report)
        }
        Command::Synth { spec } => cmd_synth(spec.as_deref(), &cli.out, cli.seed),
        Command::Snapshots { moving, params } => cmd_snapshots(moving, params, cli.config.as_deref(), &cli.out),
    })
}

fn report(result: Result<()>) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn resolve_config(config: Option<&Path>, seed: Option<u64>) -> Result<RegistrationConfig> {
    let mut cfg = match config {
        Some(p) => load_config(p)?,
        None => RegistrationConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Output file names inside the output directory.
pub mod names {
    pub const FIELD: &str = "s_final.frg";
    pub const MOVED: &str = "moved.frg";
    pub const PARAMS: &str = "params.frgp";
    pub const MANIFEST: &str = "manifest.json";
    pub const MOVING: &str = "moving.frg";
    pub const FIXED: &str = "fixed.frg";
    pub const MOVING_MASK: &str = "moving_mask.frg";
    pub const FIXED_MASK: &str = "fixed_mask.frg";
    pub const GROUND_TRUTH: &str = "s_gt.frg";
    pub const RECOVERY_TARGET: &str = "recovery_target.frg";

    pub fn loss_table(stage: &str) -> String {
        format!("loss_{stage}.txt")
    }

    pub fn snapshot(k: usize) -> String {
        format!("snapshot_{k:03}.frg")
    }
}

/// Coarse-to-fine registration; writes `S_f`, the moved image, the final
/// parameters, per-stage loss tables and the manifest.
pub fn cmd_register(moving_path: &Path, fixed_path: &Path, config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> i32 {
    report(register(moving_path, fixed_path, config, out_dir, seed))
}

fn register(moving_path: &Path, fixed_path: &Path, config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let start = Instant::now();
    let cfg = resolve_config(config, seed)?;
    let moving = read_scalar(moving_path)?;
    let fixed = read_scalar(fixed_path)?;
    if moving.dims() != fixed.dims() {
        return Err(Error::GridMismatch(format!(
            "moving {:?} vs fixed {:?}",
            moving.dims(),
            fixed.dims()
        )));
    }
    ensure_dir(out_dir)?;
    let mut inputs = vec![InputDigest::of("moving", moving_path)?, InputDigest::of("fixed", fixed_path)?];
    if let Some(c) = config {
        inputs.push(InputDigest::of("config", c)?);
    }

    let mut stage_clock: BTreeMap<&'static str, (Instant, Instant)> = BTreeMap::new();
    let result = coarse_to_fine(&cfg, &moving, &fixed, &mut |stage, _, _| {
        let now = Instant::now();
        stage_clock.entry(stage.name()).or_insert((now, now)).1 = now;
    })?;

    let mut outputs = BTreeMap::new();
    let mut stages = Vec::new();
    for (stage, r) in result.stages() {
        let table = names::loss_table(stage.name());
        write_loss_table(out_dir.join(&table), &r.loss_history)?;
        outputs.insert(format!("loss_{}", stage.name()), table);
        let seconds = stage_clock
            .get(stage.name())
            .map_or(0.0, |(a, b)| b.duration_since(*a).as_secs_f64());
        stages.push(StageRecord {
            stage,
            iterations_run: r.iterations_run,
            termination: r.termination.clone(),
            seconds,
            loss_history: r.loss_history.clone(),
        });
    }
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        status: "ok".into(),
        config: cfg,
        threads: rayon::current_num_threads(),
        inputs,
        stages,
        outputs,
        total_seconds: 0.0,
        mean_displacement_voxels: None,
        error: None,
    };

    let Some(s_f) = result.final_displacement() else {
        let (stage, detail) = result
            .stages()
            .into_iter()
            .find_map(|(s, r)| match &r.termination {
                crate::registration::Termination::Diverged(d) => Some((s, d.clone())),
                _ => None,
            })
            .unwrap_or((Stage::Fine, "no final stage".into()));
        let iteration = result
            .stages()
            .iter()
            .find(|(s, _)| *s == stage)
            .map_or(0, |(_, r)| r.iterations_run);
        let err = Error::Diverged {
            iteration,
            detail: format!("{} stage: {detail}", stage.name()),
        };
        manifest.status = "diverged".into();
        manifest.error = Some(err.to_string());
        manifest.total_seconds = start.elapsed().as_secs_f64();
        manifest.write(out_dir.join(names::MANIFEST))?;
        return Err(err);
    };

    let field_grid = fixed.grid().resized(s_f.dims())?;
    let field = VectorField3::new(field_grid, s_f.data().to_vec())?;
    write_volume(out_dir.join(names::FIELD), &field.clone().into())?;
    write_volume(out_dir.join(names::MOVED), &apply_final(&moving, &field).into())?;
    let fine = result.fine.as_ref().expect("final stage present");
    write_checkpoint(out_dir.join(names::PARAMS), &fine.params)?;
    for (k, v) in [("field", names::FIELD), ("moved", names::MOVED), ("params", names::PARAMS)] {
        manifest.outputs.insert(k.to_string(), v.to_string());
    }
    manifest.mean_displacement_voxels = Some(mean_displacement_voxels(&field));
    manifest.total_seconds = start.elapsed().as_secs_f64();
    manifest.write(out_dir.join(names::MANIFEST))
}

/// Warps the moving mask by the field and writes an evaluation report.
pub fn cmd_evaluate(
    field_path: &Path,
    moving_mask: &Path,
    fixed_mask: &Path,
    ground_truth: Option<&Path>,
    report_path: &Path,
) -> i32 {
    report((|| {
        let field = read_vector(field_path)?;
        let mm = read_mask(moving_mask)?;
        let fm = read_mask(fixed_mask)?;
        if mm.dims() != fm.dims() {
            return Err(Error::GridMismatch(format!("moving mask {:?} vs fixed mask {:?}", mm.dims(), fm.dims())));
        }
        let gt = ground_truth.map(read_vector).transpose()?;
        let rep = evaluate_field(&field, &mm, &fm, gt.as_ref())?;
        if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(parent)?;
        }
        let text = serde_json::to_string_pretty(&rep).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(report_path, text + "\n").map_err(|e| Error::io(report_path, e))
    })())
}

/// Writes a synthetic pair: images, masks, `S_gt` and the recovery target.
pub fn cmd_synth(spec_path: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> i32 {
    report((|| {
        let mut spec = match spec_path {
            Some(p) => load_synth_spec(p)?,
            None => SynthSpec::default(),
        };
        if let Some(s) = seed {
            spec.phantom.seed = s;
        }
        let s_gt = make_bump_deformation(&spec.bump, spec.phantom.dims)?;
        let phantom = make_phantom(&spec.phantom)?;
        let pair = synth_pair(&phantom, &s_gt)?;
        ensure_dir(out_dir)?;
        write_volume(out_dir.join(names::MOVING), &pair.moving.into())?;
        write_volume(out_dir.join(names::FIXED), &pair.fixed.into())?;
        write_volume(out_dir.join(names::MOVING_MASK), &pair.moving_mask.into())?;
        write_volume(out_dir.join(names::FIXED_MASK), &pair.fixed_mask.into())?;
        write_volume(out_dir.join(names::GROUND_TRUTH), &s_gt.into())?;
        write_volume(out_dir.join(names::RECOVERY_TARGET), &pair.recovery_target.into())
    })())
}

/// Writes `n + 1` images: the moving image warped by the partial rollout
/// after `k` steps, `k = 0..=n`, using the configured fine density.
pub fn cmd_snapshots(moving_path: &Path, params_path: &Path, config: Option<&Path>, out_dir: &Path) -> i32 {
    report((|| {
        let cfg = resolve_config(config, None)?;
        let moving = read_scalar(moving_path)?;
        let params = read_checkpoint(params_path)?;
        let flow = FlowConfig::new(cfg.fine_dims, cfg.n_steps)?;
        let frames = intermediate_warps(&moving, &params, &flow)?;
        ensure_dir(out_dir)?;
        for (k, frame) in frames.into_iter().enumerate() {
            write_volume(out_dir.join(names::snapshot(k)), &frame.into())?;
        }
        Ok(())
    })())
}
