//! Command-line front end. Every subcommand prints a reproduction manifest
//! (resolved configuration, paths, seed, version, wall time) so any run can
//! be replayed bit-exactly.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{dice, propagate_labels, volume_stats};
use crate::mind::{compute_mind, six_neighborhood, MindParams};
use crate::phantom::{generate, Deformation, PhantomSpec, Remap};
use crate::registration::{
    grid_search, register_deformable, register_rigid_seeded, Measure, RegistrationConfig,
    RegistrationResult, Regularizer,
};
use crate::similarity::{
    combined_dissimilarity, lncc_dissimilarity, mind_dissimilarity, nmi_dissimilarity,
    ScaleStrategy,
};
use crate::stitch::{plan_tiles, stitch_map};
use crate::transform::{warp, DenseField};
use crate::volume::{Interp, LabelVolume, Volume};

#[derive(Parser, Debug)]
#[command(
    name = "mmreg",
    version,
    about = "Multi-modal deformable 3D volume registration",
    disable_help_subcommand = true
)]
struct Cli {
    /// Seed for every stochastic component.
    #[arg(long, global = true, default_value_t = crate::DEFAULT_SEED)]
    seed: u64,
    /// Worker thread cap; outputs are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Deformable registration of a moving volume onto a fixed volume.
    Register(RegisterArgs),
    /// Rigid pre-alignment via a (1+1) evolution strategy on NMI.
    Rigid(RigidArgs),
    /// Apply a displacement field to a volume.
    Warp(WarpArgs),
    /// Per-label Dice overlap between two label volumes.
    Dice(DiceArgs),
    /// Compute and save the self-similarity descriptor field.
    Mind(MindArgs),
    /// One-shot dissimilarity between two equally shaped volumes.
    Similarity(SimilarityArgs),
    /// Tile a volume, map every tile, and stitch by stride averaging.
    Stitch(StitchArgs),
    /// Generate a synthetic phantom pair with ground truth.
    Phantom(PhantomArgs),
    /// Sweep lambda/spacing/levels combinations and rank them.
    Gridsearch(GridsearchArgs),
    /// Mean segmented volumes (cm³) of two label-volume groups.
    VolumeStats(VolumeStatsArgs),
}

/// Scale strategy plus its fixed value, parsed from fixed:<v>|grad|delta.
#[derive(Debug, Clone, Copy)]
struct ScaleSpec {
    strategy: ScaleStrategy,
    fixed_s: f64,
}

fn parse_scale(s: &str) -> std::result::Result<ScaleSpec, String> {
    if s == "grad" {
        return Ok(ScaleSpec {
            strategy: ScaleStrategy::InitialGradient,
            fixed_s: 1.0,
        });
    }
    if s == "delta" {
        return Ok(ScaleSpec {
            strategy: ScaleStrategy::DissimilarityChange,
            fixed_s: 1.0,
        });
    }
    if let Some(v) = s.strip_prefix("fixed:") {
        let fixed_s: f64 = v.parse().map_err(|_| format!("bad fixed scale '{v}'"))?;
        if fixed_s <= 0.0 {
            return Err("fixed scale must be positive".into());
        }
        return Ok(ScaleSpec {
            strategy: ScaleStrategy::Fixed,
            fixed_s,
        });
    }
    Err(format!("unknown scale strategy '{s}' (fixed:<v>|grad|delta)"))
}

fn parse_measure(s: &str) -> std::result::Result<Measure, String> {
    match s {
        "nmi" => Ok(Measure::Nmi),
        "mind" => Ok(Measure::Mind),
        "nmi+mind" => Ok(Measure::NmiMind),
        "lncc" => Ok(Measure::Lncc),
        _ => Err(format!("unknown measure '{s}' (nmi|mind|nmi+mind|lncc)")),
    }
}

fn parse_regularizer(s: &str) -> std::result::Result<Regularizer, String> {
    match s {
        "tv" => Ok(Regularizer::Tv),
        "l2" => Ok(Regularizer::L2),
        _ => Err(format!("unknown regularizer '{s}' (tv|l2)")),
    }
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected AxBxC, got '{s}'"));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|_| format!("bad extent '{p}' in '{s}'"))?;
    }
    Ok(out)
}

fn parse_usize_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad integer '{p}'")))
        .collect()
}

fn parse_f64_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad number '{p}'")))
        .collect()
}

fn parse_deformation(s: &str) -> std::result::Result<Deformation, String> {
    if s == "none" {
        return Ok(Deformation::None);
    }
    if let Some(rest) = s.strip_prefix("sinusoidal:") {
        let (a, p) = rest
            .split_once(',')
            .ok_or_else(|| format!("expected sinusoidal:<amplitude>,<period>, got '{s}'"))?;
        return Ok(Deformation::Sinusoidal {
            amplitude: a.parse().map_err(|_| format!("bad amplitude '{a}'"))?,
            period: p.parse().map_err(|_| format!("bad period '{p}'"))?,
        });
    }
    if let Some(rest) = s.strip_prefix("random:") {
        let (a, sg) = rest
            .split_once(',')
            .ok_or_else(|| format!("expected random:<amplitude>,<sigma>, got '{s}'"))?;
        return Ok(Deformation::RandomSmooth {
            amplitude: a.parse().map_err(|_| format!("bad amplitude '{a}'"))?,
            sigma: sg.parse().map_err(|_| format!("bad sigma '{sg}'"))?,
        });
    }
    Err(format!(
        "unknown deformation '{s}' (none|sinusoidal:<a>,<p>|random:<a>,<sigma>)"
    ))
}

fn parse_remap(s: &str) -> std::result::Result<Remap, String> {
    if s == "identity" {
        return Ok(Remap::Identity);
    }
    if let Some(g) = s.strip_prefix("gamma:") {
        return Ok(Remap::Gamma(
            g.parse().map_err(|_| format!("bad gamma '{g}'"))?,
        ));
    }
    if let Some(n) = s.strip_prefix("bands:") {
        return Ok(Remap::InvertedBands(
            n.parse().map_err(|_| format!("bad band count '{n}'"))?,
        ));
    }
    Err(format!(
        "unknown remap '{s}' (identity|gamma:<g>|bands:<n>)"
    ))
}

/// Tile mapper selection: identity, affine intensity, or a lookup table.
#[derive(Debug, Clone)]
enum MapperSpec {
    Identity,
    Affine { a: f32, b: f32 },
    Lut(PathBuf),
}

fn parse_mapper(s: &str) -> std::result::Result<MapperSpec, String> {
    if s == "identity" {
        return Ok(MapperSpec::Identity);
    }
    if let Some(rest) = s.strip_prefix("affine:") {
        let (a, b) = rest
            .split_once(',')
            .ok_or_else(|| format!("expected affine:<a>,<b>, got '{s}'"))?;
        return Ok(MapperSpec::Affine {
            a: a.parse().map_err(|_| format!("bad scale '{a}'"))?,
            b: b.parse().map_err(|_| format!("bad offset '{b}'"))?,
        });
    }
    if let Some(path) = s.strip_prefix("lut:") {
        return Ok(MapperSpec::Lut(PathBuf::from(path)));
    }
    Err(format!(
        "unknown mapper '{s}' (identity|affine:<a>,<b>|lut:<file>)"
    ))
}

#[derive(Args, Debug)]
struct RegisterArgs {
    /// Fixed (reference) volume, MHA.
    #[arg(long)]
    fixed: PathBuf,
    /// Moving volume, MHA.
    #[arg(long)]
    moving: PathBuf,
    /// Dissimilarity measure: nmi|mind|nmi+mind|lncc.
    #[arg(long, default_value = "nmi+mind", value_parser = parse_measure)]
    measure: Measure,
    /// NMI weight of the combined measure, in [0,1].
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// Descriptor scale: fixed:<v>|grad|delta.
    #[arg(long, default_value = "grad", value_parser = parse_scale)]
    scale: ScaleSpec,
    /// Regularization weight.
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    /// Displacement regularizer: tv|l2.
    #[arg(long, default_value = "tv", value_parser = parse_regularizer)]
    regularizer: Regularizer,
    /// Control-point spacing in voxels.
    #[arg(long, default_value_t = 8)]
    spacing: usize,
    /// Resolution pyramid depth.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Iteration budget per level.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Enable inverse-consistent symmetric optimization.
    #[arg(long)]
    symmetric: bool,
    /// Consistency averaging period in accepted steps.
    #[arg(long, default_value_t = 10)]
    symmetric_every: usize,
    /// Run a rigid pre-alignment before the deformable stage.
    #[arg(long)]
    rigid_init: bool,
    /// Mutation budget of the rigid pre-alignment.
    #[arg(long, default_value_t = 300)]
    rigid_iters: usize,
    /// Local correlation window radius (lncc measure).
    #[arg(long, default_value_t = 3)]
    lncc_radius: usize,
    /// Histogram bins (nmi measures).
    #[arg(long, default_value_t = 100)]
    bins: usize,
    /// Write the displacement field here (3-channel MHA).
    #[arg(long)]
    out_field: Option<PathBuf>,
    /// Write the warped moving volume here.
    #[arg(long)]
    out_warped: Option<PathBuf>,
    /// Write the text report here as well as stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the reproduction manifest here as well as stdout.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RigidArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Mutation budget.
    #[arg(long, default_value_t = 300)]
    iters: usize,
    /// Write the resampled moving volume here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WarpArgs {
    /// Volume to warp.
    #[arg(long)]
    input: PathBuf,
    /// Displacement field (3-channel MHA, voxel units).
    #[arg(long)]
    field: PathBuf,
    /// Output volume path.
    #[arg(long)]
    out: PathBuf,
    /// Nearest-neighbor instead of trilinear sampling.
    #[arg(long)]
    nearest: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiceArgs {
    /// First label volume.
    #[arg(long)]
    a: PathBuf,
    /// Second label volume.
    #[arg(long)]
    b: PathBuf,
    /// Write per-label CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MindArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output descriptor field (4D MHA, channel-fastest).
    #[arg(long)]
    out: PathBuf,
    /// Patch Gaussian width in voxels.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimilarityArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Measure: nmi|mind|nmi+mind|lncc.
    #[arg(long, default_value = "nmi", value_parser = parse_measure)]
    measure: Measure,
    /// NMI weight of the combined measure.
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// Descriptor scale of the combined measure.
    #[arg(long, default_value_t = 1.0)]
    s: f64,
    #[arg(long, default_value_t = 3)]
    lncc_radius: usize,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StitchArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tile extents as WxWxC.
    #[arg(long, value_parser = parse_triple)]
    tile: [usize; 3],
    /// Strides as SxSxSc.
    #[arg(long, value_parser = parse_triple)]
    stride: [usize; 3],
    /// Per-tile mapping: identity|affine:<a>,<b>|lut:<file>.
    #[arg(long, default_value = "identity", value_parser = parse_mapper)]
    mapper: MapperSpec,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Directory receiving a.mha, b.mha, labels_a.mha, labels_b.mha,
    /// truth.mha and spec.txt.
    #[arg(long)]
    out_dir: PathBuf,
    /// Volume extents as XxYxZ.
    #[arg(long, default_value = "64x64x64", value_parser = parse_triple)]
    dims: [usize; 3],
    /// Number of Gaussian blobs.
    #[arg(long, default_value_t = 6)]
    blobs: usize,
    /// Ground-truth deformation: none|sinusoidal:<a>,<p>|random:<a>,<sigma>.
    #[arg(long, default_value = "none", value_parser = parse_deformation)]
    deformation: Deformation,
    /// Second-modality intensity remap: identity|gamma:<g>|bands:<n>.
    #[arg(long, default_value = "identity", value_parser = parse_remap)]
    remap: Remap,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridsearchArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Measure: nmi|mind|nmi+mind|lncc.
    #[arg(long, default_value = "nmi+mind", value_parser = parse_measure)]
    measure: Measure,
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// Comma-separated regularization weights.
    #[arg(long, default_value = "0.0125,0.025,0.05,0.1,0.2", value_parser = parse_f64_list)]
    lambdas: Vec<f64>,
    /// Comma-separated control-point spacings.
    #[arg(long, default_value = "8,10,12,14,16", value_parser = parse_usize_list)]
    spacings: Vec<usize>,
    /// Comma-separated pyramid depths.
    #[arg(long, default_value = "2,3,4", value_parser = parse_usize_list)]
    levels: Vec<usize>,
    /// Iteration budget per level.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Cell score: dissim (final cost) or dice:<fixed_labels>,<moving_labels>
    /// (1 − mean Dice after propagating the moving labels).
    #[arg(long, default_value = "dissim")]
    score: String,
    /// Write the ranked table as CSV here (stdout otherwise).
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VolumeStatsArgs {
    /// Comma-separated label volumes of group A.
    #[arg(long)]
    group_a: String,
    /// Comma-separated label volumes of group B (may repeat group A).
    #[arg(long)]
    group_b: String,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// Reproduction record every run prints: resolved configuration, paths,
/// seed, version, wall time.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub entries: Vec<(String, String)>,
    pub wall_seconds: f64,
}

impl RunManifest {
    fn new(subcommand: &str, seed: u64, threads: Option<usize>) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads,
            entries: Vec::new(),
            wall_seconds: 0.0,
        }
    }

    fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut out = String::from("[manifest]\n");
        out.push_str(&format!("subcommand={}\n", self.subcommand));
        out.push_str(&format!("version={}\n", self.version));
        out.push_str(&format!("seed={:#x}\n", self.seed));
        out.push_str(&format!(
            "threads={}\n",
            self.threads.map_or_else(|| "default".into(), |t: usize| t.to_string())
        ));
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str(&format!("wall_seconds={:.3}\n", self.wall_seconds));
        out
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn finish_manifest(
    mut manifest: RunManifest,
    started: Instant,
    path: Option<&PathBuf>,
) -> Result<()> {
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    let text = manifest.render();
    print!("{text}");
    if let Some(p) = path {
        write_text(p, &text)?;
    }
    Ok(())
}

/// Parses argv and runs one subcommand. Returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // Once per process; later calls (e.g. repeated cli_main in tests)
        // keep the existing pool, which never changes results.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let seed = cli.seed;
    let threads = cli.threads;
    match cli.command {
        Command::Register(args) => cmd_register(args, seed, threads, started),
        Command::Rigid(args) => cmd_rigid(args, seed, threads, started),
        Command::Warp(args) => cmd_warp(args, seed, threads, started),
        Command::Dice(args) => cmd_dice(args, seed, threads, started),
        Command::Mind(args) => cmd_mind(args, seed, threads, started),
        Command::Similarity(args) => cmd_similarity(args, seed, threads, started),
        Command::Stitch(args) => cmd_stitch(args, seed, threads, started),
        Command::Phantom(args) => cmd_phantom(args, seed, threads, started),
        Command::Gridsearch(args) => cmd_gridsearch(args, seed, threads, started),
        Command::VolumeStats(args) => cmd_volume_stats(args, seed, threads, started),
    }
}

fn config_from_register_args(args: &RegisterArgs, seed: u64) -> RegistrationConfig {
    RegistrationConfig {
        measure: args.measure,
        beta: args.beta,
        scale_strategy: args.scale.strategy,
        fixed_s: args.scale.fixed_s,
        lambda: args.lambda,
        regularizer: args.regularizer,
        spacing_vox: args.spacing,
        levels: args.levels,
        max_iters_per_level: args.iters,
        step_tol: 1e-5,
        symmetric: args.symmetric,
        symmetric_every: args.symmetric_every,
        lncc_radius: args.lncc_radius,
        bins: args.bins,
        mind: MindParams::default(),
        seed,
    }
}

fn manifest_config(manifest: &mut RunManifest, config: &RegistrationConfig) {
    manifest.push("measure", config.measure);
    manifest.push("beta", config.beta);
    manifest.push(
        "scale",
        match config.scale_strategy {
            ScaleStrategy::Fixed => format!("fixed:{}", config.fixed_s),
            ScaleStrategy::InitialGradient => "grad".into(),
            ScaleStrategy::DissimilarityChange => "delta".into(),
        },
    );
    manifest.push("lambda", config.lambda);
    manifest.push("regularizer", config.regularizer);
    manifest.push("spacing", config.spacing_vox);
    manifest.push("levels", config.levels);
    manifest.push("iters", config.max_iters_per_level);
    manifest.push("symmetric", config.symmetric);
    manifest.push("symmetric_every", config.symmetric_every);
    manifest.push("lncc_radius", config.lncc_radius);
    manifest.push("bins", config.bins);
}

fn cmd_register(
    args: RegisterArgs,
    seed: u64,
    threads: Option<usize>,
    started: Instant,
) -> Result<()> {
    let fixed = Volume::load_mha(&args.fixed)?;
    let mut moving = Volume::load_mha(&args.moving)?;
    let mut manifest = RunManifest::new("register", seed, threads);
    manifest.push("fixed", args.fixed.display());
    manifest.push("moving", args.moving.display());
    let config = config_from_register_args(&args, seed);
    manifest_config(&mut manifest, &config);
    manifest.push("rigid_init", args.rigid_init);

    let mut report = String::new();
    if args.rigid_init {
        let rigid = register_rigid_seeded(&fixed, &moving, args.rigid_iters, seed)?;
        report.push_str(&format!(
            "rigid_rotation_rad={:.6},{:.6},{:.6}\nrigid_translation_mm={:.4},{:.4},{:.4}\nrigid_objective={:.6}\n",
            rigid.params.rotation_rad[0],
            rigid.params.rotation_rad[1],
            rigid.params.rotation_rad[2],
            rigid.params.translation_mm[0],
            rigid.params.translation_mm[1],
            rigid.params.translation_mm[2],
            rigid.objective,
        ));
        moving = rigid.resampled;
    }
    let result = register_deformable(&fixed, &moving, &config)?;
    report.push_str(&result.report());
    print!("{report}");
    if let Some(path) = &args.report {
        write_text(path, &report)?;
    }
    if let Some(path) = &args.out_field {
        result.field.save_mha(path)?;
        manifest.push("out_field", path.display());
    }
    if let Some(path) = &args.out_warped {
        let warped = warp(&moving, &result.field, Interp::Trilinear)?;
        warped.save_mha(path)?;
        manifest.push("out_warped", path.display());
    }
    finish_manifest(manifest, started, args.manifest.as_ref())
}

fn cmd_rigid(args: RigidArgs, seed: u64, threads: Option<usize>, started: Instant) -> Result<()> {
    let fixed = Volume::load_mha(&args.fixed)?;
    let moving = Volume::load_mha(&args.moving)?;
    let result = register_rigid_seeded(&fixed, &moving, args.iters, seed)?;
    println!(
        "rotation_rad={:.6},{:.6},{:.6}",
        result.params.rotation_rad[0], result.params.rotation_rad[1], result.params.rotation_rad[2]
    );
    println!(
        "translation_mm={:.4},{:.4},{:.4}",
        result.params.translation_mm[0],
        result.params.translation_mm[1],
        result.params.translation_mm[2]
    );
    println!("objective={:.6}", result.objective);
    println!("evaluations={}", result.evaluations);
    let mut manifest = RunManifest::new("rigid", seed, threads);
    manifest.push("fixed", args.fixed.display());
    manifest.push("moving", args.moving.display());
    manifest.push("iters", args.iters);
    if let Some(path) = &args.out {
        result.resampled.save_mha(path)?;
        manifest.push("out", path.display());
    }
    finish_manifest(manifest, started, args.manifest.as_ref())
}

fn cmd_warp(args: WarpArgs, seed: u64, threads: Option<usize>, started: Instant) -> Result<()> {
    let input = Volume::load_mha(&args.input)?;
    let field = DenseField::load_mha(&args.field)?;
    let interp = if args.nearest {
        Interp::Nearest
    } else {
        Interp::Trilinear
    };
    let warped = warp(&input, &field, interp)?;
    warped.save_mha(&args.out)?;
    let mut manifest = RunManifest::new("warp", seed, threads);
    manifest.push("input", args.input.display());
    manifest.push("field", args.field.display());
    manifest.push("out", args.out.display());
    manifest.push("nearest", args.nearest);
    finish_manifest(manifest, started, args.manifest.as_ref())
}

fn cmd_dice(args: DiceArgs, seed: u64, threads: Option<usize>, started: Instant) -> Result<()> {
    let a = LabelVolume::load_mha(&args.a)?;
    let b = LabelVolume::load_mha(&args.b)?;
    let report = dice(&a, &b)?;
    print!("{}", report.to_text());
    if let Some(path) = &args.csv {
        write_text(path, &report.to_csv())?;
    }
    let mut manifest = RunManifest::new("dice", seed, threads);
    manifest.push("a", args.a.display());
    manifest.push("b", args.b.display());
    finish_manifest(manifest, started, args.manifest.as_ref())
}

fn cmd_mind(args: MindArgs, seed: u64, threads: Option<usize>, started: Instant) -> Result<()> {
    let input = Volume::load_mha(&args.input)?;
    let params = MindParams::new(args.sigma, six_neighborhood())?;
    let field = compute_mind(&input, &params)?;
    field.save_mha(&args.out)?;
    println!(
        "channels={} dims={}x{}x{}",
        field.channels, field.dims[0], field.dims[1], field.dims[2]
    );
    let mut manifest = RunManifest::new("mind", seed, threads);
    manifest.push("input", args.input.display());
    manifest.push("out", args.out.display());
    manifest.push("sigma", args.sigma);
    finish_manifest(manifest, started, args.manifest.as_ref())
}

fn cmd_similarity(
    args: SimilarityArgs,
    seed: u64,
    threads: Option<usize>,
    started: Instant,
) -> Result<()> {
    let fixed = Volume::load_mha(&args.fixed)?;
    let moving = Volume::load_mha(&args.moving)?;
    let zero = DenseField::zeros(fixed.dims);
    let value = match args.measure {
        Measure::Nmi => nmi_dissimilarity(&fixed, &moving)?,
        Measure::Mind => mind_dissimilarity(&fixed, &moving, &zero, &MindParams::default())?,
        Measure::Lncc => lncc_dissimilarity(&fixed, &moving, args.lncc_radius)?,
        Measure::NmiMind => combined_dissimilarity(
            &fixed,
            &moving,
            &zero,
            args.beta,
            args.s,
            &MindParams::default(),
        )?,
    };
    println!("measure={} value={value:.6}", args.measure);
    let mut manifest = RunManifest::new("similarity", seed, threads);
    manifest.push("fixed", args.fixed.display());
    manifest.push("moving", args.moving.display());
    manifest.push("measure", args.measure);
    manifest.push("beta", args.beta);
    manifest.push("s", args.s);
    manifest.push("lncc_radius", args.lncc_radius);
    finish_manifest(manifest, started, args.manifest.as_ref())
}

/// 256-line "in out" table; values map through the row with the nearest
/// input intensity.
fn load_lut(path: &Path) -> Result<Vec<(f32, f32)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (a, b) = (parts.next(), parts.next());
        let (Some(a), Some(b), None) = (a, b, parts.next()) else {
            return Err(Error::header(
                path,
                format!("lut line {} must be 'in out'", ln + 1),
            ));
        };
        let a: f32 = a
            .parse()
            .map_err(|_| Error::header(path, format!("bad lut input on line {}", ln + 1)))?;
        let b: f32 = b
            .parse()
            .map_err(|_| Error::header(path, format!("bad lut output on line {}", ln + 1)))?;
        rows.push((a, b));
    }
    if rows.is_empty() {
        return Err(Error::header(path, "lut file has no entries"));
    }
    rows.sort_by(|p, q| p.0.total_cmp(&q.0));
    Ok(rows)
}

fn lut_map(rows: &[(f32, f32)], v: f32) -> f32 {
    let i = rows.partition_point(|r| r.0 < v);
    if i == 0 {
        return rows[0].1;
    }
    if i == rows.len() {
        return rows[rows.len() - 1].1;
    }
    if (v - rows[i - 1].0).abs() <= (rows[i].0 - v).abs() {
        rows[i - 1].1
    } else {
        rows[i].1
    }
}

fn cmd_stitch(args: StitchArgs, seed: u64, threads: Option<usize>, started: Instant) -> Result<()> {
    let input = Volume::load_mha(&args.input)?;
    let plan = plan_tiles(input.dims, args.tile, args.stride)?;
    let out = match &args.mapper {
        MapperSpec::Identity => stitch_map(&input, &plan, |t| Ok(t.clone()))?,
        MapperSpec::Affine { a, b } => stitch_map(&input, &plan, |t| {
            let mut m = t.clone();
            for x in &mut m.data {
                *x = a * *x + b;
            }
            Ok(m)
        })?,
        MapperSpec::Lut(path) => {
            let rows = load_lut(path)?;
            stitch_map(&input, &plan, |t| {
                let mut m = t.clone();
                for x in &mut m.data {
                    *x = lut_map(&rows, *x);
                }
                Ok(m)
            })?
        }
    };
    out.save_mha(&args.out)?;
    println!(
        "tiles={} tile={}x{}x{} stride={}x{}x{}",
        plan.origins.len(),
        args.tile[0],
        args.tile[1],
        args.tile[2],
        args.stride[0],
        args.stride[1],
        args.stride[2]
    );
    let mut manifest = RunManifest::new("stitch", seed, threads);
    manifest.push("input", args.input.display());
    manifest.push("out", args.out.display());
    manifest.push("tile", format!("{}x{}x{}", args.tile[0], args.tile[1], args.tile[2]));
    manifest.push(
        "stride",
        format!("{}x{}x{}", args.stride[0], args.stride[1], args.stride[2]),
    );
    manifest.push(
        "mapper",
        match &args.mapper {
            MapperSpec::Identity => "identity".to_string(),
            MapperSpec::Affine { a, b } => format!("affine:{a},{b}"),
            MapperSpec::Lut(p) => format!("lut:{}", p.display()),
        },
    );
    finish_manifest(manifest, started, args.manifest.as_ref())
}

fn cmd_phantom(
    args: PhantomArgs,
    seed: u64,
    threads: Option<usize>,
    started: Instant,
) -> Result<()> {
    let spec = PhantomSpec {
        dims: args.dims,
        seed,
        n_blobs: args.blobs,
        deformation: args.deformation,
        remap: args.remap,
    };
    let phantom = generate(&spec)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let path = |name: &str| args.out_dir.join(name);
    phantom.volume_a.save_mha(path("a.mha"))?;
    phantom.volume_b.save_mha(path("b.mha"))?;
    phantom.labels_a.save_mha(path("labels_a.mha"))?;
    phantom.labels_b.save_mha(path("labels_b.mha"))?;
    phantom.truth.save_mha(path("truth.mha"))?;
    write_text(&path("spec.txt"), &spec.echo())?;
    println!("wrote a,b,labels_a,labels_b,truth to {}", args.out_dir.display());
    let mut manifest = RunManifest::new("phantom", seed, threads);
    manifest.push("out_dir", args.out_dir.display());
    for line in spec.echo().lines() {
        if let Some((k, v)) = line.split_once('=') {
            manifest.push(k, v);
        }
    }
    finish_manifest(manifest, started, args.manifest.as_ref())
}

fn cmd_gridsearch(
    args: GridsearchArgs,
    seed: u64,
    threads: Option<usize>,
    started: Instant,
) -> Result<()> {
    let fixed = Volume::load_mha(&args.fixed)?;
    let moving = Volume::load_mha(&args.moving)?;
    let base = RegistrationConfig {
        measure: args.measure,
        beta: args.beta,
        max_iters_per_level: args.iters,
        seed,
        ..Default::default()
    };
    let table = if let Some(spec) = args.score.strip_prefix("dice:") {
        let (fixed_labels_path, moving_labels_path) = spec.split_once(',').ok_or_else(|| {
            Error::invalid("dice score needs dice:<fixed_labels>,<moving_labels>")
        })?;
        let fixed_labels = LabelVolume::load_mha(fixed_labels_path)?;
        let moving_labels = LabelVolume::load_mha(moving_labels_path)?;
        let score = |r: &RegistrationResult| -> Result<f64> {
            let propagated = propagate_labels(&moving_labels, &r.field)?;
            Ok(1.0 - dice(&fixed_labels, &propagated)?.mean)
        };
        grid_search(
            &fixed,
            &moving,
            &base,
            &args.lambdas,
            &args.spacings,
            &args.levels,
            score,
        )?
    } else if args.score == "dissim" {
        let score = |r: &RegistrationResult| -> Result<f64> {
            r.traces
                .last()
                .and_then(|t| t.costs.last().copied())
                .ok_or_else(|| Error::invalid("empty cost trace"))
        };
        grid_search(
            &fixed,
            &moving,
            &base,
            &args.lambdas,
            &args.spacings,
            &args.levels,
            score,
        )?
    } else {
        return Err(Error::invalid(format!(
            "unknown score '{}' (dissim|dice:<fixed_labels>,<moving_labels>)",
            args.score
        )));
    };
    let csv = table.to_csv();
    match &args.out_csv {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(best) = table.best() {
        println!(
            "best: lambda={} spacing={} levels={} score={:.6}",
            best.lambda,
            best.spacing_vox,
            best.levels,
            best.score.unwrap()
        );
    }
    let mut manifest = RunManifest::new("gridsearch", seed, threads);
    manifest.push("fixed", args.fixed.display());
    manifest.push("moving", args.moving.display());
    manifest.push("measure", args.measure);
    manifest.push("beta", args.beta);
    manifest.push(
        "lambdas",
        args.lambdas
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    manifest.push(
        "spacings",
        args.spacings
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    manifest.push(
        "levels",
        args.levels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    manifest.push("score", &args.score);
    manifest.push("cells", table.cells.len());
    finish_manifest(manifest, started, args.manifest.as_ref())
}

fn cmd_volume_stats(
    args: VolumeStatsArgs,
    seed: u64,
    threads: Option<usize>,
    started: Instant,
) -> Result<()> {
    let load_group = |spec: &str| -> Result<Vec<LabelVolume>> {
        spec.split(',')
            .filter(|s| !s.is_empty())
            .map(LabelVolume::load_mha)
            .collect()
    };
    let group_a = load_group(&args.group_a)?;
    let group_b = load_group(&args.group_b)?;
    let report = volume_stats(&group_a, &group_b);
    print!("{}", report.to_text());
    let mut manifest = RunManifest::new("volume-stats", seed, threads);
    manifest.push("group_a", &args.group_a);
    manifest.push("group_b", &args.group_b);
    finish_manifest(manifest, started, args.manifest.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_specs_parse() {
        assert!(matches!(
            parse_scale("grad").unwrap().strategy,
            ScaleStrategy::InitialGradient
        ));
        assert!(matches!(
            parse_scale("delta").unwrap().strategy,
            ScaleStrategy::DissimilarityChange
        ));
        let f = parse_scale("fixed:2.5").unwrap();
        assert!(matches!(f.strategy, ScaleStrategy::Fixed));
        assert_eq!(f.fixed_s, 2.5);
        assert!(parse_scale("fixed:-1").is_err());
        assert!(parse_scale("nope").is_err());
    }

    #[test]
    fn triples_and_lists_parse() {
        assert_eq!(parse_triple("16x16x12").unwrap(), [16, 16, 12]);
        assert!(parse_triple("16x16").is_err());
        assert_eq!(parse_usize_list("2,3,4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_f64_list("0.1, 0.2").unwrap(), vec![0.1, 0.2]);
    }

    #[test]
    fn deformation_and_remap_parse() {
        assert_eq!(parse_deformation("none").unwrap(), Deformation::None);
        assert_eq!(
            parse_deformation("sinusoidal:3,32").unwrap(),
            Deformation::Sinusoidal {
                amplitude: 3.0,
                period: 32.0
            }
        );
        assert_eq!(
            parse_deformation("random:2,4").unwrap(),
            Deformation::RandomSmooth {
                amplitude: 2.0,
                sigma: 4.0
            }
        );
        assert!(parse_deformation("sinusoidal:3").is_err());
        assert_eq!(parse_remap("gamma:2").unwrap(), Remap::Gamma(2.0));
        assert_eq!(parse_remap("bands:4").unwrap(), Remap::InvertedBands(4));
    }

    #[test]
    fn lut_maps_by_nearest_input() {
        let rows = vec![(0.0f32, 10.0f32), (1.0, 20.0), (2.0, 5.0)];
        assert_eq!(lut_map(&rows, -3.0), 10.0);
        assert_eq!(lut_map(&rows, 0.4), 10.0);
        assert_eq!(lut_map(&rows, 0.6), 20.0);
        assert_eq!(lut_map(&rows, 1.5), 20.0);
        assert_eq!(lut_map(&rows, 99.0), 5.0);
    }

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        assert_eq!(cli_main(["mmreg", "--no-such-flag"]), 1);
        assert_eq!(cli_main(["mmreg", "nonsense-subcommand"]), 1);
        assert_eq!(cli_main(["mmreg", "--help"]), 0);
        assert_eq!(cli_main(["mmreg", "register", "--help"]), 0);
    }

    #[test]
    fn missing_input_file_exits_two() {
        assert_eq!(
            cli_main([
                "mmreg",
                "dice",
                "--a",
                "/nonexistent/a.mha",
                "--b",
                "/nonexistent/b.mha"
            ]),
            2
        );
    }
}
