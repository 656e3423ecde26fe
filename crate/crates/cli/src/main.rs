use std::cell::RefCell;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use mixmerge::checkpoint::{read_delta, write_delta, Digest};
use mixmerge::lab::{self, build_toy_pair, compute_pdr, run_sweep_with, scan_models, scan_path, ToyTasks};
use mixmerge::manifest::write_manifest;
use mixmerge::merge::{dare_sparsify, merge_deltas, rename_output};
use mixmerge::sampler::DEFAULT_ALPHAS;
use mixmerge::{
    delta, merge, read_checkpoint, sample_lambda, write_checkpoint, BetaShape, DeltaSet, MergeManifest, MergeMethod,
    MergeRecipe, SparsifyConfig, SweepSchedule, TensorMap,
};

const SEED_ENV: &str = "MIXMERGE_SEED";

#[derive(Parser)]
#[command(name = "mixmerge", version, about = "Merge fine-tuned checkpoints with Beta-sampled interpolation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Merge checkpoints (or delta files) into one checkpoint
    Merge(MergeArgs),
    /// Sample one coefficient per alpha, merge, and score each merge
    Sweep(SweepArgs),
    /// Write `fine - base` as a delta file
    Delta(DeltaArgs),
    /// Apply DARE drop-and-rescale to a delta file
    Sparsify(SparsifyArgs),
    /// Evaluate the toy tasks along the segment between two checkpoints
    Scan(ScanArgs),
    /// Print tensor names, shapes and the file digest
    Inspect(InspectArgs),
    /// Performance drop rate from metrics with and without attack
    Pdr(PdrArgs),
    /// Toy task pairs for desk-scale experiments
    #[command(subcommand)]
    Lab(LabCmd),
}

/// Flags shared by `merge` and `sweep`.
#[derive(Args)]
struct MethodFlags {
    /// Base (pretrained) checkpoint; required by delta-based methods and DARE
    #[arg(long)]
    base: Option<PathBuf>,
    /// Scaling term for task arithmetic and TIES variants
    #[arg(long)]
    scaling: Option<f64>,
    /// Fraction of largest-magnitude delta entries TIES keeps
    #[arg(long)]
    retain_ratio: Option<f64>,
    /// DARE drop rate; 0 leaves the inputs untouched
    #[arg(long)]
    dare_p: Option<f64>,
    /// Seed for DARE masks (defaults to --seed, then 0)
    #[arg(long)]
    dare_seed: Option<u64>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    method: MergeMethod,
    /// Input checkpoints (delta files with --delta-inputs)
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    flags: MethodFlags,
    /// Explicit M³ coefficient in (0, 1)
    #[arg(long, conflicts_with = "alpha")]
    lambda_m: Option<f64>,
    /// Sample the M³ coefficient from Beta(alpha, alpha)
    #[arg(long)]
    alpha: Option<f64>,
    /// Seed for the coefficient draw
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Inputs are delta files against --base
    #[arg(long)]
    delta_inputs: bool,
    /// Id stored in the output checkpoint
    #[arg(long)]
    id: Option<String>,
    #[arg(short, long)]
    out: PathBuf,
    /// Defaults to `<out>.manifest.json`
    #[arg(long)]
    manifest_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated alphas
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHAS.to_vec())]
    alphas: Vec<f64>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "m3-average")]
    method: MergeMethod,
    /// The two fine-tuned checkpoints
    #[arg(num_args = 2, required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    flags: MethodFlags,
    /// `lab:<seed>` for the built-in toy tasks, or `cmd:<program>` run as
    /// `<program> <checkpoint> <task>` printing one score
    #[arg(long)]
    evaluator: EvaluatorSpec,
    /// Comma-separated task names passed to the evaluator
    #[arg(long, value_delimiter = ',', default_values_t = vec!["task1".to_string(), "task2".to_string()])]
    tasks: Vec<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Debug)]
enum EvaluatorSpec {
    Lab(u64),
    Command(String),
}

impl std::str::FromStr for EvaluatorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(seed) = s.strip_prefix("lab:") {
            seed.parse()
                .map(EvaluatorSpec::Lab)
                .map_err(|_| format!("bad lab seed `{seed}`"))
        } else if let Some(cmd) = s.strip_prefix("cmd:") {
            if cmd.is_empty() {
                Err("empty evaluator command".into())
            } else {
                Ok(EvaluatorSpec::Command(cmd.to_string()))
            }
        } else {
            Err("expected `lab:<seed>` or `cmd:<program>`".into())
        }
    }
}

#[derive(Args)]
struct DeltaArgs {
    fine: PathBuf,
    base: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    manifest_out: Option<PathBuf>,
}

#[derive(Args)]
struct SparsifyArgs {
    delta: PathBuf,
    /// Drop rate
    #[arg(long, default_value_t = mixmerge::merge::DEFAULT_DROP_RATE)]
    p: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    manifest_out: Option<PathBuf>,
}

#[derive(Args)]
struct ScanArgs {
    /// Checkpoint at lambda = 1
    t1: PathBuf,
    /// Checkpoint at lambda = 0
    t2: PathBuf,
    /// Number of evenly spaced lambdas, endpoints included
    #[arg(long, default_value_t = 11)]
    grid: usize,
    /// Seed of the toy tasks to evaluate on
    #[arg(long)]
    lab_seed: u64,
    /// Emit JSON instead of CSV
    #[arg(long)]
    json: bool,
    /// Write to a file instead of standard output
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    file: PathBuf,
}

#[derive(Args)]
struct PdrArgs {
    /// Metric without attack, then with attack
    #[arg(num_args = 2, required_unless_present = "csv", conflicts_with = "csv")]
    metrics: Vec<f64>,
    /// CSV with `no_attack,attack` columns; prints the rows with a `pdr`
    /// column added
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LabCmd {
    /// Train a toy pair and write pretrained.ckpt, t1.ckpt, t2.ckpt
    Build {
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Path-barrier statistic over seeded toy pairs
    Basin {
        /// Number of pairs, seeds 0..n
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 21)]
        grid: usize,
    },
}

/// Failure that maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Merge(a) => cmd_merge(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Delta(a) => cmd_delta(a),
        Cmd::Sparsify(a) => cmd_sparsify(a),
        Cmd::Scan(a) => cmd_scan(a),
        Cmd::Inspect(a) => cmd_inspect(a),
        Cmd::Pdr(a) => cmd_pdr(a),
        Cmd::Lab(c) => cmd_lab(c),
    }
}

fn manifest_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    })
}

/// `SOURCE_DATE_EPOCH` when set, so reruns can be made byte-identical.
fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

fn save_manifest(mut m: MergeManifest, path: &Path) -> anyhow::Result<()> {
    m.created_unix = Some(timestamp());
    write_manifest(&m, path).with_context(|| format!("writing manifest {}", path.display()))
}

fn load(path: &Path) -> anyhow::Result<TensorMap> {
    read_checkpoint(path).with_context(|| format!("reading {}", path.display()))
}

fn load_delta(path: &Path) -> anyhow::Result<DeltaSet> {
    read_delta(path).with_context(|| format!("reading {}", path.display()))
}

/// Recipe from flags, without the M³ coefficient.
fn recipe_from_flags(method: MergeMethod, flags: &MethodFlags, seed: Option<u64>) -> anyhow::Result<MergeRecipe> {
    let mut recipe = MergeRecipe::new(method);
    if let Some(s) = flags.scaling {
        recipe = recipe.with_scaling(s);
    }
    if let Some(r) = flags.retain_ratio {
        recipe = recipe.with_retain_ratio(r);
    }
    if let Some(p) = flags.dare_p {
        let cfg = SparsifyConfig::new(p, flags.dare_seed.or(seed).unwrap_or(0)).map_err(|e| usage(e.to_string()))?;
        recipe = recipe.with_dare(cfg);
    } else if flags.dare_seed.is_some() {
        return Err(usage("--dare-seed needs --dare-p"));
    }
    let needs_base = method.needs_base() || flags.dare_p.is_some_and(|p| p > 0.0);
    if needs_base && flags.base.is_none() {
        return Err(usage(format!("{method} needs --base")));
    }
    Ok(recipe)
}

fn cmd_merge(a: MergeArgs) -> anyhow::Result<()> {
    let mut recipe = recipe_from_flags(a.method, &a.flags, a.seed)?;
    if a.method.is_m3() {
        recipe = match (a.lambda_m, a.alpha) {
            (Some(l), None) => recipe.with_lambda(l),
            (None, Some(alpha)) => {
                let seed = a
                    .seed
                    .ok_or_else(|| usage(format!("--alpha needs --seed (or {SEED_ENV})")))?;
                let shape = BetaShape::new(alpha).map_err(|e| usage(e.to_string()))?;
                recipe.with_sampling(sample_lambda(shape, seed))
            }
            _ => return Err(usage(format!("{} needs --lambda-m or --alpha", a.method))),
        };
    } else if a.lambda_m.is_some() || a.alpha.is_some() {
        return Err(usage(format!("{} takes no --lambda-m or --alpha", a.method)));
    }
    recipe.validate().map_err(|e| usage(e.to_string()))?;
    if a.delta_inputs && a.flags.base.is_none() {
        return Err(usage("--delta-inputs needs --base"));
    }

    let base = a.flags.base.as_deref().map(load).transpose()?;
    let (merged, mut manifest) = if a.delta_inputs {
        let deltas = a.inputs.iter().map(|p| load_delta(p)).collect::<anyhow::Result<Vec<_>>>()?;
        let refs: Vec<&DeltaSet> = deltas.iter().collect();
        merge_deltas(&recipe, base.as_ref().expect("checked"), &refs)?
    } else {
        let models = a.inputs.iter().map(|p| load(p)).collect::<anyhow::Result<Vec<_>>>()?;
        let refs: Vec<&TensorMap> = models.iter().collect();
        merge(&recipe, base.as_ref(), &refs)?
    };
    let merged = match &a.id {
        Some(id) => rename_output(merged, &mut manifest, id),
        None => merged,
    };
    let digest = write_checkpoint(&merged, &a.out)?;
    save_manifest(manifest, &manifest_path(&a.out, a.manifest_out))?;
    if let Some(rec) = recipe.sampling {
        println!("alpha {} seed {} lambda_m {}", rec.alpha, rec.seed, rec.lambda_m);
    }
    println!("{digest}  {}", a.out.display());
    Ok(())
}

fn run_evaluator(program: &str, ckpt: &Path, task: &str) -> mixmerge::Result<f64> {
    let fail = |msg: String| mixmerge::Error::Evaluation(format!("`{program}` on {task}: {msg}"));
    let out = Command::new(program)
        .arg(ckpt)
        .arg(task)
        .output()
        .map_err(|e| fail(e.to_string()))?;
    if !out.status.success() {
        return Err(fail(format!("exited with {}", out.status)));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let score: f64 = text
        .trim()
        .parse()
        .map_err(|_| fail(format!("expected one number, got {:?}", text.trim())))?;
    if !(0.0..=100.0).contains(&score) {
        return Err(fail(format!("score {score} outside [0, 100]")));
    }
    Ok(score)
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    if !a.method.is_m3() {
        return Err(usage(format!("sweeps need an M³ method, got {}", a.method)));
    }
    let schedule = SweepSchedule::new(a.alphas.clone(), a.seed);
    for &alpha in &schedule.alphas {
        BetaShape::new(alpha).map_err(|e| usage(e.to_string()))?;
    }
    let template = recipe_from_flags(a.method, &a.flags, Some(a.seed))?;
    template
        .clone()
        .with_lambda(0.5)
        .validate()
        .map_err(|e| usage(e.to_string()))?;
    let tasks = match &a.evaluator {
        EvaluatorSpec::Lab(seed) => {
            if a.tasks.len() != 2 {
                return Err(usage("the lab evaluator scores exactly two tasks"));
            }
            Some(ToyTasks::generate(*seed))
        }
        EvaluatorSpec::Command(_) => None,
    };

    let base = a.flags.base.as_deref().map(load).transpose()?;
    let models = a.inputs.iter().map(|p| load(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let refs: Vec<&TensorMap> = models.iter().collect();
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let current = RefCell::new(PathBuf::new());
    let result = run_sweep_with(
        &schedule,
        &template,
        base.as_ref(),
        &refs,
        |i, merged, manifest| {
            let path = a.out_dir.join(format!("merge_{i:02}_alpha{}.ckpt", schedule.alphas[i]));
            write_checkpoint(merged, &path)?;
            let mut m = manifest.clone();
            m.created_unix = Some(timestamp());
            write_manifest(&m, manifest_path(&path, None))?;
            *current.borrow_mut() = path;
            Ok(())
        },
        |merged| match (&tasks, &a.evaluator) {
            (Some(t), _) => t.scores(merged).map(|s| s.to_vec()),
            (None, EvaluatorSpec::Command(program)) => {
                let path = current.borrow();
                a.tasks.iter().map(|t| run_evaluator(program, &path, t)).collect()
            }
            (None, EvaluatorSpec::Lab(_)) => unreachable!("lab tasks are generated up front"),
        },
    )?;

    let write = |name: &str, text: &str| -> anyhow::Result<()> {
        let p = a.out_dir.join(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write("sweep.json", &(result.to_json() + "\n"))?;
    write("sweep.csv", &result.to_csv(&a.tasks))?;
    let table = result.to_table(&a.tasks);
    write("sweep.txt", &table)?;
    print!("{table}");
    for r in &result.records {
        if let Some(e) = &r.error {
            eprintln!("alpha {}: {e}", r.sampling.alpha);
        }
    }
    if result.selected.is_none() {
        bail!("every evaluation failed");
    }
    Ok(())
}

fn cmd_delta(a: DeltaArgs) -> anyhow::Result<()> {
    let fine = load(&a.fine)?;
    let base = load(&a.base)?;
    let d = delta(&fine, &base)?;
    let manifest = MergeManifest::for_delta(&fine, &base, &d);
    let digest = write_delta(&d, &a.out)?;
    save_manifest(manifest, &manifest_path(&a.out, a.manifest_out))?;
    println!("{digest}  {}", a.out.display());
    Ok(())
}

fn cmd_sparsify(a: SparsifyArgs) -> anyhow::Result<()> {
    let cfg = SparsifyConfig::new(a.p, a.seed).map_err(|e| usage(e.to_string()))?;
    let input = load_delta(&a.delta)?;
    let out = dare_sparsify(&input, &cfg)?;
    let manifest = MergeManifest::for_sparsify(&input, cfg, &out);
    let digest = write_delta(&out, &a.out)?;
    save_manifest(manifest, &manifest_path(&a.out, a.manifest_out))?;
    println!("{digest}  {}", a.out.display());
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_scan(a: ScanArgs) -> anyhow::Result<()> {
    if a.grid < 2 {
        return Err(usage("--grid must be at least 2"));
    }
    let t1 = load(&a.t1)?;
    let t2 = load(&a.t2)?;
    let scan = scan_models(&ToyTasks::generate(a.lab_seed), &t1, &t2, a.grid)?;
    let text = if a.json { scan.to_json() + "\n" } else { scan.to_csv() };
    emit(a.out.as_deref(), &text)
}

fn cmd_inspect(a: InspectArgs) -> anyhow::Result<()> {
    let bytes = std::fs::read(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    let ckpt = mixmerge::checkpoint::decode(&bytes).with_context(|| format!("reading {}", a.file.display()))?;
    println!("file     {}", a.file.display());
    println!("digest   {}", Digest::of_bytes(&bytes));
    println!("id       {}", ckpt.tensors.id());
    if let Some(b) = ckpt.base_id() {
        println!("base_id  {b}");
    }
    println!("tensors  {}", ckpt.tensors.len());
    println!("params   {}", ckpt.tensors.num_params());
    for (name, t) in &ckpt.tensors {
        println!("  {name}  {}  {:?}", ckpt.tensors.element_kind().tag(), t.shape());
    }
    Ok(())
}

fn cmd_pdr(a: PdrArgs) -> anyhow::Result<()> {
    if let Some(path) = a.csv {
        let mut rdr = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| anyhow!("{}: missing column `{name}`", path.display()))
        };
        let (ni, ai) = (col("no_attack")?, col("attack")?);
        let mut w = csv::Writer::from_writer(std::io::stdout());
        let mut out_headers: Vec<&str> = headers.iter().collect();
        out_headers.push("pdr");
        w.write_record(&out_headers)?;
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let num = |i: usize| -> anyhow::Result<f64> {
                row[i]
                    .trim()
                    .parse()
                    .with_context(|| format!("row {}: bad number {:?}", line + 1, &row[i]))
            };
            let report = compute_pdr(num(ni)?, num(ai)?).with_context(|| format!("row {}", line + 1))?;
            let mut fields: Vec<String> = row.iter().map(str::to_string).collect();
            fields.push(format!("{:.2}", report.pdr));
            w.write_record(&fields)?;
        }
        w.flush()?;
    } else {
        let report = compute_pdr(a.metrics[0], a.metrics[1])?;
        println!("{:.2}", report.pdr);
    }
    Ok(())
}

fn cmd_lab(c: LabCmd) -> anyhow::Result<()> {
    match c {
        LabCmd::Build { seed, out_dir } => {
            let pair = build_toy_pair(seed)?;
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            for (name, m) in [("pretrained", &pair.pretrained), ("t1", &pair.model_t1), ("t2", &pair.model_t2)] {
                let path = out_dir.join(format!("{name}.ckpt"));
                let digest = write_checkpoint(m, &path)?;
                println!("{digest}  {}", path.display());
            }
            let lineage = serde_json::to_string_pretty(&pair.lineage)? + "\n";
            std::fs::write(out_dir.join("lineage.json"), lineage)?;
            Ok(())
        }
        LabCmd::Basin { seeds, grid } => {
            if grid < 2 {
                return Err(usage("--grid must be at least 2"));
            }
            let mut stats = Vec::new();
            println!("seed,barrier");
            for seed in 0..seeds {
                let b = scan_path(&build_toy_pair(seed)?, grid)?.barrier();
                println!("{seed},{b:.6}");
                stats.push(b);
            }
            if !stats.is_empty() {
                println!("# median {:.6}", lab::median(&mut stats));
            }
            Ok(())
        }
    }
}
