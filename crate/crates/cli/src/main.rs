use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use barprune::budget::Metric;
use barprune::config::{Config, Method};
use barprune::data::{synthesize, Dataset, SyntheticConfig};
use barprune::netgraph::{cost_report, hard_prune, GateMode, Network};
use barprune::persist::{self, Model};
use barprune::report::{sweep_to_csv, PruneReport, SweepRow};
use barprune::trainer::{self, PruneOutcome, Split};
use barprune::{Error, Rng};
use clap::{Parser, Subcommand};

const SWEEP_FACTORS: [u32; 4] = [2, 4, 8, 16];

#[derive(Parser, Debug)]
#[command(name = "barprune", version, about = "Budget-aware structured pruning of small residual CNNs")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train and eval datasets.
    GenData,
    /// Train the unpruned network and cache its training-set logits.
    TrainTeacher,
    /// Prune under the configured budget (BAR or a baseline).
    Prune,
    /// Accuracy, latency and analytic cost of a checkpoint on the eval split.
    Eval {
        /// Dense or pruned checkpoint.
        checkpoint: PathBuf,
    },
    /// Prune at 1/2, 1/4, 1/8 and 1/16 of the full volume for every
    /// configured method.
    Sweep,
}

/// Maps errors onto exit codes: 1 usage or config, 2 integrity, 3 budget.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Integrity { .. } => 2,
        Error::Budget(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Ctx {
    cfg: Config,
    force: bool,
}

fn run(cli: Cli) -> barprune::Result<()> {
    let path = cli.config.ok_or_else(|| Error::Argument("--config PATH is required".into()))?;
    let mut cfg = Config::load(&path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = Some(o);
    }
    let ctx = Ctx { cfg, force: cli.force };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainTeacher => train_teacher(&ctx),
        Command::Prune => prune(&ctx),
        Command::Eval { checkpoint } => eval(&ctx, &checkpoint),
        Command::Sweep => sweep(&ctx),
    }
}

impl Ctx {
    fn out_dir(&self) -> barprune::Result<PathBuf> {
        let dir = self.cfg.out.clone().ok_or_else(|| Error::Config {
            path: self.cfg.path.display().to_string(),
            line: 0,
            msg: "no output directory: set `out` or pass --out".into(),
        })?;
        fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        Ok(dir)
    }

    /// Refuses to clobber existing files unless `--force` was given.
    fn check_writable(&self, paths: &[&Path]) -> barprune::Result<()> {
        if self.force {
            return Ok(());
        }
        match paths.iter().find(|p| p.exists()) {
            Some(p) => Err(Error::Argument(format!("{} exists; pass --force to overwrite", p.display()))),
            None => Ok(()),
        }
    }

    fn data_path(&self, p: &Option<PathBuf>) -> PathBuf {
        p.clone().expect("checked by require")
    }

    fn train_split(&self) -> barprune::Result<Split> {
        self.cfg.require(&["data.train_images", "data.train_labels"])?;
        let d = &self.cfg.data;
        self.load_split(&self.data_path(&d.train_images), &self.data_path(&d.train_labels))
    }

    fn eval_split(&self) -> barprune::Result<Option<Split>> {
        let d = &self.cfg.data;
        match (&d.eval_images, &d.eval_labels) {
            (Some(i), Some(l)) => self.load_split(i, l).map(Some),
            _ => Ok(None),
        }
    }

    fn load_split(&self, images: &Path, labels: &Path) -> barprune::Result<Split> {
        let d = Dataset::load(images, labels)?;
        d.check_classes(self.cfg.spec.num_classes, labels)?;
        let split = Split::new(&d);
        split.check_spec(&self.cfg.spec)?;
        Ok(split)
    }

    fn teacher_paths(&self) -> barprune::Result<(PathBuf, PathBuf)> {
        let ck = match &self.cfg.teacher_checkpoint {
            Some(p) => p.clone(),
            None => self.out_dir()?.join("teacher.ckpt"),
        };
        let cache = match &self.cfg.teacher_cache {
            Some(p) => p.clone(),
            None => self.out_dir()?.join("teacher.logits"),
        };
        Ok((ck, cache))
    }

    fn load_teacher(&self) -> barprune::Result<(Network, barprune::distill::LogitsCache)> {
        let (ck, cache) = self.teacher_paths()?;
        let net = match persist::load_model(&ck)? {
            Model::Dense(n) => *n,
            Model::Pruned(_) => return Err(Error::integrity(&ck, "teacher checkpoint holds a pruned graph")),
        };
        if net.spec != self.cfg.spec {
            return Err(Error::Spec(format!("{} was trained for a different architecture", ck.display())));
        }
        Ok((net, persist::load_cache(&cache)?))
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> barprune::Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn gen_data(ctx: &Ctx) -> barprune::Result<()> {
    let cfg = &ctx.cfg;
    cfg.require(&[
        "seed",
        "data.train_images",
        "data.train_labels",
        "data.eval_images",
        "data.eval_labels",
        "data.classes",
        "data.train_samples",
        "data.eval_samples",
    ])?;
    let d = &cfg.data;
    let paths = [&d.train_images, &d.train_labels, &d.eval_images, &d.eval_labels].map(|p| ctx.data_path(p));
    ctx.check_writable(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    for p in &paths {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        }
    }
    let mut rng = Rng::new(cfg.seed);
    let train = synthesize(&cfg.synth, &mut rng.fork(1))?;
    let eval = synthesize(&SyntheticConfig { samples: cfg.eval_samples, ..cfg.synth }, &mut rng.fork(2))?;
    train.save(&paths[0], &paths[1])?;
    eval.save(&paths[2], &paths[3])?;
    println!("train: {} samples -> {}", train.len(), paths[0].display());
    println!("eval: {} samples -> {}", eval.len(), paths[2].display());
    Ok(())
}

fn train_teacher(ctx: &Ctx) -> barprune::Result<()> {
    let cfg = &ctx.cfg;
    let (ck, cache_path) = ctx.teacher_paths()?;
    let log_path = ctx.out_dir()?.join("teacher.csv");
    ctx.check_writable(&[&ck, &cache_path, &log_path])?;
    let train = ctx.train_split()?;
    let eval = ctx.eval_split()?;
    let t = trainer::train_teacher(&cfg.spec, &train, eval.as_ref(), &cfg.teacher, cfg.seed)?;
    persist::network_to_checkpoint(&t.net).save(&ck)?;
    persist::save_cache(&t.cache, &cache_path)?;
    write(&log_path, t.log.to_csv())?;
    println!("train_accuracy: {}", t.train_acc);
    if let Some(a) = t.eval_acc {
        println!("eval_accuracy: {a}");
    }
    println!("checkpoint: {}", ck.display());
    println!("cache: {}", cache_path.display());
    Ok(())
}

fn report_of(method: Method, cfg: &Config, o: &PruneOutcome) -> PruneReport {
    PruneReport {
        method: method.name().into(),
        metric: o.metric,
        budget_fraction: cfg.train.budget.fraction,
        budget: o.budget,
        costs: o.report,
        eval_accuracy: o.eval_acc,
        violations: o.log.violations,
        extra_epochs: o.extra_epochs,
    }
}

fn save_outcome(dir: &Path, stem: &str, report: &PruneReport, o: &PruneOutcome) -> barprune::Result<()> {
    persist::pruned_to_checkpoint(&o.pruned).save(&dir.join(format!("{stem}.ckpt")))?;
    write(&dir.join(format!("{stem}.csv")), o.log.to_csv())?;
    write(&dir.join(format!("{stem}.report.txt")), report.to_text())
}

/// Smallest sweep factor covering `1 / fraction`.
fn baseline_factors(fraction: f64) -> barprune::Result<Vec<usize>> {
    let target = 1.0 / fraction;
    let mut out = Vec::new();
    for f in SWEEP_FACTORS {
        out.push(f as usize);
        if f as f64 >= target - 1e-9 {
            return Ok(out);
        }
    }
    Err(Error::Argument(format!("baselines support budget fractions down to 1/16, got {fraction}")))
}

fn prune(ctx: &Ctx) -> barprune::Result<()> {
    let cfg = &ctx.cfg;
    cfg.require(&["budget.fraction", "prune.method"])?;
    let dir = ctx.out_dir()?;
    let method = cfg.prune_method;
    let stem = method.name();
    let outputs: Vec<PathBuf> = ["ckpt", "csv", "report.txt"].iter().map(|e| dir.join(format!("{stem}.{e}"))).collect();
    ctx.check_writable(&outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let train = ctx.train_split()?;
    let eval = ctx.eval_split()?;
    let (teacher, cache) = ctx.load_teacher()?;
    let outcome = match method {
        Method::Bar => trainer::bar_train(&cfg.spec, &train, eval.as_ref(), &cache, Some(&teacher), &cfg.train, cfg.seed)?,
        Method::Baseline(kind) => {
            if cfg.train.budget.metric != Metric::Volume {
                return Err(Error::Argument("baselines scale widths for a volume budget only".into()));
            }
            let factors = baseline_factors(cfg.train.budget.fraction)?;
            let stages = trainer::baseline_prune(kind, &teacher, &train, eval.as_ref(), &cfg.baseline, &factors, cfg.seed)?;
            stages.into_iter().last().expect("at least one factor").outcome
        }
    };
    let mut report = report_of(method, cfg, &outcome);
    if let Method::Baseline(_) = method {
        report.budget = outcome.report.full_volume * cfg.train.budget.fraction;
    }
    save_outcome(&dir, stem, &report, &outcome)?;
    print!("{}", report.to_text());
    if !report.within_budget() {
        return Err(Error::Budget(format!(
            "final cost {} exceeds budget {} (report in {})",
            report.final_cost(),
            report.budget,
            outputs[2].display()
        )));
    }
    Ok(())
}

fn eval(ctx: &Ctx, checkpoint: &Path) -> barprune::Result<()> {
    let cfg = &ctx.cfg;
    cfg.require(&["data.eval_images", "data.eval_labels"])?;
    let split = ctx.eval_split()?.expect("required keys present");
    let model = persist::load_model(checkpoint)?;
    let batch = 64;
    let per = split.shape.iter().product::<usize>();
    let start = Instant::now();
    let (logits, costs, classes, kind) = match &model {
        Model::Dense(net) => {
            let z = net.inference_gates();
            let logits = net.predict(&split.x, GateMode::Fixed(&z), batch)?;
            (logits, cost_report(&hard_prune(net)?), net.spec.num_classes, "dense")
        }
        Model::Pruned(g) => (g.predict(&split.x, batch)?, cost_report(g), g.spec.num_classes, "pruned"),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let batches = split.x.len().div_ceil(per * batch).max(1);
    let acc = trainer::evaluate_logits(&logits, &split.labels, classes);
    println!("checkpoint: {}", checkpoint.display());
    println!("kind: {kind}");
    println!("samples: {}", split.len());
    println!("accuracy: {acc}");
    println!("ms_per_batch: {:.3}", 1e3 * elapsed / batches as f64);
    println!("volume: {}", costs.volume);
    println!("volume_factor: {}", costs.volume_factor);
    println!("flops: {}", costs.flops);
    println!("flop_factor: {}", costs.flop_factor);
    Ok(())
}

fn error_status(e: &Error) -> String {
    let kind = match e {
        Error::Budget(_) => "budget",
        Error::Divergence(_) | Error::NonFinite(_) => "divergence",
        Error::Integrity { .. } => "integrity",
        Error::Io { .. } => "io",
        _ => "other",
    };
    format!("error:{kind}")
}

fn row(method: Method, factor: u32, budget: f64, o: &PruneOutcome) -> SweepRow {
    SweepRow {
        method: method.name().into(),
        factor,
        budget,
        status: if o.report.volume <= budget { "ok" } else { "over_budget" }.into(),
        volume: Some(o.report.volume),
        volume_factor: Some(o.report.volume_factor),
        flop_factor: Some(o.report.flop_factor),
        accuracy: o.eval_acc,
    }
}

fn failed_row(method: Method, factor: u32, budget: f64, e: &Error) -> SweepRow {
    log::error!("{} at {factor}x failed: {e}", method.name());
    SweepRow {
        method: method.name().into(),
        factor,
        budget,
        status: error_status(e),
        volume: None,
        volume_factor: None,
        flop_factor: None,
        accuracy: None,
    }
}

fn sweep(ctx: &Ctx) -> barprune::Result<()> {
    let cfg = &ctx.cfg;
    cfg.require(&["sweep.methods"])?;
    if cfg.train.budget.metric != Metric::Volume {
        return Err(Error::Argument("the sweep budgets are fractions of the full volume; set budget.metric = volume".into()));
    }
    let dir = ctx.out_dir()?;
    let csv_path = dir.join("sweep.csv");
    ctx.check_writable(&[&csv_path])?;
    let runs = dir.join("sweep");
    fs::create_dir_all(&runs).map_err(|e| Error::Io { path: runs.clone(), source: e })?;
    let train = ctx.train_split()?;
    let eval = ctx.eval_split()?;
    let (teacher, cache) = ctx.load_teacher()?;
    let full = teacher.layout.full_volume();
    let mut rows = Vec::new();
    for &method in &cfg.sweep_methods {
        match method {
            Method::Bar => {
                for factor in SWEEP_FACTORS {
                    let mut tc = cfg.train;
                    tc.budget.fraction = 1.0 / factor as f64;
                    let budget = full * tc.budget.fraction;
                    match trainer::bar_train(&cfg.spec, &train, eval.as_ref(), &cache, Some(&teacher), &tc, cfg.seed) {
                        Ok(o) => {
                            let mut c = cfg.clone();
                            c.train = tc;
                            let r = report_of(method, &c, &o);
                            save_outcome(&runs, &format!("bar-{factor}x"), &r, &o)?;
                            rows.push(row(method, factor, budget, &o));
                        }
                        Err(e) => rows.push(failed_row(method, factor, budget, &e)),
                    }
                }
            }
            Method::Baseline(kind) => {
                let factors: Vec<usize> = SWEEP_FACTORS.iter().map(|&f| f as usize).collect();
                match trainer::baseline_prune(kind, &teacher, &train, eval.as_ref(), &cfg.baseline, &factors, cfg.seed) {
                    Ok(stages) => {
                        for s in stages {
                            let budget = full / s.factor as f64;
                            let mut c = cfg.clone();
                            c.train.budget.fraction = 1.0 / s.factor as f64;
                            let r = report_of(method, &c, &s.outcome);
                            save_outcome(&runs, &format!("{}-{}x", method.name(), s.factor), &r, &s.outcome)?;
                            rows.push(row(method, s.factor as u32, budget, &s.outcome));
                        }
                    }
                    Err(e) => {
                        for factor in SWEEP_FACTORS {
                            rows.push(failed_row(method, factor, full / factor as f64, &e));
                        }
                    }
                }
            }
        }
    }
    let csv = sweep_to_csv(&rows);
    write(&csv_path, &csv)?;
    print!("{csv}");
    Ok(())
}
