use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mpt_core::harness::gradcheck::{catalogue, run_case};
use mpt_core::harness::{evaluate, load_checkpoint_file, save_checkpoint_file, train, Config, StepRecord};
use mpt_core::synthdata::{read_dataset, read_hsvc, write_dataset, write_hsvc, DatasetSpec, SequenceRecord};
use mpt_core::unmixing::infer_abundances;

#[derive(Parser)]
#[command(name = "mpt", version, about = "Material-prompted hyperspectral tracker")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from a key = value spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Print every n-th step.
        #[arg(long, default_value_t = 10)]
        every: usize,
    },
    /// One-pass evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: PathBuf,
        /// Per-frame errors as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Unmix every frame of a cube with a checkpoint's unmixing network.
    Unmix {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Run only the named case.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen(spec: &Path, out: &Path) -> Result<()> {
    let spec = DatasetSpec::parse(&read_text(spec)?)?;
    let records = spec.generate()?;
    let paths = write_dataset(out, &records)?;
    println!("wrote {} sequences to {}", paths.len(), out.display());
    Ok(())
}

fn run_train(config: &Path, data: &Path, out: &Path, log: Option<&Path>, every: usize) -> Result<()> {
    let config = Config::parse(&read_text(config)?)?;
    let seqs = read_dataset(data)?;
    let every = every.max(1);
    let start = Instant::now();
    let trained = train(&config, &seqs, |r: &StepRecord| {
        if r.step % every == 0 {
            println!(
                "step {:>5}  lr {:.2e}  loss {:.4}  cls {:.4}  iou {:.4}  l1 {:.4}  unmix {}  {:.1}s",
                r.step,
                r.lr,
                r.total,
                r.cls,
                r.iou,
                r.l1,
                r.unmix.map(|u| format!("{u:.4}")).unwrap_or_else(|| "-".into()),
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    save_checkpoint_file(out, &trained.config, &trained.store)?;
    if let Some(p) = log {
        write_text(p, &mpt_core::harness::train::log_csv(&trained.log))?;
    }
    println!(
        "trained {} steps in {:.1}s, checkpoint {}",
        trained.log.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn run_eval(ckpt: &Path, data: &Path, json: &Path, csv: Option<&Path>) -> Result<()> {
    let (config, model, store) = load_checkpoint_file(ckpt)?;
    let seqs = read_dataset(data)?;
    let ev = evaluate(&model, &store, config.train.template_factor, config.train.search_factor, &seqs)?;
    write_text(json, &ev.to_json())?;
    if let Some(p) = csv {
        write_text(p, &ev.to_csv())?;
    }
    println!(
        "DP@20 {:.4}  AUC {:.4}  ({} frames, {} sequences)",
        ev.overall.dp20,
        ev.overall.auc,
        ev.overall.ious.len(),
        ev.sequences.len()
    );
    Ok(())
}

fn run_unmix(ckpt: &Path, cube: &Path, out: &Path) -> Result<()> {
    let (config, model, store) = load_checkpoint_file(ckpt)?;
    let Some(net) = &model.unmix else {
        bail!("checkpoint has mrdm = false; there is no unmixing network");
    };
    let seq = read_hsvc(cube)?;
    if seq.bands != config.model.bands {
        bail!("cube has {} bands, model expects {}", seq.bands, config.model.bands);
    }
    let abundances = seq
        .frames
        .iter()
        .map(|f| infer_abundances(net, &store, f))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let rec = SequenceRecord {
        endmembers: net.endmembers(&store),
        abundances,
        ..seq
    };
    write_hsvc(out, &rec)?;
    println!("unmixed {} frames into {} endmembers, wrote {}", rec.len(), rec.endmember_count(), out.display());
    Ok(())
}

fn run_gradcheck(op: Option<&str>, seeds: u64) -> Result<()> {
    let cases: Vec<_> = catalogue().into_iter().filter(|c| op.is_none_or(|o| c.name == o)).collect();
    if cases.is_empty() {
        bail!("no gradcheck case named `{}`", op.unwrap_or_default());
    }
    let mut failed = 0;
    for case in &cases {
        let s = run_case(case, 0..seeds)?;
        let tag = if s.passed() { "PASS" } else { "FAIL" };
        println!(
            "{tag}  {:<28} max rel err {:.3e} (seed {}), {} non-smooth coordinates skipped",
            s.name, s.max_rel_error, s.worst_seed, s.nonsmooth
        );
        failed += usize::from(!s.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} cases failed", cases.len());
    }
    println!("{} cases passed", cases.len());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen { spec, out } => gen(&spec, &out),
        Cmd::Train {
            config,
            data,
            out,
            log,
            every,
        } => run_train(&config, &data, &out, log.as_deref(), every),
        Cmd::Eval { ckpt, data, json, csv } => run_eval(&ckpt, &data, &json, csv.as_deref()),
        Cmd::Unmix { ckpt, cube, out } => run_unmix(&ckpt, &cube, &out),
        Cmd::Gradcheck { op, seeds } => run_gradcheck(op.as_deref(), seeds),
    }
}
