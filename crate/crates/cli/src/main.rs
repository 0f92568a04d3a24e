//! `scmd`: data generation, teacher building, training, evaluation, ablations,
//! sweeps and bound checks, all driven by one JSON config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use scmd_core::config::RunConfig;
use scmd_core::data::{gen_synthetic, split_lodo, split_train_val, DomainDataset};
use scmd_core::experiment::{self, run_experiment, Algorithm, ExperimentSpec, ExperimentTable};
use scmd_core::io::write_atomic;
use scmd_core::selection::SelectionStrategy;
use scmd_core::student::StudentParams;
use scmd_core::teacher::{make_oracle_teacher, TeacherArtifact};
use scmd_core::theory::verify_all;
use scmd_core::trainer::{evaluate, train, TrainData};
use scmd_core::{Error, Result};

const DATASET_FILE: &str = "dataset.csv";
const TEACHER_FILE: &str = "teacher.scmd";
const FALLBACK_EMBED_DIM: usize = 16;

#[derive(Parser)]
#[command(
    name = "scmd",
    version,
    about = "Selective cross-modality distillation at desk scale"
)]
struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for experiment grids.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Inputs {
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Teacher artifact; an oracle teacher is built from the config when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain dataset.
    GenData,
    /// Build the oracle teacher artifact for a dataset.
    OracleTeacher {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train one student on the configured held-out split.
    Train {
        #[command(flatten)]
        inputs: Inputs,
        /// Specialize the config to ERM, VanillaKD, SCMD_logits, SCMD_full or SCMD_<strategy>.
        #[arg(long)]
        algorithm: Option<Algorithm>,
    },
    /// Accuracy of a checkpoint on a dataset or one of its domains.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        domain: Option<usize>,
    },
    /// Leave-one-domain-out table for the configured algorithms.
    Experiment {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Compare the five selection strategies.
    Ablate {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Random or grid hyperparameter search.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Brute-force checks of the tv risk bounds.
    VerifyTheory,
    /// Print a teacher artifact's header, dimensions and norms.
    InspectTeacher { path: PathBuf },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, contents.as_bytes())?;
        Ok(p)
    }

    fn dataset(&self, path: Option<&Path>) -> Result<DomainDataset> {
        match path {
            Some(p) => DomainDataset::load(p),
            None => gen_synthetic(&self.cfg.data),
        }
    }

    fn teacher(&self, path: Option<&Path>, ds: &DomainDataset) -> Result<TeacherArtifact> {
        match path {
            Some(p) => TeacherArtifact::load(p),
            None => make_oracle_teacher(&self.cfg.teacher, ds),
        }
    }

    fn spec(&self, ds: &DomainDataset) -> Result<ExperimentSpec> {
        let held_out = self.cfg.held_out_domains();
        if let Some(d) = held_out.iter().find(|&&d| d >= ds.num_domains) {
            return Err(Error::Config(format!(
                "held-out domain {d} not in the dataset"
            )));
        }
        Ok(ExperimentSpec {
            train: self.cfg.train_config(),
            student: self.cfg.student.clone(),
            train_fraction: self.cfg.split.train_fraction,
            split_seed: self.cfg.split.split_seed,
            seeds: self.cfg.experiment.seeds.clone(),
            held_out,
            workers: self.cfg.workers,
        })
    }
}

fn pretty(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let ds = gen_synthetic(&ctx.cfg.data)?;
    let p = ctx.path(DATASET_FILE);
    ds.save(&p)?;
    println!(
        "wrote {} ({} samples, {} domains)",
        p.display(),
        ds.len(),
        ds.num_domains
    );
    Ok(())
}

fn oracle_teacher(ctx: &Ctx, dataset: Option<&Path>) -> Result<()> {
    let ds = ctx.dataset(dataset)?;
    let t = make_oracle_teacher(&ctx.cfg.teacher, &ds)?;
    let p = ctx.path(TEACHER_FILE);
    t.save(&p)?;
    println!(
        "wrote {} ({} classes, dim {}), zero-shot accuracy {:.4}",
        p.display(),
        t.num_classes(),
        t.embed_dim(),
        t.zero_shot_accuracy(&ds)?
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx, inputs: &Inputs, algorithm: Option<Algorithm>) -> Result<()> {
    let ds = ctx.dataset(inputs.dataset.as_deref())?;
    let base = ctx.cfg.train_config();
    let cfg = algorithm.map_or_else(|| base.clone(), |a| a.apply(&base));
    let teacher = if cfg.needs_teacher() || inputs.teacher.is_some() {
        Some(ctx.teacher(inputs.teacher.as_deref(), &ds)?)
    } else {
        None
    };
    let held_out = ctx.cfg.split.held_out_domain;
    let (rest, test) = split_lodo(&ds, held_out)?;
    let (tr, val) = split_train_val(
        &rest,
        ctx.cfg.split.train_fraction,
        ctx.cfg.split.split_seed,
    )?;
    let embed = teacher
        .as_ref()
        .map_or(FALLBACK_EMBED_DIM, TeacherArtifact::embed_dim);
    let student = ctx
        .cfg
        .student
        .resolve(ds.feature_dim, ds.num_classes, embed);
    let data = TrainData {
        train: &tr,
        val: &val,
        test: Some(&test),
    };
    let outcome = train(&cfg, &student, &data, teacher.as_ref())?;
    let rep = &outcome.report;

    let mut doc = serde_json::to_value(rep)?;
    if let Value::Object(m) = &mut doc {
        m.insert("run_config".into(), serde_json::to_value(&ctx.cfg)?);
        m.insert("held_out_domain".into(), json!(held_out));
        m.insert("algorithm".into(), json!(algorithm.map(|a| a.to_string())));
    }
    outcome
        .selected
        .save(&ctx.path("checkpoint.scmd"), rep.selected_raw.step)?;
    if let (Some(p), Some(s)) = (&outcome.selected_ma, &rep.selected_ma) {
        p.save(&ctx.path("checkpoint_ma.scmd"), s.step)?;
    }
    let p = ctx.write("train_report.json", &pretty(&doc)?)?;
    println!(
        "wrote {}: selected step {}, val {:.4}, held-out {:.4} (averaged: {})",
        p.display(),
        rep.selected_raw.step,
        rep.selected_raw.val_acc,
        rep.selected_raw.test_acc.unwrap_or(f64::NAN),
        rep.selected_ma
            .as_ref()
            .and_then(|s| s.test_acc)
            .map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(())
}

fn eval_cmd(
    ctx: &Ctx,
    checkpoint: &Path,
    dataset: Option<&Path>,
    domain: Option<usize>,
) -> Result<()> {
    let (params, step) = StudentParams::load(checkpoint)?;
    let ds = ctx.dataset(dataset)?;
    let subset = match domain {
        Some(d) => split_lodo(&ds, d)?.1,
        None => ds,
    };
    let acc = evaluate(&params, &subset)?;
    let doc = json!({
        "checkpoint": checkpoint.display().to_string(),
        "step": step,
        "domain": domain,
        "samples": subset.len(),
        "accuracy": acc,
    });
    let text = pretty(&doc)?;
    ctx.write("eval.json", &text)?;
    print!("{text}");
    Ok(())
}

fn write_table(ctx: &Ctx, table: &ExperimentTable, stem: &str) -> Result<()> {
    let summary = ctx.path(&format!("{stem}.csv"));
    table.write(&summary, &ctx.path(&format!("{stem}_cells.csv")))?;
    print!("{}", table.summary_csv()?);
    println!("wrote {}", summary.display());
    Ok(())
}

fn experiment_cmd(ctx: &Ctx, inputs: &Inputs, algorithms: &[Algorithm], stem: &str) -> Result<()> {
    let ds = ctx.dataset(inputs.dataset.as_deref())?;
    let needs_teacher = algorithms
        .iter()
        .any(|a| a.apply(&ctx.cfg.train_config()).needs_teacher());
    let teacher = if needs_teacher {
        Some(ctx.teacher(inputs.teacher.as_deref(), &ds)?)
    } else {
        None
    };
    let table = run_experiment(&ds, teacher.as_ref(), &ctx.spec(&ds)?, algorithms)?;
    write_table(ctx, &table, stem)
}

fn sweep_cmd(ctx: &Ctx, inputs: &Inputs) -> Result<()> {
    let ds = ctx.dataset(inputs.dataset.as_deref())?;
    let teacher = ctx.teacher(inputs.teacher.as_deref(), &ds)?;
    let res = experiment::sweep(&ds, Some(&teacher), &ctx.spec(&ds)?, &ctx.cfg.sweep)?;

    let csv_text = res.ranked_csv()?;
    let best = match &res.best_config {
        Some(tc) => {
            let mut c = ctx.cfg.clone();
            c.set_train_config(tc);
            serde_json::to_value(&c)?
        }
        None => Value::Null,
    };
    let trials_path = ctx.write("sweep_trials.csv", &csv_text)?;
    ctx.write("best_config.json", &pretty(&best)?)?;
    print!("{csv_text}");
    println!(
        "wrote {} and best_config.json (best trial {:?})",
        trials_path.display(),
        res.best
    );
    Ok(())
}

fn verify_theory(ctx: &Ctx) -> Result<bool> {
    let rep = verify_all(&ctx.cfg.theory)?;
    ctx.write("theory_risk_shift.json", &pretty(&rep.risk_shift)?)?;
    ctx.write("theory_finite_sample.json", &pretty(&rep.finite_sample)?)?;
    ctx.write("theory_mixture.json", &pretty(&rep.mixture)?)?;
    let l1 = rep.risk_shift.violations == 0;
    let l2 = rep.finite_sample.violation_rate <= rep.finite_sample.allowed_rate;
    println!(
        "tv risk bound: {} trials, {} violations [{}]",
        rep.risk_shift.trials,
        rep.risk_shift.violations,
        if l1 { "ok" } else { "VIOLATED" }
    );
    println!(
        "finite-sample bound: rate {:.4} vs allowed {:.4} [{}]",
        rep.finite_sample.violation_rate,
        rep.finite_sample.allowed_rate,
        if l2 { "ok" } else { "VIOLATED" }
    );
    println!(
        "selection diagnostic: E_s1 {:.4}, E_s2 {:.4}, inf {:.4}, residual max |r| {:.4}{}",
        rep.mixture.e_tv_s1,
        rep.mixture.e_tv_s2,
        rep.mixture.e_tv_inf,
        rep.mixture.residual_max_abs,
        if rep.mixture.assumption_flagged {
            " (additivity assumption violated)"
        } else {
            ""
        }
    );
    Ok(l1 && l2)
}

fn inspect_teacher(path: &Path) -> Result<()> {
    let t = TeacherArtifact::load(path)?;
    let s = t.summary();
    println!("file: {}", path.display());
    println!("crc: ok");
    println!("classes: {}", s.num_classes);
    println!("embedding dim: {}", s.embed_dim);
    println!("logit scale: {}", s.logit_scale);
    println!("model: {}", s.model_id.as_deref().unwrap_or("unknown"));
    println!("prompt template: {}", s.prompt_template);
    println!(
        "text norms: [{:.6}, {:.6}]",
        s.text_norm_range[0], s.text_norm_range[1]
    );
    match (s.num_image_embeddings, s.image_norm_range) {
        (Some(n), Some([lo, hi])) => println!("image embeddings: {n}, norms [{lo:.6}, {hi:.6}]"),
        (Some(n), None) => println!("image embeddings: {n}"),
        _ => println!("image embeddings: none"),
    }
    for p in s.prompts {
        println!("prompt: {p}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.reseed(s);
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    if !matches!(cli.command, Command::InspectTeacher { .. }) {
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    let ctx = Ctx { cfg, out };
    match &cli.command {
        Command::GenData => gen_data(&ctx)?,
        Command::OracleTeacher { dataset } => oracle_teacher(&ctx, dataset.as_deref())?,
        Command::Train { inputs, algorithm } => train_cmd(&ctx, inputs, *algorithm)?,
        Command::Eval {
            checkpoint,
            dataset,
            domain,
        } => eval_cmd(&ctx, checkpoint, dataset.as_deref(), *domain)?,
        Command::Experiment { inputs } => {
            let algs = ctx.cfg.experiment.algorithms.clone();
            experiment_cmd(&ctx, inputs, &algs, "experiment")?
        }
        Command::Ablate { inputs } => {
            let algs = SelectionStrategy::ALL.map(Algorithm::ScmdVariant);
            experiment_cmd(&ctx, inputs, &algs, "ablation")?
        }
        Command::Sweep { inputs } => sweep_cmd(&ctx, inputs)?,
        Command::VerifyTheory => return verify_theory(&ctx),
        Command::InspectTeacher { path } => inspect_teacher(path)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: check_failed: a bound check reported violations");
            ExitCode::FAILURE
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
