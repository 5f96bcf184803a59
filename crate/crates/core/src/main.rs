use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mtac::codec::BaseCodec;
use mtac::config::ExperimentConfig;
use mtac::entropy::Bitstream;
use mtac::evaluation::{emit_rd_artifacts, evaluate_adapted, evaluate_base, evaluate_clean, MetricDirection, RdCurve};
use mtac::experiment::{analyze, bpp_monotone, cache_dir_or, run_desk, AdaptRun, Pipeline};
use mtac::report::{build_report, RunSet, RECORD_FILE};
use mtac::synth::PredictorBank;
use mtac::task::{canonical_name, TaskSpec};
use mtac::training::{write_history_csv, TrainMode};
use mtac::{Checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "mtac", version, about = "Multi-task adaptation of a learned image codec")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base codec and the frozen downstream predictors.
    Pretrain(RunArgs),
    /// Train adaptors on a pretrained base at one λ_rd.
    Adapt(AdaptArgs),
    /// One fresh adaptation per λ_rd of `sweep.lambdas`.
    Sweep(AdaptArgs),
    /// Evaluate an adapted codec, or the untuned base without `--adapted`.
    Evaluate(EvaluateArgs),
    /// Encode images to .mtac bitstreams or decode them.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// BD tables against an anchor run, Δm against single-task runs, plots.
    Report(ReportArgs),
    /// The complete desk comparison: multi-task sweep, single-task
    /// baselines, task scaling and the untuned base.
    Desk(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to a name under `output_dir`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Directory written by `mtac pretrain`.
    #[arg(long)]
    pretrained: PathBuf,
    /// `multitask` or `singletask:<task>`.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    lambda_rd: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long)]
    adapted: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CodecCommand {
    /// PNG to .mtac. `--tasks` is accepted but cannot change the bytes.
    Encode {
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        adapted: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
    /// .mtac to a reconstruction plus one prediction map per task.
    Decode {
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        adapted: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Tasks to decode; all roster tasks when omitted.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Run or sweep directories to tabulate.
    runs: Vec<PathBuf>,
    #[arg(long)]
    anchor: PathBuf,
    /// Single-task run directories for Δm.
    #[arg(long)]
    single: Vec<PathBuf>,
    /// Skip BD tables, which need at least 4 points per curve.
    #[arg(long)]
    no_bd: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    base_digest: String,
    predictors_digest: String,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("serializes")).map_err(|e| Error::io(path, e))
}

fn pipeline(cfg: ExperimentConfig) -> Result<Pipeline> {
    let cache = cache_dir_or(cfg.output_dir.join("cache"));
    Pipeline::new(cfg, Some(cache))
}

/// Loads base and predictors from a pretrain directory, checking both
/// against the digests recorded when they were written.
fn load_pretrained(dir: &Path) -> Result<(BaseCodec, PredictorBank)> {
    let manifest_path = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest_path).map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    let base = BaseCodec::from_checkpoint(Checkpoint::load_kind(&dir.join("base.mtck"), "base")?)?;
    if base.params.digest() != manifest.base_digest {
        return Err(Error::Checkpoint(format!(
            "base checkpoint hash {} does not match the recorded {}",
            base.params.digest(),
            manifest.base_digest
        )));
    }
    let preds = PredictorBank::from_checkpoint(Checkpoint::load_kind(&dir.join("predictors.mtck"), "predictors")?)?;
    if preds.params.digest() != manifest.predictors_digest {
        return Err(Error::Checkpoint("predictor checkpoint does not match the recorded hash".into()));
    }
    Ok((base, preds))
}

fn load_adapted(pretrained: &Path, adapted: &Path) -> Result<mtac::multitask::AdaptedCodec> {
    let (base, preds) = load_pretrained(pretrained)?;
    mtac::multitask::AdaptedCodec::from_checkpoint(Checkpoint::load_kind(adapted, "adapted")?, base, preds)
}

fn cmd_pretrain(args: RunArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let dir = args.run_dir.unwrap_or_else(|| cfg.output_dir.join("pretrain"));
    cfg.write_resolved(&dir)?;
    let p = pipeline(cfg)?;
    let (base, history) = p.base()?;
    let preds = p.predictors()?;
    let base_hash = base.to_checkpoint().save(&dir.join("base.mtck"))?;
    preds.to_checkpoint().save(&dir.join("predictors.mtck"))?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            base_digest: base.params.digest(),
            predictors_digest: preds.params.digest(),
        },
    )?;
    let hist_path = dir.join("history.csv");
    let mut w = csv::Writer::from_path(&hist_path).map_err(|e| Error::io(&hist_path, e.into()))?;
    for r in &history {
        w.serialize(r).map_err(|e| Error::io(&hist_path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&hist_path, e))?;
    write_json(&dir.join("predictors.json"), &preds.clean_scores)?;
    println!("base checkpoint sha256 {base_hash}");
    println!("base parameters {}", base.param_count());
    println!("clean predictor scores {:?}", preds.clean_scores);
    println!("wrote {}", dir.display());
    Ok(())
}

/// Applies the command-line overrides and returns the roster they select.
fn resolve_adapt(cfg: &mut ExperimentConfig, args: &AdaptArgs) -> Result<Vec<TaskSpec>> {
    if let Some(m) = &args.mode {
        cfg.train.mode = m.clone();
    }
    if let Some(l) = args.lambda_rd {
        cfg.train.lambda_rd = l;
    }
    cfg.validate()?;
    let specs = cfg.task_specs()?;
    match &cfg.train.mode {
        TrainMode::Multitask => Ok(specs),
        TrainMode::Singletask(name) => {
            let name = canonical_name(name)?;
            let spec = specs
                .into_iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::config("mode", format!("`{name}` is not in the task roster")))?;
            Ok(vec![spec])
        }
    }
}

fn mode_label(mode: &TrainMode) -> String {
    match mode {
        TrainMode::Multitask => "multitask".into(),
        TrainMode::Singletask(t) => t.clone(),
    }
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, run: &AdaptRun) -> Result<()> {
    let mut resolved = cfg.clone();
    resolved.train = run.record.train.clone();
    resolved.write_resolved(dir)?;
    run.codec.to_checkpoint().save(&dir.join("adapted.mtck"))?;
    write_history_csv(&dir.join("history.csv"), &run.record.history)?;
    write_json(&dir.join(RECORD_FILE), &run.record)
}

fn print_report(run: &AdaptRun) {
    let r = run.record.report;
    println!(
        "trainable {} of {} parameters ({:.2}%); base {} (frozen), adaptors {}",
        r.trainable,
        r.total,
        100.0 * r.ratio,
        r.base,
        r.adaptor
    );
    println!(
        "λ_rd {}: bpp {:.4}, psnr {:.2} dB, metrics {:?}",
        run.record.lambda_rd(),
        run.record.eval.bpp,
        run.record.eval.psnr,
        run.record.eval.metrics
    );
}

fn cmd_adapt(args: AdaptArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.run.config)?;
    let roster = resolve_adapt(&mut cfg, &args)?;
    let (base, preds) = load_pretrained(&args.pretrained)?;
    let dir = args.run.run_dir.clone().unwrap_or_else(|| {
        cfg.output_dir
            .join(format!("adapt-{}-l{}", mode_label(&cfg.train.mode), cfg.train.lambda_rd))
    });
    let train = cfg.train.clone();
    let p = pipeline(cfg)?;
    let run = p.adapt_with(&base, &preds, &roster, &train)?;
    write_run(&dir, &p.cfg, &run)?;
    print_report(&run);
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_sweep(args: AdaptArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.run.config)?;
    let roster = resolve_adapt(&mut cfg, &args)?;
    let lambdas = match args.lambda_rd {
        Some(l) => vec![l],
        None => mtac::training::dedup_lambdas(&cfg.sweep.lambdas)?,
    };
    let (base, preds) = load_pretrained(&args.pretrained)?;
    let dir = args
        .run
        .run_dir
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(format!("sweep-{}", mode_label(&cfg.train.mode))));
    create_dir(&dir)?;
    cfg.write_resolved(&dir)?;
    let p = pipeline(cfg)?;
    let mut records = Vec::new();
    for l in lambdas {
        let train = mtac::training::TrainConfig {
            lambda_rd: l,
            ..p.cfg.train.clone()
        };
        let run = p.adapt_with(&base, &preds, &roster, &train)?;
        write_run(&dir.join(format!("lambda_rd-{l}")), &p.cfg, &run)?;
        print_report(&run);
        records.push(run.record);
    }
    let label = dir.file_name().map_or("sweep".into(), |n| n.to_string_lossy().into_owned());
    let curves: Vec<RdCurve> = roster
        .iter()
        .map(|spec| {
            RdCurve::new(
                label.clone(),
                spec.name.clone(),
                records.iter().map(|r| (r.eval.bpp, r.eval.metrics[&spec.name])).collect(),
                MetricDirection::of(spec),
            )
        })
        .collect();
    emit_rd_artifacts(&curves, &dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.run.config)?;
    let dir = args.run.run_dir.clone().unwrap_or_else(|| cfg.output_dir.join("evaluate"));
    cfg.write_resolved(&dir)?;
    let specs = cfg.task_specs()?;
    let p = pipeline(cfg)?;
    let value = match &args.adapted {
        Some(ck) => {
            let codec = load_adapted(&args.pretrained, ck)?;
            let eval = evaluate_adapted(&codec, &p.val)?;
            serde_json::json!({ "codec": "adapted", "eval": eval, "trainable": codec.trainable_report() })
        }
        None => {
            let (base, preds) = load_pretrained(&args.pretrained)?;
            let eval = evaluate_base(&base, &preds, &specs, &p.val)?;
            let clean = evaluate_clean(&preds, &specs, &p.val)?;
            serde_json::json!({ "codec": "base", "eval": eval, "clean": clean })
        }
    };
    write_json(&dir.join("eval.json"), &value)?;
    println!("{}", serde_json::to_string_pretty(&value).expect("serializes"));
    Ok(())
}

fn task_list(names: &[String]) -> Result<Vec<String>> {
    names.iter().filter(|n| !n.is_empty()).map(|n| canonical_name(n)).collect()
}

fn cmd_codec(cmd: CodecCommand) -> Result<()> {
    match cmd {
        CodecCommand::Encode {
            pretrained,
            adapted,
            input,
            output,
            tasks,
        } => {
            // Validated for the user's benefit only; the encoder is task-agnostic.
            task_list(&tasks)?;
            let codec = load_adapted(&pretrained, &adapted)?;
            let image = mtac::imageio::read_image(&input)?;
            let bs = codec.compress(&image)?;
            let bytes = bs.to_bytes();
            std::fs::write(&output, &bytes).map_err(|e| Error::io(&output, e))?;
            let pixels = image.height() * image.width();
            println!("{} bytes, {:.4} bpp", bytes.len(), 8.0 * bytes.len() as f64 / pixels as f64);
            Ok(())
        }
        CodecCommand::Decode {
            pretrained,
            adapted,
            input,
            out_dir,
            tasks,
        } => {
            let codec = load_adapted(&pretrained, &adapted)?;
            let bytes = std::fs::read(&input).map_err(|e| Error::io(&input, e))?;
            let bs = Bitstream::from_bytes(&bytes)?;
            let mut names = task_list(&tasks)?;
            if names.is_empty() {
                names = codec.tasks.iter().map(|t| t.name.clone()).collect();
            }
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let decoded = codec.decompress(&bs, &refs)?;
            create_dir(&out_dir)?;
            mtac::imageio::write_image(&out_dir.join("reconstruction.png"), &decoded.human)?;
            for name in &names {
                let spec = &codec.tasks[codec.task_index(name)?];
                let path = out_dir.join(format!("{name}.png"));
                mtac::imageio::write_prediction(&path, spec, &decoded.predictions[name])?;
            }
            println!("wrote {}", out_dir.display());
            Ok(())
        }
    }
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let anchor = RunSet::load(&args.anchor)?;
    let mut runs = args.runs.iter().map(|d| RunSet::load(d)).collect::<Result<Vec<_>>>()?;
    if runs.is_empty() {
        runs.push(anchor.clone());
    }
    let singles = args.single.iter().map(|d| RunSet::load(d)).collect::<Result<Vec<_>>>()?;
    let report = build_report(&runs, &anchor, &singles, !args.no_bd)?;
    create_dir(&args.out_dir)?;
    let md = report.to_markdown();
    std::fs::write(args.out_dir.join("report.md"), &md).map_err(|e| Error::io(&args.out_dir, e))?;
    write_json(&args.out_dir.join("report.json"), &report)?;
    emit_rd_artifacts(&report.curves, &args.out_dir)?;
    print!("{md}");
    if !report.warnings.is_empty() {
        eprintln!("{} warning(s)", report.warnings.len());
    }
    Ok(())
}

fn cmd_desk(args: RunArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let dir = args.run_dir.unwrap_or_else(|| cfg.output_dir.join("desk"));
    cfg.write_resolved(&dir)?;
    let specs = cfg.task_specs()?;
    let anchor = canonical_name(&cfg.sweep.anchor_task)?;
    let p = pipeline(cfg)?;
    let results = run_desk(&p)?;
    let analysis = analyze(&results, &specs, &anchor)?;
    write_json(&dir.join("results.json"), &results)?;
    write_json(&dir.join("analysis.json"), &analysis)?;
    let mut curves = Vec::new();
    for spec in &specs {
        let dir_ = MetricDirection::of(spec);
        let m = &spec.name;
        curves.push(RdCurve::new(
            "multitask",
            m.clone(),
            results.multitask.iter().map(|r| (r.eval.bpp, r.eval.metrics[m])).collect(),
            dir_,
        ));
        curves.push(RdCurve::new(
            "single-task",
            m.clone(),
            results.single[m].iter().map(|r| (r.eval.bpp, r.eval.metrics[m])).collect(),
            dir_,
        ));
        curves.push(RdCurve::new("base", m.clone(), vec![(results.base.bpp, results.base.metrics[m])], dir_));
    }
    emit_rd_artifacts(&curves, &dir)?;
    println!("untuned base: bpp {:.4}, metrics {:?}", results.base.bpp, results.base.metrics);
    for r in &results.multitask {
        println!("multitask λ_rd {}: bpp {:.4}, metrics {:?}", r.lambda_rd(), r.eval.bpp, r.eval.metrics);
    }
    println!("Δm at λ_rd {}: {:+.3}%", analysis.matched_lambda, analysis.delta_m);
    println!("beats untuned base at matched bpp: {:?}", analysis.beats_base);
    println!("bpp non-increasing in λ_rd: {}", bpp_monotone(&analysis.sweep_bpp, 0.05));
    println!(
        "{anchor} with 0..{} auxiliary tasks: {:?}",
        analysis.scaling_metric.len().saturating_sub(1),
        analysis.scaling_metric
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Codec(c) => cmd_codec(c),
        Command::Report(a) => cmd_report(a),
        Command::Desk(a) => cmd_desk(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
