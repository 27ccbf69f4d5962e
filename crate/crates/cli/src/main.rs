//! remapsr command line: degradation synthesis, model training, domain
//! mapping, super-resolution/restoration inference, evaluation, and the
//! full experiment suites, driven by a strict TOML config.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime numeric failure,
//! 4 partial experiment failure (some branches failed, the rest ran).

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use remapsr::datasets::{degrade_record, load_dir, read_png, write_manifest, write_png};
use remapsr::error::Error;
use remapsr::metrics::{mse, psnr_from_mse, ssim, SsimParams};
use remapsr::models::Model;
use remapsr::pipeline::{
    compose, markdown_branch_table, markdown_metric_table, run_experiment, ImageMetrics,
    MetricsReport, BRANCH_HELP,
};
use remapsr::rng::mix_seed;
use remapsr::trainer::{load_model, train, Checkpoint};

use config::{preset, RunConfig};

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(
    name = "remapsr",
    about = "Two-stage domain-adapted training for blind super-resolution and deblurring",
    version
)]
struct Cli {
    /// Path to the TOML run config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the experiment/training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (command-specific).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a named degradation spec to a directory of PNGs.
    Degrade {
        /// Degradation name from [degradations] ("identity" always works).
        #[arg(long)]
        spec: String,
        /// Input directory; defaults to the configured corpus.
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Train a model on (degraded -> ground truth) pairs.
    Train {
        /// Model name from [models].
        #[arg(long)]
        model: String,
        /// Degradation producing the network inputs.
        #[arg(long)]
        input_spec: String,
        /// Override [training].total_iters.
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Train a domain-mapping model between two degradations.
    Map {
        /// Optional model name; defaults to the desk config at the
        /// scale implied by the two degradations.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        from_spec: String,
        #[arg(long)]
        to_spec: String,
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Super-resolve a directory through a checkpoint chain.
    Sr {
        /// Checkpoint files, applied in order (comma separated).
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Restore a directory through a scale-preserving checkpoint chain.
    Restore {
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// PSNR/SSIM between two directories, pairing files by name.
    Eval {
        /// Ground-truth directory.
        #[arg(long)]
        reference: PathBuf,
        /// Directory under test.
        #[arg(long)]
        test: PathBuf,
    },
    /// Train and evaluate the configured experiment branches.
    Experiment {
        /// Built-in preset (fig3-desk, table3-desk) instead of --config.
        #[arg(long)]
        preset: Option<String>,
    },
}

fn branch_after_help() -> String {
    let mut out = String::from("Experiment branches:\n");
    for (name, desc) in BRANCH_HELP {
        out.push_str(&format!("  {name:<42} {desc}\n"));
    }
    out
}

fn main() {
    let help = branch_after_help();
    let command = Cli::command().mut_subcommand("experiment", |s| s.after_help(help));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidInput { .. } => 2,
                Error::NonFinite { .. } => 3,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    let out = cli.out.clone();
    let need_out = || {
        out.clone()
            .ok_or_else(|| Error::Config("--out is required for this command".into()))
    };
    let load_config = || -> Result<RunConfig> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
        RunConfig::load(path)
    };

    match &cli.command {
        Command::Degrade { spec, input } => {
            cmd_degrade(&load_config()?, spec, input.as_deref(), &need_out()?)
        }
        Command::Train {
            model,
            input_spec,
            iters,
        } => cmd_train(
            &load_config()?,
            model,
            input_spec,
            *iters,
            cli.seed,
            &need_out()?,
        ),
        Command::Map {
            model,
            from_spec,
            to_spec,
            iters,
        } => cmd_map(
            &load_config()?,
            model.as_deref(),
            from_spec,
            to_spec,
            *iters,
            cli.seed,
            &need_out()?,
        ),
        Command::Sr { checkpoint, input } => cmd_apply(checkpoint, input, &need_out()?, None),
        Command::Restore { checkpoint, input } => {
            cmd_apply(checkpoint, input, &need_out()?, Some(1))
        }
        Command::Eval { reference, test } => cmd_eval(reference, test, &need_out()?),
        Command::Experiment { preset: p } => {
            let run_cfg = match (p, &cli.config) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config("use --preset or --config, not both".into()))
                }
                (Some(name), None) => preset(name)?,
                (None, Some(path)) => RunConfig::load(path)?,
                (None, None) => {
                    return Err(Error::Config("experiment needs --preset or --config".into()))
                }
            };
            // --out wins; otherwise the config's experiment.out_dir
            let out_dir = match (&out, run_cfg.experiment.as_ref().and_then(|e| e.out_dir.clone())) {
                (Some(o), _) => o.clone(),
                (None, Some(o)) => o,
                (None, None) => return Err(Error::Config("--out is required for this command".into())),
            };
            cmd_experiment(&run_cfg, cli.seed, &out_dir)
        }
    }
}

fn cmd_degrade(cfg: &RunConfig, spec_name: &str, input: Option<&Path>, out: &Path) -> Result<i32> {
    let spec = cfg.spec(spec_name)?;
    let (records, skipped) = match input {
        Some(dir) => {
            let report = load_dir(dir, None)?;
            (report.records, report.skipped)
        }
        None => (cfg.corpus_records()?, Vec::new()),
    };
    fs::create_dir_all(out)?;
    let mut degraded = Vec::with_capacity(records.len());
    for rec in &records {
        let d = degrade_record(&spec, rec)?;
        write_png(&out.join(format!("{}.png", d.id)), &d.pixels)?;
        degraded.push(d);
    }
    write_manifest(&out.join("manifest.tsv"), &degraded, &skipped)?;
    println!(
        "degraded {} images with '{}' -> {}",
        degraded.len(),
        spec.label(),
        out.display()
    );
    Ok(0)
}

fn apply_overrides(
    cfg: &RunConfig,
    iters: Option<u64>,
    seed: Option<u64>,
) -> Result<remapsr::trainer::TrainConfig> {
    let mut tcfg = cfg.training.to_config()?;
    if let Some(it) = iters {
        tcfg.total_iters = it;
        tcfg.halve_every = tcfg.halve_every.min(it.max(1));
    }
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    tcfg.validate()?;
    Ok(tcfg)
}

fn cmd_train(
    cfg: &RunConfig,
    model_name: &str,
    input_spec: &str,
    iters: Option<u64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<i32> {
    let model_cfg = cfg.model(model_name)?;
    let spec = cfg.spec(input_spec)?;
    if spec.net_scale() != (1, model_cfg.scale as u32) {
        return Err(Error::Config(format!(
            "degradation '{input_spec}' has net scale {:?}, model '{model_name}' needs 1/{}",
            spec.net_scale(),
            model_cfg.scale
        )));
    }
    let gt = cfg.corpus_records()?;
    let data = remapsr::datasets::make_pairs(&gt, &spec, model_cfg.scale)?;
    let tcfg = apply_overrides(cfg, iters, seed)?;
    let model = Model::build(&model_cfg, mix_seed(tcfg.seed, 1))?;
    let run = train(model, &data, &tcfg)?;
    run.checkpoint.save(out)?;
    println!(
        "trained '{model_name}' on '{}' for {} iters (final l1 {}), checkpoint {} digest {:08x}",
        data.input_domain,
        run.loss_history.len(),
        run.loss_history
            .last()
            .map(|l| format!("{l:.6}"))
            .unwrap_or_else(|| "n/a".into()),
        out.display(),
        run.checkpoint.digest()
    );
    Ok(0)
}

fn cmd_map(
    cfg: &RunConfig,
    model_name: Option<&str>,
    from_spec: &str,
    to_spec: &str,
    iters: Option<u64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<i32> {
    let from = cfg.spec(from_spec)?;
    let to = cfg.spec(to_spec)?;
    let gt = cfg.corpus_records()?;
    let data = remapsr::datasets::make_mapped_pairs(&gt, &from, &to)?;
    let model_cfg = match model_name {
        Some(name) => {
            let m = cfg.model(name)?;
            if m.scale != data.scale {
                return Err(Error::Config(format!(
                    "model '{name}' has scale {}, but mapping '{from_spec}' -> '{to_spec}' needs {}",
                    m.scale, data.scale
                )));
            }
            m
        }
        None => remapsr::models::ModelConfig::desk(data.scale),
    };
    let tcfg = apply_overrides(cfg, iters, seed)?;
    let model = Model::build(&model_cfg, mix_seed(tcfg.seed, 1))?;
    let run = train(model, &data, &tcfg)?;
    run.checkpoint.save(out)?;
    println!(
        "trained mapping '{}' -> '{}' (scale {}), checkpoint {} digest {:08x}",
        data.input_domain,
        data.target_domain,
        data.scale,
        out.display(),
        run.checkpoint.digest()
    );
    Ok(0)
}

fn cmd_apply(
    checkpoints: &[PathBuf],
    input: &Path,
    out: &Path,
    require_scale: Option<usize>,
) -> Result<i32> {
    let mut stages = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        stages.push(load_model(&Checkpoint::load(path)?)?);
    }
    let net: usize = stages.iter().map(|m| m.scale()).product();
    if let Some(required) = require_scale {
        if net != required {
            return Err(Error::Config(format!(
                "checkpoint chain has net scale x{net}, this command needs x{required}"
            )));
        }
    }
    let pipeline = compose(stages, net)?;

    let mut paths: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    if paths.is_empty() {
        return Err(Error::Dataset(format!(
            "no PNG images in {}",
            input.display()
        )));
    }
    fs::create_dir_all(out)?;
    for path in &paths {
        let img = read_png(path)?;
        let result = pipeline.apply(&img)?;
        let name = path.file_name().expect("png path has a file name");
        write_png(&out.join(name), &result)?;
    }
    println!(
        "processed {} images at x{net} -> {}",
        paths.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_eval(reference: &Path, test: &Path, out: &Path) -> Result<i32> {
    let refs = load_dir(reference, None)?;
    let mut rows = Vec::new();
    let mut sq_err = 0.0f64;
    let mut n_elems = 0usize;
    let mut ssim_sum = 0.0f64;
    for rec in &refs.records {
        let other_path = test.join(format!("{}.png", rec.id));
        let other = read_png(&other_path)?;
        let e = mse(&other, &rec.pixels)?;
        let s = ssim(&other, &rec.pixels, &SsimParams::default())?;
        sq_err += e * other.numel() as f64;
        n_elems += other.numel();
        ssim_sum += s;
        rows.push(ImageMetrics {
            id: rec.id.clone(),
            psnr_db: psnr_from_mse(e, 1.0),
            ssim: s,
        });
    }
    let mean_psnr_db = rows.iter().map(|r| r.psnr_db).sum::<f64>() / rows.len() as f64;
    let report = MetricsReport {
        branch: "eval".into(),
        eval_set: test.display().to_string(),
        mean_psnr_db,
        pooled_psnr_db: psnr_from_mse(sq_err / n_elems as f64, 1.0),
        mean_ssim: ssim_sum / rows.len() as f64,
        rows,
        config_digest: String::new(),
        runtime_secs: 0.0,
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out, report.to_csv())?;
    println!(
        "PSNR {} dB (pooled {}), SSIM {:.6} over {} images -> {}",
        fmt_db(report.mean_psnr_db),
        fmt_db(report.pooled_psnr_db),
        report.mean_ssim,
        report.rows.len(),
        out.display()
    );
    Ok(0)
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

fn file_slug(label: &str) -> String {
    label
        .chars()
        .map(|c| match c {
            '*' => 's',
            c if c.is_ascii_alphanumeric() || c == '_' || c == '-' => c,
            _ => '_',
        })
        .collect()
}

fn cmd_experiment(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> Result<i32> {
    let (config, corpus, cross) = cfg.experiment(seed)?;
    fs::create_dir_all(out)?;

    let outcome = run_experiment(&config, &corpus, cross.as_ref());

    let mut all_reports = Vec::new();
    if config.branches.iter().any(|b| !b.is_restoration()) {
        let exp = remapsr::pipeline::Experiment::new(config.clone());
        all_reports.push(exp.bicubic_baseline(&corpus)?);
    }
    all_reports.extend(outcome.reports.iter().cloned());

    for report in &all_reports {
        let name = format!(
            "{}__{}.csv",
            file_slug(&report.branch),
            file_slug(&report.eval_set)
        );
        fs::write(out.join(name), report.to_csv())?;
    }

    let mut summary = String::from("# Experiment summary\n\n");
    summary.push_str(&markdown_branch_table(&all_reports));
    let restoration: Vec<MetricsReport> = outcome
        .reports
        .iter()
        .filter(|r| {
            config
                .branches
                .iter()
                .any(|b| b.is_restoration() && b.label() == r.branch)
        })
        .cloned()
        .collect();
    if !restoration.is_empty() {
        summary.push('\n');
        summary.push_str(&markdown_metric_table(&restoration));
    }
    fs::write(out.join("summary.md"), &summary)?;

    outcome.registry.save(&out.join("models"))?;

    for report in &all_reports {
        println!(
            "{:<28} {:<10} PSNR {} dB  SSIM {:.4}",
            report.branch,
            report.eval_set,
            fmt_db(report.mean_psnr_db),
            report.mean_ssim
        );
    }
    if !outcome.failures.is_empty() {
        eprintln!("{} branch(es) failed:", outcome.failures.len());
        for (branch, err) in &outcome.failures {
            eprintln!("  {branch}: {err}");
        }
        return Ok(4);
    }
    Ok(0)
}
