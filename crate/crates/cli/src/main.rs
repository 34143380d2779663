mod config;
mod run_dir;

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cascade_core::cardinality::CardinalityModel;
use cascade_core::cfm::FlowModel;
use cascade_core::dataset::{write_events, EventRecord};
use cascade_core::experiment::{self as exp, Models, ParetoRow, RunConfig, Source};
use cascade_core::net::Backbone;
use clap::{Parser, Subcommand};

use run_dir::RunDir;

#[derive(Parser)]
#[command(name = "cascade", version, about = "Learned single-interaction kernels for calorimeter shower emulation")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding data, checkpoints and reports.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides a configuration key, e.g. `--set flow.train.epochs=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    InitConfig,
    /// Simulate the training and validation sets with the oracle.
    GenData,
    /// Train the cardinality model.
    TrainCard,
    /// Train the flow velocity field.
    TrainFlow,
    /// Per-prior two-sample metrics of every sampler against the oracle.
    Eval,
    /// Cost and fidelity across solvers and step counts.
    Pareto,
    /// Multi-round rollouts under the configured density schedules.
    Rollout,
    /// Likelihoods of model, oracle and base samples under the flow.
    Nll,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    if let Command::InitConfig = cli.command {
        print!("{}", config::to_toml(&cfg)?);
        return Ok(());
    }
    let dir = RunDir::open(&cli.run_dir)?;
    let start = Instant::now();
    let (stage, outputs) = match cli.command {
        Command::InitConfig => unreachable!(),
        Command::GenData => ("gen-data", gen_data(&cfg, &dir)?),
        Command::TrainCard => ("train-card", train_card(&cfg, &dir)?),
        Command::TrainFlow => ("train-flow", train_flow(&cfg, &dir)?),
        Command::Eval => ("eval", eval(&cfg, &dir)?),
        Command::Pareto => ("pareto", pareto(&cfg, &dir)?),
        Command::Rollout => ("rollout", rollout(&cfg, &dir)?),
        Command::Nll => ("nll", nll(&cfg, &dir)?),
    };
    if !outputs.is_empty() {
        dir.record(&cfg, stage, &outputs, start.elapsed().as_secs_f64())?;
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let seed = cfg.stage_seed("gen-data");
    let train = exp::generate_dataset(&cfg.physics, cfg.data.n_train, cascade_core::rng::derive(seed, &[0]));
    let val = exp::generate_dataset(&cfg.physics, cfg.data.n_val, cascade_core::rng::derive(seed, &[1]));
    let (train_path, val_path, stats_path) = (dir.train_data(), dir.val_data(), dir.path("data/stats.json"));
    write_events(&train, &train_path)?;
    write_events(&val, &val_path)?;
    let (_, enc) = exp::encode(cfg, &train);
    let stats = serde_json::json!({
        "train": exp::DataStats::of(&train),
        "val": exp::DataStats::of(&val),
        "train_encoding": enc,
    });
    dir.write(&stats_path, &serde_json::to_string_pretty(&stats)?)?;
    println!(
        "wrote {} training and {} validation events (mean multiplicity {:.2})",
        train.len(),
        val.len(),
        exp::DataStats::of(&train).mean_multiplicity
    );
    Ok(vec![train_path, val_path, stats_path])
}

fn read_dataset(path: &std::path::Path) -> Result<Vec<EventRecord>> {
    if !path.exists() {
        bail!("dataset not found at {}; run `cascade gen-data` first", path.display());
    }
    Ok(cascade_core::dataset::read_events(path)?)
}

fn encoded(cfg: &RunConfig, dir: &RunDir) -> Result<(Vec<cascade_core::dataset::EncodedEvent>, Vec<cascade_core::dataset::EncodedEvent>)> {
    let (train, stats) = exp::encode(cfg, &read_dataset(&dir.train_data())?);
    let (val, _) = exp::encode(cfg, &read_dataset(&dir.val_data())?);
    if stats.dropped_over_cap + stats.rejected_below_cutoff > 0 {
        eprintln!(
            "note: {} training events skipped ({} over the cardinality cap, {} with sub-cutoff particles)",
            stats.dropped_over_cap + stats.rejected_below_cutoff,
            stats.dropped_over_cap,
            stats.rejected_below_cutoff
        );
    }
    Ok((train, val))
}

fn train_card(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let (train, val) = encoded(cfg, dir)?;
    let mut outputs = Vec::new();
    let mut csv = String::from("epoch,train_nll,val_nll\n");
    let (model, _) = exp::train_cardinality_model(cfg, &train, &val, |epoch, model, t, v| {
        let path = dir.path(&format!("checkpoints/card_epoch{:03}.ckpt", epoch + 1));
        model.net.save(&path)?;
        outputs.push(path);
        csv.push_str(&format!("{},{t},{v}\n", epoch + 1));
        println!("card epoch {}: train nll {t:.4}, val nll {v:.4}", epoch + 1);
        Ok(())
    })?;
    let ckpt = dir.card_checkpoint();
    model.net.save(&ckpt)?;
    let loss = dir.path("card_loss.csv");
    dir.write(&loss, &csv)?;
    outputs.extend([ckpt, loss]);
    Ok(outputs)
}

fn train_flow(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let (train, val) = encoded(cfg, dir)?;
    let mut outputs = Vec::new();
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    let (model, trace) = exp::train_flow_model(cfg, &train, &val, |epoch, model, t, v| {
        let path = dir.path(&format!("checkpoints/flow_epoch{:03}.ckpt", epoch + 1));
        model.net.save(&path)?;
        outputs.push(path);
        csv.push_str(&format!("{},{t},{v}\n", epoch + 1));
        println!("flow epoch {}: train loss {t:.4}, val loss {v:.4}", epoch + 1);
        Ok(())
    })?;
    if trace.skipped_pairs > 0 {
        eprintln!("note: {} antipodal training pairs skipped", trace.skipped_pairs);
    }
    let ckpt = dir.flow_checkpoint();
    model.net.save(&ckpt)?;
    let loss = dir.path("flow_loss.csv");
    dir.write(&loss, &csv)?;
    outputs.extend([ckpt, loss]);
    Ok(outputs)
}

fn load_models(cfg: &RunConfig, dir: &RunDir) -> Result<Models> {
    let load = |path: PathBuf, stage: &str| -> Result<Backbone> {
        if !path.exists() {
            bail!("checkpoint not found at {}; run `cascade {stage}` first", path.display());
        }
        Backbone::load(&path).with_context(|| format!("loading {}", path.display()))
    };
    Ok(Models {
        card: CardinalityModel::from_backbone(load(dir.card_checkpoint(), "train-card")?)?,
        flow: FlowModel::from_backbone(load(dir.flow_checkpoint(), "train-flow")?)?,
        base: cfg.flow.base,
    })
}

fn eval(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let models = load_models(cfg, dir)?;
    let sources = [Source::Model, Source::PhysBase, Source::IsoBase, Source::Oracle];
    let mut csv = format!("{}\n", exp::EVAL_HEADER);
    let mut null = csv.clone();
    let mut rows = Vec::new();
    for &prior in &cfg.eval.priors {
        for row in exp::evaluate_prior(cfg, &models, prior, &sources)? {
            println!(
                "{:<15} {:<9} mmd {:.5} ± {:.5}  auc {:.3} ± {:.3}",
                prior.name(),
                row.source.name(),
                row.mmd.value,
                row.mmd.sem,
                row.auc.value,
                row.auc.sem
            );
            // oracle against oracle is the null floor, kept apart from the table
            let out = if row.source == Source::Oracle { &mut null } else { &mut csv };
            out.push_str(&row.csv());
            out.push('\n');
            rows.push(row);
        }
    }
    let (csv_path, null_path, json_path) = (dir.path("eval.csv"), dir.path("eval_null.csv"), dir.path("eval.json"));
    dir.write(&csv_path, &csv)?;
    dir.write(&null_path, &null)?;
    dir.write(&json_path, &serde_json::to_string_pretty(&rows)?)?;
    Ok(vec![csv_path, null_path, json_path])
}

fn pareto(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let models = load_models(cfg, dir)?;
    let rows = exp::pareto(cfg, &models)?;
    let mut csv = format!("{}\n", ParetoRow::header(cfg.pareto.repeats));
    for r in &rows {
        println!(
            "{:<9} steps {:>3}: {:.3} ms/event, mmd {:.5} ± {:.5}",
            r.method.name(),
            r.steps,
            r.mean_ms(),
            r.mmd.value,
            r.mmd.sem
        );
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    let path = dir.path("pareto.csv");
    dir.write(&path, &csv)?;
    Ok(vec![path])
}

fn rollout(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let schedules = cfg.schedules()?;
    if schedules.is_empty() {
        println!("no rollout schedules configured; nothing to do");
        return Ok(Vec::new());
    }
    let models = load_models(cfg, dir)?;
    let mut csv = format!("{}\n", exp::ROLLOUT_HEADER);
    let mut trace = format!("{}\n", exp::TRACE_HEADER);
    for schedule in &schedules {
        let report = exp::rollout_report(cfg, &models, schedule)?;
        println!(
            "{:<12} floor {:.5} ± {:.5}  model {:.5} ± {:.5}  base {:.5} ± {:.5}",
            schedule.kind.name(),
            report.floor.value,
            report.floor.sem,
            report.model.value,
            report.model.sem,
            report.base.value,
            report.base.sem
        );
        for row in report.csv_rows(cfg.rollout.n_rollouts, cfg.rollout.k) {
            csv.push_str(&row);
            csv.push('\n');
        }
        for row in report.trace_rows() {
            trace.push_str(&row);
            trace.push('\n');
        }
    }
    let (csv_path, trace_path) = (dir.path("rollout.csv"), dir.path("rollout_trace.csv"));
    dir.write(&csv_path, &csv)?;
    dir.write(&trace_path, &trace)?;
    Ok(vec![csv_path, trace_path])
}

fn nll(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let models = load_models(cfg, dir)?;
    let mut csv = format!("{}\n", exp::NLL_HEADER);
    for (source, values) in exp::nll_report(cfg, &models)? {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
        println!(
            "{:<9} mean nll {mean:.3} over {} events ({} outside the base support)",
            source.name(),
            finite.len(),
            values.len() - finite.len()
        );
        for (i, v) in values.iter().enumerate() {
            csv.push_str(&format!("{},{i},{v}\n", source.name()));
        }
    }
    let path = dir.path("nll.csv");
    dir.write(&path, &csv)?;
    Ok(vec![path])
}
