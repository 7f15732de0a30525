//! Command-line front end. Exit codes: 0 success, 1 configuration or
//! usage error, 2 training abort.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use super::{
    blocking_rows, build_splits, evaluate, oracle_ordering, ordering_lockin_demo, per_timestep_report, pretrain_actor,
    pretrained_actor, run_ablation, state_blocking_eval, timestep_rows, timestep_svg, train_actor_critic, train_supervised,
    write_csv, RunConfig, Splits, Variant, BLOCKING_HEADER, EVAL_HEADER, LOCKIN_HEADER, ORACLE_HEADER,
    TIMESTEP_HEADER,
};
use crate::actor::{Actor, Block};
use crate::environment::{export_scenes, save_split, Scene, SceneContext};
use crate::error::{Error, Result};
use crate::trainer::Output;

#[derive(Parser, Debug)]
#[command(name = "acis", about = "Recurrent actor-critic instance segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// INI-style run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides the `out` key).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the conditional VAE decoder.
    Pretrain(Common),
    /// Actor-critic training.
    Train(Common),
    /// Supervised recurrent baseline training.
    TrainBaseline(Common),
    /// Evaluate `checkpoint` on the test split.
    Eval(Common),
    /// Train and evaluate every ablation variant.
    Ablation(Common),
    /// Per-timestep Dice of `checkpoint` (and `compare_checkpoint`).
    TimestepReport(Common),
    /// Zero the LSTM or mask state at every step.
    StateBlocking(Common),
    /// Order lock-in frequency versus matching noise.
    LockinDemo(Common),
    /// Oracle-ordering study with a patch network.
    OracleOrdering(Common),
    /// Write the seeded splits and PGM/PBM renders of the test split.
    ExportScenes(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        cfg.apply_override(kv)?;
    }
    if let Some(o) = &c.out {
        cfg.out = o.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    let (common, f): (&Common, fn(&RunConfig) -> Result<i32>) = match &cmd {
        Command::Pretrain(c) => (c, cmd_pretrain),
        Command::Train(c) => (c, cmd_train),
        Command::TrainBaseline(c) => (c, cmd_train_baseline),
        Command::Eval(c) => (c, cmd_eval),
        Command::Ablation(c) => (c, cmd_ablation),
        Command::TimestepReport(c) => (c, cmd_timestep),
        Command::StateBlocking(c) => (c, cmd_blocking),
        Command::LockinDemo(c) => (c, cmd_lockin),
        Command::OracleOrdering(c) => (c, cmd_oracle),
        Command::ExportScenes(c) => (c, cmd_export),
    };
    let cfg = load_config(common)?;
    std::fs::create_dir_all(cfg.out_dir())?;
    f(&cfg)
}

fn load_actor(path: &str, what: &str, cfg: &RunConfig) -> Result<Actor> {
    if path.is_empty() {
        return Err(Error::Config(format!("the `{what}` key must name an actor checkpoint")));
    }
    let actor = Actor::load(Path::new(path))?;
    if (actor.arch.height, actor.arch.width) != (cfg.height, cfg.width) {
        return Err(Error::Config(format!("{path} was trained on a different scene size")));
    }
    Ok(actor)
}

fn model_label(path: &str) -> String {
    Path::new(path)
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| path.to_string())
}

fn write_eval(cfg: &RunConfig, actor: &Actor, splits: &Splits) -> Result<()> {
    let m = evaluate(actor, &splits.test, cfg.max_steps());
    println!("test SBD {:.4} |DiC| {:.4} MWCov {:.4} MUCov {:.4}", m.sbd, m.dic, m.mwcov, m.mucov);
    write_csv(&cfg.out_dir().join("eval.csv"), &cfg.echo(), &EVAL_HEADER, &[m.csv_record("test", 0)])
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<i32> {
    let splits = build_splits(cfg)?;
    let (actor, report) = pretrain_actor(cfg, &splits, cfg.seed)?;
    let rows: Vec<Vec<String>> = report
        .epoch_losses
        .iter()
        .zip(&report.val_dice)
        .enumerate()
        .map(|(e, (l, d))| vec![e.to_string(), format!("{l:.6}"), format!("{d:.6}")])
        .collect();
    write_csv(&cfg.out_dir().join("pretrain_log.csv"), &cfg.echo(), &["epoch", "loss", "val_dice"], &rows)?;
    actor.save(&cfg.out_dir().join("pretrained.ckpt"))?;
    println!("held-out reconstruction Dice {:.4}", report.val_dice.last().copied().unwrap_or(0.0));
    Ok(0)
}

fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    let splits = build_splits(cfg)?;
    let pre = pretrained_actor(cfg, &splits, cfg.seed)?;
    let echo = cfg.echo();
    let dir = cfg.out_dir();
    let (actor, _, report) = train_actor_critic(cfg, &pre, &splits, Some(Output { dir: &dir, comment: &echo }))?;
    println!("best validation SBD {:.4} at epoch {}", report.best_val_sbd, report.best_epoch);
    write_eval(cfg, &actor, &splits)?;
    Ok(0)
}

fn cmd_train_baseline(cfg: &RunConfig) -> Result<i32> {
    let splits = build_splits(cfg)?;
    let pre = pretrained_actor(cfg, &splits, cfg.seed)?;
    let echo = cfg.echo();
    let dir = cfg.out_dir();
    let (actor, report) = train_supervised(cfg, &pre, &splits, Some(Output { dir: &dir, comment: &echo }))?;
    println!("best validation SBD {:.4} at epoch {}", report.best_val_sbd, report.best_epoch);
    write_eval(cfg, &actor, &splits)?;
    Ok(0)
}

fn cmd_eval(cfg: &RunConfig) -> Result<i32> {
    let actor = load_actor(&cfg.checkpoint, "checkpoint", cfg)?;
    let splits = build_splits(&RunConfig {
        pretrain_scenes: 0,
        ..cfg.clone()
    })?;
    write_eval(cfg, &actor, &splits)?;
    Ok(0)
}

fn cmd_ablation(cfg: &RunConfig) -> Result<i32> {
    let report = run_ablation(cfg, &Variant::ALL, Some(&cfg.out_dir()))?;
    for v in Variant::ALL {
        if let Some(s) = report.median(v, |m| m.sbd) {
            println!("{:<14} median SBD {s:.4}", v.name());
        }
    }
    Ok(if report.any_failed() { 2 } else { 0 })
}

fn test_split(cfg: &RunConfig) -> Result<Vec<Arc<SceneContext>>> {
    Ok(build_splits(&RunConfig {
        pretrain_scenes: 0,
        ..cfg.clone()
    })?
    .test)
}

fn models(cfg: &RunConfig) -> Result<Vec<(String, Actor)>> {
    let mut out = vec![(model_label(&cfg.checkpoint), load_actor(&cfg.checkpoint, "checkpoint", cfg)?)];
    if !cfg.compare_checkpoint.is_empty() {
        out.push((
            model_label(&cfg.compare_checkpoint),
            load_actor(&cfg.compare_checkpoint, "compare_checkpoint", cfg)?,
        ));
    }
    Ok(out)
}

fn cmd_timestep(cfg: &RunConfig) -> Result<i32> {
    let scenes = test_split(cfg)?;
    let models = models(cfg)?;
    let reports: Vec<_> = models.iter().map(|(_, a)| per_timestep_report(a, &scenes)).collect();
    let named: Vec<(&str, _)> = models.iter().map(|(n, _)| n.as_str()).zip(&reports).collect();
    for (n, r) in &named {
        println!("{n}: final-third mean Dice {:.4}", r.final_third_mean());
    }
    write_csv(&cfg.out_dir().join("timestep.csv"), &cfg.echo(), &TIMESTEP_HEADER, &timestep_rows(&named))?;
    std::fs::write(cfg.out_dir().join("timestep.svg"), timestep_svg(&named))?;
    Ok(0)
}

fn cmd_blocking(cfg: &RunConfig) -> Result<i32> {
    let scenes = test_split(cfg)?;
    let mut rows = Vec::new();
    for (name, actor) in models(cfg)? {
        let r: Vec<_> = [Block::None, Block::Lstm, Block::Mask]
            .into_iter()
            .map(|b| state_blocking_eval(&actor, &scenes, b, cfg.max_steps()))
            .collect();
        rows.extend(blocking_rows(&name, &r));
    }
    write_csv(&cfg.out_dir().join("state_blocking.csv"), &cfg.echo(), &BLOCKING_HEADER, &rows)?;
    Ok(0)
}

fn cmd_lockin(cfg: &RunConfig) -> Result<i32> {
    let pre = if cfg.pretrained.is_empty() {
        pretrain_actor(cfg, &build_splits(cfg)?, cfg.seed)?.0
    } else {
        load_actor(&cfg.pretrained, "pretrained", cfg)?
    };
    let report = ordering_lockin_demo(cfg, &pre)?;
    for r in &report.rows {
        println!("sigma {}: median agreement {:.3}", r.sigma, r.median_agreement());
    }
    write_csv(&cfg.out_dir().join("lockin.csv"), &cfg.echo(), &LOCKIN_HEADER, &report.csv_rows())?;
    std::fs::write(cfg.out_dir().join("lockin.svg"), report.svg())?;
    Ok(0)
}

fn cmd_oracle(cfg: &RunConfig) -> Result<i32> {
    let report = oracle_ordering(cfg)?;
    for g in &report.groups {
        println!("{}: best {:.4} worst {:.4} gap {:.4}", g.name, g.best_mean(), g.worst_mean(), g.gap());
    }
    write_csv(&cfg.out_dir().join("oracle.csv"), &cfg.echo(), &ORACLE_HEADER, &report.csv_rows())?;
    Ok(0)
}

fn cmd_export(cfg: &RunConfig) -> Result<i32> {
    let splits = build_splits(cfg)?;
    let dir = cfg.out_dir().join("splits");
    std::fs::create_dir_all(&dir)?;
    let scene_cfg = cfg.scene_config();
    let scenes = |v: &[Arc<SceneContext>]| -> Vec<Scene> { v.iter().map(|c| c.scene.clone()).collect() };
    for (name, part) in [("pretrain", &splits.pretrain), ("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        save_split(&dir.join(format!("{name}.split")), &scene_cfg, &scenes(part))?;
    }
    export_scenes(&cfg.out_dir().join("test_scenes"), &scenes(&splits.test))?;
    println!("split hash {}", splits.hash);
    Ok(0)
}
