use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::Serialize;

use coalfake::annotator::PromptMode;
use coalfake::pipeline::{HumanMode, Pipeline, RoundMetrics, RunConfig, RunState, Status};

pub const CONFIG_FILE: &str = "config.json";
pub const STATE_FILE: &str = "state.json";
pub const METRICS_FILE: &str = "metrics.json";

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn log_header(command: &str, config: &RunConfig) {
    tracing::info!(
        command,
        run_id = %config.run_id,
        strategy = config.sampling.strategy.as_str(),
        per_round = config.sampling.per_round,
        rho = config.annotator.rho,
        seed = config.seed,
        max_rounds = config.stop.max_rounds,
        "run header"
    );
}

/// Prepares the output directory and returns the pipeline and the state to
/// continue from.
pub fn prepare(config: &RunConfig, out: &Path, resume: bool) -> anyhow::Result<(Pipeline, RunState)> {
    let pipeline = Pipeline::new(config.clone())?.with_artifacts(out);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(CONFIG_FILE), config)?;
    let state = if resume {
        let state = RunState::load(&out.join(STATE_FILE))?;
        pipeline.check_state(&state)?;
        tracing::info!(round = state.round, status = state.status.as_str(), "resuming");
        state
    } else {
        pipeline.init_state()
    };
    Ok((pipeline, state))
}

/// Advances an oracle-mode run to the end, saving after every stage.
pub fn run_to_completion(config: &RunConfig, out: &Path, resume: bool) -> anyhow::Result<RunState> {
    if config.human.mode == HumanMode::Interactive {
        bail!("human.mode is interactive; use `coalfake serve` to collect labels");
    }
    let (pipeline, mut state) = prepare(config, out, resume)?;
    let state_path = out.join(STATE_FILE);
    while state.status != Status::Done {
        let before = state.round;
        pipeline.advance(&mut state)?;
        state.save(&state_path)?;
        if state.round > before {
            log_round(&state);
        }
    }
    fs::write(out.join(METRICS_FILE), state.metrics_json() + "\n")?;
    tracing::info!(
        rounds = state.round,
        stop = state.stop_reason.map(|r| r.as_str()).unwrap_or("none"),
        total_usd = state.ledger.cost().total_usd,
        "run finished"
    );
    Ok(state)
}

fn log_round(state: &RunState) {
    if let Some(r) = state.rounds.last() {
        tracing::info!(
            round = r.metrics.round,
            strategy = ?r.strategy,
            labelled = r.labelled_total,
            macro_f1 = format_args!("{:.4}", r.metrics.macro_f1),
            flagged = r.metrics.flagged,
            human = r.metrics.human_labeled,
            total_usd = format_args!("{:.4}", r.metrics.cost.total_usd),
            "round complete"
        );
    }
}

pub fn run(config: &RunConfig, out: &Path, resume: bool) -> anyhow::Result<()> {
    log_header("run", config);
    let state = run_to_completion(config, out, resume)?;
    if let Some(last) = state.metrics().last() {
        println!(
            "{}: {} rounds, macro-F1 {:.4}, ${:.4}",
            state.run_id, state.round, last.macro_f1, last.cost.total_usd
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct DetectorReport {
    pub plain: RoundMetrics,
    pub knn: RoundMetrics,
}

pub const EVAL_FILE: &str = "eval_llm.json";

pub fn eval_llm(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    log_header("eval-llm", config);
    let pipeline = Pipeline::new(config.clone())?;
    let report = DetectorReport {
        plain: pipeline.detect_metrics(PromptMode::Plain)?,
        knn: pipeline.detect_metrics(PromptMode::Knn)?,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(EVAL_FILE), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
