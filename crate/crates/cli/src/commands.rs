use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use svpg::checkpoint::Checkpoint;
use svpg::envs::EnvId;
use svpg::metrics::{load_metrics, MetricsWriter, Summary};
use svpg::rng::{stream, Purpose};
use svpg::rollout::{run_episode, write_trajectories_csv};
use svpg::trainer::{IterationRecord, Trainer};

use crate::config::{ConfigError, RunConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const VERSION_FILE: &str = "VERSION";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.json";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<svpg::Error> for CliError {
    fn from(e: svpg::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(path, e))
}

fn version_string() -> String {
    format!("svpg {}\n", env!("CARGO_PKG_VERSION"))
}

pub fn run(config_path: &Path, workers: Option<usize>) -> Result<(), CliError> {
    let (config, text) = RunConfig::load(config_path)?;
    let train = config.train_config();
    let mut trainer = Trainer::new(train.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(w) = workers {
        trainer.set_workers(w).map_err(|e| CliError::Config(e.to_string()))?;
    }

    let out = &config.output_dir;
    let ck_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ck_dir).map_err(|e| runtime(&ck_dir, e))?;
    write_file(&out.join(CONFIG_FILE), &text)?;
    write_file(&out.join(VERSION_FILE), &version_string())?;
    let metrics_path = out.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path).map_err(|e| runtime(&metrics_path, e))?;
    let mut writer = MetricsWriter::new(file).map_err(|e| runtime(&metrics_path, e))?;

    let save = |trainer: &Trainer, name: &str| -> Result<(), CliError> {
        let ps = trainer.particles();
        let ck = Checkpoint::new(trainer.iteration(), &ps.policies, &ps.seeds)?;
        ck.save(&ck_dir.join(name))?;
        Ok(())
    };
    while !trainer.is_done() {
        // Rows already written stay on disk if a later iteration fails.
        let record = trainer.step()?;
        writer.write(&record).map_err(|e| runtime(&metrics_path, e))?;
        let done = trainer.iteration();
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            save(&trainer, &format!("iter_{done:06}.json"))?;
        }
    }
    save(&trainer, FINAL_CHECKPOINT)?;
    let metrics = trainer.finish()?;
    Summary::new(&train, &metrics).save(&out.join(SUMMARY_FILE))?;
    println!(
        "{} {} on {}: {} iterations, best test return {}, episodes to 95% {}",
        train.estimator.kind.as_str(),
        train.regime.as_str(),
        train.env,
        metrics.records.len(),
        metrics.best_test_return.map_or("-".into(), |v| format!("{v:.2}")),
        metrics.episodes_to_95.map_or("-".into(), |v| v.to_string()),
    );
    Ok(())
}

struct LoadedRun {
    label: String,
    summary: Summary,
    records: Vec<IterationRecord>,
}

fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let summary = Summary::load(&dir.join(SUMMARY_FILE))?;
    let records = load_metrics(&dir.join(METRICS_FILE))?;
    let mut total = 0;
    for r in &records {
        total += r.transitions;
        if r.cumulative_transitions != total {
            return Err(CliError::Runtime(format!(
                "{}: iteration {} logs {} cumulative transitions but its rows add up to {total}",
                dir.display(),
                r.iteration,
                r.cumulative_transitions
            )));
        }
    }
    let label = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(LoadedRun {
        label,
        summary,
        records,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

type EvalPair = (Option<f64>, Option<f64>);

pub fn compare(dirs: &[PathBuf], output: &Path) -> Result<(), CliError> {
    let mut runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let env = runs[0].summary.env.clone();
    if let Some(other) = runs.iter().find(|r| r.summary.env != env) {
        return Err(CliError::Config(format!(
            "cannot compare runs on different environments: {} is {env}, {} is {}",
            runs[0].label, other.label, other.summary.env
        )));
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for run in &mut runs {
        let count = seen.entry(run.label.clone()).or_insert(0);
        *count += 1;
        if *count > 1 {
            run.label = format!("{}_{}", run.label, count);
        }
    }

    // Per cumulative transition count: (best, mean) evaluation of each run.
    let mut rows: BTreeMap<usize, Vec<EvalPair>> = BTreeMap::new();
    for (k, run) in runs.iter().enumerate() {
        for r in &run.records {
            rows.entry(r.cumulative_transitions).or_insert_with(|| vec![(None, None); runs.len()])[k] =
                (r.best_eval_return, r.mean_eval_return);
        }
    }
    let mut w = csv::Writer::from_path(output).map_err(|e| runtime(output, e))?;
    let mut header = vec!["cumulative_transitions".to_string()];
    for run in &runs {
        header.push(format!("{}_best_eval_return", run.label));
        header.push(format!("{}_mean_eval_return", run.label));
    }
    w.write_record(&header).map_err(|e| runtime(output, e))?;
    for (t, vals) in &rows {
        let mut rec = vec![t.to_string()];
        for (best, mean) in vals {
            rec.push(cell(*best));
            rec.push(cell(*mean));
        }
        w.write_record(&rec).map_err(|e| runtime(output, e))?;
    }
    w.flush().map_err(|e| runtime(output, e))?;

    println!("env: {env}");
    println!(
        "{:<24} {:<12} {:<20} {:>16} {:>16} {:>14}",
        "run", "regime", "estimator", "best_return", "mean_return", "episodes_to_95"
    );
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    for run in &runs {
        let s = &run.summary;
        println!(
            "{:<24} {:<12} {:<20} {:>16} {:>16} {:>14}",
            run.label,
            s.regime,
            s.estimator,
            show(s.best_test_return),
            show(s.mean_test_return),
            s.episodes_to_95.map_or("-".to_string(), |v| v.to_string())
        );
    }
    Ok(())
}

pub fn visitation(
    run: &Path,
    particles: &[usize],
    episodes: usize,
    output: Option<PathBuf>,
) -> Result<(), CliError> {
    if episodes == 0 {
        return Err(CliError::Config("--episodes must be at least 1".into()));
    }
    let ck_path = run.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT);
    if !ck_path.exists() {
        return Err(CliError::Runtime(format!("{}: checkpoint not found", ck_path.display())));
    }
    let ck = Checkpoint::load(&ck_path)?;
    let summary = Summary::load(&run.join(SUMMARY_FILE))?;
    let env: EnvId = summary.env.parse()?;
    let env = env.build();
    let policies = ck.policies()?;
    let selected: Vec<usize> = if particles.is_empty() {
        (0..policies.len()).collect()
    } else {
        particles.to_vec()
    };
    let out = output.unwrap_or_else(|| run.join("visitation"));
    fs::create_dir_all(&out).map_err(|e| runtime(&out, e))?;
    for &i in &selected {
        let policy = policies.get(i).ok_or_else(|| {
            CliError::Config(format!("particle {i} does not exist; the run has {}", policies.len()))
        })?;
        let trajs = (0..episodes)
            .map(|e| run_episode(env.as_ref(), policy, &mut stream(ck.seeds[i], 0, Purpose::Visitation, e)))
            .collect::<Result<Vec<_>, _>>()?;
        let ret = trajs.iter().map(|t| t.total_reward()).sum::<f64>() / trajs.len() as f64;
        let path = out.join(format!("particle_{i}_return_{ret:.2}.csv"));
        let file = fs::File::create(&path).map_err(|e| runtime(&path, e))?;
        write_trajectories_csv(file, &trajs).map_err(|e| runtime(&path, e))?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn env_info(env: Option<&str>) -> Result<(), CliError> {
    let ids: Vec<EnvId> = match env {
        Some(name) => vec![name.parse().map_err(|e: svpg::Error| CliError::Config(e.to_string()))?],
        None => EnvId::ALL.to_vec(),
    };
    for id in ids {
        let e = id.build();
        let info = e.info();
        println!("{id}");
        println!("  obs_dim             {}", info.obs_dim);
        println!("  action_dim          {}", info.action_dim);
        println!("  action_bounds       {:?} .. {:?}", info.action_low, info.action_high);
        println!("  max_episode_length  {}", info.max_episode_length);
        for (name, value) in e.constants() {
            println!("  {name:<19} {value}");
        }
    }
    Ok(())
}
