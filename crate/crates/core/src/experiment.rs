//! Experiment configuration, the multi-seed runner, metrics files and
//! strategy comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{fit_contraction, theory_mode_run, TheoryModeConfig, TheoryReport};
use crate::error::{Error, Result};
use crate::federation::{
    run_federation, FederationConfig, FederationOutput, LoraConfig, MetricsRow, ModelBlueprint, ModelSpec,
    RoundSchedule, Split, Strategy,
};
use crate::nn::OptimizerConfig;
use crate::synth::{build_federation_data, DataSizes, HeterogeneityConfig, HeterogeneityLevel, TaskTemplate};

pub const METRICS_HEADER: &str = "seed,strategy,round,client,split,loss,accuracy";
pub const SEED_ENV: &str = "FEDLORA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategies: Vec<Strategy>,
    pub clients: usize,
    pub schedule: RoundSchedule,
    pub optimizer: OptimizerConfig,
    pub model: ModelSpec,
    pub lora: LoraConfig,
    pub het: HeterogeneityLevel,
    pub task: TaskTemplate,
    /// Per-client sizes; defaults to an even split of the 8-client totals.
    pub data: Option<DataSizes>,
    /// Empty means: `FEDLORA_SEED` if set, else `[0]`.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub theory_mode: bool,
    pub theory: TheoryModeConfig,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategies: vec![Strategy::FedAlt],
            clients: 8,
            schedule: RoundSchedule::default(),
            optimizer: OptimizerConfig::default(),
            model: ModelSpec::default(),
            lora: LoraConfig::default(),
            het: HeterogeneityLevel::High,
            task: TaskTemplate::default(),
            data: None,
            seeds: Vec::new(),
            out: PathBuf::from("runs"),
            theory_mode: false,
            theory: TheoryModeConfig::default(),
            jobs: 1,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub strategies: Option<Vec<Strategy>>,
    pub clients: Option<usize>,
    pub rounds: Option<usize>,
    pub local_epochs: Option<usize>,
    pub rank: Option<usize>,
    pub lora_alpha: Option<f64>,
    pub het: Option<HeterogeneityLevel>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub theory_mode: bool,
    pub model: Option<ModelSpec>,
    pub jobs: Option<usize>,
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    let msg = e.to_string();
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".to_string());
    Error::config(key, msg.trim().replace('\n', " "))
}

impl ExperimentConfig {
    /// Parses TOML and validates it. Seeds are left as written.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(toml_error)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(toml_error)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.strategies {
            self.strategies = v.clone();
        }
        if let Some(v) = o.clients {
            self.clients = v;
        }
        if let Some(v) = o.rounds {
            self.schedule.rounds = v;
            self.theory.rounds = v;
        }
        if let Some(v) = o.local_epochs {
            self.schedule.local_epochs = v;
            self.theory.local_steps = v;
        }
        if let Some(v) = o.rank {
            self.lora.rank = v;
        }
        if let Some(v) = o.lora_alpha {
            self.lora.alpha = v;
        }
        if let Some(v) = o.het {
            self.het = v;
        }
        if let Some(v) = &o.seeds {
            self.seeds = v.clone();
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if o.theory_mode {
            self.theory_mode = true;
        }
        if let Some(v) = &o.model {
            self.model = v.clone();
        }
        if let Some(v) = o.jobs {
            self.jobs = v;
        }
    }

    /// Seeds to run, after the environment fallback.
    pub fn resolved_seeds(&self) -> Result<Vec<u64>> {
        if !self.seeds.is_empty() {
            return Ok(self.seeds.clone());
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map(|s| vec![s])
                .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))),
            Err(_) => Ok(vec![0]),
        }
    }

    pub fn data_sizes(&self) -> DataSizes {
        self.data.unwrap_or_else(|| DataSizes::for_clients(self.clients))
    }

    pub fn heterogeneity(&self) -> HeterogeneityConfig {
        HeterogeneityConfig {
            level: self.het,
            clients: self.clients,
            template: self.task.clone(),
        }
    }

    pub fn blueprint(&self) -> ModelBlueprint {
        ModelBlueprint {
            spec: self.model.clone(),
            lora: self.lora.clone(),
            input_dim: self.task.input_dim,
            outputs: self.task.outputs,
            tokens_per_example: self.task.tokens_per_example,
            classification: self.task.classification,
            surrogate: None,
        }
    }

    pub fn federation(&self, strategy: Strategy, seed: u64) -> FederationConfig {
        FederationConfig {
            strategy,
            schedule: self.schedule,
            optimizer: self.optimizer.clone(),
            blueprint: self.blueprint(),
            seed,
            jobs: self.jobs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theory_mode {
            return self.theory.validate();
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "at least one strategy is required"));
        }
        if self.clients == 0 {
            return Err(Error::config("clients", "must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs", "must be at least 1"));
        }
        for s in &self.strategies {
            s.validate(self.clients)?;
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::config("optimizer.learning_rate", "must be positive"));
        }
        if self.lora.rank == 0 {
            return Err(Error::config("lora.rank", "must be at least 1"));
        }
        if !(self.lora.alpha > 0.0 && self.lora.alpha.is_finite()) {
            return Err(Error::config("lora.alpha", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.lora.dropout) {
            return Err(Error::config("lora.dropout", "must lie in [0, 1)"));
        }
        let widths: Vec<usize> = match &self.model {
            ModelSpec::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::config("model.hidden", "widths must be positive"));
                }
                let mut w = vec![self.task.input_dim];
                w.extend(hidden);
                if hidden.is_empty() {
                    w.push(self.task.outputs);
                }
                w
            }
            ModelSpec::Attn => vec![self.task.input_dim, self.task.input_dim],
        };
        let max_rank = widths.windows(2).map(|p| p[0].min(p[1])).min().unwrap_or(0);
        for s in &self.strategies {
            let r = s.rank_override().unwrap_or(self.lora.rank);
            if r > max_rank {
                return Err(Error::config(
                    if s.rank_override().is_some() { "strategies" } else { "lora.rank" },
                    format!("rank {r} exceeds the smallest adapted layer dimension {max_rank}"),
                ));
            }
        }
        for (key, v) in [
            ("task.input_dim", self.task.input_dim),
            ("task.outputs", self.task.outputs),
            ("task.tokens_per_example", self.task.tokens_per_example),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.task.specificity) {
            return Err(Error::config("task.specificity", "must lie in [0, 1]"));
        }
        if !(self.task.noise_std >= 0.0) {
            return Err(Error::config("task.noise_std", "must be nonnegative"));
        }
        let sizes = self.data_sizes();
        if sizes.train == 0 || sizes.eval == 0 {
            return Err(Error::config("data", "train and eval sizes must be positive"));
        }
        self.heterogeneity().task_count()?;
        if self.seeds.len() != self.seeds.iter().collect::<BTreeSet<_>>().len() {
            return Err(Error::config("seeds", "duplicate seed"));
        }
        Ok(())
    }
}

/// Reads an optional config file, applies flag overrides and validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(toml_error)?
        }
        None => ExperimentConfig::default(),
    };
    config.apply(overrides);
    config.seeds = config.resolved_seeds()?;
    config.validate()?;
    Ok(config)
}

pub fn metrics_line(row: &MetricsRow) -> String {
    let acc = row.accuracy.map(|a| a.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{}",
        row.seed, row.strategy, row.round, row.client, row.split, row.loss, acc
    )
}

/// A parsed metrics line. The strategy stays textual so logs from any run
/// can be read.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub seed: u64,
    pub strategy: String,
    pub round: usize,
    pub client: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl MetricsRecord {
    /// Accuracy when present, else loss.
    pub fn metric(&self) -> f64 {
        self.accuracy.unwrap_or(self.loss)
    }
}

/// Parses a metrics file. A trailing line without its newline is an
/// interrupted write and is ignored, so every prefix of a valid file parses.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut lines = complete.lines().enumerate();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, h)) if h == METRICS_HEADER => {}
        Some(_) => {
            return Err(Error::Parse {
                line: 1,
                reason: format!("expected header `{METRICS_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let bad = |reason: &str| Error::Parse {
            line: i + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let split = match f[4] {
            "train" => Split::Train,
            "eval" => Split::Eval,
            _ => return Err(bad("split must be train or eval")),
        };
        out.push(MetricsRecord {
            seed: f[0].parse().map_err(|_| bad("bad seed"))?,
            strategy: f[1].to_string(),
            round: f[2].parse().map_err(|_| bad("bad round"))?,
            client: f[3].parse().map_err(|_| bad("bad client"))?,
            split,
            loss: f[5].parse().map_err(|_| bad("bad loss"))?,
            accuracy: if f[6].is_empty() {
                None
            } else {
                Some(f[6].parse().map_err(|_| bad("bad accuracy"))?)
            },
        });
    }
    Ok(out)
}

/// File-name-safe form of a strategy tag.
pub fn strategy_slug(s: Strategy) -> String {
    s.to_string().replace(':', "_").replace('/', "-")
}

/// Mean final-round eval metric over clients, per seed.
pub fn seed_means(records: &[MetricsRecord]) -> BTreeMap<u64, f64> {
    let mut last: BTreeMap<u64, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == Split::Eval) {
        let e = last.entry(r.seed).or_insert(r.round);
        *e = (*e).max(r.round);
    }
    let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == Split::Eval && r.round == last[&r.seed]) {
        let e = sums.entry(r.seed).or_insert((0.0, 0));
        e.0 += r.metric();
        e.1 += 1;
    }
    sums.into_iter().map(|(s, (t, n))| (s, t / n as f64)).collect()
}

/// `P(X ≥ wins)` for `X ~ Binomial(n, ½)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    let mut p = 0.0;
    let mut c = 1.0f64;
    for i in 0..=n {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        if i >= wins {
            p += c;
        }
    }
    p / 2f64.powi(n as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub seeds: Vec<u64>,
    /// Seeds present in only one of the two logs.
    pub missing: Vec<u64>,
    /// `a − b` per paired seed.
    pub differences: Vec<f64>,
    pub mean_a: f64,
    pub mean_b: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided sign test of `a > b`.
    pub p_value: f64,
}

impl Comparison {
    pub fn mean_difference(&self) -> f64 {
        if self.differences.is_empty() {
            0.0
        } else {
            self.differences.iter().sum::<f64>() / self.differences.len() as f64
        }
    }

    /// `a ≥ b`: a significant sign test, or else every seed within `margin`
    /// of `b` and a higher aggregate mean.
    pub fn at_least(&self, level: f64, margin: f64) -> bool {
        if self.p_value < level {
            return true;
        }
        let non_inferior = !self.differences.is_empty() && self.differences.iter().all(|&d| d > -margin);
        non_inferior && self.mean_a >= self.mean_b
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "compare: {} vs {}", self.a, self.b);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds: {}", seeds.join(" "));
        if !self.missing.is_empty() {
            let m: Vec<String> = self.missing.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "missing pairs: {}", m.join(" "));
        }
        for (seed, d) in self.seeds.iter().zip(&self.differences) {
            let _ = writeln!(s, "seed {seed}: {d:+.6}");
        }
        let _ = writeln!(s, "mean {}: {:.6}", self.a, self.mean_a);
        let _ = writeln!(s, "mean {}: {:.6}", self.b, self.mean_b);
        let _ = writeln!(s, "mean difference: {:+.6}", self.mean_difference());
        let _ = writeln!(s, "sign test: {} wins, {} losses, {} ties, p = {:.4}", self.wins, self.losses, self.ties, self.p_value);
        s
    }
}

fn single_strategy(records: &[MetricsRecord]) -> Result<String> {
    let names: BTreeSet<&str> = records.iter().map(|r| r.strategy.as_str()).collect();
    match names.len() {
        1 => Ok(names.into_iter().next().expect("one name").to_string()),
        0 => Err(Error::Diagnostics("metrics log is empty".into())),
        _ => Err(Error::Diagnostics(format!("metrics log mixes strategies: {names:?}"))),
    }
}

fn layout(records: &[MetricsRecord]) -> BTreeMap<u64, (usize, BTreeSet<usize>)> {
    let mut out: BTreeMap<u64, (usize, BTreeSet<usize>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == Split::Eval) {
        let e = out.entry(r.seed).or_default();
        e.0 = e.0.max(r.round);
        e.1.insert(r.client);
    }
    out
}

/// Paired per-seed comparison of two single-strategy metrics logs.
pub fn compare_strategies(a: &[MetricsRecord], b: &[MetricsRecord]) -> Result<Comparison> {
    let name_a = single_strategy(a)?;
    let name_b = single_strategy(b)?;
    let (la, lb) = (layout(a), layout(b));
    let ma = seed_means(a);
    let mb = seed_means(b);
    let mut seeds = Vec::new();
    let mut missing = Vec::new();
    let mut differences = Vec::new();
    for seed in la.keys().chain(lb.keys()).collect::<BTreeSet<_>>() {
        match (la.get(seed), lb.get(seed)) {
            (Some(x), Some(y)) => {
                if x != y {
                    return Err(Error::Diagnostics(format!(
                        "seed {seed}: runs differ in rounds or clients ({} rounds/{} clients vs {}/{})",
                        x.0,
                        x.1.len(),
                        y.0,
                        y.1.len()
                    )));
                }
                seeds.push(*seed);
                differences.push(ma[seed] - mb[seed]);
            }
            _ => missing.push(*seed),
        }
    }
    let wins = differences.iter().filter(|&&d| d > 0.0).count();
    let losses = differences.iter().filter(|&&d| d < 0.0).count();
    let mean = |m: &BTreeMap<u64, f64>| {
        if seeds.is_empty() {
            0.0
        } else {
            seeds.iter().map(|s| m[s]).sum::<f64>() / seeds.len() as f64
        }
    };
    Ok(Comparison {
        mean_a: mean(&ma),
        mean_b: mean(&mb),
        a: name_a,
        b: name_b,
        p_value: sign_test_p(wins, wins + losses),
        ties: differences.len() - wins - losses,
        wins,
        losses,
        seeds,
        missing,
        differences,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Final eval metric summary: per strategy, mean and sample std over seeds
/// for each client and for the client average.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub metric: &'static str,
    pub clients: usize,
    /// `(strategy, per-client (mean, std), average (mean, std))`.
    pub rows: Vec<(Strategy, Vec<(f64, f64)>, (f64, f64))>,
}

impl Summary {
    pub fn build(metric: &'static str, clients: usize, finals: &[(Strategy, BTreeMap<u64, Vec<f64>>)]) -> Self {
        let rows = finals
            .iter()
            .map(|(s, by_seed)| {
                let per_client = (0..clients)
                    .map(|k| mean_std(&by_seed.values().map(|v| v[k]).collect::<Vec<_>>()))
                    .collect();
                let avgs: Vec<f64> = by_seed.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
                (*s, per_client, mean_std(&avgs))
            })
            .collect();
        Summary { metric, clients, rows }
    }

    /// Long form: one row per (strategy, client) plus an `average` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,client,metric,mean,std\n");
        for (strategy, per_client, avg) in &self.rows {
            for (k, (m, sd)) in per_client.iter().enumerate() {
                let _ = writeln!(s, "{strategy},{k},{},{m},{sd}", self.metric);
            }
            let _ = writeln!(s, "{strategy},average,{},{},{}", self.metric, avg.0, avg.1);
        }
        s
    }

    /// Wide table: strategies as rows, clients and Average as columns.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16}", "strategy");
        for k in 0..self.clients {
            let _ = write!(s, " {:>16}", format!("client{k}"));
        }
        let _ = writeln!(s, " {:>16}", "Average");
        for (strategy, per_client, avg) in &self.rows {
            let _ = write!(s, "{:<16}", strategy.to_string());
            for (m, sd) in per_client {
                let _ = write!(s, " {:>16}", format!("{m:.4}±{sd:.4}"));
            }
            let _ = writeln!(s, " {:>16}", format!("{:.4}±{:.4}", avg.0, avg.1));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub metrics_files: Vec<PathBuf>,
    pub summary: Option<Summary>,
    pub theory: Vec<(u64, TheoryReport)>,
}

impl ExperimentOutcome {
    /// False when any theory-mode verdict failed.
    pub fn passed(&self) -> bool {
        self.theory.iter().all(|(_, r)| r.verdict.passed())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Runs one federation per (strategy, seed) and writes metrics, traces,
/// client checkpoints, final broadcasts and the summary under `config.out`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let seeds = config.resolved_seeds()?;
    fs::create_dir_all(&config.out)?;
    write_file(&config.out.join("config.toml"), &config.to_toml()?)?;

    if config.theory_mode {
        let mut theory = Vec::new();
        for &seed in &seeds {
            let tc = TheoryModeConfig {
                seed,
                jobs: config.jobs,
                ..config.theory.clone()
            };
            let report = theory_mode_run(&tc)?;
            write_file(&config.out.join(format!("theory_trace_seed{seed}.csv")), &report.trace.to_csv())?;
            write_file(&config.out.join(format!("theory_seed{seed}.txt")), &report.summary())?;
            theory.push((seed, report));
        }
        return Ok(ExperimentOutcome {
            metrics_files: Vec::new(),
            summary: None,
            theory,
        });
    }

    let het = config.heterogeneity();
    let sizes = config.data_sizes();
    let mut metrics_files = Vec::new();
    let mut finals = Vec::new();
    for &strategy in &config.strategies {
        let slug = strategy_slug(strategy);
        let path = config.out.join(format!("metrics_{slug}.csv"));
        let mut writer = BufWriter::new(File::create(&path)?);
        writeln!(writer, "{METRICS_HEADER}")?;
        writer.flush()?;
        let mut by_seed = BTreeMap::new();
        for &seed in &seeds {
            let data = build_federation_data(&het, sizes, seed)?;
            let out = run_federation(&config.federation(strategy, seed), data)?;
            for row in &out.metrics {
                writeln!(writer, "{}", metrics_line(row))?;
            }
            writer.flush()?;
            write_run_artifacts(&config.out, &slug, seed, &out)?;
            let last = out.metrics.iter().map(|r| r.round).max().unwrap_or(0);
            let mut per_client = vec![0.0; config.clients];
            for r in out.metrics.iter().filter(|r| r.round == last && r.split == Split::Eval) {
                per_client[r.client] = r.accuracy.unwrap_or(r.loss);
            }
            by_seed.insert(seed, per_client);
        }
        metrics_files.push(path);
        finals.push((strategy, by_seed));
    }

    let metric = if config.task.classification { "accuracy" } else { "mse" };
    let summary = Summary::build(metric, config.clients, &finals);
    write_file(&config.out.join("summary.csv"), &summary.to_csv())?;
    write_file(&config.out.join("summary.txt"), &summary.to_table())?;
    Ok(ExperimentOutcome {
        metrics_files,
        summary: Some(summary),
        theory: Vec::new(),
    })
}

fn write_run_artifacts(out: &Path, slug: &str, seed: u64, run: &FederationOutput) -> Result<()> {
    write_file(&out.join(format!("trace_{slug}_seed{seed}.csv")), &run.trace.to_csv())?;
    if let Ok(fit) = fit_contraction(&run.trace) {
        write_file(&out.join(format!("fit_{slug}_seed{seed}.txt")), &fit.report())?;
    }
    let run_dir = PathBuf::from(slug).join(format!("seed{seed}"));
    for client in &run.clients {
        write_file(
            &out.join("checkpoints").join(&run_dir).join(format!("client{}.txt", client.id)),
            &client.checkpoint(run.metrics.last().map_or(0, |r| r.round)).encode(),
        )?;
    }
    for (k, payload) in &run.final_broadcasts {
        write_file(
            &out.join("broadcasts").join(&run_dir).join(format!("client{k}.txt")),
            &payload.to_container().encode(),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.clients, 8);
        assert_eq!(c.schedule.rounds, 20);
        assert_eq!(c.schedule.local_epochs, 5);
        assert_eq!(c.lora.rank, 8);
        assert_eq!(c.lora.alpha, 32.0);
        assert_eq!(c.lora.dropout, 0.0);
    }

    #[test]
    fn rank_zero_rejected() {
        let e = ExperimentConfig::from_toml("[lora]\nrank = 0\n").unwrap_err();
        assert!(e.to_string().contains("lora.rank"), "{e}");
    }

    #[test]
    fn fedalt_single_client_rejected() {
        let e = ExperimentConfig::from_toml("clients = 1\nstrategies = [\"fedalt\"]\n").unwrap_err();
        assert!(matches!(e, Error::RowUndefined(1)));
        assert!(e.to_string().contains("Rest-of-World"));
    }

    #[test]
    fn unknown_key_named() {
        let e = ExperimentConfig::from_toml("roundz = 3\n").unwrap_err();
        match e {
            Error::Config { key, .. } => assert_eq!(key, "roundz"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn config_round_trip() {
        let c = ExperimentConfig {
            strategies: vec![Strategy::FedAlt, Strategy::LocalOnly, Strategy::RowUpdate { rank: 4 }],
            seeds: vec![3, 1],
            data: Some(DataSizes { train: 10, eval: 5 }),
            model: ModelSpec::Attn,
            ..Default::default()
        };
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn flags_win() {
        let mut c = ExperimentConfig::from_toml("clients = 4\n[schedule]\nrounds = 3\n").unwrap();
        c.apply(&Overrides {
            clients: Some(6),
            ..Default::default()
        });
        assert_eq!(c.clients, 6);
        assert_eq!(c.schedule.rounds, 3);
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(5, 5) - 1.0 / 32.0).abs() < 1e-15);
        assert!((sign_test_p(4, 5) - 6.0 / 32.0).abs() < 1e-15);
        assert_eq!(sign_test_p(0, 5), 1.0);
        assert_eq!(sign_test_p(0, 0), 1.0);
    }

    fn log(strategy: &str, seeds: &[u64], value: impl Fn(u64, usize) -> f64) -> Vec<MetricsRecord> {
        let mut out = Vec::new();
        for &seed in seeds {
            for round in 1..=2 {
                for client in 0..3 {
                    out.push(MetricsRecord {
                        seed,
                        strategy: strategy.into(),
                        round,
                        client,
                        split: Split::Eval,
                        loss: 1.0,
                        accuracy: Some(value(seed, client) + round as f64 * 0.01),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn self_comparison_is_zero() {
        let a = log("fedalt", &[0, 1, 2], |s, k| 0.1 * s as f64 + 0.05 * k as f64);
        let c = compare_strategies(&a, &a).unwrap();
        assert!(c.differences.iter().all(|&d| d == 0.0));
        assert_eq!(c.ties, 3);
        assert_eq!(c.p_value, 1.0);
    }

    #[test]
    fn planted_offset() {
        let base = |s: u64, k: usize| 0.3 + 0.01 * s as f64 + 0.02 * k as f64;
        let seeds = [0, 1, 2, 3, 4];
        let a = log("fedalt", &seeds, |s, k| base(s, k) + 0.1);
        let b = log("fedit", &seeds, base);
        let c = compare_strategies(&a, &b).unwrap();
        for d in &c.differences {
            assert!((d - 0.1).abs() < 1e-12);
        }
        assert_eq!(c.wins, 5);
        assert!((c.p_value - 1.0 / 32.0).abs() < 1e-15);
        assert!(c.at_least(0.05, 0.0));
    }

    #[test]
    fn missing_pairs_flagged() {
        let a = log("fedalt", &[0, 1, 2], |_, _| 0.5);
        let b = log("fedit", &[1, 2, 3], |_, _| 0.4);
        let c = compare_strategies(&a, &b).unwrap();
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.missing, vec![0, 3]);
        assert!(c.report().contains("missing pairs: 0 3"));
    }

    #[test]
    fn mismatched_layouts_rejected() {
        let a = log("fedalt", &[0], |_, _| 0.5);
        let mut b = log("fedit", &[0], |_, _| 0.4);
        b.retain(|r| r.client != 2);
        assert!(compare_strategies(&a, &b).is_err());
    }

    #[test]
    fn metrics_prefixes_parse() {
        let rows = log("fedalt", &[0, 1], |_, k| k as f64 * 0.25);
        let mut text = format!("{METRICS_HEADER}\n");
        for r in &rows {
            let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(text, "{},{},{},{},{},{},{}", r.seed, r.strategy, r.round, r.client, r.split, r.loss, acc);
        }
        assert_eq!(parse_metrics(&text).unwrap(), rows);
        for cut in 0..=text.len() {
            let parsed = parse_metrics(&text[..cut]).unwrap();
            assert_eq!(parsed[..], rows[..parsed.len()]);
        }
    }
}
