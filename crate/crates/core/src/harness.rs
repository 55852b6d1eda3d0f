//! Proportion sweeps over training instructions, success-rate evaluation on
//! training and held-out instructions, and line-record result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, EpochRecord, TrainConfig, Trainer};
use crate::env::GridLayout;
use crate::language::{
    enumerate_instructions, split_train_test, Instruction, LanguageError, LanguageSubset,
    SplitSpec, MAX_SUBGOALS,
};
use crate::qnet::Fusion;
use crate::replay::ReplayMode;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Language(#[from] LanguageError),
    #[error("result file line {line}: {message}")]
    SchemaMismatch { line: usize, message: String },
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub subsets: Vec<LanguageSubset>,
    pub proportions: Vec<f64>,
    pub fusions: Vec<Fusion>,
    pub replays: Vec<ReplayMode>,
    pub seeds: Vec<u64>,
    pub epochs: u64,
    /// Stop a cell early once its greedy training success reaches this rate.
    pub stop_at_success: Option<f64>,
    pub train_max_subgoals: usize,
    pub total_max_subgoals: usize,
    /// Cells trained concurrently; each cell is itself sequential.
    pub workers: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            subsets: vec![LanguageSubset::Comma],
            proportions: (1..=9).map(|k| k as f64 / 10.0).collect(),
            fusions: vec![Fusion::GatedAttention],
            replays: vec![ReplayMode::Prioritized],
            seeds: vec![0],
            epochs: 200,
            stop_at_success: None,
            train_max_subgoals: crate::language::TRAIN_MAX_SUBGOALS,
            total_max_subgoals: crate::language::MAX_SUBGOALS,
            workers: 1,
        }
    }
}

/// Identifies one independent training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub subset: LanguageSubset,
    pub proportion: f64,
    pub fusion: Fusion,
    pub replay: ReplayMode,
    pub seed: u64,
}

impl CellKey {
    /// File-system friendly name, e.g. `comma-p0.3-ga-prioritized-s0`.
    pub fn slug(&self) -> String {
        let replay = match self.replay {
            ReplayMode::Uniform => "uniform",
            ReplayMode::Prioritized => "prioritized",
        };
        format!(
            "{}-p{}-{}-{}-s{}",
            self.subset.name(),
            self.proportion,
            self.fusion.short_name(),
            replay,
            self.seed
        )
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        if self.subsets.is_empty() || self.proportions.is_empty() || self.fusions.is_empty() {
            return bad("subsets, proportions and fusions must be non-empty");
        }
        if self.replays.is_empty() || self.seeds.is_empty() {
            return bad("replays and seeds must be non-empty");
        }
        if self.proportions.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return bad("proportions must lie in (0, 1]");
        }
        if self.epochs == 0 {
            return bad("epoch budget must be at least 1");
        }
        if self.train_max_subgoals == 0 || self.train_max_subgoals >= self.total_max_subgoals {
            return bad("need 0 < train_max_subgoals < total_max_subgoals");
        }
        if self.total_max_subgoals > MAX_SUBGOALS {
            return Err(HarnessError::InvalidSpec(format!(
                "total_max_subgoals exceeds {MAX_SUBGOALS}"
            )));
        }
        for &subset in &self.subsets {
            let candidates = enumerate_instructions(subset, 1, self.train_max_subgoals)?.len();
            for &proportion in &self.proportions {
                if SplitSpec::new(proportion, 0).train_count(candidates) == 0 {
                    return Err(HarnessError::InvalidSpec(format!(
                        "proportion {proportion} of {candidates} {subset} instructions is empty"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &subset in &self.subsets {
            for &fusion in &self.fusions {
                for &replay in &self.replays {
                    for &seed in &self.seeds {
                        for &proportion in &self.proportions {
                            out.push(CellKey {
                                subset,
                                proportion,
                                fusion,
                                replay,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn max_proportion(&self) -> f64 {
        self.proportions.iter().copied().fold(f64::MIN, f64::max)
    }
}

/// One line of a result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellResult {
    pub subset: LanguageSubset,
    pub proportion: f64,
    pub fusion: Fusion,
    pub replay: ReplayMode,
    pub seed: u64,
    pub epochs_run: u64,
    pub n_train: usize,
    pub train_success: f64,
    /// Held-out success, present for the largest-proportion cells.
    pub test_success: Option<f64>,
    pub n_test: Option<usize>,
    /// Success on the comma-only training instructions, for subsets other
    /// than Comma.
    pub comma_within_train: Option<f64>,
    pub comma_within_test: Option<f64>,
}

impl CellResult {
    pub fn key(&self) -> CellKey {
        CellKey {
            subset: self.subset,
            proportion: self.proportion,
            fusion: self.fusion,
            replay: self.replay,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub cells: Vec<CellResult>,
}

/// Greedy success rate of a trained network.
pub fn evaluate_success_rate(
    trainer: &Trainer,
    instructions: &[Instruction],
) -> Result<f64, AgentError> {
    Ok(trainer.evaluate(instructions)?.success_rate())
}

fn comma_only(instructions: &[Instruction]) -> Vec<Instruction> {
    instructions
        .iter()
        .filter(|i| i.is_comma_only())
        .cloned()
        .collect()
}

/// Output of one cell: the result line and the per-epoch training curve.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub result: CellResult,
    pub curve: Vec<EpochRecord>,
    pub trainer_online: crate::qnet::ParameterSet,
}

pub type EpochHook<'a> =
    dyn Fn(&CellKey, &Trainer, &EpochRecord) -> Result<(), HarnessError> + Sync + 'a;
pub type CellHook<'a> = dyn Fn(&CellRun) -> Result<(), HarnessError> + Sync + 'a;

/// Callbacks invoked while an experiment runs. An error from either aborts
/// the cell it came from.
#[derive(Clone, Copy)]
pub struct Hooks<'a> {
    pub on_epoch: &'a EpochHook<'a>,
    pub on_cell: &'a CellHook<'a>,
}

impl Default for Hooks<'_> {
    fn default() -> Self {
        Self {
            on_epoch: &|_, _, _| Ok(()),
            on_cell: &|_| Ok(()),
        }
    }
}

/// Trains and evaluates a single cell.
pub fn run_cell(
    spec: &ExperimentSpec,
    base: &TrainConfig,
    layout: &GridLayout,
    key: CellKey,
    record_wall_time: bool,
    on_epoch: &EpochHook<'_>,
) -> Result<CellRun, HarnessError> {
    let split_spec = SplitSpec {
        train_max_subgoals: spec.train_max_subgoals,
        total_max_subgoals: spec.total_max_subgoals,
        ..SplitSpec::new(key.proportion, key.seed)
    };
    let split = split_train_test(key.subset, &split_spec)?;
    let mut cfg = *base;
    cfg.network.fusion = key.fusion;
    cfg.agent.replay = key.replay;
    cfg.agent.seed = key.seed;
    let mut trainer = Trainer::new(cfg, layout.clone())?;
    trainer.record_wall_time = record_wall_time;
    let stop = spec.stop_at_success;
    let mut hook_error = None;
    let curve = trainer.train_with(&split.train, spec.epochs, |t, r| {
        if let Err(e) = on_epoch(&key, t, r) {
            hook_error = Some(e);
            return false;
        }
        stop.is_none_or(|s| r.train_success_rate < s)
    })?;
    if let Some(e) = hook_error {
        return Err(e);
    }
    let train_success = evaluate_success_rate(&trainer, &split.train)?;
    let is_largest = key.proportion == spec.max_proportion();
    let test_success = if is_largest {
        Some(evaluate_success_rate(&trainer, &split.test)?)
    } else {
        None
    };
    let (mut comma_within_train, mut comma_within_test) = (None, None);
    if key.subset != LanguageSubset::Comma {
        let train_commas = comma_only(&split.train);
        if !train_commas.is_empty() {
            comma_within_train = Some(evaluate_success_rate(&trainer, &train_commas)?);
        }
        if is_largest {
            comma_within_test = Some(evaluate_success_rate(&trainer, &comma_only(&split.test))?);
        }
    }
    let result = CellResult {
        subset: key.subset,
        proportion: key.proportion,
        fusion: key.fusion,
        replay: key.replay,
        seed: key.seed,
        epochs_run: trainer.epochs,
        n_train: split.train.len(),
        train_success,
        test_success,
        n_test: is_largest.then_some(split.test.len()),
        comma_within_train,
        comma_within_test,
    };
    Ok(CellRun {
        result,
        curve,
        trainer_online: trainer.online,
    })
}

/// Runs every cell of `spec`. Each finished cell is appended to
/// `results_path` (when given) and passed to `on_cell`, so partial results
/// survive an interrupted sweep. Cells are returned in [`ExperimentSpec::cells`]
/// order whatever the worker count.
pub fn run_experiment(
    spec: &ExperimentSpec,
    base: &TrainConfig,
    layout: &GridLayout,
    results_path: Option<&Path>,
    record_wall_time: bool,
    hooks: Hooks<'_>,
) -> Result<EvalReport, HarnessError> {
    spec.validate()?;
    let sink = Mutex::new(());
    let run_one = |key: CellKey| -> Result<CellResult, HarnessError> {
        let run = run_cell(spec, base, layout, key, record_wall_time, hooks.on_epoch)?;
        let _guard = sink.lock().expect("result sink poisoned");
        if let Some(path) = results_path {
            append_result(&run.result, path)?;
        }
        (hooks.on_cell)(&run)?;
        Ok(run.result)
    };
    let keys = spec.cells();
    let cells = if spec.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        pool.install(|| {
            keys.par_iter()
                .map(|&k| run_one(k))
                .collect::<Result<Vec<_>, _>>()
        })?
    } else {
        keys.iter()
            .map(|&k| run_one(k))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(EvalReport { cells })
}

pub fn append_result(result: &CellResult, path: &Path) -> Result<(), HarnessError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(
        f,
        "{}",
        serde_json::to_string(result).expect("result serializes")
    )?;
    Ok(())
}

/// Writes one JSON object per line, replacing any existing file.
pub fn persist_results(report: &EvalReport, path: &Path) -> Result<(), HarnessError> {
    let mut out = String::new();
    for c in &report.cells {
        out.push_str(&serde_json::to_string(c).expect("result serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_results(path: &Path) -> Result<EvalReport, HarnessError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut cells = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cell: CellResult =
            serde_json::from_str(&line).map_err(|e| HarnessError::SchemaMismatch {
                line: i + 1,
                message: e.to_string(),
            })?;
        cells.push(cell);
    }
    Ok(EvalReport { cells })
}

const COLUMNS: [(Fusion, ReplayMode, &str); 4] = [
    (Fusion::Concatenation, ReplayMode::Uniform, "DDQN + Cat"),
    (Fusion::GatedAttention, ReplayMode::Uniform, "DDQN + GA"),
    (
        Fusion::Concatenation,
        ReplayMode::Prioritized,
        "DDQN + Cat + PER",
    ),
    (
        Fusion::GatedAttention,
        ReplayMode::Prioritized,
        "DDQN + GA + PER",
    ),
];

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    /// Training success averaged over proportions and seeds, plus the
    /// comma-within average.
    pub fn train_summary(
        &self,
        subset: LanguageSubset,
        fusion: Fusion,
        replay: ReplayMode,
    ) -> (Option<f64>, Option<f64>) {
        let cells: Vec<_> = self
            .cells
            .iter()
            .filter(|c| c.subset == subset && c.fusion == fusion && c.replay == replay)
            .collect();
        let main: Vec<f64> = cells.iter().map(|c| c.train_success).collect();
        let within: Vec<f64> = cells.iter().filter_map(|c| c.comma_within_train).collect();
        (mean(&main), mean(&within))
    }

    /// Held-out success of the largest-proportion runs, averaged over seeds.
    pub fn test_summary(
        &self,
        subset: LanguageSubset,
        fusion: Fusion,
        replay: ReplayMode,
    ) -> (Option<f64>, Option<f64>) {
        let cells: Vec<_> = self
            .cells
            .iter()
            .filter(|c| c.subset == subset && c.fusion == fusion && c.replay == replay)
            .collect();
        let main: Vec<f64> = cells.iter().filter_map(|c| c.test_success).collect();
        let within: Vec<f64> = cells.iter().filter_map(|c| c.comma_within_test).collect();
        (mean(&main), mean(&within))
    }

    /// Plain-text tables: training success averaged over proportions, then
    /// held-out success of the largest-proportion runs. Parenthesized rows
    /// are comma-only instructions of the non-Comma subsets.
    pub fn summary_tables(&self) -> String {
        let mut out = String::new();
        let tables: [(
            &str,
            fn(&Self, LanguageSubset, Fusion, ReplayMode) -> (Option<f64>, Option<f64>),
        ); 2] = [
            (
                "Success rate on training instructions (mean over proportions)",
                Self::train_summary,
            ),
            (
                "Success rate on testing instructions (largest proportion)",
                Self::test_summary,
            ),
        ];
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}%", 100.0 * x));
        for (title, summarize) in tables {
            let _ = writeln!(out, "{title}");
            let _ = write!(out, "{:<18}", "Language Subset");
            for (_, _, name) in COLUMNS {
                let _ = write!(out, "{name:>18}");
            }
            out.push('\n');
            for subset in LanguageSubset::ALL {
                let rows: Vec<(Option<f64>, Option<f64>)> = COLUMNS
                    .iter()
                    .map(|&(f, r, _)| summarize(self, subset, f, r))
                    .collect();
                let _ = write!(out, "{:<18}", subset.title());
                for (main, _) in &rows {
                    let _ = write!(out, "{:>18}", fmt(*main));
                }
                out.push('\n');
                if subset != LanguageSubset::Comma {
                    let _ = write!(out, "{:<18}", "");
                    for (_, within) in &rows {
                        let _ = write!(out, "{:>18}", format!("({})", fmt(*within)));
                    }
                    out.push('\n');
                }
            }
            out.push('\n');
        }
        out
    }

    /// Number of result lines per `(subset, fusion, replay)` group.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for c in &self.cells {
            *m.entry(format!("{}/{}/{:?}", c.subset.name(), c.fusion, c.replay))
                .or_insert(0) += 1;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cell(p: f64, test: Option<f64>) -> CellResult {
        CellResult {
            subset: LanguageSubset::CommaButFirst,
            proportion: p,
            fusion: Fusion::Concatenation,
            replay: ReplayMode::Prioritized,
            seed: 3,
            epochs_run: 10,
            n_train: 4,
            train_success: 0.75,
            test_success: test,
            n_test: test.map(|_| 336),
            comma_within_train: Some(0.5),
            comma_within_test: test.map(|_| 0.25),
        }
    }

    #[test]
    fn cell_enumeration() {
        let spec = ExperimentSpec::default();
        assert_eq!(spec.cells().len(), 9);
        assert!((spec.max_proportion() - 0.9).abs() < 1e-12);
        let spec = ExperimentSpec {
            fusions: Fusion::ALL.to_vec(),
            seeds: vec![0, 1],
            ..Default::default()
        };
        assert_eq!(spec.cells().len(), 36);
        assert!(ExperimentSpec {
            proportions: vec![0.0],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ExperimentSpec {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        // 0.02 of the 21 short Comma instructions rounds to zero.
        let empty = ExperimentSpec {
            proportions: vec![0.02],
            ..Default::default()
        };
        assert!(matches!(
            empty.validate(),
            Err(HarnessError::InvalidSpec(_))
        ));
        assert!(ExperimentSpec {
            proportions: vec![0.03],
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn persistence_round_trip_and_union() {
        let dir = tempfile::tempdir().unwrap();
        let a = EvalReport {
            cells: vec![sample_cell(0.1, None), sample_cell(0.9, Some(0.125))],
        };
        let b = EvalReport {
            cells: vec![sample_cell(0.5, None)],
        };
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        persist_results(&a, &pa).unwrap();
        persist_results(&b, &pb).unwrap();
        assert_eq!(load_results(&pa).unwrap(), a);
        let joined = dir.path().join("ab.jsonl");
        let text = std::fs::read_to_string(&pa).unwrap() + &std::fs::read_to_string(&pb).unwrap();
        std::fs::write(&joined, text).unwrap();
        let mut union = a.cells.clone();
        union.extend(b.cells.clone());
        assert_eq!(load_results(&joined).unwrap().cells, union);
    }

    #[test]
    fn unknown_field_is_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let mut v = serde_json::to_value(sample_cell(0.2, None)).unwrap();
        v["extra"] = serde_json::json!(1);
        std::fs::write(&p, format!("{}\n", v)).unwrap();
        assert!(matches!(
            load_results(&p),
            Err(HarnessError::SchemaMismatch { line: 1, .. })
        ));
    }

    #[test]
    fn summary_averages_over_proportions() {
        let mut r = EvalReport {
            cells: vec![sample_cell(0.1, None), sample_cell(0.9, Some(0.125))],
        };
        r.cells[0].train_success = 0.25;
        let (main, within) = r.train_summary(
            LanguageSubset::CommaButFirst,
            Fusion::Concatenation,
            ReplayMode::Prioritized,
        );
        assert_eq!(main, Some(0.5));
        assert_eq!(within, Some(0.5));
        let text = r.summary_tables();
        assert!(text.contains("Comma-ButFirst"));
        assert!(text.contains("50.0%"));
        assert!(text.contains("(25.0%)"));
        assert!(text.contains("12.5%"));
    }
}
