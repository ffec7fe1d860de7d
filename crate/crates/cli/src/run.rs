//! Grid execution: instances, AMP / EM-AMP runs, state evolution and metrics.

use std::time::Instant;

use mixamp::amp::{amp_init, amp_step, empirical_metrics, AmpProblem, InitMode};
use mixamp::denoisers::McSettings;
use mixamp::em::{em_amp_run, EmConfig, EmRun};
use mixamp::se::{run_se, SeConfig, SeProblem, SignalMetrics};
use mixamp::seed::{self, stream};
use mixamp::{generate_instance, Channel, Instance};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{GridPoint, RunConfig};
use crate::labels::{estimate_labels, label_accuracy, true_labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Sweep,
    Heatmap,
    EmAmp,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Sweep => "sweep",
            Command::Heatmap => "heatmap",
            Command::EmAmp => "em-amp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Command::Sweep, Command::Heatmap, Command::EmAmp]
            .into_iter()
            .find(|c| c.name() == name)
    }

    fn default_iterations(self) -> usize {
        match self {
            Command::Sweep | Command::Heatmap => mixamp::amp::DEFAULT_ITERATIONS,
            Command::EmAmp => 5,
        }
    }
}

/// One long-format row: one signal at one iteration of one repeat.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub model: &'static str,
    pub prior: &'static str,
    pub denoiser: &'static str,
    pub delta: f64,
    pub sigma: f64,
    pub rho_or_eps: Option<f64>,
    pub alpha: Option<f64>,
    pub repeat: usize,
    pub iter: usize,
    pub signal: usize,
    pub corr_emp: Option<f64>,
    pub mse_emp: Option<f64>,
    pub corr_se: Option<f64>,
    pub mse_se: Option<f64>,
    pub status: &'static str,
    pub label_acc: Option<f64>,
}

/// One signal's intercept and metrics after outer iteration m.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmRow {
    pub model: &'static str,
    pub delta: f64,
    pub sigma: f64,
    pub rho_or_eps: Option<f64>,
    pub repeat: usize,
    /// "em" or "oracle" (intercepts frozen at the truth).
    pub run: &'static str,
    pub m: usize,
    pub signal: usize,
    pub b_hat: Option<f64>,
    pub b_true: f64,
    pub corr_emp: Option<f64>,
    pub mse_emp: Option<f64>,
    pub corr_with_intercept: Option<f64>,
    pub branch_count: Option<usize>,
    pub empty_branch: Option<bool>,
    pub flagged_rows: Option<usize>,
    pub status: &'static str,
}

/// Final-iteration summary of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatRow {
    pub model: &'static str,
    pub prior: &'static str,
    pub denoiser: &'static str,
    pub delta: f64,
    pub sigma: f64,
    pub rho_or_eps: Option<f64>,
    pub alpha: Option<f64>,
    pub iter: usize,
    pub repeats_ok: usize,
    /// Minimum over signals of the mean over repeats.
    pub corr_emp_min: Option<f64>,
    pub corr_se_min: Option<f64>,
    pub status: &'static str,
}

/// Per-task bookkeeping for the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRecord {
    pub grid: usize,
    pub repeat: usize,
    pub seed: u64,
    pub status: &'static str,
    pub error: Option<String>,
    pub flagged_rows: usize,
    pub ridged_steps: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeRecord {
    pub grid: usize,
    pub seed: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub results: Vec<ResultRow>,
    pub em_trace: Vec<EmRow>,
    pub heatmap: Vec<HeatRow>,
    pub tasks: Vec<TaskRecord>,
    pub state_evolution: Vec<SeRecord>,
}

impl Outcome {
    /// Repeats or state-evolution runs that failed numerically.
    pub fn numerical_failures(&self) -> usize {
        self.tasks.iter().filter(|t| t.error.is_some()).count()
            + self.state_evolution.iter().filter(|s| s.error.is_some()).count()
    }
}

/// Seed of repeat `repeat` at grid point `grid`.
pub fn task_seed(master: u64, grid: usize, repeat: usize) -> u64 {
    seed::derive(seed::derive(master, stream::TASK, grid as u64), stream::TASK, repeat as u64)
}

fn se_seed(master: u64, grid: usize) -> u64 {
    seed::derive(master, stream::STATE_EVOLUTION, grid as u64)
}

fn mc_settings(cfg: &RunConfig, seed: u64) -> McSettings {
    McSettings {
        samples: cfg.mc.samples,
        seed: seed::derive(seed, stream::CHANNEL_MC, 0),
    }
}

/// SE metrics for k = 0 … iterations, or the error message.
fn state_evolution(
    cfg: &RunConfig,
    point: &GridPoint,
    iterations: usize,
) -> (Option<Vec<SignalMetrics>>, SeRecord) {
    let seed = se_seed(cfg.seed, point.index);
    let mut record = SeRecord { grid: point.index, seed, error: None };
    if !cfg.state_evolution || point.is_degenerate() {
        return (None, record);
    }
    let problem = SeProblem {
        prior: point.prior.clone(),
        channel: point.channel.clone(),
        signal: point.signal.clone(),
        denoiser: point.denoiser.clone(),
        delta: point.delta,
        config: SeConfig {
            samples: cfg.se_samples(),
            seed,
            mc: mc_settings(cfg, seed),
        },
    };
    match run_se(&problem, iterations) {
        Ok(states) => (Some(states.into_iter().map(|s| s.metrics).collect()), record),
        Err(e) => {
            record.error = Some(e.to_string());
            (None, record)
        }
    }
}

struct Task<'a> {
    cfg: &'a RunConfig,
    point: &'a GridPoint,
    repeat: usize,
    seed: u64,
}

impl Task<'_> {
    fn record(&self) -> TaskRecord {
        TaskRecord {
            grid: self.point.index,
            repeat: self.repeat,
            seed: self.seed,
            status: "ok",
            error: None,
            flagged_rows: 0,
            ridged_steps: 0,
            wall_time_s: 0.0,
        }
    }

    fn row(&self, iter: usize, signal: usize) -> ResultRow {
        ResultRow {
            model: self.cfg.model_name(),
            prior: self.cfg.prior_name(),
            denoiser: self.cfg.denoiser_name(),
            delta: self.point.delta,
            sigma: self.point.sigma,
            rho_or_eps: self.point.rho_or_eps,
            alpha: self.point.alpha,
            repeat: self.repeat,
            iter,
            signal,
            corr_emp: None,
            mse_emp: None,
            corr_se: None,
            mse_se: None,
            status: "ok",
            label_acc: None,
        }
    }

    fn instance(&self, channel: &Channel) -> mixamp::Result<Instance> {
        generate_instance(channel, &self.point.prior, self.point.n, self.cfg.p, self.seed)
    }

    fn problem(&self) -> AmpProblem {
        let mut problem = AmpProblem::bayes(&self.point.prior, &self.point.channel);
        problem.signal = self.point.signal.clone();
        problem.denoiser = self.point.denoiser.clone();
        problem.mc = mc_settings(self.cfg, self.seed);
        problem
    }

    /// Rows for k = 0 … iterations from per-iteration empirical metrics; missing
    /// iterations (after a failure) are blank with status "diverged".
    fn rows(
        &self,
        iterations: usize,
        emp: &[(SignalMetrics, Option<f64>)],
        se: Option<&Vec<SignalMetrics>>,
    ) -> Vec<ResultRow> {
        let l = self.point.channel.signal_dim();
        let mut rows = Vec::with_capacity((iterations + 1) * l);
        for k in 0..=iterations {
            for s in 0..l {
                let mut row = self.row(k, s);
                if self.point.is_degenerate() {
                    row.status = "degenerate";
                    rows.push(row);
                    continue;
                }
                let pred = se.and_then(|v| v.get(k));
                row.corr_se = pred.map(|m| m.corr2[s]);
                row.mse_se = pred.map(|m| m.mse[s]);
                match emp.get(k) {
                    Some((m, acc)) => {
                        row.corr_emp = Some(m.corr2[s]);
                        row.mse_emp = Some(m.mse[s]);
                        row.label_acc = *acc;
                        row.status = if m.degenerate[s] {
                            "degenerate"
                        } else if self.cfg.state_evolution && pred.is_none() {
                            "se_failed"
                        } else {
                            "ok"
                        };
                    }
                    None => row.status = "diverged",
                }
                rows.push(row);
            }
        }
        rows
    }

    fn run_amp(&self, iterations: usize, se: Option<&Vec<SignalMetrics>>) -> (Vec<ResultRow>, TaskRecord) {
        let start = Instant::now();
        let mut record = self.record();
        let mut emp: Vec<(SignalMetrics, Option<f64>)> = Vec::new();
        if self.point.is_degenerate() {
            record.status = "degenerate";
        } else if let Err(e) = self.amp_iterations(iterations, &mut emp, &mut record) {
            record.status = "diverged";
            record.error = Some(e.to_string());
        }
        record.wall_time_s = start.elapsed().as_secs_f64();
        (self.rows(iterations, &emp, se), record)
    }

    fn amp_iterations(
        &self,
        iterations: usize,
        emp: &mut Vec<(SignalMetrics, Option<f64>)>,
        record: &mut TaskRecord,
    ) -> mixamp::Result<()> {
        let inst = self.instance(&self.point.channel)?;
        let problem = self.problem();
        let truth = true_labels(&inst);
        let l = inst.l();
        let accuracy = |bhat: &mixamp::Mat| {
            truth
                .as_ref()
                .map(|t| label_accuracy(&estimate_labels(&inst, bhat), t, l))
        };
        let mut state = amp_init(&inst, &self.point.prior, &InitMode::PriorRandom, self.seed)?;
        emp.push((empirical_metrics(&state.bhat, &inst.b), accuracy(&state.bhat)));
        for _ in 0..iterations {
            let (next, diag) = amp_step(&state, &inst.x, &inst.y, &problem)?;
            record.flagged_rows += diag.flagged_rows;
            record.ridged_steps += diag.ridged as usize;
            emp.push((empirical_metrics(&next.bhat, &inst.b), accuracy(&next.bhat)));
            state = next;
        }
        Ok(())
    }

    fn em_config(&self, iterations: usize, freeze: bool) -> EmConfig {
        EmConfig {
            m_max: self.cfg.outer_iterations,
            k_max: iterations,
            signal: self.point.signal.clone(),
            mc: mc_settings(self.cfg, self.seed),
            ez_samples: self.cfg.mc.ez_samples,
            warm_start: self.cfg.em.warm_start,
            freeze_intercepts: freeze,
            ..EmConfig::default()
        }
    }

    fn em_rows(&self, label: &'static str, b_true: &[f64], run: &mixamp::Result<EmRun>) -> Vec<EmRow> {
        let base = |m: usize, signal: usize| EmRow {
            model: self.cfg.model_name(),
            delta: self.point.delta,
            sigma: self.point.sigma,
            rho_or_eps: self.point.rho_or_eps,
            repeat: self.repeat,
            run: label,
            m,
            signal,
            b_hat: None,
            b_true: b_true[signal],
            corr_emp: None,
            mse_emp: None,
            corr_with_intercept: None,
            branch_count: None,
            empty_branch: None,
            flagged_rows: None,
            status: "diverged",
        };
        let mut rows = Vec::new();
        for m in 0..=self.cfg.outer_iterations {
            for s in 0..b_true.len() {
                let mut row = base(m, s);
                if let Ok(run) = run {
                    let rec = &run.trace[m];
                    row.b_hat = Some(rec.b[s]);
                    row.corr_emp = Some(rec.metrics.corr2[s]);
                    row.mse_emp = Some(rec.metrics.mse[s]);
                    row.corr_with_intercept = Some(rec.corr2_with_intercept[s]);
                    row.branch_count = Some(rec.counts[s]);
                    row.empty_branch = Some(rec.empty[s]);
                    row.flagged_rows = Some(rec.flagged_rows);
                    row.status = if rec.metrics.degenerate[s] { "degenerate" } else { "ok" };
                }
                rows.push(row);
            }
        }
        rows
    }

    fn run_em(
        &self,
        iterations: usize,
        se: Option<&Vec<SignalMetrics>>,
    ) -> (Vec<ResultRow>, Vec<EmRow>, TaskRecord) {
        let start = Instant::now();
        let mut record = self.record();
        let Channel::Mar { intercepts: b_true, .. } = &self.point.channel else {
            unreachable!("validated before running");
        };
        let l = b_true.len();
        let b0 = self.cfg.em.initial_intercepts.clone().unwrap_or_else(|| vec![0.0; l]);
        let inst = self.instance(&self.point.channel);
        let run = inst
            .as_ref()
            .map_err(|e| mixamp::AmpError::config(e.to_string()))
            .and_then(|inst| em_amp_run(inst, &self.point.prior, &b0, &self.em_config(iterations, false), self.seed));
        let mut em_rows = self.em_rows("em", b_true, &run);
        if self.cfg.em.oracle {
            let oracle = inst
                .as_ref()
                .map_err(|e| mixamp::AmpError::config(e.to_string()))
                .and_then(|inst| {
                    em_amp_run(inst, &self.point.prior, b_true, &self.em_config(iterations, true), self.seed)
                });
            if let Err(e) = &oracle {
                record.error.get_or_insert_with(|| format!("oracle run: {e}"));
            }
            em_rows.extend(self.em_rows("oracle", b_true, &oracle));
        }
        let emp: Vec<(SignalMetrics, Option<f64>)> = match &run {
            Ok(r) => std::iter::once(r.trace[0].metrics.clone())
                .chain(r.amp_history.iter().map(|h| h.metrics.clone()))
                .map(|m| (m, None))
                .collect(),
            Err(e) => {
                record.error = Some(e.to_string());
                Vec::new()
            }
        };
        if let Ok(r) = &run {
            record.flagged_rows = r.amp_history.iter().map(|h| h.diagnostics.flagged_rows).sum();
            record.ridged_steps = r.amp_history.iter().filter(|h| h.diagnostics.ridged).count();
        }
        if record.error.is_some() {
            record.status = "diverged";
        }
        record.wall_time_s = start.elapsed().as_secs_f64();
        let total = self.cfg.outer_iterations * iterations;
        (self.rows(total, &emp, se), em_rows, record)
    }
}

fn heatmap(cfg: &RunConfig, points: &[GridPoint], cells: &[Vec<&ResultRow>], iterations: usize) -> Vec<HeatRow> {
    points
        .iter()
        .zip(cells)
        .map(|(point, rows)| {
            let l = point.channel.signal_dim();
            let cell: Vec<&ResultRow> = rows.iter().copied().filter(|r| r.iter == iterations).collect();
            let repeats_ok = (0..cfg.repeats)
                .filter(|rep| cell.iter().any(|r| r.repeat == *rep && r.corr_emp.is_some()))
                .count();
            let mean_min = |pick: fn(&ResultRow) -> Option<f64>| {
                (0..l)
                    .map(|s| {
                        let v: Vec<f64> = cell.iter().filter(|r| r.signal == s).filter_map(|r| pick(r)).collect();
                        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                    })
                    .try_fold(f64::INFINITY, |acc, m| m.map(|m| acc.min(m)))
            };
            let status = if point.is_degenerate() {
                "degenerate"
            } else if repeats_ok == 0 {
                "diverged"
            } else if cell.iter().any(|r| r.status == "degenerate") {
                "degenerate"
            } else {
                "ok"
            };
            HeatRow {
                model: cfg.model_name(),
                prior: cfg.prior_name(),
                denoiser: cfg.denoiser_name(),
                delta: point.delta,
                sigma: point.sigma,
                rho_or_eps: point.rho_or_eps,
                alpha: point.alpha,
                iter: iterations,
                repeats_ok,
                corr_emp_min: if point.is_degenerate() { None } else { mean_min(|r| r.corr_emp) },
                corr_se_min: if point.is_degenerate() { None } else { mean_min(|r| r.corr_se) },
                status,
            }
        })
        .collect()
}

/// Runs every (grid point, repeat) task. Errors are configuration errors;
/// numerical failures are recorded in the outcome.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<Outcome, String> {
    let points = cfg.grid()?;
    match command {
        Command::EmAmp if !matches!(cfg.model, crate::config::ModelSpec::Mar { .. }) => {
            return Err("em-amp needs the mar model".into());
        }
        Command::Heatmap if !matches!(cfg.prior, crate::config::PriorSpec::Sparse { .. }) => {
            return Err("heatmap needs the sparse prior".into());
        }
        _ => {}
    }
    if let (Command::EmAmp, Some(b0)) = (command, &cfg.em.initial_intercepts) {
        if b0.len() != points[0].channel.signal_dim() || b0.iter().any(|v| !v.is_finite()) {
            return Err("initial_intercepts needs one finite value per signal".into());
        }
    }
    let iterations = cfg.iterations_or(command.default_iterations());
    let se_iterations = match command {
        Command::EmAmp => iterations * cfg.outer_iterations,
        _ => iterations,
    };
    let se: Vec<(Option<Vec<SignalMetrics>>, SeRecord)> =
        points.par_iter().map(|p| state_evolution(cfg, p, se_iterations)).collect();

    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|g| (0..cfg.repeats).map(move |r| (g, r)))
        .collect();
    let outputs: Vec<(Vec<ResultRow>, Vec<EmRow>, TaskRecord)> = jobs
        .par_iter()
        .map(|&(g, repeat)| {
            let task = Task {
                cfg,
                point: &points[g],
                repeat,
                seed: task_seed(cfg.seed, g, repeat),
            };
            let pred = se[g].0.as_ref();
            match command {
                Command::EmAmp => task.run_em(iterations, pred),
                _ => {
                    let (rows, record) = task.run_amp(iterations, pred);
                    (rows, Vec::new(), record)
                }
            }
        })
        .collect();

    let heat = (command == Command::Heatmap).then(|| {
        let mut cells: Vec<Vec<&ResultRow>> = vec![Vec::new(); points.len()];
        for ((g, _), (rows, _, _)) in jobs.iter().zip(&outputs) {
            cells[*g].extend(rows);
        }
        heatmap(cfg, &points, &cells, iterations)
    });
    let mut outcome = Outcome {
        state_evolution: se.into_iter().map(|(_, r)| r).collect(),
        heatmap: heat.unwrap_or_default(),
        ..Outcome::default()
    };
    for (rows, em_rows, record) in outputs {
        outcome.results.extend(rows);
        outcome.em_trace.extend(em_rows);
        outcome.tasks.push(record);
    }
    Ok(outcome)
}
