use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use odp_core::gradcheck::{run_all, CheckResult};
use odp_core::model::{count_params, save_checkpoint, select_trainable};
use odp_core::split::{compare, max_rel_diff};
use odp_core::trainer::{
    personalize, pretrained_base, synth_generate, EvalMetrics, SyntheticTaskSpec, TrialConfig, TrialSeeds,
};
use odp_core::{
    generate_schedule, CacheConfig, GroupName, MemoryReport, ModelConfig, RnntModel, ScheduleOptions, SplitPlan,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ensure_writable, LoadedRun, RunConfig};
use crate::error::{CliError, CliResult};

/// RFC 3339 wall-clock time for report headers.
pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Pretty JSON whose first field, `generated_at`, sits alone on line 2.
fn write_report<T: Serialize>(out: &mut dyn Write, report: &T) -> CliResult<()> {
    serde_json::to_writer_pretty(&mut *out, report)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

// ---------------------------------------------------------------- schedule

pub struct ScheduleRequest {
    pub cache: CacheConfig,
    pub total: usize,
    pub options: ScheduleOptions,
    pub out: Option<PathBuf>,
}

pub fn schedule(req: &ScheduleRequest, out: &mut dyn Write) -> CliResult<()> {
    req.cache.validate()?;
    let schedule = generate_schedule(req.total, &req.cache, req.options)?;
    match &req.out {
        Some(path) => {
            let mut w = create(path)?;
            schedule.write_csv(&mut w)?;
            w.flush()?;
        }
        None => schedule.write_csv(out)?,
    }
    Ok(())
}

// ------------------------------------------------------------ count-params

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamRow {
    pub group: String,
    pub params: usize,
    pub percent: f64,
}

/// The breakdown rows: decoder parts, cumulative encoder suffixes, total.
pub fn param_breakdown(cfg: &ModelConfig) -> CliResult<Vec<ParamRow>> {
    let total = count_params(cfg, GroupName::All)? as f64;
    GroupName::table_rows(cfg)
        .into_iter()
        .map(|g| row(cfg, g, total))
        .collect()
}

/// Parameters of each single encoder layer, first to last.
pub fn per_layer_params(cfg: &ModelConfig) -> CliResult<Vec<usize>> {
    let suffix = |from: usize| -> CliResult<usize> {
        if from == cfg.enc_layers {
            Ok(0)
        } else {
            Ok(count_params(cfg, GroupName::Encoder { from })?)
        }
    };
    (0..cfg.enc_layers).map(|l| Ok(suffix(l)? - suffix(l + 1)?)).collect()
}

fn row(cfg: &ModelConfig, group: GroupName, total: f64) -> CliResult<ParamRow> {
    let params = count_params(cfg, group)?;
    Ok(ParamRow {
        group: group.label(cfg),
        params,
        percent: 100.0 * params as f64 / total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

pub fn count(
    cfg: &ModelConfig,
    group: Option<&str>,
    per_layer: bool,
    format: Format,
    out: &mut dyn Write,
) -> CliResult<()> {
    cfg.validate()?;
    let rows = match group {
        Some(name) => {
            let g = GroupName::parse(name, cfg)?;
            vec![row(cfg, g, count_params(cfg, GroupName::All)? as f64)?]
        }
        None => param_breakdown(cfg)?,
    };
    let layers = if per_layer { per_layer_params(cfg)? } else { Vec::new() };
    match format {
        Format::Json => {
            #[derive(Serialize)]
            struct Doc<'a> {
                rows: &'a [ParamRow],
                #[serde(skip_serializing_if = "<[usize]>::is_empty")]
                per_layer: &'a [usize],
            }
            serde_json::to_writer_pretty(
                &mut *out,
                &Doc {
                    rows: &rows,
                    per_layer: &layers,
                },
            )?;
            writeln!(out)?;
        }
        Format::Csv => {
            writeln!(out, "group,params,percent")?;
            for r in &rows {
                writeln!(out, "{},{},{:.2}", r.group, r.params, r.percent)?;
            }
            for (l, n) in layers.iter().enumerate() {
                writeln!(out, "layer {l},{n},")?;
            }
        }
        Format::Table => {
            writeln!(
                out,
                "{:<14} {:>13} {:>9} {:>8}",
                "group", "params", "millions", "percent"
            )?;
            for r in &rows {
                writeln!(
                    out,
                    "{:<14} {:>13} {:>9.2} {:>8.1}",
                    r.group,
                    thousands(r.params),
                    r.params as f64 / 1e6,
                    r.percent
                )?;
            }
            if !layers.is_empty() {
                writeln!(out)?;
                writeln!(out, "{:<14} {:>13} {:>9}", "encoder layer", "params", "millions")?;
                for (l, n) in layers.iter().enumerate() {
                    writeln!(out, "{:<14} {:>13} {:>9.2}", l, thousands(*n), *n as f64 / 1e6)?;
                }
            }
        }
    }
    Ok(())
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut s = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            s.push(',');
        }
        s.push(c);
    }
    s
}

// ------------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Last epoch's mean loss, absent when starting from a checkpoint.
    pub pretrain_final_loss: Option<f64>,
    pub initial: EvalMetrics,
    #[serde(rename = "final")]
    pub final_eval: EvalMetrics,
    pub sessions: usize,
    pub optimizer_steps: usize,
    pub peak_bytes: usize,
    pub cache_hits: Option<usize>,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    generated_at: String,
    command: &'static str,
    config: &'a RunConfig,
    seeds: &'a [SeedSummary],
}

fn train_seed(run: &LoadedRun, trial: &TrialConfig, seed: u64, out_dir: &Path) -> CliResult<SeedSummary> {
    let (base, curve) = match &run.base {
        Some(m) => (m.clone(), Vec::new()),
        None => pretrained_base(trial, seed)?,
    };
    let (personalized, result) = personalize(trial, &base, seed)?;

    let dir = out_dir.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir)?;
    save_checkpoint(&base, &dir.join("base.ckpt"))?;
    save_checkpoint(&personalized, &dir.join("personalized.ckpt"))?;
    let mut jsonl = create(&dir.join("metrics.jsonl"))?;
    result.write_jsonl(&mut jsonl)?;
    jsonl.flush()?;
    let mut csv = create(&dir.join("metrics.csv"))?;
    result.write_csv(&mut csv)?;
    csv.flush()?;
    if !curve.is_empty() {
        let mut w = create(&dir.join("pretrain.csv"))?;
        writeln!(w, "epoch,mean_loss")?;
        for (i, loss) in curve.iter().enumerate() {
            writeln!(w, "{},{loss}", i + 1)?;
        }
        w.flush()?;
    }

    Ok(SeedSummary {
        seed,
        pretrain_final_loss: curve.last().copied(),
        initial: result.initial,
        final_eval: result.final_eval(),
        sessions: result.sessions.len(),
        optimizer_steps: result.optimizer_steps,
        peak_bytes: result.peak_bytes,
        cache_hits: result.cache_hits.as_ref().map(|h| h.values().sum()),
    })
}

pub fn train(config_path: &Path, out_override: Option<PathBuf>, jobs: usize, out: &mut dyn Write) -> CliResult<()> {
    let mut run = RunConfig::load(config_path)?;
    if let Some(dir) = out_override {
        run.config.output_dir = dir;
    }
    ensure_writable(&run.config.output_dir)?;
    let seeds = run.seeds()?;
    let trial = run.trial_config();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let out_dir = run.config.output_dir.clone();
    let summaries = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| train_seed(&run, &trial, s, &out_dir))
            .collect::<CliResult<Vec<_>>>()
    })?;

    let report = TrainReport {
        generated_at: timestamp(),
        command: "train",
        config: &run.config,
        seeds: &summaries,
    };
    let mut w = create(&out_dir.join("summary.json"))?;
    write_report(&mut w, &report)?;
    w.flush()?;

    for s in &summaries {
        writeln!(
            out,
            "seed {}: held-out loss {:.4} -> {:.4}, WER {:.4} -> {:.4} ({} sessions, {} steps)",
            s.seed,
            s.initial.heldout_loss,
            s.final_eval.heldout_loss,
            s.initial.heldout_wer,
            s.final_eval.heldout_wer,
            s.sessions,
            s.optimizer_steps
        )?;
    }
    writeln!(out, "wrote {}", out_dir.display())?;
    Ok(())
}

// ------------------------------------------------------------------- bench

pub struct BenchRequest {
    pub config: Option<PathBuf>,
    pub preset: String,
    pub group: String,
    pub boundary: Option<usize>,
    pub batch: usize,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub generated_at: String,
    pub command: &'static str,
    pub group: String,
    pub boundary: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub memory: MemoryReport,
    pub max_grad_rel_diff: f64,
    pub bit_exact: bool,
}

pub fn bench_report(req: &BenchRequest) -> CliResult<BenchReport> {
    let (model_cfg, group, boundary, batch, seed, base, shift) = match &req.config {
        Some(path) => {
            let run = RunConfig::load(path)?;
            let seed = match req.seed {
                Some(s) => s,
                None => run.seeds()?[0],
            };
            let boundary = req.boundary.or(run.config.split_boundary);
            let shift = run.config.shift.unwrap_or(TrialConfig::tiny().task.shift);
            (
                run.model,
                run.group,
                boundary,
                run.config.cache.batch_size,
                seed,
                run.base,
                shift,
            )
        }
        None => {
            let cfg = ModelConfig::preset(&req.preset)?;
            let group = GroupName::parse(&req.group, &cfg)?;
            let shift = TrialConfig::tiny().task.shift;
            (cfg, group, req.boundary, req.batch, req.seed.unwrap_or(0), None, shift)
        }
    };
    if batch == 0 {
        return Err(CliError::Config("batch size must be at least 1".into()));
    }
    let boundary = boundary.unwrap_or(model_cfg.enc_layers / 2);
    let model = match base {
        Some(m) => m,
        None => RnntModel::init(model_cfg.clone(), seed)?,
    };
    let spec = SyntheticTaskSpec::for_model(&model_cfg, TrialSeeds::from_seed(seed).personal_data, shift);
    let data = synth_generate(&spec, batch)?;
    let trainable = select_trainable(&model, group)?;
    let plan = SplitPlan::new(&model, boundary, &trainable.ids)?;
    let (combined, split, memory) = compare(&model, &data, &plan)?;
    let bit_exact = combined.loss.to_bits() == split.loss.to_bits()
        && combined.grads.len() == split.grads.len()
        && combined
            .grads
            .iter()
            .all(|(id, g)| split.grads.get(id).is_some_and(|h| g.bit_eq(h)));
    Ok(BenchReport {
        generated_at: timestamp(),
        command: "bench",
        group: group.to_string(),
        boundary,
        batch_size: batch,
        seed,
        memory,
        max_grad_rel_diff: max_rel_diff(&combined.grads, &split.grads),
        bit_exact,
    })
}

pub fn bench(req: &BenchRequest, out_file: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let report = bench_report(req)?;
    match out_file {
        Some(path) => {
            let mut w = create(path)?;
            write_report(&mut w, &report)?;
            w.flush()?;
        }
        None => write_report(out, &report)?,
    }
    Ok(())
}

// --------------------------------------------------------------- gradcheck

/// Runs the suite and prints one line per check plus a verdict line.
/// Returns the individual results.
pub fn gradcheck(
    op_instances: usize,
    rnnt_instances: usize,
    seed: u64,
    out: &mut dyn Write,
) -> CliResult<Vec<CheckResult>> {
    let results = run_all(op_instances, rnnt_instances, seed)?;
    for r in &results {
        writeln!(
            out,
            "{:<4} {:<42} n={:<6} max_rel_err={:.3e} tol={:.0e}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.instances,
            r.max_rel_err,
            r.tolerance
        )?;
    }
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let passed = results.iter().all(|r| r.passed);
    writeln!(
        out,
        "{} max rel err {:.3e}",
        if passed { "PASS" } else { "FAIL" },
        worst
    )?;
    if passed {
        Ok(results)
    } else {
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err(CliError::Runtime(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}
