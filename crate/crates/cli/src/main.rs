//! `shiftscan` command-line interface.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

mod data;
mod report;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use shiftscan::analysis::{
    coefficient_sign_flip_candidates, estimate_stratum_ratios, recalibrate_conditional, univariate_shift_scan,
    write_findings_table, write_intervals_table, SignFlipConfig, StratumRatios,
};
use shiftscan::checks::CheckDetails;
use shiftscan::models::{ModelKind, OutcomeModel};
use shiftscan::panel::{split_patients_stratified, DataSplit, IngestionSchema, PanelDataset, Sample, SplitFractions};
use shiftscan::rng;
use shiftscan::scan::scan_shift;
use shiftscan::shift_test::{
    fit_period_model, test_shift, test_shift_baseline, test_shift_baseline_with_model, test_shift_with_models, Scope,
    TaskKey, TaskResult, TaskStatus,
};
use shiftscan::subpop::SubpopModel;
use shiftscan::synth::{generate, ConditionalMode, ShiftKind, ShiftScenario, Subgroup};
use shiftscan::ScanConfig;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "shiftscan", version, about = "Detect temporal dataset shift in longitudinal panel data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assign patients to train, validation and test splits stratified by outcome.
    Split(SplitArgs),
    /// Fit per-period outcome models.
    Fit(FitArgs),
    /// Two-model shift test for one period.
    Test(TestArgs),
    /// One-model comparison of a period against its predecessor.
    TestBaseline(TestArgs),
    /// Test every consecutive period pair of every outcome with FDR control.
    Scan(ScanArgs),
    /// Generate a synthetic panel with a planted shift and its ground truth.
    Synth(SynthArgs),
    /// Univariate covariate-shift scan, coefficient sign flips and recalibration.
    Analyze(AnalyzeArgs),
    /// Export plot data: AUC series and loss-difference histograms.
    Report(ReportArgs),
}

/// Scan settings. Flags override values read from `--config`.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON file with scan settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    b_bootstrap: Option<usize>,
    #[arg(long)]
    b_permutation: Option<usize>,
    #[arg(long)]
    n_thr: Option<usize>,
    #[arg(long)]
    c_thr: Option<f64>,
    /// `logistic_regression` or `decision_tree`.
    #[arg(long)]
    model_kind: Option<String>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Panel file in line-oriented JSON.
    #[arg(long)]
    data: PathBuf,
    /// Split file; defaults to the `.splits.jsonl` sidecar of the data file.
    #[arg(long)]
    splits: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output split file; defaults to the sidecar of the data file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    train: f64,
    #[arg(long, default_value_t = 0.15)]
    validation: f64,
    #[arg(long, default_value_t = 0.15)]
    test: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Fit only this period.
    #[arg(long)]
    period: Option<i32>,
    /// Directory receiving `model-<period>.json`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    Population,
    Discovered,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Period under test.
    #[arg(long)]
    period: i32,
    /// Reference period; defaults to the period before `--period`.
    #[arg(long)]
    prev: Option<i32>,
    #[arg(long, value_enum, default_value = "population")]
    scope: ScopeArg,
    /// Saved model for the reference period.
    #[arg(long)]
    model_prev: Option<PathBuf>,
    /// Saved model for the period under test.
    #[arg(long)]
    model_curr: Option<PathBuf>,
    /// Result file.
    #[arg(long)]
    out: PathBuf,
    /// Write the permutation and bootstrap statistic vectors to this file.
    #[arg(long)]
    dump_replicates: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScanArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory of `<outcome>.jsonl` panel files.
    #[arg(long)]
    data_dir: PathBuf,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Optional tab-separated summary.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON scenario; flags override its fields.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// `none`, `label_shift`, `domain_shift` or `conditional_shift`.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    magnitude: Option<f64>,
    #[arg(long)]
    prevalence: Option<f64>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    samples_per_period: Option<usize>,
    #[arg(long)]
    periods: Option<usize>,
    #[arg(long)]
    first_period: Option<i32>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    informative: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    patient_effect: Option<f64>,
    /// `flip` or `amplify`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    label_noise: Option<f64>,
    /// Subgroup as `feature:frequency:strength`.
    #[arg(long)]
    subgroup: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Panel output; the split sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth output; defaults to `<out stem>.truth.json`.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Earlier period; defaults to the second-to-last period.
    #[arg(long)]
    prev: Option<i32>,
    /// Later period; defaults to the last period.
    #[arg(long)]
    curr: Option<i32>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON summary of every analysis.
    #[arg(long)]
    out: PathBuf,
    /// Tab-separated univariate findings.
    #[arg(long)]
    findings: Option<PathBuf>,
    /// Tab-separated coefficient intervals.
    #[arg(long)]
    intervals: Option<PathBuf>,
    /// JSON settings for the sign-flip feature selection.
    #[arg(long)]
    sign_flip_config: Option<PathBuf>,
    #[arg(long)]
    skip_sign_flip: bool,
    /// Estimate stratum ratios over these binary features.
    #[arg(long, value_delimiter = ',')]
    estimate_ratios: Option<Vec<String>>,
    /// Where estimated ratios are written.
    #[arg(long)]
    ratios_out: Option<PathBuf>,
    /// Stratum ratio file used to recalibrate the earlier model.
    #[arg(long)]
    ratios: Option<PathBuf>,
    /// Tab-separated recalibrated predictions on the later test split.
    #[arg(long)]
    recalibrated: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Per-period AUC of the previous and current models.
    #[arg(long)]
    auc_series: Option<PathBuf>,
    /// Loss-difference histogram with a fold-versus-fold control.
    #[arg(long)]
    loss_histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    bins: usize,
}

/// Invalid flags or flag combinations.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Split(a) => cmd_split(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Test(a) => cmd_test(a, false),
        Command::TestBaseline(a) => cmd_test(a, true),
        Command::Scan(a) => cmd_scan(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn resolve_config(a: &ConfigArgs) -> Result<ScanConfig> {
    let mut c = match &a.config {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(format!("--config: file {} does not exist", path.display())));
            }
            ScanConfig::load(path).with_context(|| format!("reading config file {}", path.display()))?
        }
        None => ScanConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => {$(if let Some(v) = a.$field { c.$field = v; })*};
    }
    apply!(seed, alpha, gamma, confidence, b_bootstrap, b_permutation, n_thr, c_thr);
    if let Some(kind) = &a.model_kind {
        c.model_kind = kind.parse::<ModelKind>().map_err(|e| usage(format!("--model-kind: {e}")))?;
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    if !a.data.is_file() {
        anyhow::bail!("data file {} does not exist", a.data.display());
    }
    let fractions = SplitFractions {
        train: a.train,
        validation: a.validation,
        test: a.test,
    };
    fractions.validate().map_err(|e| usage(e.to_string()))?;
    let ds = PanelDataset::load(&a.data, &IngestionSchema::default())
        .with_context(|| format!("reading data file {}", a.data.display()))?;
    let ds = split_patients_stratified(&ds, fractions, a.seed)?;
    let out = a.out.unwrap_or_else(|| data::splits_path(&a.data));
    let file = std::fs::File::create(&out).with_context(|| format!("writing {}", out.display()))?;
    ds.write_splits(file)?;
    for split in DataSplit::ALL {
        println!("{split}\t{}", ds.patients_in(split).len());
    }
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let config = resolve_config(&a.config)?;
    let ds = data::load_dataset(&a.data.data, a.data.splits.as_deref(), config.seed)?;
    let periods = match a.period {
        Some(p) if !ds.periods().contains(&p) => return Err(usage(format!("--period: no samples in period {p}"))),
        Some(p) => vec![p],
        None => ds.periods(),
    };
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let id = data::outcome_id(&a.data.data);
    for t in periods {
        let seed = rng::derive(config.seed, &format!("model:{id}:{t}"));
        let model = fit_period_model(&ds, t, &config, seed).with_context(|| format!("fitting period {t}"))?;
        let path = a.out_dir.join(format!("model-{t}.json"));
        model.save(&path).with_context(|| format!("writing {}", path.display()))?;
        println!("{t}\t{}\t{}", path.display(), model.validation_auc.map_or("".into(), |v| v.to_string()));
    }
    data::write_json(&a.out_dir.join("fit.meta.json"), &json!({ "data": a.data.data, "config": config }))
}

fn load_model(path: &Path, ds: &PanelDataset) -> Result<OutcomeModel> {
    if !path.is_file() {
        anyhow::bail!("model file {} does not exist", path.display());
    }
    let m = OutcomeModel::load(path).with_context(|| format!("reading model file {}", path.display()))?;
    m.check_vocabulary(&ds.vocabulary)
        .with_context(|| format!("model file {}", path.display()))?;
    Ok(m)
}

fn summary_line(r: &TaskResult) -> String {
    match &r.status {
        TaskStatus::Tested => format!(
            "{}\ttested\tp_value={}\tmetric_diff={}",
            r.key,
            r.p_value.map_or("".into(), |v| v.to_string()),
            r.metric_diff.map_or("".into(), |v| v.to_string())
        ),
        TaskStatus::GatedOut { gate, reason } => format!("{}\tgated_out\tgate={gate}\treason={reason}", r.key),
    }
}

fn replicates(r: &TaskResult) -> serde_json::Value {
    let mut intervals = Vec::new();
    for g in &r.gate_reports {
        if let CheckDetails::Comparison(c) = &g.details {
            for (name, ci) in [("interval", &c.interval), ("complement_interval", &c.complement_interval)] {
                if let Some(ci) = ci {
                    intervals.push(json!({ "gate": g.check.as_str(), "name": name, "replicates": ci.replicates }));
                }
            }
        }
    }
    json!({
        "task": r.key.to_string(),
        "permutation": r.permutation.as_ref().map(|p| &p.replicates),
        "bootstrap": intervals,
    })
}

fn cmd_test(a: TestArgs, baseline: bool) -> Result<()> {
    let config = resolve_config(&a.config)?;
    let ds = data::load_dataset(&a.data.data, a.data.splits.as_deref(), config.seed)?;
    let periods = ds.periods();
    if !periods.contains(&a.period) {
        return Err(usage(format!("--period: no samples in period {}", a.period)));
    }
    let prev = match a.prev {
        Some(p) if !periods.contains(&p) => return Err(usage(format!("--prev: no samples in period {p}"))),
        Some(p) => p,
        None => *periods
            .iter()
            .rfind(|&&p| p < a.period)
            .ok_or_else(|| usage(format!("--period: {} has no earlier period; pass --prev", a.period)))?,
    };
    let id = data::outcome_id(&a.data.data);
    let scope = match (baseline, a.scope) {
        (true, _) => Scope::Baseline,
        (false, ScopeArg::Population) => Scope::Population,
        (false, ScopeArg::Discovered) => Scope::DiscoveredSubpop,
    };
    let key = TaskKey::new(id, a.period, scope);
    let seed = key.seed(config.seed);
    let subpop = (scope == Scope::Population).then_some(SubpopModel::EntirePopulation);
    let f_prev = a.model_prev.as_deref().map(|p| load_model(p, &ds)).transpose()?;
    let f_curr = a.model_curr.as_deref().map(|p| load_model(p, &ds)).transpose()?;
    let result = match (baseline, f_prev, f_curr) {
        (true, Some(fp), _) => test_shift_baseline_with_model(&ds, key, prev, &fp, &config, seed),
        (true, None, _) => test_shift_baseline(&ds, key, prev, &config, seed),
        (false, Some(fp), Some(fc)) => test_shift_with_models(&ds, key, prev, &fp, &fc, subpop, &config, seed),
        (false, None, None) => test_shift(&ds, key, prev, subpop, &config, seed),
        (false, _, _) => return Err(usage("--model-prev and --model-curr must be given together")),
    };
    data::write_json(
        &a.out,
        &json!({ "data": a.data.data, "previous_period": prev, "config": config, "result": result }),
    )?;
    if let Some(path) = &a.dump_replicates {
        data::write_json(path, &replicates(&result))?;
    }
    println!("{}", summary_line(&result));
    Ok(())
}

fn cmd_scan(a: ScanArgs) -> Result<()> {
    let config = resolve_config(&a.config)?;
    if a.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let datasets = data::load_data_dir(&a.data_dir, config.seed)?;
    let report = scan_shift(&datasets, &config, a.workers)?;
    let mut text = report.to_json()?;
    text.push('\n');
    std::fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.table {
        let mut buf = Vec::new();
        report.write_table(&mut buf)?;
        std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
        data::write_meta(path, &json!({ "data_dir": a.data_dir, "config": config }))?;
    }
    let tested = report.results.iter().filter(|r| r.is_tested()).count();
    println!(
        "{} tasks, {tested} tested, {} selected",
        report.results.len(),
        report.selected.len()
    );
    for k in &report.selected {
        println!("selected\t{k}");
    }
    Ok(())
}

fn parse_subgroup(s: &str) -> Result<Subgroup> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || usage(format!("--subgroup: expected feature:frequency:strength, got {s}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok(Subgroup {
        feature: parts[0].parse().map_err(|_| bad())?,
        frequency: parts[1].parse().map_err(|_| bad())?,
        strength: parts[2].parse().map_err(|_| bad())?,
    })
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut s = match &a.scenario {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(format!("--scenario: file {} does not exist", path.display())));
            }
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing scenario file {}", path.display()))?
        }
        None => ShiftScenario::default(),
    };
    if let Some(k) = &a.kind {
        s.kind = k.parse::<ShiftKind>().map_err(|e| usage(format!("--kind: {e}")))?;
    }
    if let Some(m) = &a.mode {
        s.conditional_mode = match m.as_str() {
            "flip" => ConditionalMode::Flip,
            "amplify" => ConditionalMode::Amplify,
            other => return Err(usage(format!("--mode: unknown mode {other}"))),
        };
    }
    if let Some(g) = &a.subgroup {
        s.subgroup = Some(parse_subgroup(g)?);
    }
    macro_rules! apply {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { s.$field = v; })*};
    }
    apply!(magnitude => magnitude, prevalence => prevalence, patients => n_patients,
        samples_per_period => samples_per_period, periods => n_periods, first_period => first_period,
        features => n_features, informative => n_informative, latent_dim => latent_dim,
        patient_effect => patient_effect, label_noise => label_noise, seed => seed);

    let (ds, truth) = generate(&s).map_err(|e| usage(format!("scenario: {e}")))?;
    ds.store(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let splits = data::splits_path(&a.out);
    let file = std::fs::File::create(&splits).with_context(|| format!("writing {}", splits.display()))?;
    ds.write_splits(file)?;
    let truth_path = a.truth.unwrap_or_else(|| {
        let id = data::outcome_id(&a.out);
        a.out.with_file_name(format!("{id}.truth.json"))
    });
    truth.save(&truth_path).with_context(|| format!("writing {}", truth_path.display()))?;
    println!(
        "{} patients, {} samples, periods {:?}",
        ds.patient_count(),
        ds.sample_count(),
        ds.periods()
    );
    Ok(())
}

#[derive(Serialize)]
struct RecalibrationSummary {
    n_samples: usize,
    observed_rate: f64,
    mean_prediction_before: f64,
    mean_prediction_after: f64,
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(usage("--alpha must lie in (0, 1)"));
    }
    let ds = data::load_dataset(&a.data.data, a.data.splits.as_deref(), a.seed)?;
    let periods = ds.periods();
    let n = periods.len();
    let curr = a.curr.or_else(|| periods.last().copied());
    let prev = a.prev.or_else(|| (n >= 2).then(|| periods[n - 2]));
    let (Some(prev), Some(curr)) = (prev, curr) else {
        return Err(usage("the data holds fewer than two periods"));
    };
    for (flag, p) in [("--prev", prev), ("--curr", curr)] {
        if !periods.contains(&p) {
            return Err(usage(format!("{flag}: no samples in period {p}")));
        }
    }
    let prev_samples: Vec<&Sample> = ds.view_all(prev).samples().collect();
    let curr_samples: Vec<&Sample> = ds.view_all(curr).samples().collect();

    let findings = univariate_shift_scan(&prev_samples, &curr_samples, &ds.vocabulary, a.alpha, a.seed)?;
    if let Some(path) = &a.findings {
        let mut buf = Vec::new();
        write_findings_table(&findings, &mut buf)?;
        std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    }

    let sign_flip_config = match &a.sign_flip_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SignFlipConfig::default(),
    };
    let sign_flip = if a.skip_sign_flip {
        None
    } else {
        let report = coefficient_sign_flip_candidates(&prev_samples, &curr_samples, &ds.vocabulary, &sign_flip_config)?;
        if let Some(path) = &a.intervals {
            let mut buf = Vec::new();
            write_intervals_table(&report, &mut buf)?;
            std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
        }
        Some(report)
    };

    let estimated = match &a.estimate_ratios {
        Some(features) => {
            let r = estimate_stratum_ratios(&prev_samples, &curr_samples, features, &ds.vocabulary)?;
            if let Some(path) = &a.ratios_out {
                r.save(path).with_context(|| format!("writing {}", path.display()))?;
            }
            Some(r)
        }
        None => None,
    };

    let recalibration = match &a.ratios {
        Some(path) => {
            if !path.is_file() {
                anyhow::bail!("ratio file {} does not exist", path.display());
            }
            let ratios = StratumRatios::load(path, &ds.vocabulary)
                .with_context(|| format!("reading ratio file {}", path.display()))?;
            let config = ScanConfig {
                seed: a.seed,
                ..ScanConfig::default()
            };
            let f_prev = fit_period_model(&ds, prev, &config, rng::derive(a.seed, &format!("model:{prev}")))?;
            let test = ds.view(curr, &[DataSplit::Test]);
            let mut rows = Vec::new();
            for p in &test.patients {
                for s in p.samples {
                    let before = f_prev.predict_proba(s);
                    let after = recalibrate_conditional(&f_prev, &ratios, s, &ds.vocabulary);
                    rows.push((&ds.panels[p.patient].patient_id, s, before, after));
                }
            }
            if let Some(out) = &a.recalibrated {
                let mut buf = Vec::new();
                writeln!(buf, "patient_id\tperiod\tmonth\ty\tp_before\tp_after")?;
                for (id, s, before, after) in &rows {
                    writeln!(buf, "{id}\t{}\t{}\t{}\t{before}\t{after}", s.period, s.month, s.outcome)?;
                }
                std::fs::write(out, buf).with_context(|| format!("writing {}", out.display()))?;
            }
            let k = rows.len().max(1) as f64;
            Some(RecalibrationSummary {
                n_samples: rows.len(),
                observed_rate: rows.iter().map(|r| r.1.outcome as f64).sum::<f64>() / k,
                mean_prediction_before: rows.iter().map(|r| r.2).sum::<f64>() / k,
                mean_prediction_after: rows.iter().map(|r| r.3).sum::<f64>() / k,
            })
        }
        None => None,
    };

    let settings = json!({
        "data": a.data.data,
        "previous_period": prev,
        "current_period": curr,
        "alpha": a.alpha,
        "seed": a.seed,
        "sign_flip": sign_flip_config,
    });
    for path in [&a.findings, &a.intervals, &a.recalibrated].into_iter().flatten() {
        data::write_meta(path, &settings)?;
    }
    let accepted = findings.iter().filter(|f| f.bh_accepted).count();
    data::write_json(
        &a.out,
        &json!({
            "settings": settings,
            "univariate": findings,
            "sign_flip": sign_flip,
            "estimated_ratios": estimated,
            "recalibration": recalibration,
        }),
    )?;
    println!("{accepted} features with a frequency shift");
    if let Some(r) = &sign_flip {
        println!("{} coefficient sign-flip candidates", r.candidates.len());
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    if a.auc_series.is_none() && a.loss_histogram.is_none() {
        return Err(usage("report needs --auc-series or --loss-histogram"));
    }
    if a.bins == 0 {
        return Err(usage("--bins must be at least 1"));
    }
    let config = resolve_config(&a.config)?;
    let ds = data::load_dataset(&a.data.data, a.data.splits.as_deref(), config.seed)?;
    let meta = json!({ "data": a.data.data, "config": config, "bins": a.bins });
    if let Some(path) = &a.auc_series {
        let mut buf = Vec::new();
        report::write_auc_series(&ds, &config, &mut buf)?;
        std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
        data::write_meta(path, &meta)?;
    }
    if let Some(path) = &a.loss_histogram {
        let mut buf = Vec::new();
        report::write_loss_histogram(&ds, &config, a.bins, &mut buf)?;
        std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
        data::write_meta(path, &meta)?;
    }
    Ok(())
}
