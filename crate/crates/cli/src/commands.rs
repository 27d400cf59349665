use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use filterprior::gmm::{em_fit, nll_total, EmConfig};
use filterprior::nn::{log_to_csv, train, TrainStatus};
use filterprior::stats::{cluster_moments, kmeans_fit, render_report};
use filterprior::tensorio::{
    extract_filters_where, read_fbank, read_gmm, read_tarc, slice_count, write_fbank, write_gmm, write_tarc,
    FilterMeta, FILTER_DIM,
};
use filterprior::FilterBank;
use glob::Pattern;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, EXIT_EMPTY};
use crate::gradcheck::gradcheck;
use crate::manifest::{manifest_for_file, output_root, RunManifest};
use crate::report::{collect_runs, comparison_csv, gap_csv, gap_svg};

#[derive(Debug, Parser)]
#[command(name = "filterprior", version, about = "Statistics of 3x3 convolution filters and a mixture prior over them")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect every 3x3 slice of one or more tensor archives into a filter bank.
    Extract(ExtractArgs),
    /// Cluster a filter bank with k-means and write per-cluster statistics.
    Analyze(AnalyzeArgs),
    /// Fit a diagonal Gaussian mixture to a filter bank by EM.
    Fit(FitArgs),
    /// Total and mean negative log-likelihood of a bank under a mixture.
    Score(ScoreArgs),
    /// Check mixture gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a network from a TOML run configuration.
    Train(TrainArgs),
    /// Aggregate training logs into train/test gap curves.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Tensor archive; repeat to pool several models into one bank.
    #[arg(long, required = true)]
    pub tarc: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep only tensors whose name matches one of these globs.
    #[arg(long)]
    pub include: Vec<String>,
    /// Drop tensors whose name matches one of these globs.
    #[arg(long)]
    pub exclude: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Filter bank; repeat to cluster several banks jointly.
    #[arg(long, required = true)]
    pub bank: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Relative log-likelihood change that counts as converged.
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub kmeans_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub variance_floor: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest allowed relative error against finite differences.
    #[arg(long, default_value_t = 1e-6)]
    pub fd_tol: f64,
    /// Largest allowed absolute approximate-vs-exact difference on dominated probes.
    #[arg(long, default_value_t = 1e-9)]
    pub approx_tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory, or a directory of run directories; repeatable.
    #[arg(long, required = true)]
    pub logs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Extract(a) => extract(a, out),
        Command::Analyze(a) => analyze(a, out),
        Command::Fit(a) => fit(a, out),
        Command::Score(a) => score(a, out),
        Command::Gradcheck(a) => grad_check(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Report(a) => report(a, out),
    }
}

fn compile(patterns: &[String]) -> CliResult<Vec<Pattern>> {
    patterns
        .iter()
        .map(|p| Pattern::new(p).map_err(|e| CliError::input(format!("bad glob {p:?}: {e}"))))
        .collect()
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn load_banks(paths: &[PathBuf]) -> CliResult<FilterBank> {
    let banks = paths.iter().map(read_fbank).collect::<filterprior::Result<Vec<_>>>()?;
    Ok(FilterBank::concat(&banks)?)
}

pub fn extract(a: ExtractArgs, out: &mut dyn Write) -> CliResult<()> {
    let dest = a.out.unwrap_or_else(|| output_root().join("bank.fbank"));
    let (include, exclude) = (compile(&a.include)?, compile(&a.exclude)?);
    let params = json!({ "include": a.include, "exclude": a.exclude });
    RunManifest::new("extract", &a.tarc, &dest, None, params)?.write(&manifest_for_file(&dest))?;

    let keep = |name: &str| {
        (include.is_empty() || include.iter().any(|p| p.matches(name))) && !exclude.iter().any(|p| p.matches(name))
    };
    let pooled = a.tarc.len() > 1;
    let mut banks = Vec::new();
    let mut expected = 0;
    for path in &a.tarc {
        let archive = read_tarc(path)?;
        expected += archive.entries.iter().filter(|e| keep(&e.name)).map(|e| slice_count(&e.shape)).sum::<usize>();
        let bank = match extract_filters_where(&archive, |n| keep(n)) {
            Ok(b) => b,
            Err(filterprior::Error::EmptyBank) if pooled => continue,
            Err(e) => return Err(e.into()),
        };
        if pooled {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let meta = bank
                .meta()
                .iter()
                .map(|m| FilterMeta { name: format!("{stem}/{}", m.name), ..m.clone() })
                .collect();
            banks.push(FilterBank::new(bank.dim(), bank.vectors().to_vec(), meta)?);
        } else {
            banks.push(bank);
        }
    }
    let bank = FilterBank::concat(&banks)?;
    if bank.is_empty() {
        return Err(CliError { code: EXIT_EMPTY, message: "no 3x3 slices selected".into() });
    }
    if bank.len() != expected {
        return Err(CliError::invariant(format!("extracted {} filters, shape table says {expected}", bank.len())));
    }
    writeln!(out, "extracted {} filters", bank.len())?;
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for m in bank.meta() {
        match counts.last_mut() {
            Some((n, c)) if *n == m.name => *c += 1,
            _ => counts.push((&m.name, 1)),
        }
    }
    for (name, c) in counts {
        writeln!(out, "  {name}: {c}")?;
    }
    write_fbank(&bank, &dest)?;
    Ok(())
}

pub fn analyze(a: AnalyzeArgs, out: &mut dyn Write) -> CliResult<()> {
    let dir = a.out.unwrap_or_else(|| output_root().join("analyze"));
    let params = json!({ "k": a.k, "max_iters": a.max_iters });
    RunManifest::new("analyze", &a.bank, &dir, Some(a.seed), params)?.write(&dir.join("manifest.json"))?;
    let bank = load_banks(&a.bank)?;
    if bank.dim() != FILTER_DIM {
        return Err(CliError::input(format!("analysis needs 3x3 filters, bank has dimension {}", bank.dim())));
    }
    if a.k == 0 || bank.len() < a.k {
        return Err(CliError::size(format!("cannot form {} clusters from {} filters", a.k, bank.len())));
    }
    let model = kmeans_fit(&bank, a.k, a.seed, a.max_iters)?;
    let report = cluster_moments(&bank, &model.assignments, a.k)?;
    let files = render_report(&report, &dir)?;
    writeln!(out, "clustered {} filters into {} clusters ({} iterations)", bank.len(), a.k, model.iterations)?;
    writeln!(out, "distortion {:.10e}", model.distortion)?;
    let hist: Vec<String> = report.histogram.iter().map(|h| h.to_string()).collect();
    writeln!(out, "histogram {}", hist.join(","))?;
    if !report.empty.is_empty() {
        writeln!(out, "empty clusters {:?}", report.empty)?;
    }
    writeln!(out, "wrote {} files to {}", files.len(), dir.display())?;
    Ok(())
}

pub fn fit(a: FitArgs, out: &mut dyn Write) -> CliResult<()> {
    let dest = a.out.clone().unwrap_or_else(|| output_root().join("model.gmm"));
    let cfg = EmConfig {
        k: a.k,
        max_iters: a.max_iters,
        rel_tol: a.tol,
        seed: a.seed,
        variance_floor: a.variance_floor,
        kmeans_iters: a.kmeans_iters,
    };
    let params = json!({
        "k": a.k, "max_iters": a.max_iters, "tol": a.tol,
        "kmeans_iters": a.kmeans_iters, "variance_floor": a.variance_floor,
    });
    RunManifest::new("fit", std::slice::from_ref(&a.bank), &dest, Some(a.seed), params)?.write(&manifest_for_file(&dest))?;
    let bank = read_fbank(&a.bank)?;
    if a.k == 0 || bank.len() < a.k {
        return Err(CliError::size(format!("cannot fit {} components to {} filters", a.k, bank.len())));
    }
    let result = em_fit(&bank, &cfg)?;
    for (i, it) in result.trace.iter().enumerate() {
        let mark = if it.after_reseed { " reseeded" } else { "" };
        writeln!(out, "iter {:>4} log_likelihood {:.12e}{mark}", i + 1, it.log_likelihood)?;
    }
    if let Some(i) = result.monotonicity_violation() {
        return Err(CliError::invariant(format!("log-likelihood decreased at iteration {}", i + 1)));
    }
    writeln!(
        out,
        "{} after {} iterations, {} re-seeds",
        if result.converged { "converged" } else { "stopped" },
        result.trace.len(),
        result.reseeds
    )?;
    write_gmm(&result.model, &dest)?;
    writeln!(out, "wrote {}", dest.display())?;
    Ok(())
}

pub fn score(a: ScoreArgs, out: &mut dyn Write) -> CliResult<()> {
    let dir = a.out.unwrap_or_else(|| output_root().join("score"));
    RunManifest::new("score", &[a.bank.clone(), a.model.clone()], &dir, None, json!({}))?.write(&dir.join("manifest.json"))?;
    let bank = read_fbank(&a.bank)?;
    let model = read_gmm(&a.model)?;
    if bank.is_empty() {
        return Err(CliError { code: EXIT_EMPTY, message: "bank is empty".into() });
    }
    let total = nll_total(&bank, &model)?;
    let mean = total / bank.len() as f64;
    writeln!(out, "filters {}", bank.len())?;
    writeln!(out, "total_nll {total:.12e}")?;
    writeln!(out, "mean_nll {mean:.12e}")?;
    let mut text = serde_json::to_string_pretty(&json!({ "filters": bank.len(), "total_nll": total, "mean_nll": mean }))?;
    text.push('\n');
    write_text(&dir.join("score.json"), &text)
}

pub fn grad_check(a: GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let dir = a.out.unwrap_or_else(|| output_root().join("gradcheck"));
    let params = json!({ "probes": a.probes, "step": a.step, "fd_tol": a.fd_tol, "approx_tol": a.approx_tol });
    RunManifest::new("gradcheck", std::slice::from_ref(&a.model), &dir, Some(a.seed), params)?
        .write(&dir.join("manifest.json"))?;
    let model = read_gmm(&a.model)?;
    if a.probes == 0 {
        return Err(CliError::input("at least one probe is required"));
    }
    let r = gradcheck(&model, a.probes, a.seed, a.step)?;
    writeln!(out, "probes {} (K={}, d={})", r.probes, model.k(), model.dim())?;
    writeln!(out, "exact vs finite differences: worst relative error {:.3e} (probe {})", r.worst_fd.error, r.worst_fd.index)?;
    match &r.worst_dominant {
        Some(p) => writeln!(out, "approx vs exact on {} dominated probes: worst abs diff {:.3e} (probe {})", r.dominant, p.error, p.index)?,
        None => writeln!(out, "approx vs exact: no dominated probes")?,
    }
    if model.k() == 1 {
        writeln!(out, "single component: gradients identical on all probes: {}", r.identical_everywhere)?;
    }
    let pass = r.passes(a.fd_tol, a.approx_tol, model.k());
    let mut text = serde_json::to_string_pretty(&json!({
        "probes": r.probes,
        "worst_fd_error": r.worst_fd.error,
        "worst_fd_probe": r.worst_fd.point,
        "dominated_probes": r.dominant,
        "worst_dominated_diff": r.worst_dominant.as_ref().map(|p| p.error),
        "identical_everywhere": r.identical_everywhere,
        "pass": pass,
    }))?;
    text.push('\n');
    write_text(&dir.join("gradcheck.json"), &text)?;
    if !pass {
        let worst = if r.worst_fd.error > a.fd_tol { &r.worst_fd } else { r.worst_dominant.as_ref().unwrap_or(&r.worst_fd) };
        return Err(CliError::invariant(format!(
            "gradient check failed; worst probe {} at {:?} (error {:.3e})",
            worst.index, worst.point, worst.error
        )));
    }
    writeln!(out, "PASS")?;
    Ok(())
}

pub fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let dir = a.out.unwrap_or_else(|| output_root().join("train"));
    let text = fs::read_to_string(&a.config).map_err(|e| CliError::input(format!("{}: {e}", a.config.display())))?;
    let cfg = RunConfig::parse(&text)?;
    let base = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut inputs = vec![a.config.clone()];
    inputs.extend(cfg.input_paths(&base));
    RunManifest::new("train", &inputs, &dir, Some(cfg.seed), serde_json::to_value(&cfg)?)?.write(&dir.join("manifest.json"))?;
    write_text(&dir.join("config.toml"), &text)?;

    let (train_set, test_set) = cfg.load_data(&base)?;
    let net = cfg.build_network(&train_set, &base)?;
    let prior = cfg.gmm.as_ref().map(|p| read_gmm(base.join(p))).transpose()?;
    writeln!(
        out,
        "training {} parameters on {} examples ({} test) for {} iterations",
        net.num_params(),
        train_set.len(),
        test_set.len(),
        cfg.iterations
    )?;
    let outcome = train(net, &train_set, &test_set, &cfg.train_config(), prior.as_ref())?;
    write_text(&dir.join("log.csv"), &log_to_csv(&outcome.log))?;
    if !outcome.snapshots.is_empty() {
        fs::create_dir_all(dir.join("snapshots"))?;
    }
    for (it, archive) in &outcome.snapshots {
        write_tarc(archive, dir.join("snapshots").join(format!("iter_{it:06}.tarc")))?;
    }
    write_tarc(&outcome.net.to_archive(), dir.join("final.tarc"))?;
    for r in &outcome.log {
        writeln!(
            out,
            "iter {:>6} train_loss {:.6} test_loss {:.6} gap {:.6} test_acc {:.4}",
            r.iteration,
            r.train_loss,
            r.test_loss,
            r.test_loss - r.train_loss,
            r.test_acc
        )?;
    }
    if let TrainStatus::Diverged { iteration, reason } = outcome.status {
        return Err(CliError::invariant(format!("training diverged at iteration {iteration}: {reason}")));
    }
    Ok(())
}

pub fn report(a: ReportArgs, out: &mut dyn Write) -> CliResult<()> {
    let dir = a.out.unwrap_or_else(|| output_root().join("report"));
    let runs = collect_runs(&a.logs)?;
    if runs.is_empty() {
        return Err(CliError { code: EXIT_EMPTY, message: "no run directories with log.csv found".into() });
    }
    let inputs: Vec<PathBuf> = runs.iter().map(|r| r.dir.join("log.csv")).collect();
    let names: Vec<&str> = runs.iter().map(|r| r.name.as_str()).collect();
    RunManifest::new("report", &inputs, &dir, None, json!({ "runs": names }))?.write(&dir.join("manifest.json"))?;
    for r in &runs {
        write_text(&dir.join(format!("gap_{}.csv", r.name)), &gap_csv(r))?;
    }
    let table = comparison_csv(&runs);
    write_text(&dir.join("comparison.csv"), &table)?;
    write_text(&dir.join("gap.svg"), &gap_svg(&runs))?;
    for r in &runs {
        let last = r.rows.last();
        writeln!(
            out,
            "{:<24} lambda {:<10} final gap {}",
            r.name,
            r.lambda.map(|l| l.to_string()).unwrap_or_else(|| "?".into()),
            last.map(|x| format!("{:.6}", x.gap())).unwrap_or_else(|| "-".into())
        )?;
    }
    writeln!(out, "wrote {} gap curves, comparison.csv and gap.svg to {}", runs.len(), dir.display())?;
    Ok(())
}
