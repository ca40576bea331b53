//! Command-line front end: triplet scans, synthetic-data generation,
//! size/power and ROC studies, correlation-graph metrics, and BLUP
//! effect summaries.
//!
//! Exit codes: 0 success, 2 invalid input (bad flags, bad files,
//! failed validation), 1 internal/numerical failure.

// Validation guards are written `!(x > 0.0)` on purpose: unlike
// `x <= 0.0`, the negated form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use clap::{Args, Parser, Subcommand, ValueEnum};
use kmdhoi::dataio::{load_dataset, write_dataset, MultiViewDataset, UnitGroup};
use kmdhoi::kernels::build_kernel_set;
use kmdhoi::mixed_model::{blup_effects, fit_reml, ReMLOptions};
use kmdhoi::netmetrics::{correlation_graph, global_efficiency, metrics_tsv};
use kmdhoi::scan::{scan_dataset, scan_records_jsonl, scan_records_tsv, summary_text};
use kmdhoi::simgen::{
    dataset_from_replicate, gen_replicate, power_study, roc_study, RocVariant, SimConfig,
    SimMethod,
};
use kmdhoi::{Error, Result};
use nalgebra::DMatrix;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "kmdhoi",
    version,
    about = "Kernel-machine detection of higher-order interactions across three data views"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    global: GlobalOpts,
}

#[derive(Args)]
struct GlobalOpts {
    /// Base seed for anything stochastic.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Comma-separated method list (overall,hoi,ppcar,fpcar,skat,uniform).
    /// Defaults per subcommand: scan baselines ppcar,fpcar,skat; power
    /// overall,hoi,ppcar,fpcar,skat; roc hoi,skat,fpcar,uniform.
    #[arg(long, global = true)]
    methods: Option<String>,
    /// ReML convergence tolerance on the restricted log-likelihood.
    #[arg(long, global = true, default_value_t = 1e-5)]
    reml_tol: f64,
    /// Maximum Fisher-scoring iterations per start.
    #[arg(long, global = true, default_value_t = 50)]
    reml_max_iter: usize,
    /// Write the main result here instead of stdout (for `simulate`
    /// and `netmetrics`: an output directory).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Record-stream format for `test`.
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Tsv)]
    format: OutFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Tsv,
    Jsonl,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RocVariantArg {
    /// Third effect random: a3 ~ U[0,1] for positives, 0 for negatives.
    A,
    /// Second and third effects drawn jointly by the same rule.
    B,
}

#[derive(Args)]
struct SimFlags {
    /// Subjects per replicate.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Residual noise scale sigma.
    #[arg(long, default_value_t = 0.01)]
    sigma_noise: f64,
    /// Gaussian jitter on the circle coordinates of the second view.
    #[arg(long, default_value_t = 0.05)]
    noise_topo: f64,
    /// Use the literal subject index i in the third-view signal
    /// numerator instead of 1.
    #[arg(long)]
    hc_literal_index: bool,
    /// Evaluate the third-view signal on raw one-hot entries instead
    /// of per-category weights.
    #[arg(long)]
    hc_onehot_literal: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Scan every testing-unit triplet of a dataset: variance
    /// components, overall and interaction tests, baselines,
    /// multiplicity-adjusted p-values, and a significance summary.
    Test {
        /// Dataset manifest (key = value file naming the TSV inputs).
        manifest: PathBuf,
    },
    /// Generate one synthetic three-view dataset and write it as a
    /// manifest + TSV files (directory from --output, default simdata/).
    Simulate {
        #[command(flatten)]
        sim: SimFlags,
        /// Effect sizes a1,a2,a3 for main, pairwise, and triple terms.
        #[arg(long, default_value = "0,0,0")]
        alphas: String,
    },
    /// Rejection rates at the 0.05 level over replicated synthetic
    /// datasets; one row per --alphas setting.
    Power {
        #[command(flatten)]
        sim: SimFlags,
        /// Repeatable effect-size setting a1,a2,a3.
        #[arg(long, action = clap::ArgAction::Append)]
        alphas: Vec<String>,
        /// Replicates per setting.
        #[arg(long, default_value_t = 500)]
        reps: usize,
    },
    /// ROC curves from runs with randomized positive/negative labels;
    /// curve points go to --output, the AUC table to stdout.
    Roc {
        #[command(flatten)]
        sim: SimFlags,
        /// Number of labelled runs.
        #[arg(long, default_value_t = 150)]
        runs: usize,
        #[arg(long, value_enum, default_value_t = RocVariantArg::A)]
        variant: RocVariantArg,
    },
    /// Per-group correlation-graph metrics (transitivity, degree,
    /// nodal efficiency) from a per-subject summary TSV.
    Netmetrics {
        /// TSV: subject ID column, one numeric column per node, and a
        /// group label column.
        summaries: PathBuf,
        /// Edge rule: Pearson correlation strictly above this.
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        /// Name of the group label column.
        #[arg(long)]
        group_column: String,
    },
    /// Quartile table of the fitted triple-interaction effects, split
    /// by binary outcome x binary risk flag into four regimes.
    Effects {
        manifest: PathBuf,
        /// Triplet as unit1,unit2,unit3 (defaults to the catalog's
        /// only triplet).
        #[arg(long)]
        triplet: Option<String>,
        /// Binary covariate column defining the risk split.
        #[arg(long)]
        risk_column: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.global.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
            .ok();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn reml_options(g: &GlobalOpts) -> Result<ReMLOptions> {
    if !(g.reml_tol > 0.0) {
        return Err(Error::Invalid(format!("--reml-tol must be > 0, got {}", g.reml_tol)));
    }
    if g.reml_max_iter == 0 {
        return Err(Error::Invalid("--reml-max-iter must be >= 1".into()));
    }
    Ok(ReMLOptions { tol: g.reml_tol, max_iter: g.reml_max_iter, ..Default::default() })
}

fn parse_alphas(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Invalid(format!("--alphas needs a1,a2,a3, got '{s}'")));
    }
    let mut v = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        v[i] = p
            .parse()
            .map_err(|_| Error::Invalid(format!("bad effect size '{p}' in --alphas '{s}'")))?;
    }
    Ok((v[0], v[1], v[2]))
}

fn parse_methods(spec: &Option<String>, default: &[SimMethod]) -> Result<Vec<SimMethod>> {
    match spec {
        None => Ok(default.to_vec()),
        Some(s) => {
            let mut out = Vec::new();
            for part in s.split(',') {
                let m = SimMethod::parse(part)?;
                if !out.contains(&m) {
                    out.push(m);
                }
            }
            if out.is_empty() {
                return Err(Error::Invalid("--methods is empty".into()));
            }
            Ok(out)
        }
    }
}

fn sim_config(sim: &SimFlags, g: &GlobalOpts, replicates: usize) -> Result<SimConfig> {
    Ok(SimConfig {
        n: sim.n,
        alphas: (0.0, 0.0, 0.0),
        sigma_noise: sim.sigma_noise,
        replicates,
        seed: g.seed,
        noise_topo: sim.noise_topo,
        hc_literal_index: sim.hc_literal_index,
        hc_onehot_literal: sim.hc_onehot_literal,
        reml: reml_options(g)?,
    })
}

/// Write to --output or stdout.
fn emit(output: &Option<PathBuf>, content: &str) -> Result<()> {
    match output {
        Some(path) => {
            std::fs::write(path, content)?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.cmd {
        Cmd::Test { manifest } => cmd_test(manifest, g),
        Cmd::Simulate { sim, alphas } => cmd_simulate(sim, alphas, g),
        Cmd::Power { sim, alphas, reps } => cmd_power(sim, alphas, *reps, g),
        Cmd::Roc { sim, runs, variant } => cmd_roc(sim, *runs, *variant, g),
        Cmd::Netmetrics { summaries, threshold, group_column } => {
            cmd_netmetrics(summaries, *threshold, group_column, g)
        }
        Cmd::Effects { manifest, triplet, risk_column } => {
            cmd_effects(manifest, triplet.as_deref(), risk_column, g)
        }
    }
}

fn cmd_test(manifest: &Path, g: &GlobalOpts) -> Result<()> {
    let ds = load_dataset(manifest)?;
    let methods = parse_methods(
        &g.methods,
        &[SimMethod::Ppcar, SimMethod::Fpcar, SimMethod::Skat],
    )?;
    let opts = reml_options(g)?;
    let records = scan_dataset(&ds, &methods, &opts)?;
    let body = match g.format {
        OutFormat::Tsv => scan_records_tsv(&records, &methods),
        OutFormat::Jsonl => scan_records_jsonl(&records)?,
    };
    emit(&g.output, &body)?;
    print!("{}", summary_text(&records));
    Ok(())
}

fn cmd_simulate(sim: &SimFlags, alphas: &str, g: &GlobalOpts) -> Result<()> {
    let alphas = parse_alphas(alphas)?;
    let config = sim_config(sim, g, 1)?;
    config.validate()?;
    let rep = gen_replicate(&config, 0, alphas)?;
    let ds = dataset_from_replicate(&rep);
    let dir = g.output.clone().unwrap_or_else(|| PathBuf::from("simdata"));
    let manifest = write_dataset(&ds, &dir)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_power(sim: &SimFlags, alphas: &[String], reps: usize, g: &GlobalOpts) -> Result<()> {
    let settings: Vec<(f64, f64, f64)> = if alphas.is_empty() {
        vec![(0.0, 0.0, 0.0)]
    } else {
        alphas.iter().map(|s| parse_alphas(s)).collect::<Result<_>>()?
    };
    let methods = parse_methods(&g.methods, &SimMethod::ALL_REAL)?;
    let config = sim_config(sim, g, reps)?;
    let rows = power_study(&config, &settings, &methods)?;
    let mut out = String::from("a1\ta2\ta3\treplicates");
    for m in &methods {
        out.push_str(&format!("\t{m}"));
    }
    out.push('\n');
    for row in &rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}",
            row.alphas.0, row.alphas.1, row.alphas.2, row.replicates
        ));
        for (_, rate) in &row.rates {
            out.push_str(&format!("\t{rate:.4}"));
        }
        out.push('\n');
    }
    emit(&g.output, &out)
}

fn cmd_roc(sim: &SimFlags, runs: usize, variant: RocVariantArg, g: &GlobalOpts) -> Result<()> {
    let methods = parse_methods(
        &g.methods,
        &[SimMethod::Hoi, SimMethod::Skat, SimMethod::Fpcar, SimMethod::Uniform],
    )?;
    let config = sim_config(sim, g, runs)?;
    let variant = match variant {
        RocVariantArg::A => RocVariant::ThirdRandom,
        RocVariantArg::B => RocVariant::SecondAndThirdRandom,
    };
    let curves = roc_study(&config, variant, &methods)?;
    if let Some(path) = &g.output {
        let mut out = String::from("method\tthreshold\tfpr\ttpr\n");
        for c in &curves {
            for (t, fpr, tpr) in &c.points {
                out.push_str(&format!("{}\t{t}\t{fpr}\t{tpr}\n", c.method));
            }
        }
        std::fs::write(path, out)?;
    }
    let mut table = String::from("method\tauc\n");
    for c in &curves {
        table.push_str(&format!("{}\t{:.4}\n", c.method, c.auc));
    }
    print!("{table}");
    if g.output.is_none() {
        eprintln!("note: pass --output FILE to keep the full curve points");
    }
    Ok(())
}

/// Parsed netmetrics input: node columns and per-subject group labels.
struct SummaryTable {
    node_names: Vec<String>,
    /// Rows grouped by label, in label order.
    groups: BTreeMap<String, Vec<Vec<f64>>>,
}

fn read_summary_table(path: &Path, group_column: &str) -> Result<SummaryTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Invalid(format!("{}: empty file", path.display())))?
        .split('\t')
        .collect();
    if header.len() < 4 {
        return Err(Error::Invalid(
            "summary TSV needs a subject column, a group column, and at least 2 node columns"
                .into(),
        ));
    }
    let group_idx = header
        .iter()
        .position(|h| *h == group_column)
        .ok_or_else(|| {
            Error::Invalid(format!("group column '{group_column}' not found in header"))
        })?;
    if group_idx == 0 {
        return Err(Error::Invalid(
            "the first column is the subject ID and cannot be the group column".into(),
        ));
    }
    let node_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != 0 && *i != group_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(Error::Invalid(format!(
                "{}:{}: {} fields, header has {}",
                path.display(),
                lineno + 1,
                fields.len(),
                header.len()
            )));
        }
        let mut row = Vec::with_capacity(node_names.len());
        for (i, f) in fields.iter().enumerate() {
            if i == 0 || i == group_idx {
                continue;
            }
            row.push(f.trim().parse::<f64>().map_err(|_| {
                Error::Invalid(format!(
                    "{}:{}: '{}' is not a number",
                    path.display(),
                    lineno + 1,
                    f
                ))
            })?);
        }
        groups.entry(fields[group_idx].trim().to_string()).or_default().push(row);
    }
    if groups.is_empty() {
        return Err(Error::Invalid("summary TSV has no data rows".into()));
    }
    Ok(SummaryTable { node_names, groups })
}

fn cmd_netmetrics(
    summaries: &Path,
    threshold: f64,
    group_column: &str,
    g: &GlobalOpts,
) -> Result<()> {
    let table = read_summary_table(summaries, group_column)?;
    if let Some(dir) = &g.output {
        std::fs::create_dir_all(dir)?;
    }
    for (group, rows) in &table.groups {
        let m = DMatrix::from_fn(rows.len(), table.node_names.len(), |i, j| rows[i][j]);
        let (graph, constant) = correlation_graph(&m, &table.node_names, threshold)?;
        for c in constant {
            eprintln!(
                "warning: group {group}: node '{}' is constant; left isolated",
                table.node_names[c]
            );
        }
        let tsv = metrics_tsv(&graph);
        let eff = global_efficiency(&graph);
        match &g.output {
            Some(dir) => {
                std::fs::write(dir.join(format!("{group}.tsv")), &tsv)?;
                println!("{group}\tglobal_efficiency\t{eff}");
            }
            None => {
                println!("## group {group} (global_efficiency {eff})");
                print!("{tsv}");
            }
        }
    }
    Ok(())
}

fn find_unit<'a>(units: &'a [UnitGroup], name: &str, view: &str) -> Result<&'a UnitGroup> {
    units.iter().find(|u| u.name == name).ok_or_else(|| {
        Error::Invalid(format!("no testing unit named '{name}' in view {view}"))
    })
}

fn resolve_triplet<'a>(
    ds: &'a MultiViewDataset,
    triplet: Option<&str>,
) -> Result<(&'a UnitGroup, &'a UnitGroup, &'a UnitGroup)> {
    match triplet {
        Some(spec) => {
            let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::Invalid(format!(
                    "--triplet needs unit1,unit2,unit3, got '{spec}'"
                )));
            }
            Ok((
                find_unit(&ds.catalog.units[0], parts[0], "1")?,
                find_unit(&ds.catalog.units[1], parts[1], "2")?,
                find_unit(&ds.catalog.units[2], parts[2], "3")?,
            ))
        }
        None => {
            if ds.catalog.len() == 1 {
                Ok((&ds.catalog.units[0][0], &ds.catalog.units[1][0], &ds.catalog.units[2][0]))
            } else {
                Err(Error::Invalid(format!(
                    "catalog has {} triplets; pick one with --triplet unit1,unit2,unit3",
                    ds.catalog.len()
                )))
            }
        }
    }
}

/// Linear-interpolation quantile of an already sorted slice.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn binary_column(values: impl Iterator<Item = f64>, what: &str) -> Result<Vec<bool>> {
    values
        .map(|v| {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(Error::Invalid(format!("{what} must be 0/1, found {v}")))
            }
        })
        .collect()
}

fn cmd_effects(
    manifest: &Path,
    triplet: Option<&str>,
    risk_column: &str,
    g: &GlobalOpts,
) -> Result<()> {
    let ds = load_dataset(manifest)?;
    let (u1, u2, u3) = resolve_triplet(&ds, triplet)?;
    let outcome = binary_column(ds.y.iter().copied(), "the phenotype (outcome)")?;
    let risk_idx = ds
        .covariate_names
        .iter()
        .position(|n| n == risk_column)
        .ok_or_else(|| {
            Error::Invalid(format!(
                "risk column '{risk_column}' not among covariates {:?}",
                &ds.covariate_names[1..]
            ))
        })?;
    let risk = binary_column(
        ds.x.column(risk_idx).iter().copied(),
        &format!("risk column '{risk_column}'"),
    )?;
    let slices = [
        ds.views[0].columns(&u1.columns),
        ds.views[1].columns(&u2.columns),
        ds.views[2].columns(&u3.columns),
    ];
    let kernels = build_kernel_set(
        [&slices[0], &slices[1], &slices[2]],
        [&ds.kernel_specs[0], &ds.kernel_specs[1], &ds.kernel_specs[2]],
        [&u1.name, &u2.name, &u3.name],
    )?;
    let krefs: Vec<&DMatrix<f64>> = kernels.iter().map(|k| &k.values).collect();
    let opts = reml_options(g)?;
    let fit = fit_reml(&ds.y, &ds.x, &krefs, &opts)?;
    if !fit.converged {
        return Err(Error::Numerical(
            "full-model ReML did not converge; effects need a converged fit".into(),
        ));
    }
    let blup = blup_effects(&fit, &ds.y, &ds.x, &krefs)?;
    let h123 = &blup.components[6];
    let mut out = String::from("regime\toutcome\trisk\tcount\tmin\tq1\tmedian\tq3\tmax\n");
    for (o, r, name) in [
        (true, true, "case_high"),
        (true, false, "case_low"),
        (false, true, "control_high"),
        (false, false, "control_low"),
    ] {
        let mut vals: Vec<f64> = (0..ds.y.len())
            .filter(|&i| outcome[i] == o && risk[i] == r)
            .map(|i| h123[i])
            .collect();
        vals.sort_by(f64::total_cmp);
        if vals.is_empty() {
            out.push_str(&format!(
                "{name}\t{}\t{}\t0\tempty\tempty\tempty\tempty\tempty\n",
                o as u8, r as u8
            ));
        } else {
            out.push_str(&format!(
                "{name}\t{}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\n",
                o as u8,
                r as u8,
                vals.len(),
                vals[0],
                quantile_sorted(&vals, 0.25),
                quantile_sorted(&vals, 0.5),
                quantile_sorted(&vals, 0.75),
                vals[vals.len() - 1],
            ));
        }
    }
    emit(&g.output, &out)
}
