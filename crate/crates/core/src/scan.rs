//! Triplet scan: for every (unit1, unit2, unit3) testing unit, fit the
//! full seven-kernel model, run the overall and higher-order
//! interaction score tests plus any selected baselines, adjust the HOI
//! p-values for multiplicity, and serialize to TSV or JSONL.
//!
//! Per-triplet failures never abort a scan: a failing step leaves its
//! fields NaN, raises the matching flag, and records a note.

use crate::baselines::{fpcar_test, ppcar_test, skat_style_test, PcaTarget};
use crate::dataio::{enumerate_triplets, MultiViewDataset, UnitGroup};
use crate::kernels::build_kernel_set;
use crate::mixed_model::{fit_reml, ReMLOptions};
use crate::score_tests::{hoi_test, overall_test};
use crate::simgen::SimMethod;
use crate::{Error, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

/// Significance ladder used by scan summaries.
pub const SIGNIFICANCE_LEVELS: [f64; 3] = [0.05, 0.01, 0.001];

/// One scanned triplet: variance-component estimates of the full
/// model, test p-values, multiplicity-adjusted HOI p-values, and
/// fault flags.
#[derive(Debug, Clone, Serialize)]
pub struct ScanRecord {
    pub unit1: String,
    pub unit2: String,
    pub unit3: String,
    /// Full-model estimates in kernel order:
    /// tau1, tau2, tau3, tau12, tau13, tau23, tau123, sigma2.
    pub variance: [f64; 8],
    pub p_overall: f64,
    pub p_hoi: f64,
    /// min(1, p_hoi * n_triplets); NaN when p_hoi is NaN.
    pub p_hoi_bonferroni: f64,
    /// Benjamini-Hochberg step-up adjusted p_hoi across the scan.
    pub p_hoi_bh: f64,
    /// Baseline p-values keyed by method name (only selected methods).
    pub baselines: BTreeMap<String, f64>,
    /// Some test's moment matching was unavailable or a step failed
    /// outright; the documented fallback (p reported as 1, or NaN when
    /// the step produced nothing) was taken.
    pub degenerate: bool,
    /// A baseline dropped collinear design columns.
    pub rank_deficient: bool,
    /// A ReML fit stopped at max_iter without meeting the tolerance.
    pub non_converged: bool,
    /// Failure messages, ";"-joined; empty on a clean record.
    pub note: String,
}

const VARIANCE_HEADERS: [&str; 8] =
    ["tau1", "tau2", "tau3", "tau12", "tau13", "tau23", "tau123", "sigma2"];

fn push_note(rec: &mut ScanRecord, what: &str, err: &Error) {
    if !rec.note.is_empty() {
        rec.note.push_str("; ");
    }
    rec.note.push_str(&format!("{what}: {err}"));
}

fn scan_one(
    ds: &MultiViewDataset,
    units: (&UnitGroup, &UnitGroup, &UnitGroup),
    methods: &[SimMethod],
    options: &ReMLOptions,
) -> ScanRecord {
    let mut rec = ScanRecord {
        unit1: units.0.name.clone(),
        unit2: units.1.name.clone(),
        unit3: units.2.name.clone(),
        variance: [f64::NAN; 8],
        p_overall: f64::NAN,
        p_hoi: f64::NAN,
        p_hoi_bonferroni: f64::NAN,
        p_hoi_bh: f64::NAN,
        baselines: BTreeMap::new(),
        degenerate: false,
        rank_deficient: false,
        non_converged: false,
        note: String::new(),
    };
    let slices: [DMatrix<f64>; 3] = [
        ds.views[0].columns(&units.0.columns),
        ds.views[1].columns(&units.1.columns),
        ds.views[2].columns(&units.2.columns),
    ];
    match build_kernel_set(
        [&slices[0], &slices[1], &slices[2]],
        [&ds.kernel_specs[0], &ds.kernel_specs[1], &ds.kernel_specs[2]],
        [&rec.unit1, &rec.unit2, &rec.unit3],
    ) {
        Err(e) => {
            rec.degenerate = true;
            push_note(&mut rec, "kernels", &e);
        }
        Ok(kernels) => {
            let krefs: Vec<&DMatrix<f64>> = kernels.iter().map(|g| &g.values).collect();
            match fit_reml(&ds.y, &ds.x, &krefs, options) {
                Err(e) => {
                    rec.degenerate = true;
                    push_note(&mut rec, "full model", &e);
                }
                Ok(fit) => {
                    for (j, t) in fit.theta.tau.iter().enumerate() {
                        rec.variance[j] = *t;
                    }
                    rec.variance[7] = fit.theta.sigma2;
                    rec.non_converged |= !fit.converged;
                }
            }
            match overall_test(&ds.y, &ds.x, &krefs) {
                Err(e) => {
                    rec.degenerate = true;
                    push_note(&mut rec, "overall test", &e);
                }
                Ok(r) => {
                    rec.p_overall = r.p_value;
                    rec.degenerate |= r.degenerate;
                }
            }
            match hoi_test(&ds.y, &ds.x, &krefs, options) {
                Err(e) => {
                    rec.degenerate = true;
                    push_note(&mut rec, "HOI test", &e);
                }
                Ok(r) => {
                    rec.p_hoi = r.p_value;
                    rec.degenerate |= r.degenerate;
                    if let Some(nf) = &r.null_fit {
                        rec.non_converged |= !nf.converged;
                    }
                }
            }
        }
    }
    let views = [&slices[0], &slices[1], &slices[2]];
    for m in methods {
        let run = match m {
            SimMethod::Ppcar => Some(ppcar_test(&ds.y, &ds.x, views)),
            SimMethod::Fpcar => Some(fpcar_test(&ds.y, &ds.x, views, PcaTarget::default())),
            SimMethod::Skat => {
                Some(skat_style_test(&ds.y, &ds.x, views, PcaTarget::default()))
            }
            // overall/hoi always run above; uniform has no scan meaning
            _ => None,
        };
        let Some(res) = run else { continue };
        match res {
            Err(e) => {
                rec.degenerate = true;
                rec.baselines.insert(m.to_string(), f64::NAN);
                push_note(&mut rec, &m.to_string(), &e);
            }
            Ok(r) => {
                rec.baselines.insert(m.to_string(), r.p_value);
                rec.degenerate |= r.degenerate;
                rec.rank_deficient |= r.rank_deficient;
            }
        }
    }
    rec
}

/// min(1, p * m), preserving NaN.
fn bonferroni(p: f64, m: usize) -> f64 {
    if p.is_nan() {
        f64::NAN
    } else {
        (p * m as f64).min(1.0)
    }
}

/// Benjamini-Hochberg step-up adjustment. NaN entries are excluded
/// from the ranking and stay NaN. Adjusted values never fall below the
/// raw ones.
pub fn bh_adjust(ps: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..ps.len()).filter(|&i| !ps[i].is_nan()).collect();
    let m = idx.len();
    idx.sort_by(|&a, &b| ps[a].total_cmp(&ps[b]));
    let mut adj = vec![f64::NAN; ps.len()];
    let mut running = 1.0f64;
    for (rank0, &i) in idx.iter().enumerate().rev() {
        let v = (ps[i] * m as f64 / (rank0 + 1) as f64).min(running).min(1.0);
        running = v;
        adj[i] = v.max(ps[i]);
    }
    adj
}

/// Fill the Bonferroni and BH columns from the raw HOI p's in place.
pub fn apply_adjustments(records: &mut [ScanRecord]) {
    let m = records.len();
    let raw: Vec<f64> = records.iter().map(|r| r.p_hoi).collect();
    let bh = bh_adjust(&raw);
    for (r, b) in records.iter_mut().zip(bh) {
        r.p_hoi_bonferroni = bonferroni(r.p_hoi, m);
        r.p_hoi_bh = b;
    }
}

/// Scan every triplet in the dataset's catalog. Triplets run on the
/// current rayon pool; each worker owns its scratch matrices and the
/// output keeps the catalog's lexicographic enumeration order
/// regardless of thread count.
pub fn scan_dataset(
    ds: &MultiViewDataset,
    methods: &[SimMethod],
    options: &ReMLOptions,
) -> Result<Vec<ScanRecord>> {
    if ds.catalog.is_empty() {
        return Err(Error::Invalid("dataset has no testing-unit triplets".into()));
    }
    let triplets: Vec<_> = enumerate_triplets(&ds.catalog).collect();
    let mut records: Vec<ScanRecord> = triplets
        .par_iter()
        .map(|&t| scan_one(ds, t, methods, options))
        .collect();
    apply_adjustments(&mut records);
    Ok(records)
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.6e}")
    }
}

/// Baseline column order: the canonical method order restricted to
/// what was selected.
fn baseline_columns(methods: &[SimMethod]) -> Vec<String> {
    [SimMethod::Ppcar, SimMethod::Fpcar, SimMethod::Skat]
        .iter()
        .filter(|m| methods.contains(m))
        .map(|m| m.to_string())
        .collect()
}

/// Records as a TSV table with a fixed header; byte-identical for
/// identical inputs.
pub fn scan_records_tsv(records: &[ScanRecord], methods: &[SimMethod]) -> String {
    let base_cols = baseline_columns(methods);
    let mut out = String::from("unit1\tunit2\tunit3");
    for h in VARIANCE_HEADERS {
        out.push('\t');
        out.push_str(h);
    }
    out.push_str("\tp_overall\tp_hoi\tp_hoi_bonferroni\tp_hoi_bh");
    for b in &base_cols {
        out.push_str(&format!("\tp_{b}"));
    }
    out.push_str("\tdegenerate\trank_deficient\tnon_converged\tnote\n");
    for r in records {
        out.push_str(&format!("{}\t{}\t{}", r.unit1, r.unit2, r.unit3));
        for v in r.variance {
            out.push('\t');
            out.push_str(&fmt_num(v));
        }
        for p in [r.p_overall, r.p_hoi, r.p_hoi_bonferroni, r.p_hoi_bh] {
            out.push('\t');
            out.push_str(&fmt_num(p));
        }
        for b in &base_cols {
            out.push('\t');
            out.push_str(&fmt_num(r.baselines.get(b).copied().unwrap_or(f64::NAN)));
        }
        out.push_str(&format!(
            "\t{}\t{}\t{}\t{}\n",
            r.degenerate, r.rank_deficient, r.non_converged, r.note
        ));
    }
    out
}

/// Records as JSON Lines (one object per row; NaN serializes as null).
pub fn scan_records_jsonl(records: &[ScanRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r)
                .map_err(|e| Error::Invalid(format!("JSONL serialization: {e}")))?,
        );
        out.push('\n');
    }
    Ok(out)
}

/// Threshold counts and flag tallies for a finished scan.
#[derive(Debug, Clone, Serialize)]
pub struct ScanSummary {
    pub n_triplets: usize,
    pub n_degenerate: usize,
    pub n_rank_deficient: usize,
    pub n_non_converged: usize,
    /// Triplets with raw HOI p <= 0.05 / 0.01 / 0.001.
    pub hoi_raw_counts: [usize; 3],
    /// Same ladder on the Bonferroni-adjusted HOI p.
    pub hoi_bonferroni_counts: [usize; 3],
    /// Same ladder on the BH-adjusted HOI p.
    pub hoi_bh_counts: [usize; 3],
    /// Same ladder on the raw overall p.
    pub overall_counts: [usize; 3],
}

fn ladder_counts(ps: impl Iterator<Item = f64> + Clone) -> [usize; 3] {
    let mut out = [0usize; 3];
    for (i, level) in SIGNIFICANCE_LEVELS.iter().enumerate() {
        out[i] = ps.clone().filter(|p| !p.is_nan() && *p <= *level).count();
    }
    out
}

pub fn scan_summary(records: &[ScanRecord]) -> ScanSummary {
    ScanSummary {
        n_triplets: records.len(),
        n_degenerate: records.iter().filter(|r| r.degenerate).count(),
        n_rank_deficient: records.iter().filter(|r| r.rank_deficient).count(),
        n_non_converged: records.iter().filter(|r| r.non_converged).count(),
        hoi_raw_counts: ladder_counts(records.iter().map(|r| r.p_hoi)),
        hoi_bonferroni_counts: ladder_counts(records.iter().map(|r| r.p_hoi_bonferroni)),
        hoi_bh_counts: ladder_counts(records.iter().map(|r| r.p_hoi_bh)),
        overall_counts: ladder_counts(records.iter().map(|r| r.p_overall)),
    }
}

/// Human-readable summary: flag tallies, the significance ladder, and
/// a -log10(p) table for plotting.
pub fn summary_text(records: &[ScanRecord]) -> String {
    let s = scan_summary(records);
    let mut out = String::new();
    out.push_str(&format!(
        "triplets: {} (degenerate {}, rank-deficient {}, non-converged {})\n",
        s.n_triplets, s.n_degenerate, s.n_rank_deficient, s.n_non_converged
    ));
    out.push_str("significant triplets (p <= level):\n");
    out.push_str("level\thoi_raw\thoi_bonferroni\thoi_bh\toverall\n");
    for (i, level) in SIGNIFICANCE_LEVELS.iter().enumerate() {
        out.push_str(&format!(
            "{level}\t{}\t{}\t{}\t{}\n",
            s.hoi_raw_counts[i], s.hoi_bonferroni_counts[i], s.hoi_bh_counts[i],
            s.overall_counts[i]
        ));
    }
    out.push_str("-log10(p_hoi) by triplet:\n");
    out.push_str("unit1\tunit2\tunit3\tneg_log10_p_hoi\n");
    for r in records {
        let nl = if r.p_hoi.is_nan() { f64::NAN } else { -r.p_hoi.log10() };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.unit1,
            r.unit2,
            r.unit3,
            if nl.is_nan() { "NaN".to_string() } else { format!("{nl:.4}") }
        ));
    }
    out
}
