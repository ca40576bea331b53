//! Simulation harness: synthetic three-view datasets with a known
//! higher-order interaction structure, plus the power and ROC studies
//! built on them.
//!
//! One replicate draws covariates (intercept, height, weight), a
//! 10-SNP genotype view, a 2-column "three circles" topology view, and
//! a 10-category one-hot view, then synthesizes the phenotype
//!
//! ```text
//! y_i = x_i' b + a1 [hS + hT + hC] + a2 [hS 2hT + hS 3hC + 2hT 3hC]
//!       + a3 [hS 2hT 3hC] + sigma eps_i
//! ```
//!
//! with hS = sum_a S[i,a] cos S[i,a], hT = sum_b 2 T[i,b] sin T[i,b],
//! hC = sum_c 1 / (sqrt(2) exp C[i,c]) and every beta entry fixed at
//! 0.5. Setting the alphas to zero gives the null; a3 alone switches
//! the three-way interaction on.

use crate::baselines::{fpcar_test, ppcar_test, skat_style_test, PcaTarget};
use crate::kernels::{build_kernel_set, GramMatrix, KernelSpec};
use crate::mixed_model::ReMLOptions;
use crate::score_tests::{hoi_test, overall_test};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Configuration of one simulation study.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Number of subjects (>= 20).
    pub n: usize,
    /// Effect sizes (main, pairwise, triple).
    pub alphas: (f64, f64, f64),
    /// Phenotype noise scale sigma.
    pub sigma_noise: f64,
    /// Replicates per setting (>= 1).
    pub replicates: usize,
    /// Base seed; replicate r uses seed ^ r.
    pub seed: u64,
    /// Circle-noise std for the topology view.
    pub noise_topo: f64,
    /// Read the displayed hC numerator literally as the subject index
    /// instead of 1 (makes the phenotype depend on subject order).
    pub hc_literal_index: bool,
    /// Evaluate hC on the raw one-hot entries instead of the selected
    /// category level. With one-hot rows that sum is the same for
    /// every subject, so the triple term collapses to a pairwise
    /// signal; kept as a flag for exploring that reading.
    pub hc_onehot_literal: bool,
    /// ReML options used by the HOI test.
    pub reml: ReMLOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 500,
            alphas: (0.0, 0.0, 0.0),
            sigma_noise: 1e-2,
            replicates: 500,
            seed: 0,
            noise_topo: 0.05,
            hc_literal_index: false,
            hc_onehot_literal: false,
            reml: ReMLOptions::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 20 {
            return Err(Error::Invalid(format!("simulation needs n >= 20, got {}", self.n)));
        }
        if self.replicates < 1 {
            return Err(Error::Invalid("simulation needs at least 1 replicate".into()));
        }
        if self.sigma_noise < 0.0 || self.noise_topo < 0.0 {
            return Err(Error::Invalid("noise scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// Methods the power/ROC drivers can run, including a uniform-p
/// control used to calibrate the harness itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimMethod {
    Overall,
    Hoi,
    Ppcar,
    Fpcar,
    Skat,
    /// Draws p ~ U[0,1]; any study run through the harness must give
    /// this method rejection rate ~alpha and AUC ~0.5.
    Uniform,
}

impl SimMethod {
    pub const ALL_REAL: [SimMethod; 5] = [
        SimMethod::Overall,
        SimMethod::Hoi,
        SimMethod::Ppcar,
        SimMethod::Fpcar,
        SimMethod::Skat,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "overall" => Ok(SimMethod::Overall),
            "hoi" | "kmdhoi" => Ok(SimMethod::Hoi),
            "ppcar" => Ok(SimMethod::Ppcar),
            "fpcar" => Ok(SimMethod::Fpcar),
            "skat" => Ok(SimMethod::Skat),
            "uniform" => Ok(SimMethod::Uniform),
            other => Err(Error::Invalid(format!(
                "unknown method '{other}' (expected overall|hoi|ppcar|fpcar|skat|uniform)"
            ))),
        }
    }
}

impl std::fmt::Display for SimMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SimMethod::Overall => "overall",
            SimMethod::Hoi => "hoi",
            SimMethod::Ppcar => "ppcar",
            SimMethod::Fpcar => "fpcar",
            SimMethod::Skat => "skat",
            SimMethod::Uniform => "uniform",
        };
        f.write_str(s)
    }
}

/// Rejection rates of one (a1, a2, a3) setting at the 0.05 threshold.
#[derive(Debug, Clone)]
pub struct PowerRow {
    pub alphas: (f64, f64, f64),
    /// (method, rejection rate), in the order the methods were given.
    pub rates: Vec<(SimMethod, f64)>,
    pub replicates: usize,
}

/// One ROC curve: p-value threshold swept 0..=1 in steps of 1e-4.
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub method: SimMethod,
    /// (threshold, false positive rate, true positive rate).
    pub points: Vec<(f64, f64, f64)>,
    pub auc: f64,
}

/// ROC generation rule for the third (and optionally second) alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RocVariant {
    /// a3 ~ U[0,1] with probability 1/2, else exactly 0.
    ThirdRandom,
    /// a2 = a3 drawn jointly by the same rule.
    SecondAndThirdRandom,
}

/// Equally spaced covariates (intercept, height on [50, 80], weight on
/// [60, 225]) plus 3 N(0,1) noise on each non-intercept column; the
/// `noiseless` hook gives the exact ramps.
pub fn gen_covariates(n: usize, noiseless: bool, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let mut x = DMatrix::<f64>::zeros(n, 3);
    let step = |lo: f64, hi: f64, i: usize| {
        if n == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = step(50.0, 80.0, i);
        x[(i, 2)] = step(60.0, 225.0, i);
    }
    if !noiseless {
        for i in 0..n {
            x[(i, 1)] += 3.0 * rng.sample::<f64, _>(StandardNormal);
            x[(i, 2)] += 3.0 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    x
}

/// Genotypes from a latent model: z_i ~ N(0,1), each SNP b has minor
/// allele frequency maf_b ~ U[0.1, 0.4] (drawn once per column) and
/// genotype ~ Binomial(2, p_ib) with logit(p_ib) = 0.5 z_i +
/// logit(maf_b). `maf_override` pins every column's maf (test hook).
pub fn gen_genotypes(
    n: usize,
    n_snps: usize,
    maf_override: Option<f64>,
    rng: &mut ChaCha12Rng,
) -> DMatrix<f64> {
    let mafs: Vec<f64> = (0..n_snps)
        .map(|_| maf_override.unwrap_or_else(|| rng.gen_range(0.1..0.4)))
        .collect();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut g = DMatrix::<f64>::zeros(n, n_snps);
    for i in 0..n {
        for (b, &maf) in mafs.iter().enumerate() {
            let p = if maf <= 0.0 {
                0.0
            } else if maf >= 1.0 {
                1.0
            } else {
                let logit = 0.5 * z[i] + (maf / (1.0 - maf)).ln();
                1.0 / (1.0 + (-logit).exp())
            };
            let mut count = 0u8;
            // two allele draws; keep the stream shape fixed
            if rng.gen::<f64>() < p {
                count += 1;
            }
            if rng.gen::<f64>() < p {
                count += 1;
            }
            g[(i, b)] = count as f64;
        }
    }
    g
}

/// Topology view: three near-equal groups on circles of radii 1, 0.5,
/// 0.25; angle R ~ U[-1, 1], point = r (cos R, sin R) + noise_topo *
/// N(0, I2). noise_topo = 0 gives exact circles.
pub fn gen_topology(n: usize, noise_topo: f64, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    const RADII: [f64; 3] = [1.0, 0.5, 0.25];
    let base = n / 3;
    let rem = n % 3;
    let mut t = DMatrix::<f64>::zeros(n, 2);
    let mut row = 0;
    for (g, &r) in RADII.iter().enumerate() {
        let size = base + usize::from(g < rem);
        for _ in 0..size {
            let angle: f64 = rng.gen_range(-1.0..=1.0);
            t[(row, 0)] = r * angle.cos() + noise_topo * rng.sample::<f64, _>(StandardNormal);
            t[(row, 1)] = r * angle.sin() + noise_topo * rng.sample::<f64, _>(StandardNormal);
            row += 1;
        }
    }
    t
}

/// One-hot categorical view with k equiprobable categories.
pub fn gen_categorical(n: usize, k: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let mut c = DMatrix::<f64>::zeros(n, k);
    for i in 0..n {
        c[(i, rng.gen_range(0..k))] = 1.0;
    }
    c
}

/// Alternative readings of the hC term (see [`SimConfig`]).
#[derive(Debug, Clone, Copy, Default)]
pub struct PhenotypeOptions {
    pub hc_literal_index: bool,
    pub hc_onehot_literal: bool,
}

/// The three per-view signals for subject i (1-based index for the
/// literal hC reading).
///
/// hC default: the one-hot row selects its category's level, giving
/// hC = 1/(sqrt(2) exp(level)) for the active category (levels are
/// 1-based column positions). Evaluating the formula on the raw 0/1
/// entries instead (`hc_onehot_literal`) makes hC identical for every
/// subject — the categorical view then contributes nothing to any
/// interaction and the triple term degenerates to a pairwise one.
fn signal_terms(
    s: &DMatrix<f64>,
    t: &DMatrix<f64>,
    c: &DMatrix<f64>,
    i: usize,
    opts: PhenotypeOptions,
) -> (f64, f64, f64) {
    let h_s: f64 = (0..s.ncols()).map(|a| s[(i, a)] * s[(i, a)].cos()).sum();
    let h_t: f64 = (0..t.ncols()).map(|b| 2.0 * t[(i, b)] * t[(i, b)].sin()).sum();
    let num = if opts.hc_literal_index { (i + 1) as f64 } else { 1.0 };
    let h_c: f64 = if opts.hc_onehot_literal {
        (0..c.ncols()).map(|cc| num / (std::f64::consts::SQRT_2 * c[(i, cc)].exp())).sum()
    } else {
        (0..c.ncols())
            .map(|cc| c[(i, cc)] * num / (std::f64::consts::SQRT_2 * ((cc + 1) as f64).exp()))
            .sum()
    };
    (h_s, h_t, h_c)
}

/// Phenotype synthesis; all beta entries are 0.5 and eps ~ N(0,1).
#[allow(clippy::too_many_arguments)] // mirrors the generator's natural parameterization
pub fn gen_phenotype(
    covariates: &DMatrix<f64>,
    s: &DMatrix<f64>,
    t: &DMatrix<f64>,
    c: &DMatrix<f64>,
    alphas: (f64, f64, f64),
    sigma: f64,
    opts: PhenotypeOptions,
    rng: &mut ChaCha12Rng,
) -> DVector<f64> {
    let n = covariates.nrows();
    let beta = DVector::from_element(covariates.ncols(), 0.5);
    let fixed = covariates * beta;
    let (a1, a2, a3) = alphas;
    DVector::from_fn(n, |i, _| {
        let (h_s, h_t, h_c) = signal_terms(s, t, c, i, opts);
        let (ht2, hc3) = (2.0 * h_t, 3.0 * h_c);
        fixed[i]
            + a1 * (h_s + h_t + h_c)
            + a2 * (h_s * ht2 + h_s * hc3 + ht2 * hc3)
            + a3 * (h_s * ht2 * hc3)
            + sigma * rng.sample::<f64, _>(StandardNormal)
    })
}

/// One fully generated replicate: phenotype, covariates, raw views,
/// and the seven-kernel set (IBS, Gaussian, Gaussian with median
/// bandwidths).
pub struct SimReplicate {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub views: [DMatrix<f64>; 3],
    pub kernels: [GramMatrix; 7],
    /// Stream for any post-generation randomness (uniform control).
    pub rng: ChaCha12Rng,
}

/// Kernel choices for the three simulated views.
pub fn sim_kernel_specs() -> [KernelSpec; 3] {
    [KernelSpec::Ibs, KernelSpec::Gaussian { bandwidth: None }, KernelSpec::Gaussian { bandwidth: None }]
}

/// Generate replicate `rep` of the study (seed = base seed ^ rep).
pub fn gen_replicate(config: &SimConfig, rep: usize, alphas: (f64, f64, f64)) -> Result<SimReplicate> {
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ rep as u64);
    let x = gen_covariates(config.n, false, &mut rng);
    let s = gen_genotypes(config.n, 10, None, &mut rng);
    let t = gen_topology(config.n, config.noise_topo, &mut rng);
    let c = gen_categorical(config.n, 10, &mut rng);
    let opts = PhenotypeOptions {
        hc_literal_index: config.hc_literal_index,
        hc_onehot_literal: config.hc_onehot_literal,
    };
    let y = gen_phenotype(&x, &s, &t, &c, alphas, config.sigma_noise, opts, &mut rng);
    let specs = sim_kernel_specs();
    let kernels = build_kernel_set(
        [&s, &t, &c],
        [&specs[0], &specs[1], &specs[2]],
        ["genotype", "topology", "categorical"],
    )?;
    Ok(SimReplicate { y, x, views: [s, t, c], kernels, rng })
}

/// Package a generated replicate as a dataset that can be written to
/// disk and rescanned: one all-columns testing unit per view, view
/// kinds matching the generators, kernels from `sim_kernel_specs`.
pub fn dataset_from_replicate(rep: &SimReplicate) -> crate::dataio::MultiViewDataset {
    use crate::dataio::{FeatureView, TripletCatalog, UnitGroup, ViewKind};
    let n = rep.y.len();
    let names = ["genotype", "topology", "categorical"];
    let kinds = [ViewKind::Genotype, ViewKind::Quantitative, ViewKind::Categorical];
    let col_name = |v: usize, j: usize| match v {
        0 => format!("snp{}", j + 1),
        1 => ["coord_x", "coord_y"][j].to_string(),
        _ => format!("cat={}", j + 1),
    };
    let mut views = Vec::with_capacity(3);
    let mut units: [Vec<UnitGroup>; 3] = Default::default();
    for v in 0..3 {
        let m = rep.views[v].clone();
        let column_names: Vec<String> = (0..m.ncols()).map(|j| col_name(v, j)).collect();
        units[v] = vec![UnitGroup {
            name: names[v].to_string(),
            columns: (0..m.ncols()).collect(),
        }];
        views.push(FeatureView {
            name: names[v].to_string(),
            kind: kinds[v],
            matrix: m,
            column_names,
        });
    }
    let width = n.to_string().len();
    crate::dataio::MultiViewDataset {
        y: rep.y.clone(),
        x: rep.x.clone(),
        covariate_names: vec!["intercept".into(), "age".into(), "weight".into()],
        subject_ids: (0..n).map(|i| format!("s{:0width$}", i + 1)).collect(),
        views: views.try_into().expect("three views"),
        kernel_specs: sim_kernel_specs(),
        catalog: TripletCatalog { units },
        dropped: 0,
    }
}

/// p-value of one method on one replicate. Numerical failures are
/// reported as p = 1 (never rejected), keeping study denominators
/// honest; they are rare and only ever cost power.
pub fn method_p_value(rep: &mut SimReplicate, method: SimMethod, reml: &ReMLOptions) -> f64 {
    let kernel_refs: Vec<&DMatrix<f64>> = rep.kernels.iter().map(|g| &g.values).collect();
    let views = [&rep.views[0], &rep.views[1], &rep.views[2]];
    let p = match method {
        SimMethod::Overall => overall_test(&rep.y, &rep.x, &kernel_refs).map(|t| t.p_value),
        SimMethod::Hoi => hoi_test(&rep.y, &rep.x, &kernel_refs, reml).map(|t| t.p_value),
        SimMethod::Ppcar => ppcar_test(&rep.y, &rep.x, views).map(|t| t.p_value),
        SimMethod::Fpcar => fpcar_test(&rep.y, &rep.x, views, PcaTarget::default()).map(|t| t.p_value),
        SimMethod::Skat => {
            skat_style_test(&rep.y, &rep.x, views, PcaTarget::default()).map(|t| t.p_value)
        }
        SimMethod::Uniform => Ok(rep.rng.gen::<f64>()),
    };
    p.unwrap_or(1.0)
}

/// Rejection rates at the 0.05 threshold for each (a1, a2, a3) in
/// `settings`, each over `config.replicates` independent replicates.
/// Replicates are fitted in parallel.
pub fn power_study(
    config: &SimConfig,
    settings: &[(f64, f64, f64)],
    methods: &[SimMethod],
) -> Result<Vec<PowerRow>> {
    config.validate()?;
    let mut rows = Vec::with_capacity(settings.len());
    for &alphas in settings {
        let p_values: Vec<Vec<f64>> = (0..config.replicates)
            .into_par_iter()
            .map(|r| {
                let mut rep = gen_replicate(config, r, alphas)?;
                Ok(methods.iter().map(|&m| method_p_value(&mut rep, m, &config.reml)).collect())
            })
            .collect::<Result<_>>()?;
        let rates = methods
            .iter()
            .enumerate()
            .map(|(mi, &m)| {
                let hits = p_values.iter().filter(|ps| ps[mi] <= 0.05).count();
                (m, hits as f64 / config.replicates as f64)
            })
            .collect();
        rows.push(PowerRow { alphas, rates, replicates: config.replicates });
    }
    Ok(rows)
}

/// Threshold grid 0..=1 with step 1e-4.
fn threshold_grid() -> Vec<f64> {
    (0..=10_000).map(|i| i as f64 * 1e-4).collect()
}

/// ROC study: per replicate the third alpha (variant a) or the second
/// and third jointly (variant b) are U[0,1] with probability 1/2 and
/// exactly 0 otherwise; the first alpha keeps its configured value.
/// Curves sweep the p-value threshold and AUC is the trapezoid area.
pub fn roc_study(
    config: &SimConfig,
    variant: RocVariant,
    methods: &[SimMethod],
) -> Result<Vec<RocCurve>> {
    config.validate()?;
    let results: Vec<(bool, Vec<f64>)> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            // label stream is separate from the data stream so the
            // generated views match the non-ROC studies draw for draw
            let mut label_rng = ChaCha12Rng::seed_from_u64(config.seed ^ r as u64 ^ 0x9e3779b97f4a7c15);
            let positive = label_rng.gen::<bool>();
            let a3 = if positive { label_rng.gen::<f64>() } else { 0.0 };
            let alphas = match variant {
                RocVariant::ThirdRandom => (config.alphas.0, config.alphas.1, a3),
                RocVariant::SecondAndThirdRandom => (config.alphas.0, a3, a3),
            };
            let mut rep = gen_replicate(config, r, alphas)?;
            let ps = methods.iter().map(|&m| method_p_value(&mut rep, m, &config.reml)).collect();
            Ok((positive, ps))
        })
        .collect::<Result<_>>()?;
    let n_pos = results.iter().filter(|(l, _)| *l).count();
    let n_neg = results.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Numerical(format!(
            "ROC needs both classes, got {n_pos} positive / {n_neg} negative runs"
        )));
    }
    let grid = threshold_grid();
    let curves = methods
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            // sort p-values once per class, then sweep via counters
            let mut pos: Vec<f64> = results.iter().filter(|(l, _)| *l).map(|(_, p)| p[mi]).collect();
            let mut neg: Vec<f64> =
                results.iter().filter(|(l, _)| !*l).map(|(_, p)| p[mi]).collect();
            pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
            neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut points = Vec::with_capacity(grid.len());
            let (mut ip, mut ineg) = (0usize, 0usize);
            for &t in &grid {
                while ip < pos.len() && pos[ip] <= t {
                    ip += 1;
                }
                while ineg < neg.len() && neg[ineg] <= t {
                    ineg += 1;
                }
                points.push((t, ineg as f64 / n_neg as f64, ip as f64 / n_pos as f64));
            }
            // force the (1,1) anchor even if some p-values exceed 1.0
            if let Some(last) = points.last_mut() {
                *last = (1.0, 1.0, 1.0);
            }
            let mut auc = 0.0;
            for w in points.windows(2) {
                let (_, f0, t0) = w[0];
                let (_, f1, t1) = w[1];
                auc += (f1 - f0) * 0.5 * (t0 + t1);
            }
            RocCurve { method: m, points, auc }
        })
        .collect();
    Ok(curves)
}
