//! Dataset ingestion: TSV matrix files tied together by a plain-text
//! manifest, validation, complete-case filtering, and the testing-unit
//! triplet catalog.
//!
//! Matrix files are UTF-8 TSV with the first row holding column names
//! and the first column holding subject IDs; an empty cell is a missing
//! value. The manifest is a `key = value` file naming the phenotype
//! file, the covariate file, the three view files with their kinds and
//! kernel specs, and optional unit-group files (`unit<TAB>col1,col2`).

use crate::kernels::KernelSpec;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// What a feature view holds; drives validation and preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    /// Minor-allele counts; every entry must be 0, 1, or 2.
    Genotype,
    /// Real-valued columns, used as-is (or z-scored when the manifest
    /// asks for it).
    Quantitative,
    /// Categorical codes, one-hot expanded at load time.
    Categorical,
}

impl ViewKind {
    fn parse(s: &str) -> Result<(Self, bool)> {
        // (kind, already one-hot expanded)
        match s {
            "genotype" => Ok((ViewKind::Genotype, false)),
            "quantitative" => Ok((ViewKind::Quantitative, false)),
            "categorical" => Ok((ViewKind::Categorical, false)),
            "categorical-expanded" => Ok((ViewKind::Categorical, true)),
            other => Err(Error::Invalid(format!("unknown view kind '{other}'"))),
        }
    }
}

/// One feature view: a named n x p matrix of one kind.
#[derive(Debug, Clone)]
pub struct FeatureView {
    pub name: String,
    pub kind: ViewKind,
    pub matrix: DMatrix<f64>,
    pub column_names: Vec<String>,
}

impl FeatureView {
    /// Copy of the named columns as an n x |idx| matrix.
    pub fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.matrix.nrows(), idx.len(), |i, j| self.matrix[(i, idx[j])])
    }
}

/// A named group of column indices used as one testing unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitGroup {
    pub name: String,
    pub columns: Vec<usize>,
}

/// Unit groups for the three views; triplets are their cross-product.
#[derive(Debug, Clone, Default)]
pub struct TripletCatalog {
    pub units: [Vec<UnitGroup>; 3],
}

impl TripletCatalog {
    pub fn len(&self) -> usize {
        self.units[0].len() * self.units[1].len() * self.units[2].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Lazy lexicographic enumeration of (unit1, unit2, unit3).
pub fn enumerate_triplets(
    catalog: &TripletCatalog,
) -> impl Iterator<Item = (&UnitGroup, &UnitGroup, &UnitGroup)> {
    catalog.units[0].iter().flat_map(move |a| {
        catalog.units[1]
            .iter()
            .flat_map(move |b| catalog.units[2].iter().map(move |c| (a, b, c)))
    })
}

/// Everything one analysis needs: phenotype, covariates with intercept,
/// three validated views with kernel specs, and the unit catalog.
#[derive(Debug, Clone)]
pub struct MultiViewDataset {
    pub y: DVector<f64>,
    /// Covariates with a leading intercept column of ones.
    pub x: DMatrix<f64>,
    /// Column names of `x`, starting with "intercept".
    pub covariate_names: Vec<String>,
    pub subject_ids: Vec<String>,
    pub views: [FeatureView; 3],
    pub kernel_specs: [KernelSpec; 3],
    pub catalog: TripletCatalog,
    /// Subjects removed by complete-case filtering.
    pub dropped: usize,
}

/// One parsed TSV matrix before validation.
struct RawTable {
    subject_ids: Vec<String>,
    column_names: Vec<String>,
    /// Row-major cells; None = empty cell = missing.
    cells: Vec<Vec<Option<f64>>>,
}

fn parse_tsv(path: &Path) -> Result<RawTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Invalid(format!("{}: empty file", path.display())))?;
    let mut head: Vec<&str> = header.split('\t').collect();
    if head.is_empty() {
        return Err(Error::Invalid(format!("{}: empty header", path.display())));
    }
    head.remove(0); // subject-ID column label
    let column_names: Vec<String> = head.iter().map(|s| s.to_string()).collect();
    let mut subject_ids = Vec::new();
    let mut cells = Vec::new();
    for (lineno, line) in lines {
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or("");
        if id.is_empty() {
            return Err(Error::Invalid(format!(
                "{}:{}: empty subject ID",
                path.display(),
                lineno + 1
            )));
        }
        let row: Vec<Option<f64>> = fields
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>().map(Some).map_err(|_| {
                        Error::Invalid(format!(
                            "{}:{}: cell '{f}' is not numeric",
                            path.display(),
                            lineno + 1
                        ))
                    })
                }
            })
            .collect::<Result<_>>()?;
        if row.len() != column_names.len() {
            return Err(Error::Invalid(format!(
                "{}:{}: {} cells for {} columns",
                path.display(),
                lineno + 1,
                row.len(),
                column_names.len()
            )));
        }
        subject_ids.push(id.to_string());
        cells.push(row);
    }
    Ok(RawTable { subject_ids, column_names, cells })
}

fn parse_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Invalid(format!(
                "{}:{}: expected 'key = value', got '{line}'",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_unit_file(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut units = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((name, cols)) = line.split_once('\t') else {
            return Err(Error::Invalid(format!(
                "{}:{}: expected 'unit<TAB>col1,col2,...'",
                path.display(),
                lineno + 1
            )));
        };
        let cols: Vec<String> =
            cols.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
        if cols.is_empty() {
            return Err(Error::Invalid(format!(
                "{}:{}: unit '{name}' lists no columns",
                path.display(),
                lineno + 1
            )));
        }
        units.push((name.to_string(), cols));
    }
    if units.is_empty() {
        return Err(Error::Invalid(format!("{}: no units defined", path.display())));
    }
    Ok(units)
}

/// Format a float so that parsing the text recovers the exact bits.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// One-hot expand every column of a categorical code matrix. Returns
/// the expanded matrix, its column names, and for each original column
/// the range of expanded indices it produced.
fn one_hot_expand(
    matrix: &DMatrix<f64>,
    names: &[String],
) -> (DMatrix<f64>, Vec<String>, Vec<(usize, usize)>) {
    let n = matrix.nrows();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut out_names = Vec::new();
    let mut blocks = Vec::new();
    for j in 0..matrix.ncols() {
        let mut levels: Vec<f64> = matrix.column(j).iter().cloned().collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        let start = columns.len();
        for &lv in &levels {
            let col: Vec<f64> =
                (0..n).map(|i| if matrix[(i, j)] == lv { 1.0 } else { 0.0 }).collect();
            columns.push(col);
            out_names.push(format!("{}={}", names[j], fmt_f64(lv)));
        }
        blocks.push((start, columns.len()));
    }
    let p = columns.len();
    let expanded = DMatrix::from_fn(n, p, |i, j| columns[j][i]);
    (expanded, out_names, blocks)
}

fn resolve_units(
    spec: &[(String, Vec<String>)],
    column_names: &[String],
    blocks: Option<&[(usize, usize)]>,
    raw_names: &[String],
    view: &str,
) -> Result<Vec<UnitGroup>> {
    let mut out = Vec::with_capacity(spec.len());
    for (name, cols) in spec {
        let mut idx = Vec::new();
        for c in cols {
            match blocks {
                // categorical: unit files reference raw column names,
                // which map to their one-hot blocks
                Some(blocks) => {
                    let j = raw_names.iter().position(|n| n == c).ok_or_else(|| {
                        Error::Invalid(format!("view {view}: unit '{name}' references unknown column '{c}'"))
                    })?;
                    idx.extend(blocks[j].0..blocks[j].1);
                }
                None => {
                    let j = column_names.iter().position(|n| n == c).ok_or_else(|| {
                        Error::Invalid(format!("view {view}: unit '{name}' references unknown column '{c}'"))
                    })?;
                    idx.push(j);
                }
            }
        }
        out.push(UnitGroup { name: name.clone(), columns: idx });
    }
    Ok(out)
}

/// Load and validate a dataset from a manifest file.
///
/// Subjects must appear in the same order in every file; any row with a
/// missing value in the phenotype, a covariate, or any view is dropped
/// (complete-case filtering) and counted in `dropped`.
pub fn load_dataset(manifest_path: &Path) -> Result<MultiViewDataset> {
    let manifest = parse_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let get = |key: &str| -> Result<&str> {
        manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Invalid(format!("manifest is missing '{key}'")))
    };
    let zscore = match manifest.get("zscore").map(String::as_str) {
        None | Some("false") => false,
        Some("true") => true,
        Some(other) => {
            return Err(Error::Invalid(format!("zscore must be true or false, got '{other}'")))
        }
    };

    let pheno = parse_tsv(&dir.join(get("phenotype")?))?;
    if pheno.column_names.len() != 1 {
        return Err(Error::Invalid(format!(
            "phenotype file must have exactly one column, found {}",
            pheno.column_names.len()
        )));
    }
    let covar = parse_tsv(&dir.join(get("covariates")?))?;

    let mut raw_views = Vec::new();
    for v in 1..=3 {
        let table = parse_tsv(&dir.join(get(&format!("view{v}"))?))?;
        let (kind, expanded) = ViewKind::parse(get(&format!("view{v}_kind"))?)?;
        let kernel: KernelSpec = get(&format!("view{v}_kernel"))?.parse()?;
        let units = match manifest.get(&format!("view{v}_units")) {
            Some(f) => Some(parse_unit_file(&dir.join(f))?),
            None => None,
        };
        raw_views.push((table, kind, expanded, kernel, units));
    }

    // subject order must agree everywhere
    let ids = &pheno.subject_ids;
    for (tbl, label) in std::iter::once((&covar, "covariates".to_string())).chain(
        raw_views.iter().enumerate().map(|(i, v)| (&v.0, format!("view{}", i + 1))),
    ) {
        if &tbl.subject_ids != ids {
            return Err(Error::Invalid(format!(
                "{label}: subject IDs do not match the phenotype file (same subjects in the same order are required)"
            )));
        }
    }

    // complete-case filtering
    let n_raw = ids.len();
    let keep: Vec<usize> = (0..n_raw)
        .filter(|&i| {
            pheno.cells[i].iter().all(Option::is_some)
                && covar.cells[i].iter().all(Option::is_some)
                && raw_views.iter().all(|v| v.0.cells[i].iter().all(Option::is_some))
        })
        .collect();
    let n = keep.len();
    let dropped = n_raw - n;
    if n == 0 {
        return Err(Error::Invalid("no subjects remain after removing rows with missing values".into()));
    }

    let subject_ids: Vec<String> = keep.iter().map(|&i| ids[i].clone()).collect();
    let y = DVector::from_fn(n, |i, _| pheno.cells[keep[i]][0].unwrap());

    // covariates with intercept prepended
    let q = covar.column_names.len() + 1;
    if q > n - 1 {
        return Err(Error::Invalid(format!(
            "need q <= n - 1 covariate columns (q={q} with intercept, n={n})"
        )));
    }
    let x = DMatrix::from_fn(n, q, |i, j| {
        if j == 0 {
            1.0
        } else {
            covar.cells[keep[i]][j - 1].unwrap()
        }
    });
    let mut covariate_names = vec!["intercept".to_string()];
    covariate_names.extend(covar.column_names.iter().cloned());
    let rank = x.clone().svd(false, false).rank(1e-9 * n as f64);
    if rank < q {
        return Err(Error::Invalid(format!(
            "covariate matrix is rank-deficient (rank {rank} < {q} columns including intercept)"
        )));
    }

    let mut views = Vec::new();
    let mut specs = Vec::new();
    let mut units_out: [Vec<UnitGroup>; 3] = Default::default();
    for (v, (table, kind, already_expanded, kernel, unit_spec)) in raw_views.into_iter().enumerate()
    {
        let p = table.column_names.len();
        if p == 0 {
            return Err(Error::Invalid(format!("view{}: no feature columns", v + 1)));
        }
        let mut matrix = DMatrix::from_fn(n, p, |i, j| table.cells[keep[i]][j].unwrap());
        let mut column_names = table.column_names.clone();
        let mut blocks: Option<Vec<(usize, usize)>> = None;
        match kind {
            ViewKind::Genotype => {
                for j in 0..p {
                    for i in 0..n {
                        let g = matrix[(i, j)];
                        if g != 0.0 && g != 1.0 && g != 2.0 {
                            return Err(Error::Invalid(format!(
                                "view{}: invalid genotype code {} in column '{}' (subject {})",
                                v + 1,
                                fmt_f64(g),
                                column_names[j],
                                subject_ids[i]
                            )));
                        }
                    }
                }
            }
            ViewKind::Categorical if !already_expanded => {
                let (m, names, b) = one_hot_expand(&matrix, &column_names);
                matrix = m;
                column_names = names;
                blocks = Some(b);
            }
            ViewKind::Categorical => {}
            ViewKind::Quantitative => {
                if zscore {
                    for j in 0..p {
                        let col = matrix.column(j);
                        let mean = col.mean();
                        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                            / (n as f64 - 1.0);
                        if var <= 0.0 {
                            return Err(Error::Invalid(format!(
                                "view{}: cannot z-score constant column '{}'",
                                v + 1,
                                column_names[j]
                            )));
                        }
                        let sd = var.sqrt();
                        for i in 0..n {
                            matrix[(i, j)] = (matrix[(i, j)] - mean) / sd;
                        }
                    }
                }
            }
        }
        let units = match unit_spec {
            Some(spec) => resolve_units(
                &spec,
                &column_names,
                blocks.as_deref(),
                &table.column_names,
                &format!("{}", v + 1),
            )?,
            None => match &blocks {
                // default: every raw column is its own unit
                Some(blocks) => table
                    .column_names
                    .iter()
                    .zip(blocks)
                    .map(|(name, &(a, b))| UnitGroup { name: name.clone(), columns: (a..b).collect() })
                    .collect(),
                None => column_names
                    .iter()
                    .enumerate()
                    .map(|(j, name)| UnitGroup { name: name.clone(), columns: vec![j] })
                    .collect(),
            },
        };
        units_out[v] = units;
        views.push(FeatureView { name: format!("view{}", v + 1), kind, matrix, column_names });
        specs.push(kernel);
    }

    let views: [FeatureView; 3] = views.try_into().map_err(|_| Error::Invalid("expected 3 views".into()))?;
    let kernel_specs: [KernelSpec; 3] =
        specs.try_into().map_err(|_| Error::Invalid("expected 3 kernel specs".into()))?;
    let catalog = TripletCatalog { units: units_out };
    for (v, units) in catalog.units.iter().enumerate() {
        for u in units {
            for &c in &u.columns {
                if c >= views[v].matrix.ncols() {
                    return Err(Error::Invalid(format!(
                        "view{}: unit '{}' references column index {c} out of range",
                        v + 1,
                        u.name
                    )));
                }
            }
        }
    }

    Ok(MultiViewDataset {
        y,
        x,
        covariate_names,
        subject_ids,
        views,
        kernel_specs,
        catalog,
        dropped,
    })
}

fn write_tsv(
    path: &Path,
    id_label: &str,
    subject_ids: &[String],
    column_names: &[String],
    cell: impl Fn(usize, usize) -> f64,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(id_label);
    for c in column_names {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for (i, id) in subject_ids.iter().enumerate() {
        out.push_str(id);
        for j in 0..column_names.len() {
            let _ = write!(out, "\t{}", fmt_f64(cell(i, j)));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_units(path: &Path, units: &[UnitGroup], column_names: &[String]) -> Result<()> {
    let mut out = String::new();
    for u in units {
        let cols: Vec<&str> = u.columns.iter().map(|&c| column_names[c].as_str()).collect();
        let _ = writeln!(out, "{}\t{}", u.name, cols.join(","));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a dataset into `dir` in the manifest format and return the
/// manifest path. Reloading the result yields bit-identical matrices
/// (floats are written in shortest round-trip form; categorical views
/// are written as already-expanded one-hot columns).
pub fn write_dataset(dataset: &MultiViewDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    write_tsv(&dir.join("phenotype.tsv"), "subject", &dataset.subject_ids, &["y".to_string()], |i, _| {
        dataset.y[i]
    })?;
    write_tsv(
        &dir.join("covariates.tsv"),
        "subject",
        &dataset.subject_ids,
        &dataset.covariate_names[1..],
        |i, j| dataset.x[(i, j + 1)],
    )?;
    let mut manifest = String::new();
    manifest.push_str("phenotype = phenotype.tsv\ncovariates = covariates.tsv\n");
    for (v, view) in dataset.views.iter().enumerate() {
        let stem = format!("view{}", v + 1);
        write_tsv(
            &dir.join(format!("{stem}.tsv")),
            "subject",
            &dataset.subject_ids,
            &view.column_names,
            |i, j| view.matrix[(i, j)],
        )?;
        write_units(&dir.join(format!("{stem}_units.tsv")), &dataset.catalog.units[v], &view.column_names)?;
        let kind = match view.kind {
            ViewKind::Genotype => "genotype",
            ViewKind::Quantitative => "quantitative",
            // categorical views are stored expanded, so mark them as
            // such to keep reloads bit-identical
            ViewKind::Categorical => "categorical-expanded",
        };
        let _ = writeln!(manifest, "{stem} = {stem}.tsv");
        let _ = writeln!(manifest, "{stem}_kind = {kind}");
        let _ = writeln!(manifest, "{stem}_kernel = {}", dataset.kernel_specs[v]);
        let _ = writeln!(manifest, "{stem}_units = {stem}_units.tsv");
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;

    fn write(path: &Path, content: &str) {
        std::fs::write(path, content).unwrap();
    }

    fn toy_manifest(dir: &Path) -> PathBuf {
        write(
            &dir.join("pheno.tsv"),
            "subject\ty\ns1\t1.5\ns2\t2.5\ns3\t-0.5\ns4\t0.25\n",
        );
        write(
            &dir.join("covar.tsv"),
            "subject\tage\tbmi\ns1\t50\t21\ns2\t61\t24\ns3\t55\t27\ns4\t70\t23\n",
        );
        write(
            &dir.join("geno.tsv"),
            "subject\tsnp1\tsnp2\ns1\t0\t1\ns2\t2\t0\ns3\t1\t1\ns4\t0\t2\n",
        );
        write(
            &dir.join("topo.tsv"),
            "subject\tt1\tt2\ns1\t0.1\t-0.3\ns2\t0.8\t0.55\ns3\t-1.25\t0.125\ns4\t0.5\t1.75\n",
        );
        write(
            &dir.join("cat.tsv"),
            "subject\tc1\tc2\ns1\t0\t3\ns2\t1\t3\ns3\t2\t5\ns4\t0\t5\n",
        );
        let manifest = "phenotype = pheno.tsv\ncovariates = covar.tsv\n\
            view1 = geno.tsv\nview1_kind = genotype\nview1_kernel = ibs\n\
            view2 = topo.tsv\nview2_kind = quantitative\nview2_kernel = gauss\n\
            view3 = cat.tsv\nview3_kind = categorical\nview3_kernel = gauss:sigma=1.5\n";
        let path = dir.join("manifest.txt");
        write(&path, manifest);
        path
    }

    #[test]
    fn toy_round_trip_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(&toy_manifest(dir.path())).unwrap();
        assert_eq!(ds.y.len(), 4);
        assert_eq!(ds.x.shape(), (4, 3));
        assert!(ds.x.column(0).iter().all(|&v| v == 1.0));
        assert_eq!(ds.dropped, 0);
        assert_eq!(ds.views[0].matrix.shape(), (4, 2));
        // c1 has levels {0,1,2}, c2 has {3,5} -> 5 one-hot columns
        assert_eq!(ds.views[2].matrix.shape(), (4, 5));
        assert_eq!(
            ds.views[2].column_names,
            vec!["c1=0", "c1=1", "c1=2", "c2=3", "c2=5"]
        );
        // row s2: c1=1, c2=3
        assert_eq!(
            ds.views[2].matrix.row(1).iter().cloned().collect::<Vec<_>>(),
            vec![0.0, 1.0, 0.0, 1.0, 0.0]
        );
        assert!(matches!(ds.kernel_specs[2], KernelSpec::Gaussian { bandwidth: Some(b) } if b == 1.5));
        // default units: one per raw column; categorical units span blocks
        assert_eq!(ds.catalog.units[0].len(), 2);
        assert_eq!(ds.catalog.units[2].len(), 2);
        assert_eq!(ds.catalog.units[2][0].columns, vec![0, 1, 2]);
        assert_eq!(ds.catalog.units[2][1].columns, vec![3, 4]);
        assert_eq!(ds.catalog.len(), 2 * 2 * 2);
    }

    #[test]
    fn missing_values_drop_complete_cases() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_manifest(dir.path());
        // one covariate only (so q <= n-1 still holds after the drop),
        // with a blank cell for s3
        write(
            &dir.path().join("covar.tsv"),
            "subject\tage\ns1\t50\ns2\t61\ns3\t\ns4\t70\n",
        );
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.dropped, 1);
        assert_eq!(ds.y.len(), 3);
        assert_eq!(ds.subject_ids, vec!["s1", "s2", "s4"]);
        assert_eq!(ds.views[1].matrix.nrows(), 3);
    }

    #[test]
    fn invalid_genotype_code_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_manifest(dir.path());
        write(
            &dir.path().join("geno.tsv"),
            "subject\tsnp1\tsnp2\ns1\t0\t1\ns2\t3\t0\ns3\t1\t1\ns4\t0\t2\n",
        );
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("invalid genotype code"), "{err}");
    }

    #[test]
    fn subject_order_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_manifest(dir.path());
        write(
            &dir.path().join("topo.tsv"),
            "subject\tt1\tt2\ns2\t0.8\t0.55\ns1\t0.1\t-0.3\ns3\t-1.25\t0.125\ns4\t0.5\t1.75\n",
        );
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("subject IDs"), "{err}");
    }

    #[test]
    fn rank_deficient_covariates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_manifest(dir.path());
        // bmi = 2 * age makes X rank-deficient
        write(
            &dir.path().join("covar.tsv"),
            "subject\tage\tbmi\ns1\t50\t100\ns2\t61\t122\ns3\t55\t110\ns4\t70\t140\n",
        );
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("rank-deficient"), "{err}");
    }

    #[test]
    fn zscore_flag_standardizes_quantitative_views() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_manifest(dir.path());
        let mut manifest = std::fs::read_to_string(&path).unwrap();
        manifest.push_str("zscore = true\n");
        write(&path, &manifest);
        let ds = load_dataset(&path).unwrap();
        for j in 0..2 {
            let col = ds.views[1].matrix.column(j);
            let mean = col.mean();
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12, "column {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-12, "column {j} var {var}");
        }
        // genotype view untouched
        assert_eq!(ds.views[0].matrix[(1, 0)], 2.0);
    }

    #[test]
    fn unit_files_resolve_names_and_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_manifest(dir.path());
        write(&dir.path().join("geno_units.tsv"), "geneA\tsnp1,snp2\n");
        write(&dir.path().join("cat_units.tsv"), "grp\tc2,c1\n");
        let mut manifest = std::fs::read_to_string(&path).unwrap();
        manifest.push_str("view1_units = geno_units.tsv\nview3_units = cat_units.tsv\n");
        write(&path, &manifest);
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.catalog.units[0], vec![UnitGroup { name: "geneA".into(), columns: vec![0, 1] }]);
        // c2 block then c1 block, in the listed order
        assert_eq!(ds.catalog.units[2][0].columns, vec![3, 4, 0, 1, 2]);
        // one unit in views 1 and 3, two in view 2
        assert_eq!(ds.catalog.len(), 2);
    }

    #[test]
    fn write_then_reload_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(&toy_manifest(dir.path())).unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, out.path()).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(ds.y, back.y);
        assert_eq!(ds.x, back.x);
        assert_eq!(ds.subject_ids, back.subject_ids);
        for v in 0..3 {
            assert_eq!(ds.views[v].matrix, back.views[v].matrix, "view {v}");
            assert_eq!(ds.views[v].column_names, back.views[v].column_names);
            assert_eq!(ds.views[v].kind, back.views[v].kind);
            assert_eq!(ds.catalog.units[v], back.catalog.units[v]);
            assert_eq!(ds.kernel_specs[v], back.kernel_specs[v]);
        }
        // awkward floats survive exactly
        let mut tricky = ds.clone();
        tricky.y[0] = 0.1 + 0.2; // 0.30000000000000004
        tricky.y[1] = f64::MIN_POSITIVE;
        tricky.y[2] = 1.0 / 3.0;
        let manifest = write_dataset(&tricky, out.path()).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(tricky.y, back.y);
    }

    #[test]
    fn triplet_enumeration_is_lazy_lexicographic() {
        let mk = |prefix: &str, k: usize| -> Vec<UnitGroup> {
            (0..k).map(|i| UnitGroup { name: format!("{prefix}{i}"), columns: vec![i] }).collect()
        };
        let catalog = TripletCatalog { units: [mk("a", 2), mk("b", 2), mk("c", 2)] };
        let names: Vec<String> = enumerate_triplets(&catalog)
            .map(|(a, b, c)| format!("{}{}{}", a.name, b.name, c.name))
            .collect();
        assert_eq!(
            names,
            vec!["a0b0c0", "a0b0c1", "a0b1c0", "a0b1c1", "a1b0c0", "a1b0c1", "a1b1c0", "a1b1c1"]
        );
        let single = TripletCatalog { units: [mk("a", 1), mk("b", 1), mk("c", 1)] };
        assert_eq!(enumerate_triplets(&single).count(), 1);
        // million-triplet catalog: count without materializing
        let big = TripletCatalog { units: [mk("g", 72), mk("r", 116), mk("m", 129)] };
        assert_eq!(big.len(), 1_077_408);
        assert_eq!(enumerate_triplets(&big).count(), 1_077_408);
    }
}
