//! Datasets: synthetic generators, CSV ingestion and deterministic splits.
//!
//! Every dataset carries a provenance record with a 64-bit FNV-1a hash of
//! its contents, so the hash changes exactly when the data does.

use std::fmt;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::oracle::MultiPoly;
use crate::rng;
use crate::tensor::DenseTensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("line {line}: column '{column}' holds non-numeric value '{value}'")]
    NonNumeric { line: u64, column: String, value: String },
    #[error("no column named '{0}'")]
    MissingColumn(String),
    #[error("dataset is empty")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `n x o` real targets.
    Regression(DenseTensor),
    Classification { labels: Vec<usize>, classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    /// Generator name and arguments, or the source file.
    pub source: String,
    /// Free-form detail, e.g. the coefficients of a generated target.
    pub detail: String,
    pub hash: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x d` inputs, one sample per row.
    pub inputs: DenseTensor,
    pub targets: Targets,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(inputs: DenseTensor, targets: Targets, source: impl Into<String>, detail: impl Into<String>) -> Result<Self> {
        if inputs.order() != 2 {
            return Err(DataError::InvalidArgument("inputs must be an n x d matrix".into()));
        }
        let n = inputs.rows();
        match &targets {
            Targets::Regression(t) => {
                if t.order() != 2 || t.rows() != n {
                    return Err(DataError::InvalidArgument(format!("{n} inputs but targets of shape {:?}", t.shape())));
                }
            }
            Targets::Classification { labels, classes } => {
                if labels.len() != n {
                    return Err(DataError::InvalidArgument(format!("{n} inputs but {} labels", labels.len())));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(DataError::LabelOutOfRange { label: bad, classes: *classes });
                }
            }
        }
        let hash = content_hash(&inputs, &targets);
        Ok(Self {
            inputs,
            targets,
            provenance: Provenance {
                source: source.into(),
                detail: detail.into(),
                hash,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn task(&self) -> Task {
        match self.targets {
            Targets::Regression(_) => Task::Regression,
            Targets::Classification { .. } => Task::Classification,
        }
    }

    /// Output width a model needs: target columns, or the class count.
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            Targets::Regression(t) => t.cols(),
            Targets::Classification { classes, .. } => *classes,
        }
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Rows `indices` in the given order; provenance notes the parent.
    pub fn subset(&self, indices: &[usize], tag: &str) -> Result<Self> {
        if indices.is_empty() {
            return Err(DataError::Empty);
        }
        let d = self.input_dim();
        let inputs = DenseTensor::new(vec![indices.len(), d], indices.iter().flat_map(|&i| self.input(i).iter().copied()).collect())
            .expect("consistent shape");
        let targets = match &self.targets {
            Targets::Regression(t) => Targets::Regression(
                DenseTensor::new(vec![indices.len(), t.cols()], indices.iter().flat_map(|&i| t.row(i).iter().copied()).collect())
                    .expect("consistent shape"),
            ),
            Targets::Classification { labels, classes } => Targets::Classification {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        };
        Self::new(inputs, targets, format!("{} [{tag}]", self.provenance.source), self.provenance.detail.clone())
    }
}

/// FNV-1a over the task tag, shapes and little-endian values.
pub fn content_hash(inputs: &DenseTensor, targets: &Targets) -> u64 {
    let mut h = FnvHasher::default();
    let put_u64 = |h: &mut FnvHasher, v: u64| h.write(&v.to_le_bytes());
    for &s in inputs.shape() {
        put_u64(&mut h, s as u64);
    }
    for v in inputs.data() {
        h.write(&v.to_le_bytes());
    }
    match targets {
        Targets::Regression(t) => {
            h.write(b"regression");
            for &s in t.shape() {
                put_u64(&mut h, s as u64);
            }
            for v in t.data() {
                h.write(&v.to_le_bytes());
            }
        }
        Targets::Classification { labels, classes } => {
            h.write(b"classification");
            put_u64(&mut h, *classes as u64);
            for &l in labels {
                put_u64(&mut h, l as u64);
            }
        }
    }
    h.finish()
}

/// All exponent tuples in `d` variables with total degree at most `degree`,
/// ordered by degree then lexicographically.
fn monomials(d: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(d: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == d - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            rec(d, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        let mut level = Vec::new();
        rec(d, total, &mut Vec::new(), &mut level);
        level.sort();
        out.extend(level);
    }
    out
}

/// `n` inputs uniform on `[-1, 1]^d` with a scalar target given by a random
/// polynomial of total degree `degree`. Every monomial up to that degree gets
/// a standard normal coefficient; the coefficient table is kept in the
/// provenance detail.
pub fn gen_poly_target(seed: u64, d: usize, degree: usize, n: usize) -> Result<Dataset> {
    if d == 0 || degree == 0 || n == 0 {
        return Err(DataError::InvalidArgument("d, degree and n must be positive".into()));
    }
    let mut coef_rng = rng::substream(seed, 0);
    let terms: Vec<(Vec<u32>, Vec<f64>)> = monomials(d, degree)
        .into_iter()
        .map(|e| (e, vec![rng::normal(&mut coef_rng, 1.0)]))
        .collect();
    let poly = MultiPoly::from_terms(d, 1, terms).expect("well-formed terms");
    let mut sample_rng = rng::substream(seed, 1);
    let inputs = DenseTensor::from_fn(&[n, d], |_| rng::uniform(&mut sample_rng, -1.0, 1.0));
    let targets: Vec<f64> = (0..n).map(|i| poly.eval(inputs.row(i)).expect("dimension matches")[0]).collect();
    Dataset::new(
        inputs,
        Targets::Regression(DenseTensor::new(vec![n, 1], targets).expect("n x 1")),
        format!("gen_poly_target(seed={seed}, d={d}, degree={degree}, n={n})"),
        poly.to_table(),
    )
}

/// Four Gaussian blobs of `n_per_corner` points around `(±1, ±1)`; label 1
/// where the corner has `z1 z2 > 0`, else 0.
pub fn gen_xor(seed: u64, n_per_corner: usize, sigma: f64) -> Result<Dataset> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(DataError::InvalidArgument(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if n_per_corner == 0 {
        return Err(DataError::InvalidArgument("n_per_corner must be positive".into()));
    }
    let mut rng = rng::stream(seed);
    let corners = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];
    let mut data = Vec::with_capacity(8 * n_per_corner);
    let mut labels = Vec::with_capacity(4 * n_per_corner);
    for &(a, b) in &corners {
        for _ in 0..n_per_corner {
            data.push(a + rng::normal(&mut rng, sigma));
            data.push(b + rng::normal(&mut rng, sigma));
            labels.push(usize::from(a * b > 0.0));
        }
    }
    Dataset::new(
        DenseTensor::new(vec![4 * n_per_corner, 2], data).expect("n x 2"),
        Targets::Classification { labels, classes: 2 },
        format!("gen_xor(seed={seed}, n_per_corner={n_per_corner}, sigma={sigma})"),
        "",
    )
}

/// `n` inputs uniform on `[-1, 1]^2` with target `z1 z2`.
pub fn gen_product(seed: u64, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(DataError::InvalidArgument("n must be positive".into()));
    }
    let mut rng = rng::stream(seed);
    let inputs = DenseTensor::from_fn(&[n, 2], |_| rng::uniform(&mut rng, -1.0, 1.0));
    let targets: Vec<f64> = (0..n).map(|i| inputs.at(i, 0) * inputs.at(i, 1)).collect();
    Dataset::new(
        inputs,
        Targets::Regression(DenseTensor::new(vec![n, 1], targets).expect("n x 1")),
        format!("gen_product(seed={seed}, n={n})"),
        "",
    )
}

/// Which CSV columns feed the model.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub target: CsvTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CsvTarget {
    Regression(Vec<String>),
    /// Integer labels; `classes` defaults to the largest label plus one.
    Classification { column: String, classes: Option<usize> },
}

impl CsvSchema {
    /// Every column but the last is a feature; the last is the target.
    pub fn last_column_target(header: &[String], task: Task) -> Result<Self> {
        let (last, rest) = header.split_last().ok_or(DataError::Empty)?;
        if rest.is_empty() {
            return Err(DataError::InvalidArgument("need at least one feature column".into()));
        }
        Ok(Self {
            features: rest.to_vec(),
            target: match task {
                Task::Regression => CsvTarget::Regression(vec![last.clone()]),
                Task::Classification => CsvTarget::Classification {
                    column: last.clone(),
                    classes: None,
                },
            },
        })
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Header row of a CSV file.
pub fn read_header(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(|e| io_err(path, e))?;
    Ok(rdr.headers().map_err(|e| io_err(path, e))?.iter().map(|s| s.trim().to_string()).collect())
}

/// Reads a headed, comma-separated file and validates it against `schema`.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| io_err(path, e))?.iter().map(|s| s.trim().to_string()).collect();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.to_string()));
    let feat_idx = schema.features.iter().map(|f| col(f)).collect::<Result<Vec<_>>>()?;
    let target_idx = match &schema.target {
        CsvTarget::Regression(cols) => cols.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?,
        CsvTarget::Classification { column, .. } => vec![col(column)?],
    };

    let mut inputs = Vec::new();
    let mut reals = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(DataError::Malformed {
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let number = |i: usize| -> Result<f64> {
            let cell = rec[i].trim();
            cell.parse::<f64>().map_err(|_| DataError::NonNumeric {
                line,
                column: header[i].clone(),
                value: cell.to_string(),
            })
        };
        for &i in &feat_idx {
            inputs.push(number(i)?);
        }
        match &schema.target {
            CsvTarget::Regression(_) => {
                for &i in &target_idx {
                    reals.push(number(i)?);
                }
            }
            CsvTarget::Classification { .. } => {
                let i = target_idx[0];
                let cell = rec[i].trim();
                let label = cell.parse::<usize>().map_err(|_| DataError::NonNumeric {
                    line,
                    column: header[i].clone(),
                    value: cell.to_string(),
                })?;
                labels.push(label);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(DataError::Empty);
    }
    let inputs = DenseTensor::new(vec![n, feat_idx.len()], inputs).expect("n x d");
    let targets = match &schema.target {
        CsvTarget::Regression(_) => Targets::Regression(DenseTensor::new(vec![n, target_idx.len()], reals).expect("n x o")),
        CsvTarget::Classification { classes, .. } => {
            let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
            Targets::Classification { labels, classes }
        }
    };
    Dataset::new(inputs, targets, format!("csv:{}", path.display()), "")
}

/// Writes `ds` with header `z1..zd` followed by `y1..yo` or `label`.
/// Floats use the shortest representation that parses back exactly.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header: Vec<String> = (1..=ds.input_dim()).map(|i| format!("z{i}")).collect();
    match &ds.targets {
        Targets::Regression(t) => header.extend((1..=t.cols()).map(|i| format!("y{i}"))),
        Targets::Classification { .. } => header.push("label".into()),
    }
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.input(i).iter().map(f64::to_string).collect();
        match &ds.targets {
            Targets::Regression(t) => row.extend(t.row(i).iter().map(f64::to_string)),
            Targets::Classification { labels, .. } => row.push(labels[i].to_string()),
        }
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// The CSV schema matching [`write_csv`] output for `ds`.
pub fn written_schema(ds: &Dataset) -> CsvSchema {
    CsvSchema {
        features: (1..=ds.input_dim()).map(|i| format!("z{i}")).collect(),
        target: match &ds.targets {
            Targets::Regression(t) => CsvTarget::Regression((1..=t.cols()).map(|i| format!("y{i}")).collect()),
            Targets::Classification { classes, .. } => CsvTarget::Classification {
                column: "label".into(),
                classes: Some(*classes),
            },
        },
    }
}

/// Headerless rows of `label, v1, v2, ...` (e.g. flattened pixel grids).
pub fn load_raw_grid(path: &Path, classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut width = None;
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for (no, line) in text.lines().enumerate() {
        let line_no = no as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if *width.get_or_insert(cells.len()) != cells.len() || cells.len() < 2 {
            return Err(DataError::Malformed {
                line: line_no,
                msg: format!("expected {} fields, found {}", width.unwrap_or(0), cells.len()),
            });
        }
        labels.push(cells[0].parse::<usize>().map_err(|_| DataError::NonNumeric {
            line: line_no,
            column: "label".into(),
            value: cells[0].into(),
        })?);
        for (j, c) in cells[1..].iter().enumerate() {
            data.push(c.parse::<f64>().map_err(|_| DataError::NonNumeric {
                line: line_no,
                column: format!("v{}", j + 1),
                value: c.to_string(),
            })?);
        }
    }
    let width = width.ok_or(DataError::Empty)? - 1;
    let n = labels.len();
    Dataset::new(
        DenseTensor::new(vec![n, width], data).expect("n x width"),
        Targets::Classification { labels, classes },
        format!("grid:{}", path.display()),
        "",
    )
}

/// Shuffled `(train, validation)` row indices; `round(fraction * n)` rows
/// go to training.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let cut = (fraction * n as f64).round() as usize;
    if cut == 0 || cut == n {
        return Err(DataError::InvalidArgument(format!("fraction {fraction} leaves an empty side of {n} rows")));
    }
    let perm = rng::permutation(&mut rng::stream(seed), n);
    Ok((perm[..cut].to_vec(), perm[cut..].to_vec()))
}

pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(ds.len(), fraction, seed)?;
    Ok((ds.subset(&a, "train")?, ds.subset(&b, "validation")?))
}

/// Mean squared residual of the least-squares affine fit of `targets`
/// (`n x o`) on `inputs` (`n x d`), averaged over all entries.
pub fn affine_lstsq_residual(inputs: &DenseTensor, targets: &DenseTensor) -> f64 {
    let (n, d) = (inputs.rows(), inputs.cols());
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j == d { 1.0 } else { inputs.at(i, j) });
    let svd = design.clone().svd(true, true);
    let mut total = 0.0;
    for c in 0..targets.cols() {
        let y = DVector::from_iterator(n, (0..n).map(|i| targets.at(i, c)));
        let w = svd.solve(&y, 1e-12).expect("singular vectors computed");
        let r = &design * w - &y;
        total += r.norm_squared();
    }
    total / (n * targets.cols()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn poly_target_degree_one_is_affine() {
        let ds = gen_poly_target(3, 3, 1, 50).unwrap();
        let Targets::Regression(t) = &ds.targets else { unreachable!() };
        assert!(affine_lstsq_residual(&ds.inputs, t) < 1e-10);
        assert_eq!(ds, gen_poly_target(3, 3, 1, 50).unwrap());
        assert!(ds.provenance.detail.contains("->"));
    }

    #[test]
    fn poly_target_degree_three_is_not_affine() {
        let ds = gen_poly_target(3, 2, 3, 200).unwrap();
        let Targets::Regression(t) = &ds.targets else { unreachable!() };
        assert!(affine_lstsq_residual(&ds.inputs, t) > 1e-3);
    }

    #[test]
    fn monomial_enumeration() {
        let m = monomials(2, 2);
        assert_eq!(m, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![0, 2], vec![1, 1], vec![2, 0]]);
        assert_eq!(monomials(3, 3).len(), 20);
    }

    #[test]
    fn noiseless_xor() {
        let ds = gen_xor(0, 1, 0.0).unwrap();
        assert_eq!(ds.len(), 4);
        let Targets::Classification { labels, classes } = &ds.targets else { unreachable!() };
        assert_eq!(*classes, 2);
        for i in 0..4 {
            let z = ds.input(i);
            assert_eq!(labels[i], usize::from(z[0] * z[1] > 0.0));
        }
        assert!(gen_xor(0, 1, -1.0).is_err());
    }

    #[test]
    fn noisy_xor_is_mostly_separated_by_sign() {
        let ds = gen_xor(7, 100, 0.2).unwrap();
        let Targets::Classification { labels, .. } = &ds.targets else { unreachable!() };
        let hits = (0..ds.len()).filter(|&i| usize::from(ds.input(i)[0] * ds.input(i)[1] > 0.0) == labels[i]).count();
        assert!(hits as f64 / ds.len() as f64 > 0.95);
    }

    #[test]
    fn product_floor_is_near_one_ninth() {
        let ds = gen_product(1, 4000).unwrap();
        let Targets::Regression(t) = &ds.targets else { unreachable!() };
        let floor = affine_lstsq_residual(&ds.inputs, t);
        assert!((floor - 1.0 / 9.0).abs() < 0.01, "{floor}");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for ds in [gen_poly_target(1, 2, 2, 17).unwrap(), gen_xor(2, 3, 0.3).unwrap()] {
            let path = dir.path().join("d.csv");
            write_csv(&ds, &path).unwrap();
            let back = load_csv(&path, &written_schema(&ds)).unwrap();
            assert_eq!(back.inputs, ds.inputs);
            assert_eq!(back.targets, ds.targets);
            assert_eq!(back.provenance.hash, ds.provenance.hash);
        }
    }

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let path = dir.path().join("in.csv");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let schema = CsvSchema {
            features: vec!["a".into(), "b".into()],
            target: CsvTarget::Regression(vec!["y".into()]),
        };
        let p = write(&dir, "a,b,y\n");
        assert!(matches!(load_csv(&p, &schema), Err(DataError::Empty)));
        let p = write(&dir, "a,b,y\n1,2,3\n4,5\n");
        assert!(matches!(load_csv(&p, &schema), Err(DataError::Malformed { line: 3, .. })));
        let p = write(&dir, "a,b,y\n1,x,3\n");
        let err = load_csv(&p, &schema).unwrap_err();
        assert!(matches!(&err, DataError::NonNumeric { line: 2, column, .. } if column == "b"), "{err}");
        let p = write(&dir, "a,c,y\n1,2,3\n");
        assert!(matches!(load_csv(&p, &schema), Err(DataError::MissingColumn(_))));
        assert!(matches!(load_csv(&dir.path().join("none.csv"), &schema), Err(DataError::Io { .. })));
    }

    #[test]
    fn csv_scientific_notation_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a,y\n1.5e-300,-2.5E+3\n");
        let ds = load_csv(&p, &CsvSchema::last_column_target(&read_header(&p).unwrap(), Task::Regression).unwrap()).unwrap();
        assert_eq!(ds.inputs.data(), &[1.5e-300]);
        let Targets::Regression(t) = &ds.targets else { unreachable!() };
        assert_eq!(t.data(), &[-2500.0]);
    }

    #[test]
    fn raw_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "1,0.5,0.25\n0,1,0\n");
        let ds = load_raw_grid(&p, 2).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 2]);
        let p = write(&dir, "1,0.5,0.25\n0,1\n");
        assert!(matches!(load_raw_grid(&p, 2), Err(DataError::Malformed { line: 2, .. })));
    }

    #[test]
    fn splits() {
        let ds = gen_product(0, 10).unwrap();
        let (a, b) = split(&ds, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let (ia, ib) = split_indices(10, 0.5, 3).unwrap();
        assert_eq!(split_indices(10, 0.5, 3).unwrap(), (ia.clone(), ib.clone()));
        let mut all: Vec<usize> = ia.iter().chain(&ib).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let mut rows: Vec<Vec<u64>> = (0..5).flat_map(|i| [a.input(i), b.input(i)]).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        let mut orig: Vec<Vec<u64>> = (0..10).map(|i| ds.input(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
        assert!(split(&ds, 1.0, 0).is_err());
        assert!(split(&ds, 0.0, 0).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = gen_product(0, 10).unwrap();
        let b = gen_product(0, 10).unwrap();
        assert_eq!(a.provenance.hash, b.provenance.hash);
        let mut inputs = a.inputs.clone();
        inputs.data_mut()[3] += 1e-12;
        let c = Dataset::new(inputs, a.targets.clone(), "x", "").unwrap();
        assert_ne!(a.provenance.hash, c.provenance.hash);
    }
}
