//! Datasets: the text file format, synthetic generators and stratified subsampling.
//!
//! File layout:
//!
//! ```text
//! #klnorm-ds v1 d=3 classes=2 train=2 dev=1 test=1
//! 0,0.5,-1,2
//! 1,1.25,0,0.75
//! ...
//! ```
//!
//! The `train`/`dev`/`test` header tokens are optional. When present, rows are
//! stored in split order; when absent every row belongs to the train split.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{SeedRng, Stream};
use crate::tensor::Tensor;

const MAGIC: &str = "#klnorm-ds";
const VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

/// Feature matrix with integer labels and disjoint split index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        train: Vec<usize>,
        dev: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            features,
            labels,
            n_classes,
            train,
            dev,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rank() != 2 {
            return Err(Error::invalid("dataset features must be a matrix"));
        }
        let n = self.features.rows();
        if self.labels.len() != n {
            return Err(Error::invalid(format!("{} labels for {n} rows", self.labels.len())));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("a dataset needs at least 2 classes"));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::invalid(format!("label {y} outside 0..{}", self.n_classes)));
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite { op: "dataset" });
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.dev).chain(&self.test) {
            if i >= n {
                return Err(Error::invalid(format!("split index {i} out of range for {n} rows")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("row {i} appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Features and labels of one split, in index-list order.
    pub fn split(&self, split: Split) -> (Tensor, Vec<usize>) {
        let idx = self.indices(split);
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Per-class counts over the given rows.
    pub fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &i in idx {
            counts[self.labels[i]] += 1;
        }
        counts
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses the text format; `path` is only used in error messages.
pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(MAGIC) || tokens.next() != Some(VERSION) {
        return Err(parse_err(path, 1, format!("expected header `{MAGIC} {VERSION} d=<d> classes=<C>`")));
    }
    let (mut d, mut classes, mut sizes) = (None, None, [None; 3]);
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(path, 1, format!("malformed header token {tok:?}")))?;
        let v: usize = v
            .parse()
            .map_err(|_| parse_err(path, 1, format!("header value {tok:?} is not an integer")))?;
        match k {
            "d" => d = Some(v),
            "classes" => classes = Some(v),
            "train" => sizes[0] = Some(v),
            "dev" => sizes[1] = Some(v),
            "test" => sizes[2] = Some(v),
            _ => return Err(parse_err(path, 1, format!("unknown header key {k:?}"))),
        }
    }
    let d = d.ok_or_else(|| parse_err(path, 1, "header lacks d=<d_in>"))?;
    let classes = classes.ok_or_else(|| parse_err(path, 1, "header lacks classes=<C>"))?;
    if d == 0 {
        return Err(parse_err(path, 1, "d must be positive"));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_str = fields.next().unwrap_or_default().trim();
        let label: usize = label_str
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("label {label_str:?} is not a class index")))?;
        if label >= classes {
            return Err(parse_err(path, lineno, format!("unknown label {label} (classes={classes})")));
        }
        let start = data.len();
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("feature {f:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, format!("non-finite feature {f:?}")));
            }
            data.push(v);
        }
        if data.len() - start != d {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {d} features, found {}", data.len() - start),
            ));
        }
        labels.push(label);
    }
    let n = labels.len();
    let (train, dev, test) = match sizes {
        [None, None, None] => ((0..n).collect(), Vec::new(), Vec::new()),
        [a, b, c] => {
            let (a, b, c) = (a.unwrap_or(0), b.unwrap_or(0), c.unwrap_or(0));
            if a + b + c != n {
                return Err(parse_err(path, 1, format!("split sizes sum to {} but file has {n} rows", a + b + c)));
            }
            ((0..a).collect(), (a..a + b).collect(), (a + b..n).collect())
        }
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let features = Tensor::new(vec![n, d], data)?;
    Dataset::new(name, features, labels, classes, train, dev, test).map_err(|e| parse_err(path, 1, e.to_string()))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, path)
}

/// Canonical text form. Rows are written train, then dev, then test; rows in
/// no split are dropped.
pub fn format_dataset(ds: &Dataset) -> String {
    let mut out = format!("{MAGIC} {VERSION} d={} classes={}", ds.d_in(), ds.n_classes);
    if !(ds.dev.is_empty() && ds.test.is_empty()) {
        let _ = write!(out, " train={} dev={} test={}", ds.train.len(), ds.dev.len(), ds.test.len());
    }
    out.push('\n');
    for &i in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
        let _ = write!(out, "{}", ds.labels[i]);
        for v in ds.features.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, format_dataset(ds))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// One isotropic Gaussian per class.
    GaussMix,
    /// `GaussMix` plus an appended spurious column that equals the scaled label
    /// in train and dev and is decorrelated from it in test.
    Biased,
}

impl std::fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SyntheticKind::GaussMix => "gauss_mix",
            SyntheticKind::Biased => "biased",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss_mix" | "gauss-mix" => Ok(SyntheticKind::GaussMix),
            "biased" => Ok(SyntheticKind::Biased),
            _ => Err(Error::invalid(format!("unknown synthetic kind {s:?} (gauss_mix, biased)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    /// Total examples across all splits.
    pub n: usize,
    /// Width of the class-informative features. `Biased` adds one more column.
    pub d_in: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub bias_strength: f64,
    /// Euclidean distance between any two class means.
    pub separation: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    /// Train and dev fractions; test gets the rest.
    pub fractions: (f64, f64),
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, n: usize, d_in: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            d_in,
            n_classes,
            seed,
            bias_strength: 1.0,
            separation: 4.0,
            noise: 1.0,
            fractions: (0.6, 0.2),
        }
    }
}

/// Class means at pairwise distance `separation`: scaled orthonormal
/// directions when `classes ≤ d`, scaled random unit vectors otherwise.
fn class_means(classes: usize, d: usize, separation: f64, rng: &mut SeedRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < classes {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if basis.len() < d {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    let scale = separation / std::f64::consts::SQRT_2;
    basis.into_iter().map(|b| b.into_iter().map(|x| x * scale).collect()).collect()
}

/// Splits `count` into train/dev/test sizes by rounding cumulative fractions.
fn split_sizes(count: usize, (ft, fd): (f64, f64)) -> [usize; 3] {
    let a = (count as f64 * ft).round() as usize;
    let b = ((count as f64 * (ft + fd)).round() as usize).max(a);
    [a, b - a, count - b]
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec {
        kind,
        n,
        d_in,
        n_classes,
        seed,
        bias_strength,
        separation,
        noise,
        fractions,
    } = *spec;
    if n_classes < 2 || d_in == 0 || n < n_classes {
        return Err(Error::invalid(format!(
            "make_synthetic: need n >= classes >= 2 and d_in >= 1 (n={n}, classes={n_classes}, d_in={d_in})"
        )));
    }
    let (ft, fd) = fractions;
    if !(ft > 0.0 && fd >= 0.0 && ft + fd <= 1.0) {
        return Err(Error::invalid(format!("make_synthetic: bad split fractions {fractions:?}")));
    }
    if !(separation >= 0.0 && noise > 0.0 && bias_strength.is_finite()) {
        return Err(Error::invalid("make_synthetic: separation >= 0, noise > 0 and finite bias strength required"));
    }
    let mut rng = SeedRng::new(seed, Stream::Data);
    let means = class_means(n_classes, d_in, separation, &mut rng);

    // balanced class sizes, remainder to the lowest classes
    let per_class: Vec<usize> = (0..n_classes)
        .map(|c| n / n_classes + usize::from(c < n % n_classes))
        .collect();
    let sizes: Vec<[usize; 3]> = per_class.iter().map(|&m| split_sizes(m, fractions)).collect();

    let width = d_in + usize::from(kind == SyntheticKind::Biased);
    let mut data = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    let mut bounds = [0usize; 3];
    for (s, bound) in bounds.iter_mut().enumerate() {
        let mut split_labels: Vec<usize> = Vec::new();
        let mut spurious: Vec<usize> = Vec::new();
        for (c, sz) in sizes.iter().enumerate() {
            for j in 0..sz[s] {
                split_labels.push(c);
                // in test the spurious value cycles through all classes within each class
                spurious.push(if s == 2 { (c + j) % n_classes } else { c });
            }
        }
        let order = rng.permutation(split_labels.len());
        for &k in &order {
            let c = split_labels[k];
            data.extend(means[c].iter().map(|m| m + noise * rng.normal()));
            if kind == SyntheticKind::Biased {
                data.push(bias_strength * spurious[k] as f64);
            }
            labels.push(c);
        }
        *bound = labels.len();
    }
    let features = Tensor::new(vec![n, width], data)?;
    Dataset::new(
        format!("{kind}-s{seed}"),
        features,
        labels,
        n_classes,
        (0..bounds[0]).collect(),
        (bounds[0]..bounds[1]).collect(),
        (bounds[1]..bounds[2]).collect(),
    )
}

/// Keeps a class-stratified sample of exactly `n` train rows; dev and test are
/// untouched. Quotas follow the largest-remainder rule, so each class gets its
/// proportional share rounded up or down. The kept indices are sorted.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let total = ds.train.len();
    if n > total {
        return Err(Error::invalid(format!("subsample: n={n} exceeds {total} train rows")));
    }
    if n == 0 {
        return Err(Error::invalid("subsample: n must be positive"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for &i in &ds.train {
        by_class[ds.labels[i]].push(i);
    }
    let mut quota: Vec<usize> = by_class.iter().map(|v| v.len() * n / total).collect();
    let mut left = n - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ds.n_classes).collect();
    // largest fractional remainder first; ties go to the lower class index
    order.sort_by_key(|&c| std::cmp::Reverse((by_class[c].len() * n) % total));
    for &c in &order {
        if left == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }
    let mut rng = SeedRng::new(seed, Stream::Subsample);
    let mut keep = Vec::with_capacity(n);
    for (c, members) in by_class.iter_mut().enumerate() {
        rng.shuffle(members);
        keep.extend_from_slice(&members[..quota[c]]);
    }
    keep.sort_unstable();
    let mut out = ds.clone();
    out.train = keep;
    Ok(out)
}

/// Pearson correlation; 0 when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "#klnorm-ds v1 d=2 classes=2\n0,0.5,-1\n1,1.25,3\n1,0,2e-3\n";

    #[test]
    fn parses_fixture() {
        let ds = parse_dataset(FIXTURE, Path::new("fx.txt")).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.d_in(), 2);
        assert_eq!(ds.labels, vec![0, 1, 1]);
        assert_eq!(ds.train, vec![0, 1, 2]);
        assert_eq!(ds.features.row(2), &[0.0, 0.002]);
        assert_eq!(ds.name, "fx");
    }

    #[test]
    fn wrong_width_names_the_line() {
        let bad = "#klnorm-ds v1 d=2 classes=2\n0,1,2\n1,1\n";
        let err = parse_dataset(bad, Path::new("bad.txt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.txt:3"), "{msg}");
        assert!(msg.contains("expected 2 features"), "{msg}");
    }

    #[test]
    fn rejects_unknown_label_and_bad_header() {
        let err = parse_dataset("#klnorm-ds v1 d=1 classes=2\n2,0.1\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("x:2: unknown label 2"));
        assert!(parse_dataset("label,f1\n", Path::new("x")).is_err());
        assert!(parse_dataset("#klnorm-ds v1 d=1 classes=2 train=5\n0,1\n", Path::new("x")).is_err());
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::Biased, 30, 3, 3, 9)).unwrap();
        let text = format_dataset(&ds);
        let back = parse_dataset(&text, Path::new("r.txt")).unwrap();
        assert_eq!(format_dataset(&back), text);
        assert_eq!(back.features, ds.features);
        assert_eq!((back.train.len(), back.dev.len(), back.test.len()), (18, 6, 6));
    }

    #[test]
    fn synthetic_is_deterministic_and_split() {
        let spec = SyntheticSpec::new(SyntheticKind::GaussMix, 100, 4, 2, 5);
        let a = make_synthetic(&spec).unwrap();
        assert_eq!(a, make_synthetic(&spec).unwrap());
        assert_ne!(a, make_synthetic(&SyntheticSpec { seed: 6, ..spec }).unwrap());
        assert_eq!(a.class_counts(&a.train), vec![30, 30]);
        assert_eq!(a.class_counts(&a.dev), vec![10, 10]);
        assert_eq!(a.class_counts(&a.test), vec![10, 10]);
    }

    #[test]
    fn class_means_are_equidistant() {
        let mut rng = SeedRng::new(0, Stream::Data);
        let m = class_means(3, 5, 4.0, &mut rng);
        for i in 0..3 {
            for j in 0..i {
                let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((d - 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn biased_correlations() {
        let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::Biased, 2500, 4, 2, 3)).unwrap();
        let corr = |split| {
            let (x, y) = ds.split(split);
            let s: Vec<f64> = (0..x.rows()).map(|i| x.get2(i, 4)).collect();
            let y: Vec<f64> = y.iter().map(|&v| v as f64).collect();
            pearson(&s, &y)
        };
        assert_eq!(corr(Split::Train), 1.0);
        assert_eq!(corr(Split::Dev), 1.0);
        assert!(corr(Split::Test).abs() < 0.1);
    }

    #[test]
    fn subsample_stratifies() {
        let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::GaussMix, 1000, 3, 2, 1)).unwrap();
        let s = subsample(&ds, 200, 13).unwrap();
        assert_eq!(s.train.len(), 200);
        assert_eq!(s.class_counts(&s.train), vec![100, 100]);
        assert_eq!((s.dev.clone(), s.test.clone()), (ds.dev.clone(), ds.test.clone()));
        let full = subsample(&ds, ds.train.len(), 13).unwrap();
        assert_eq!(full.train, ds.train);
        assert!(subsample(&ds, ds.train.len() + 1, 13).is_err());
        assert_ne!(subsample(&ds, 200, 42).unwrap().train, s.train);
    }

    #[test]
    fn subsample_uneven_classes_within_one() {
        let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::GaussMix, 301, 2, 3, 2)).unwrap();
        let total = ds.train.len();
        let counts = ds.class_counts(&ds.train);
        let s = subsample(&ds, 50, 0).unwrap();
        for (c, &k) in s.class_counts(&s.train).iter().enumerate() {
            let exact = counts[c] as f64 * 50.0 / total as f64;
            assert!((k as f64 - exact).abs() < 1.0, "class {c}: {k} vs {exact}");
        }
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), 0.0);
    }
}
