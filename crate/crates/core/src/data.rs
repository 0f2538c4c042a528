//! Masked datasets: CSV I/O, windowing, standardization and splitting.
//!
//! Mask convention: `m = 1` marks an observed entry. The optional artificial
//! mask `a` marks observed entries that are held out from conditioning
//! during pretraining (`a = 1` implies `m = 1`).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Shape of a flattened window: `features · steps` columns, laid out
/// feature-major (`column = feature * steps + step`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisMeta {
    pub features: usize,
    pub steps: usize,
}

impl AxisMeta {
    pub fn column(&self, feature: usize, step: usize) -> usize {
        feature * self.steps + step
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDataset {
    /// Model-facing values; `0.0` placeholder wherever `m = 0`.
    pub x: Tensor,
    pub m: Tensor,
    pub a: Option<Tensor>,
    /// Complete ground truth, when known (synthetic data, simulations).
    pub truth: Option<Tensor>,
    pub axis_meta: Option<AxisMeta>,
}

impl MaskedDataset {
    pub fn new(x: Tensor, m: Tensor) -> Result<Self> {
        let ds = Self {
            x,
            m,
            a: None,
            truth: None,
            axis_meta: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Fully observed dataset over `truth`.
    pub fn complete(truth: Tensor) -> Result<Self> {
        let m = Tensor::full(truth.shape(), 1.0);
        let mut ds = Self::new(truth.clone(), m)?;
        ds.truth = Some(truth);
        Ok(ds)
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn cols(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.shape().len() != 2 {
            return Err(Error::Shape(format!("dataset must be a matrix, got {:?}", self.x.shape())));
        }
        self.x.ensure_same_shape(&self.m, "values vs mask")?;
        for (i, (&v, &mk)) in self.x.values().iter().zip(self.m.values()).enumerate() {
            if mk != 0.0 && mk != 1.0 {
                return Err(Error::Data(format!("mask entry {i} is {mk}, expected 0 or 1")));
            }
            if mk == 1.0 && !v.is_finite() {
                return Err(Error::Data(format!("observed entry {i} is not finite")));
            }
        }
        if let Some(a) = &self.a {
            a.ensure_same_shape(&self.m, "artificial mask vs mask")?;
            for (i, (&av, &mk)) in a.values().iter().zip(self.m.values()).enumerate() {
                if av != 0.0 && av != 1.0 {
                    return Err(Error::Data(format!("artificial mask entry {i} is {av}")));
                }
                if av > mk {
                    return Err(Error::Data(format!(
                        "artificial mask selects unobserved entry {i}"
                    )));
                }
            }
        }
        if let Some(t) = &self.truth {
            t.ensure_same_shape(&self.x, "truth vs values")?;
        }
        if let Some(meta) = self.axis_meta {
            if meta.features * meta.steps != self.cols() {
                return Err(Error::Data(format!(
                    "axis meta {}×{} does not cover {} columns",
                    meta.features,
                    meta.steps,
                    self.cols()
                )));
            }
        }
        Ok(())
    }

    /// Observed values with zeros at missing entries.
    pub fn observed(&self) -> Tensor {
        self.x.zip_map(&self.m, |v, m| if m == 1.0 { v } else { 0.0 }).unwrap()
    }

    /// Conditioning mask for pretraining: observed and not artificially held out.
    pub fn conditioning_mask(&self) -> Tensor {
        match &self.a {
            Some(a) => self.m.zip_map(a, |m, a| m - a).unwrap(),
            None => self.m.clone(),
        }
    }

    pub fn missing_ratio(&self) -> f64 {
        1.0 - self.m.mean()
    }

    /// Replaces the observed mask, zeroing newly hidden placeholders. The
    /// artificial mask is dropped.
    pub fn with_mask(&self, m: Tensor) -> Result<Self> {
        m.ensure_same_shape(&self.x, "new mask")?;
        let base = self.truth.as_ref().unwrap_or(&self.x);
        let x = base.zip_map(&m, |v, mk| if mk == 1.0 { v } else { 0.0 })?;
        let ds = Self {
            x,
            m,
            a: None,
            truth: self.truth.clone(),
            axis_meta: self.axis_meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            m: self.m.select_rows(idx),
            a: self.a.as_ref().map(|a| a.select_rows(idx)),
            truth: self.truth.as_ref().map(|t| t.select_rows(idx)),
            axis_meta: self.axis_meta,
        }
    }
}

fn parse_cell(cell: &str, missing_token: &str, row: usize, col: usize) -> Result<Option<f64>> {
    let c = cell.trim();
    if c.is_empty() || c == missing_token || c.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    c.parse::<f64>()
        .map_err(|e| Error::Parse {
            row,
            col,
            msg: format!("`{c}`: {e}"),
        })
        .and_then(|v| {
            if v.is_finite() {
                Ok(Some(v))
            } else {
                Err(Error::Parse {
                    row,
                    col,
                    msg: format!("non-finite value `{c}`"),
                })
            }
        })
}

/// Parses CSV text. Missing cells (empty, `missing_token`, or `NaN`) get
/// `m = 0` and a `0.0` placeholder. Rows and columns in errors are 1-based.
pub fn parse_csv(text: &str, has_header: bool, missing_token: &str) -> Result<MaskedDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    if has_header {
        lines.next();
    }
    let mut values = Vec::new();
    let mut mask = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0;
    for (lineno, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Parse {
                    row: lineno + 1,
                    col: cells.len().min(w) + 1,
                    msg: format!("expected {w} columns, found {}", cells.len()),
                })
            }
            _ => {}
        }
        for (j, cell) in cells.iter().enumerate() {
            match parse_cell(cell, missing_token, lineno + 1, j + 1)? {
                Some(v) => {
                    values.push(v);
                    mask.push(1.0);
                }
                None => {
                    values.push(0.0);
                    mask.push(0.0);
                }
            }
        }
        rows += 1;
    }
    let Some(width) = width else {
        return Err(Error::Data("no rows".into()));
    };
    MaskedDataset::new(
        Tensor::matrix(rows, width, values)?,
        Tensor::matrix(rows, width, mask)?,
    )
}

pub fn load_csv(path: impl AsRef<Path>, has_header: bool, missing_token: &str) -> Result<MaskedDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, has_header, missing_token)
}

/// Renders a matrix as CSV using shortest round-trip float formatting.
/// Entries with `mask = 0` (when a mask is given) are written as `NaN`.
pub fn to_csv(values: &Tensor, mask: Option<&Tensor>, header: Option<&[String]>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for i in 0..values.rows() {
        let row = values.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let hidden = mask.is_some_and(|m| m.get(i, j) == 0.0);
            if hidden || v.is_nan() {
                out.push_str("NaN");
            } else {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, values: &Tensor, mask: Option<&Tensor>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv(values, mask, None)).map_err(|e| Error::io(path, e))
}

/// Slides windows of length `window_len` over a `[time × features]` dataset.
pub fn window_dataset(series: &MaskedDataset, window_len: usize, stride: usize) -> Result<MaskedDataset> {
    let total = series.rows();
    let k = series.cols();
    if window_len == 0 || stride == 0 {
        return Err(Error::InvalidArgument("window length and stride must be ≥ 1".into()));
    }
    if window_len > total {
        return Err(Error::InvalidArgument(format!(
            "window length {window_len} exceeds series length {total}"
        )));
    }
    let n = (total - window_len) / stride + 1;
    let meta = AxisMeta {
        features: k,
        steps: window_len,
    };
    let flatten = |src: &Tensor| -> Tensor {
        let mut v = vec![0.0; n * k * window_len];
        for w in 0..n {
            let start = w * stride;
            for f in 0..k {
                for s in 0..window_len {
                    v[w * k * window_len + meta.column(f, s)] = src.get(start + s, f);
                }
            }
        }
        Tensor::matrix(n, k * window_len, v).unwrap()
    };
    let ds = MaskedDataset {
        x: flatten(&series.x),
        m: flatten(&series.m),
        a: series.a.as_ref().map(&flatten),
        truth: series.truth.as_ref().map(&flatten),
        axis_meta: Some(meta),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn window_series(series: &Tensor, window_len: usize, stride: usize) -> Result<MaskedDataset> {
    window_dataset(&MaskedDataset::complete(series.clone())?, window_len, stride)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean/std per column over observed entries.
    pub fn fit(ds: &MaskedDataset) -> Result<Self> {
        let d = ds.cols();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            let obs: Vec<f64> = (0..ds.rows())
                .filter(|&i| ds.m.get(i, j) == 1.0)
                .map(|i| ds.x.get(i, j))
                .collect();
            if obs.is_empty() {
                return Err(Error::Data(format!("column {j} has no observed entries")));
            }
            let mu = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / obs.len() as f64;
            let sd = var.sqrt();
            mean[j] = mu;
            std[j] = if sd < 1e-12 { 1.0 } else { sd };
        }
        Ok(Self { mean, std })
    }

    pub fn cols(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.cols() != self.cols() {
            return Err(Error::Shape(format!(
                "stats cover {} columns, data has {}",
                self.cols(),
                t.cols()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let mut out = t.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }

    pub fn invert(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let mut out = t.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        Ok(out)
    }

    /// Stats for a windowed layout: feature `f`'s stats repeated over its steps.
    pub fn tile_for_windows(&self, meta: AxisMeta) -> Result<Self> {
        if self.cols() != meta.features {
            return Err(Error::Shape(format!(
                "stats cover {} features, windows have {}",
                self.cols(),
                meta.features
            )));
        }
        let mut mean = Vec::with_capacity(meta.features * meta.steps);
        let mut std = Vec::with_capacity(meta.features * meta.steps);
        for f in 0..meta.features {
            for _ in 0..meta.steps {
                mean.push(self.mean[f]);
                std.push(self.std[f]);
            }
        }
        Ok(Self { mean, std })
    }
}

/// Standardizes observed values (and ground truth, when present) with
/// `stats`, or with stats fitted on `ds` itself. Missing placeholders stay 0.
pub fn standardize(ds: &MaskedDataset, stats: Option<&NormStats>) -> Result<(MaskedDataset, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(ds)?,
    };
    let x = stats
        .apply(&ds.x)?
        .zip_map(&ds.m, |v, m| if m == 1.0 { v } else { 0.0 })?;
    let truth = ds.truth.as_ref().map(|t| stats.apply(t)).transpose()?;
    let out = MaskedDataset {
        x,
        m: ds.m.clone(),
        a: ds.a.clone(),
        truth,
        axis_meta: ds.axis_meta,
    };
    Ok((out, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.valid, self.test];
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || self.train <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid split ratios {r:?}")));
        }
        if r.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios {r:?} sum above 1")));
        }
        Ok(())
    }

    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let count = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let sizes = [count(self.train), count(self.valid), count(self.test)];
        for (name, (&s, r)) in ["train", "valid", "test"]
            .iter()
            .zip(sizes.iter().zip([self.train, self.valid, self.test]))
        {
            if r > 0.0 && s == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} split is empty for {n} rows at ratio {r}"
                )));
            }
        }
        Ok(sizes)
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: MaskedDataset,
    pub valid: MaskedDataset,
    pub test: MaskedDataset,
}

/// Row partition into train/valid/test. With `shuffle = false` the splits
/// are contiguous blocks in the original order (timeline split).
pub fn split(ds: &MaskedDataset, ratios: SplitRatios, seed: u64, shuffle: bool) -> Result<Splits> {
    let n = ds.rows();
    let [a, b, c] = ratios.sizes(n)?;
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
    }
    let train = ds.select_rows(&idx[..a]);
    let valid = ds.select_rows(&idx[a..a + b]);
    let test = ds.select_rows(&idx[a + b..a + b + c]);
    Ok(Splits { train, valid, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_missing() {
        let ds = parse_csv("1,2\n3,NaN\n", false, "NaN").unwrap();
        assert_eq!(ds.m.values(), &[1.0, 1.0, 1.0, 0.0]);
        assert_eq!(ds.x.values(), &[1.0, 2.0, 3.0, 0.0]);
        let ds = parse_csv("a,b\n1,\n,4\n", true, "NA").unwrap();
        assert_eq!(ds.m.values(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn csv_errors() {
        match parse_csv("", false, "NaN") {
            Err(Error::Data(msg)) => assert_eq!(msg, "no rows"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_csv("1,2\n3\n", false, "NaN"),
            Err(Error::Parse { row: 2, .. })
        ));
        assert!(matches!(
            parse_csv("1,x\n", false, "NaN"),
            Err(Error::Parse { row: 1, col: 2, .. })
        ));
    }

    #[test]
    fn csv_all_present() {
        let ds = parse_csv("1,2,3\n4,5,6\n", false, "NaN").unwrap();
        assert!(ds.m.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn csv_float_round_trip() {
        let vals = vec![0.1, 1.0 / 3.0, -2.5e-300, 123456789.12345679];
        let t = Tensor::matrix(2, 2, vals.clone()).unwrap();
        let back = parse_csv(&to_csv(&t, None, None), false, "NaN").unwrap();
        assert_eq!(back.x.values(), &vals[..]);
    }

    #[test]
    fn window_counts() {
        let series = |t: usize| Tensor::matrix(t, 2, (0..t * 2).map(|v| v as f64).collect()).unwrap();
        assert_eq!(window_series(&series(24), 24, 1).unwrap().rows(), 1);
        let w = window_series(&series(48), 24, 24).unwrap();
        assert_eq!(w.rows(), 2);
        // disjoint: second window starts at t=24, feature 0 value = 48
        assert_eq!(w.x.get(1, 0), 48.0);
        assert_eq!(window_series(&series(30), 24, 2).unwrap().rows(), 4);
        assert!(window_series(&series(10), 24, 1).is_err());
    }

    #[test]
    fn window_layout_is_feature_major() {
        let s = Tensor::from_rows(&[vec![1.0, 10.0], vec![2.0, 20.0], vec![3.0, 30.0]]).unwrap();
        let w = window_series(&s, 3, 1).unwrap();
        assert_eq!(w.x.values(), &[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]);
        assert_eq!(w.axis_meta, Some(AxisMeta { features: 2, steps: 3 }));
    }

    #[test]
    fn standardize_two_values() {
        let ds = MaskedDataset::complete(Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap()).unwrap();
        let (z, stats) = standardize(&ds, None).unwrap();
        assert_eq!(z.x.values(), &[-1.0, 1.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn standardize_with_foreign_stats() {
        let train = MaskedDataset::complete(Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap()).unwrap();
        let test = MaskedDataset::complete(Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap()).unwrap();
        let (_, stats) = standardize(&train, None).unwrap();
        let (z, _) = standardize(&test, Some(&stats)).unwrap();
        assert!(z.x.mean().abs() > 1.0);
    }

    #[test]
    fn standardize_rejects_unobserved_column() {
        let ds = MaskedDataset::new(
            Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        match standardize(&ds, None) {
            Err(Error::Data(msg)) => assert!(msg.contains("column 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degenerate_column_gets_unit_std() {
        let ds = MaskedDataset::complete(Tensor::from_rows(&[vec![3.0], vec![3.0]]).unwrap()).unwrap();
        let stats = NormStats::fit(&ds).unwrap();
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = MaskedDataset::complete(Tensor::matrix(10, 1, (0..10).map(f64::from).collect()).unwrap())
            .unwrap();
        let r = SplitRatios { train: 0.8, valid: 0.1, test: 0.1 };
        let s = split(&ds, r, 3, true).unwrap();
        assert_eq!((s.train.rows(), s.valid.rows(), s.test.rows()), (8, 1, 1));
        let s2 = split(&ds, r, 3, true).unwrap();
        assert_eq!(s.train.x, s2.train.x);
        let all = split(&ds, SplitRatios { train: 1.0, valid: 0.0, test: 0.0 }, 0, false).unwrap();
        assert_eq!(all.train.rows(), 10);
        let tiny = MaskedDataset::complete(Tensor::zeros(&[3, 1])).unwrap();
        assert!(split(&tiny, r, 0, false).is_err());
    }

    #[test]
    fn artificial_mask_must_be_inside_observed() {
        let mut ds = MaskedDataset::new(Tensor::zeros(&[1, 2]), Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap())
            .unwrap();
        ds.a = Some(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        assert!(ds.validate().is_err());
    }
}
