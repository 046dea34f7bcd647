//! CSV dataset layout.
//!
//! ```text
//! <root>/meta.json             manifest: classes, feature_dim, counts
//! <root>/examples.csv          f0,...,f{d-1}[,label]
//! <root>/bags/bag_<i>.csv      f0,...,f{d-1}
//! <root>/bags/prevalences.csv  id,p0,...,p{l-1}
//! <root>/test_bags/...         same layout as bags/
//! ```
//!
//! Values are written with Rust's shortest round-trip decimal formatting, so
//! features reload bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Bag, Dataset, Example, PrevalenceVector};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "meta.json";
pub const EXAMPLES_FILE: &str = "examples.csv";
pub const BAGS_DIR: &str = "bags";
pub const TEST_BAGS_DIR: &str = "test_bags";
pub const PREVALENCES_FILE: &str = "prevalences.csv";

/// Prevalence rows on disk carry rounded decimals.
const INGEST_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: usize,
    pub feature_dim: usize,
    pub examples: usize,
    pub bags: usize,
    #[serde(default)]
    pub test_bags: usize,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Parsed contents of an `examples.csv` file.
#[derive(Clone, Debug)]
pub struct ExampleFile {
    pub classes: usize,
    pub feature_dim: usize,
    pub examples: Vec<Example>,
    pub labeled: bool,
}

impl ExampleFile {
    pub fn into_dataset(self) -> Dataset {
        Dataset { classes: self.classes, feature_dim: self.feature_dim, examples: self.examples, bags: Vec::new() }
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file))
}

fn parse_cell(path: &Path, line: u64, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("non-numeric cell {:?}", cell)))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite cell {:?}", cell)));
    }
    Ok(v)
}

/// Parsed numeric rows tagged with their line numbers.
type Rows = Vec<(u64, Vec<f64>)>;

fn read_rows(path: &Path) -> Result<(csv::StringRecord, Rows)> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    let width = header.len();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(parse_err(path, line, format!("expected {} columns, found {}", width, rec.len())));
        }
        let vals = rec.iter().map(|c| parse_cell(path, line, c)).collect::<Result<Vec<_>>>()?;
        rows.push((line, vals));
    }
    Ok((header, rows))
}

/// Reads `f0,…,f{d−1}[,label]`. `classes` overrides the inferred class count.
pub fn load_examples_csv(path: &Path, classes: Option<usize>) -> Result<ExampleFile> {
    let (header, rows) = read_rows(path)?;
    let labeled = header.iter().next_back().map(|h| h.trim() == "label").unwrap_or(false);
    let feature_dim = if labeled { header.len() - 1 } else { header.len() };
    if feature_dim == 0 {
        return Err(parse_err(path, 1, "no feature columns"));
    }
    let mut examples = Vec::with_capacity(rows.len());
    let mut max_label = 0usize;
    for (line, mut vals) in rows {
        let label = if labeled {
            let y = vals.pop().unwrap();
            if y < 0.0 || y.fract() != 0.0 {
                return Err(parse_err(path, line, format!("label {} is not a class index", y)));
            }
            let y = y as usize;
            if let Some(l) = classes {
                if y >= l {
                    return Err(parse_err(path, line, format!("label {} >= declared class count {}", y, l)));
                }
            }
            max_label = max_label.max(y);
            Some(y)
        } else {
            None
        };
        examples.push(Example { features: vals, label });
    }
    let classes = classes.unwrap_or(if labeled && !examples.is_empty() { max_label + 1 } else { 0 });
    Ok(ExampleFile { classes, feature_dim, examples, labeled })
}

fn header_line(d: usize, label: bool) -> String {
    let mut s = (0..d).map(|i| format!("f{}", i)).collect::<Vec<_>>().join(",");
    if label {
        s.push_str(",label");
    }
    s.push('\n');
    s
}

fn push_row(out: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{}", v).unwrap();
    }
}

pub fn save_examples_csv(path: &Path, examples: &[Example], feature_dim: usize) -> Result<()> {
    let labeled = !examples.is_empty() && examples.iter().all(|e| e.label.is_some());
    let mut out = header_line(feature_dim, labeled);
    for e in examples {
        push_row(&mut out, &e.features);
        if labeled {
            write!(out, ",{}", e.label.unwrap()).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn bag_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("bag_{}.csv", i))
}

/// Loads `bag_<i>.csv` files paired with `prevalences.csv` rows.
pub fn load_bags(dir: &Path, classes: Option<usize>) -> Result<Vec<Bag>> {
    let ppath = dir.join(PREVALENCES_FILE);
    let (header, rows) = read_rows(&ppath)?;
    let l = header.len().saturating_sub(1);
    if l == 0 {
        return Err(parse_err(&ppath, 1, "prevalence file needs an id column and at least one class"));
    }
    if let Some(c) = classes {
        if c != l {
            return Err(Error::Validation(format!("{}: {} prevalence columns, expected {}", ppath.display(), l, c)));
        }
    }
    let mut bags = Vec::with_capacity(rows.len());
    for (expected, (line, vals)) in rows.into_iter().enumerate() {
        let id = vals[0];
        if id != expected as f64 {
            return Err(parse_err(&ppath, line, format!("bag ids must be dense 0..n-1; found {} at position {}", id, expected)));
        }
        let p = PrevalenceVector::renormalized(vals[1..].to_vec(), INGEST_TOL)
            .map_err(|e| parse_err(&ppath, line, e.to_string()))?;
        let bpath = bag_path(dir, expected);
        if !bpath.exists() {
            return Err(Error::Validation(format!("missing bag file {}", bpath.display())));
        }
        let (bh, brows) = read_rows(&bpath)?;
        if brows.is_empty() {
            return Err(Error::Validation(format!("{}: bag is empty (m must be >= 1)", bpath.display())));
        }
        let feats: Vec<Vec<f64>> = brows.into_iter().map(|(_, r)| r).collect();
        debug_assert_eq!(feats[0].len(), bh.len());
        bags.push(Bag::new(Tensor::from_rows(&feats), Some(p))?);
    }
    if let Some(d) = bags.first().map(Bag::dim) {
        if let Some((i, b)) = bags.iter().enumerate().find(|(_, b)| b.dim() != d) {
            return Err(Error::Validation(format!("bag {} has dimension {}, bag 0 has {}", i, b.dim(), d)));
        }
    }
    Ok(bags)
}

pub fn save_bags(dir: &Path, bags: &[Bag]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let l = bags
        .iter()
        .find_map(|b| b.prevalence.as_ref().map(PrevalenceVector::len))
        .ok_or_else(|| Error::Validation("bags need prevalence labels to be saved".into()))?;
    let mut prev = String::from("id");
    for c in 0..l {
        write!(prev, ",p{}", c).unwrap();
    }
    prev.push('\n');
    for (i, bag) in bags.iter().enumerate() {
        let p = bag
            .prevalence
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("bag {} has no prevalence label", i)))?;
        write!(prev, "{},", i).unwrap();
        push_row(&mut prev, p.as_slice());
        prev.push('\n');

        let mut out = header_line(bag.dim(), false);
        for r in 0..bag.size() {
            push_row(&mut out, bag.features.row(r));
            out.push('\n');
        }
        let path = bag_path(dir, i);
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    }
    let ppath = dir.join(PREVALENCES_FILE);
    fs::write(&ppath, prev).map_err(|e| Error::io(&ppath, e))
}

/// Writes the manifest, examples and natural bags (plus optional test bags).
pub fn save_dataset(dir: &Path, ds: &Dataset, test_bags: &[Bag]) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Manifest {
        classes: ds.classes,
        feature_dim: ds.feature_dim,
        examples: ds.examples.len(),
        bags: ds.bags.len(),
        test_bags: test_bags.len(),
    }
    .save(dir)?;
    if !ds.examples.is_empty() {
        save_examples_csv(&dir.join(EXAMPLES_FILE), &ds.examples, ds.feature_dim)?;
    }
    if !ds.bags.is_empty() {
        save_bags(&dir.join(BAGS_DIR), &ds.bags)?;
    }
    if !test_bags.is_empty() {
        save_bags(&dir.join(TEST_BAGS_DIR), test_bags)?;
    }
    Ok(())
}

/// Loads the manifest, examples and natural bags under `dir`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = Manifest::load(dir)?;
    let mut ds = Dataset { classes: m.classes, feature_dim: m.feature_dim, examples: Vec::new(), bags: Vec::new() };
    if m.examples > 0 {
        let f = load_examples_csv(&dir.join(EXAMPLES_FILE), Some(m.classes))?;
        if f.feature_dim != m.feature_dim {
            return Err(Error::Validation(format!(
                "examples have {} features, manifest says {}",
                f.feature_dim, m.feature_dim
            )));
        }
        ds.examples = f.examples;
    }
    if m.bags > 0 {
        ds.bags = load_bags(&dir.join(BAGS_DIR), Some(m.classes))?;
    }
    if ds.examples.len() != m.examples || ds.bags.len() != m.bags {
        return Err(Error::Validation(format!(
            "manifest counts ({} examples, {} bags) disagree with files ({}, {})",
            m.examples,
            m.bags,
            ds.examples.len(),
            ds.bags.len()
        )));
    }
    ds.validate()?;
    Ok(ds)
}
