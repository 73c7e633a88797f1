//! Plain-text interchange formats: dense matrices, label files, dataset
//! manifests and the versioned model envelope.
//!
//! Matrix files have a `MAT <rows> <cols>` header followed by one line per
//! row with space-separated values. Values are written with the shortest
//! decimal that parses back to the same `f64`, so a write/read cycle is
//! bit-exact. Lines starting with `#` before the header are comments
//! (provenance information) and are dropped on read.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense feature matrix, one column per sample.
pub type FeatureMatrix = DMatrix<f64>;

/// Shortest decimal rendering of `v` that parses back to identical bits.
///
/// Integral values drop the trailing `.0` (`1.0` renders as `1`).
pub fn format_f64(v: f64) -> String {
    let s = format!("{v:?}");
    match s.strip_suffix(".0") {
        Some(t) => t.to_string(),
        None => s,
    }
}

fn parse_f64(tok: &str) -> Option<f64> {
    let v: f64 = tok.parse().ok()?;
    v.is_finite().then_some(v)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Appends the canonical `MAT` block for `m` to `out`.
fn render_matrix_into(out: &mut String, m: &DMatrix<f64>) {
    let _ = writeln!(out, "MAT {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(' ');
            }
            out.push_str(&format_f64(m[(i, j)]));
        }
        out.push('\n');
    }
}

/// Canonical text form of a matrix.
pub fn render_matrix(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    render_matrix_into(&mut out, m);
    out
}

/// Line cursor that keeps 1-based line numbers for error reporting.
struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Lines {
            path,
            inner: text.lines().enumerate().peekable(),
            last: 0,
        }
    }

    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        let (i, l) = self.inner.next()?;
        self.last = i + 1;
        Some((i + 1, l))
    }

    /// Next line that is neither blank nor a `#` comment.
    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        while let Some((n, l)) = self.next_line() {
            let t = l.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Some((n, l));
            }
        }
        None
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::parse(self.path, line, msg)
    }

    fn eof(&self, what: &str) -> Error {
        Error::parse(self.path, self.last + 1, format!("unexpected end of file, expected {what}"))
    }
}

fn parse_matrix_block(lines: &mut Lines<'_>, allow_empty: bool) -> Result<DMatrix<f64>> {
    let (hline, header) = lines.next_content().ok_or_else(|| lines.eof("MAT header"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != "MAT" {
        return Err(lines.err(hline, format!("malformed header {:?}, expected `MAT <rows> <cols>`", header.trim())));
    }
    let dim = |t: &str| -> Result<usize> {
        t.parse::<usize>()
            .map_err(|_| lines.err(hline, format!("malformed dimension {t:?} in header")))
    };
    let (rows, cols) = (dim(toks[1])?, dim(toks[2])?);
    if !allow_empty && (rows == 0 || cols == 0) {
        return Err(lines.err(hline, "matrix dimensions must be at least 1x1"));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        let (ln, row) = if cols == 0 {
            // rows of an empty-column matrix are blank lines
            lines.next_line().ok_or_else(|| lines.eof("matrix row"))?
        } else {
            lines.next_content().ok_or_else(|| lines.eof("matrix row"))?
        };
        let mut count = 0;
        for (j, tok) in row.split_whitespace().enumerate() {
            if j >= cols {
                count = j + 1;
                continue;
            }
            m[(i, j)] = parse_f64(tok)
                .ok_or_else(|| lines.err(ln, format!("non-finite or malformed value {tok:?}")))?;
            count = j + 1;
        }
        if count != cols {
            return Err(lines.err(ln, format!("row has {count} values, expected {cols}")));
        }
    }
    Ok(m)
}

/// Parses matrix text; `path` is only used in error messages.
pub fn parse_matrix(text: &str, path: &Path) -> Result<FeatureMatrix> {
    let mut lines = Lines::new(path, text);
    let m = parse_matrix_block(&mut lines, false)?;
    if let Some((ln, _)) = lines.next_content() {
        return Err(lines.err(ln, "trailing content after matrix rows"));
    }
    Ok(m)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    parse_matrix(&read_text(path)?, path)
}

pub fn write_matrix(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &render_matrix(m))
}

/// Writes a matrix preceded by `#` comment lines.
pub fn write_matrix_with_header(m: &FeatureMatrix, header: &[String], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    render_matrix_into(&mut out, m);
    write_text(path.as_ref(), &out)
}

// ---------------------------------------------------------------------------
// Labels

/// Class ids (0-based) for a set of samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!("num_classes must be >= 2, got {num_classes}")));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!("label {l} at position {i} is not below num_classes={num_classes}")));
        }
        Ok(LabelVector { labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn read_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelVector> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut lines = Lines::new(path, &text);
    let mut labels = Vec::new();
    while let Some((ln, l)) = lines.next_content() {
        let v: usize = l
            .trim()
            .parse()
            .map_err(|_| lines.err(ln, format!("malformed label {:?}", l.trim())))?;
        if v >= num_classes {
            return Err(lines.err(ln, format!("label {v} is not below num_classes={num_classes}")));
        }
        labels.push(v);
    }
    LabelVector::new(labels, num_classes)
}

pub fn write_labels(labels: &LabelVector, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for l in &labels.labels {
        let _ = writeln!(out, "{l}");
    }
    write_text(path.as_ref(), &out)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Reference to a feature vector: a single-column matrix file, or column
/// `column` of a multi-column file (`path#column`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FileRef {
    pub path: PathBuf,
    pub column: Option<usize>,
}

impl FileRef {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s.rsplit_once('#') {
            Some((p, c)) => {
                let column = c.parse().map_err(|_| format!("malformed column index in {s:?}"))?;
                Ok(FileRef { path: p.into(), column: Some(column) })
            }
            None => Ok(FileRef { path: s.into(), column: None }),
        }
    }

    fn render(&self) -> String {
        match self.column {
            Some(c) => format!("{}#{c}", self.path.display()),
            None => self.path.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub label: usize,
    pub holistic_r: FileRef,
    pub holistic_d: FileRef,
    /// Per-segment `(modality r, modality d)` references, in temporal order.
    pub segments: Vec<(FileRef, FileRef)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn segment_count(&self) -> usize {
        self.samples.first().map_or(0, |s| s.segments.len())
    }

    /// Canonical text form; see the README for the grammar.
    pub fn render(&self) -> String {
        let mut out = String::from("MANIFEST 1\n");
        let _ = writeln!(out, "classes {}", self.num_classes);
        for s in &self.samples {
            let _ = write!(
                out,
                "sample id={} split={} label={} xr={} xd={}",
                s.id,
                s.split.as_str(),
                s.label,
                s.holistic_r.render(),
                s.holistic_d.render()
            );
            for (r, d) in &s.segments {
                let _ = write!(out, " seg={},{}", r.render(), d.render());
            }
            out.push('\n');
        }
        out
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let mut lines = Lines::new(path, text);
    let (hl, header) = lines.next_content().ok_or_else(|| lines.eof("MANIFEST header"))?;
    if header.trim() != "MANIFEST 1" {
        return Err(lines.err(hl, format!("malformed header {:?}, expected `MANIFEST 1`", header.trim())));
    }
    let mut num_classes = None;
    let mut samples: Vec<SampleRecord> = Vec::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    while let Some((ln, line)) = lines.next_content() {
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("classes") => {
                let c: usize = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| lines.err(ln, "malformed `classes` line"))?;
                if c < 2 {
                    return Err(lines.err(ln, "classes must be >= 2"));
                }
                num_classes = Some(c);
            }
            Some("sample") => {
                let mut kv: HashMap<&str, &str> = HashMap::new();
                let mut segments = Vec::new();
                for t in toks {
                    let (k, v) = t
                        .split_once('=')
                        .ok_or_else(|| lines.err(ln, format!("expected key=value, got {t:?}")))?;
                    if k == "seg" {
                        let (r, d) = v
                            .split_once(',')
                            .ok_or_else(|| lines.err(ln, format!("segment {v:?} must be `r_file,d_file`")))?;
                        let r = FileRef::parse(r).map_err(|m| lines.err(ln, m))?;
                        let d = FileRef::parse(d).map_err(|m| lines.err(ln, m))?;
                        segments.push((r, d));
                    } else if kv.insert(k, v).is_some() {
                        return Err(lines.err(ln, format!("duplicate key {k:?}")));
                    }
                }
                let get = |k: &str| kv.get(k).copied().ok_or_else(|| lines.err(ln, format!("missing key {k:?}")));
                let id = get("id")?.to_string();
                let split = get("split")?.parse().map_err(|m: String| lines.err(ln, m))?;
                let label: usize = get("label")?
                    .parse()
                    .map_err(|_| lines.err(ln, "malformed label"))?;
                let c = num_classes.ok_or_else(|| lines.err(ln, "`classes` line must precede samples"))?;
                if label >= c {
                    return Err(lines.err(ln, format!("label {label} is not below classes={c}")));
                }
                let holistic_r = FileRef::parse(get("xr")?).map_err(|m| lines.err(ln, m))?;
                let holistic_d = FileRef::parse(get("xd")?).map_err(|m| lines.err(ln, m))?;
                if let Some(unknown) = kv.keys().find(|k| !["id", "split", "label", "xr", "xd"].contains(k)) {
                    return Err(lines.err(ln, format!("unknown key {unknown:?}")));
                }
                if let Some(prev) = first_line.insert(id.clone(), ln) {
                    return Err(lines.err(ln, format!("duplicate sample id {id:?} (first on line {prev})")));
                }
                if let Some(first) = samples.first() {
                    if first.segments.len() != segments.len() {
                        return Err(lines.err(
                            ln,
                            format!(
                                "sample {:?} has {} segments but sample {:?} has {}",
                                id,
                                segments.len(),
                                first.id,
                                first.segments.len()
                            ),
                        ));
                    }
                }
                samples.push(SampleRecord { id, split, label, holistic_r, holistic_d, segments });
            }
            _ => return Err(lines.err(ln, format!("unrecognized line {:?}", line.trim()))),
        }
    }
    let num_classes = num_classes.ok_or_else(|| lines.eof("`classes` line"))?;
    Ok(DatasetManifest { num_classes, samples })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    parse_manifest(&read_text(path)?, path)
}

pub fn write_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &m.render())
}

/// Feature matrices for one split of a manifest, columns in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub labels: LabelVector,
    pub holistic_r: FeatureMatrix,
    pub holistic_d: FeatureMatrix,
    /// One `(r, d)` pair of matrices per temporal segment.
    pub segments: Vec<(FeatureMatrix, FeatureMatrix)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Loads all samples of `split`; relative paths resolve against `base`.
/// Returns `Ok(None)` if the split has no samples.
pub fn load_dataset(manifest: &DatasetManifest, base: &Path, split: Split) -> Result<Option<Dataset>> {
    let picked: Vec<&SampleRecord> = manifest.samples.iter().filter(|s| s.split == split).collect();
    if picked.is_empty() {
        return Ok(None);
    }
    let mut cache: HashMap<PathBuf, FeatureMatrix> = HashMap::new();
    let mut column = |r: &FileRef, role: &str, id: &str| -> Result<Vec<f64>> {
        let full = if r.path.is_absolute() { r.path.clone() } else { base.join(&r.path) };
        if !cache.contains_key(&full) {
            let m = read_matrix(&full)?;
            cache.insert(full.clone(), m);
        }
        let m = &cache[&full];
        let col = match r.column {
            Some(c) if c < m.ncols() => c,
            Some(c) => {
                return Err(Error::Data(format!(
                    "sample {id:?}: {role} references column {c} of {} which has {} columns",
                    full.display(),
                    m.ncols()
                )))
            }
            None if m.ncols() == 1 => 0,
            None => {
                return Err(Error::Data(format!(
                    "sample {id:?}: {role} file {} has {} columns; use `path#column`",
                    full.display(),
                    m.ncols()
                )))
            }
        };
        Ok(m.column(col).iter().copied().collect())
    };
    let s_count = picked[0].segments.len();
    let mut hr = Vec::new();
    let mut hd = Vec::new();
    let mut segs: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = vec![(Vec::new(), Vec::new()); s_count];
    for s in &picked {
        hr.push(column(&s.holistic_r, "xr", &s.id)?);
        hd.push(column(&s.holistic_d, "xd", &s.id)?);
        for (k, (r, d)) in s.segments.iter().enumerate() {
            segs[k].0.push(column(r, &format!("segment {k} r"), &s.id)?);
            segs[k].1.push(column(d, &format!("segment {k} d"), &s.id)?);
        }
    }
    let ids: Vec<String> = picked.iter().map(|s| s.id.clone()).collect();
    let assemble = |cols: &[Vec<f64>], role: &str| -> Result<FeatureMatrix> {
        let d = cols[0].len();
        if let Some(i) = cols.iter().position(|c| c.len() != d) {
            return Err(Error::Data(format!(
                "{role}: sample {:?} has dimension {} but sample {:?} has {}",
                ids[i],
                cols[i].len(),
                ids[0],
                d
            )));
        }
        Ok(DMatrix::from_fn(d, cols.len(), |i, j| cols[j][i]))
    };
    let holistic_r = assemble(&hr, "xr")?;
    let holistic_d = assemble(&hd, "xd")?;
    let mut segments = Vec::with_capacity(s_count);
    for (k, (r, d)) in segs.iter().enumerate() {
        let r = assemble(r, &format!("segment {k} r"))?;
        let d = assemble(d, &format!("segment {k} d"))?;
        segments.push((r, d));
    }
    // every segment of the same modality shares one dimension
    if let Some((k, _)) = segments
        .iter()
        .enumerate()
        .find(|(_, (r, d))| r.nrows() != segments[0].0.nrows() || d.nrows() != segments[0].1.nrows())
    {
        return Err(Error::Data(format!("segment {k} dimension differs from segment 0")));
    }
    let labels = LabelVector::new(picked.iter().map(|s| s.label).collect(), manifest.num_classes)?;
    Ok(Some(Dataset { ids, labels, holistic_r, holistic_d, segments }))
}

// ---------------------------------------------------------------------------
// Model envelope

pub const ENVELOPE_MAGIC: &str = "DSSCA-MODEL";
pub const ENVELOPE_VERSION: u32 = 1;

/// Versioned container of scalar fields and named matrices. Every persisted
/// model is converted to and from this form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Envelope {
    pub kind: String,
    pub fields: Vec<(String, String)>,
    pub matrices: Vec<(String, DMatrix<f64>)>,
}

impl Envelope {
    pub fn new(kind: impl Into<String>) -> Self {
        Envelope { kind: kind.into(), ..Default::default() }
    }

    pub fn field(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn real(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.fields.push((key.into(), format_f64(value)));
        self
    }

    pub fn reals(&mut self, key: impl Into<String>, values: &[f64]) -> &mut Self {
        let v: Vec<String> = values.iter().map(|&x| format_f64(x)).collect();
        self.fields.push((key.into(), v.join(" ")));
        self
    }

    pub fn matrix(&mut self, name: impl Into<String>, m: &DMatrix<f64>) -> &mut Self {
        self.matrices.push((name.into(), m.clone()));
        self
    }

    /// Copies the fields and matrices of `other` under `prefix.`.
    pub fn nest(&mut self, prefix: &str, other: &Envelope) -> &mut Self {
        self.field(format!("{prefix}.kind"), &other.kind);
        for (k, v) in &other.fields {
            self.fields.push((format!("{prefix}.{k}"), v.clone()));
        }
        for (k, m) in &other.matrices {
            self.matrices.push((format!("{prefix}.{k}"), m.clone()));
        }
        self
    }

    /// Extracts entries stored under `prefix.` by [`Envelope::nest`].
    pub fn sub(&self, prefix: &str) -> Result<Envelope> {
        let p = format!("{prefix}.");
        let kind = self.get(&format!("{prefix}.kind"))?.to_string();
        let fields = self
            .fields
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .filter(|(k, _)| k != "kind")
            .collect();
        let matrices = self
            .matrices
            .iter()
            .filter_map(|(k, m)| k.strip_prefix(&p).map(|s| (s.to_string(), m.clone())))
            .collect();
        Ok(Envelope { kind, fields, matrices })
    }

    pub fn has(&self, key: &str) -> bool {
        self.fields.iter().any(|(k, _)| k == key)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Data(format!("{} model is missing field {key:?}", self.kind)))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Data(format!("{} model: malformed value {v:?} for {key:?}", self.kind)))
    }

    pub fn get_reals(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)?
            .split_whitespace()
            .map(|t| {
                parse_f64(t).ok_or_else(|| Error::Data(format!("{} model: malformed real {t:?} in {key:?}", self.kind)))
            })
            .collect()
    }

    pub fn get_matrix(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.matrices
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Data(format!("{} model is missing matrix {name:?}", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Data(format!("expected a {kind} model, found {}", self.kind)))
        }
    }

    pub fn render(&self, header: &[String]) -> String {
        let mut out = String::new();
        for h in header {
            let _ = writeln!(out, "# {h}");
        }
        let _ = writeln!(out, "{ENVELOPE_MAGIC} {ENVELOPE_VERSION}");
        let _ = writeln!(out, "kind {}", self.kind);
        for (k, v) in &self.fields {
            let _ = writeln!(out, "field {k} {v}");
        }
        for (k, m) in &self.matrices {
            let _ = writeln!(out, "matrix {k}");
            render_matrix_into(&mut out, m);
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Envelope> {
        let mut lines = Lines::new(path, text);
        let (hl, header) = lines.next_content().ok_or_else(|| lines.eof("model header"))?;
        let expected = format!("{ENVELOPE_MAGIC} {ENVELOPE_VERSION}");
        if header.trim() != expected {
            return Err(lines.err(hl, format!("malformed header {:?}, expected {expected:?}", header.trim())));
        }
        let (kl, kline) = lines.next_content().ok_or_else(|| lines.eof("kind line"))?;
        let kind = kline
            .strip_prefix("kind ")
            .map(str::trim)
            .filter(|k| !k.is_empty())
            .ok_or_else(|| lines.err(kl, "expected `kind <name>`"))?;
        let mut env = Envelope::new(kind);
        loop {
            let (ln, line) = lines.next_content().ok_or_else(|| lines.eof("`end`"))?;
            if line.trim() == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("field ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                if k.is_empty() {
                    return Err(lines.err(ln, "empty field name"));
                }
                env.fields.push((k.to_string(), v.to_string()));
            } else if let Some(name) = line.strip_prefix("matrix ") {
                let m = parse_matrix_block(&mut lines, true)?;
                env.matrices.push((name.trim().to_string(), m));
            } else {
                return Err(lines.err(ln, format!("unrecognized line {:?}", line.trim())));
            }
        }
        if let Some((ln, _)) = lines.next_content() {
            return Err(lines.err(ln, "trailing content after `end`"));
        }
        Ok(env)
    }
}

/// Conversion of a model to and from the envelope form.
pub trait Persist: Sized {
    const KIND: &'static str;
    fn to_envelope(&self) -> Envelope;
    fn from_envelope(env: &Envelope) -> Result<Self>;
}

pub fn save_envelope(env: &Envelope, header: &[String], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &env.render(header))
}

pub fn load_envelope(path: impl AsRef<Path>) -> Result<Envelope> {
    let path = path.as_ref();
    Envelope::parse(&read_text(path)?, path)
}

pub fn save_model<T: Persist>(model: &T, path: impl AsRef<Path>) -> Result<()> {
    save_envelope(&model.to_envelope(), &[], path)
}

pub fn save_model_with_header<T: Persist>(model: &T, header: &[String], path: impl AsRef<Path>) -> Result<()> {
    save_envelope(&model.to_envelope(), header, path)
}

pub fn load_model<T: Persist>(path: impl AsRef<Path>) -> Result<T> {
    let env = load_envelope(path)?;
    env.expect_kind(T::KIND)?;
    T::from_envelope(&env)
}
