//! Ordered component blocks produced by a factorization, and the row-group
//! structure the classifier regularizes over.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::matrixio::{Envelope, LabelVector, Persist};

/// Identity of a component block. Layer indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ComponentTag {
    Zr(usize),
    Zd(usize),
    /// Concatenated shared components of the last layer.
    Y(usize),
    /// Linear shared projections of the CCA baseline.
    Yr,
    Yd,
    Named(String),
}

impl fmt::Display for ComponentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentTag::Zr(l) => write!(f, "Z_r^{l}"),
            ComponentTag::Zd(l) => write!(f, "Z_d^{l}"),
            ComponentTag::Y(l) => write!(f, "Y^{l}"),
            ComponentTag::Yr => f.write_str("Y_r"),
            ComponentTag::Yd => f.write_str("Y_d"),
            ComponentTag::Named(s) => f.write_str(s),
        }
    }
}

impl std::str::FromStr for ComponentTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let layer = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::Data(format!("malformed component tag {s:?}")))
        };
        if s.is_empty() || s.contains(char::is_whitespace) {
            return Err(Error::Data(format!("malformed component tag {s:?}")));
        }
        Ok(if let Some(r) = s.strip_prefix("Z_r^") {
            ComponentTag::Zr(layer(r)?)
        } else if let Some(r) = s.strip_prefix("Z_d^") {
            ComponentTag::Zd(layer(r)?)
        } else if let Some(r) = s.strip_prefix("Y^") {
            ComponentTag::Y(layer(r)?)
        } else if s == "Y_r" {
            ComponentTag::Yr
        } else if s == "Y_d" {
            ComponentTag::Yd
        } else {
            ComponentTag::Named(s.to_string())
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentBlock {
    pub tag: ComponentTag,
    /// Blocks sharing a layer group are regularized together by the
    /// layer-wise norm.
    pub layer_group: usize,
    pub matrix: DMatrix<f64>,
}

/// Row range and grouping metadata of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub tag: ComponentTag,
    pub layer_group: usize,
    pub rows: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupStructure {
    pub groups: Vec<Group>,
    pub total_rows: usize,
}

impl GroupStructure {
    /// Checks that the row ranges partition `0..total_rows` in order.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for g in &self.groups {
            if g.rows.start != next || g.rows.end < g.rows.start {
                return Err(Error::Data(format!(
                    "group {} covers rows {:?}, expected to start at {next}",
                    g.tag, g.rows
                )));
            }
            next = g.rows.end;
        }
        if next != self.total_rows {
            return Err(Error::Data(format!("groups cover {next} rows, structure declares {}", self.total_rows)));
        }
        Ok(())
    }

    /// Group indices per layer group, in order of first appearance.
    pub fn layer_groups(&self) -> Vec<Vec<usize>> {
        let mut keys: Vec<usize> = Vec::new();
        let mut out: Vec<Vec<usize>> = Vec::new();
        for (i, g) in self.groups.iter().enumerate() {
            match keys.iter().position(|&k| k == g.layer_group) {
                Some(p) => out[p].push(i),
                None => {
                    keys.push(g.layer_group);
                    out.push(vec![i]);
                }
            }
        }
        out
    }

    /// A single group spanning `rows` rows.
    pub fn single(rows: usize, tag: ComponentTag) -> Self {
        GroupStructure { groups: vec![Group { tag, layer_group: 0, rows: 0..rows }], total_rows: rows }
    }

    pub(crate) fn to_envelope(&self, env: &mut Envelope, prefix: &str) {
        let tags: Vec<String> = self.groups.iter().map(|g| g.tag.to_string()).collect();
        let layers: Vec<String> = self.groups.iter().map(|g| g.layer_group.to_string()).collect();
        let sizes: Vec<String> = self.groups.iter().map(|g| g.rows.len().to_string()).collect();
        env.field(format!("{prefix}tags"), tags.join(" "))
            .field(format!("{prefix}layer_groups"), layers.join(" "))
            .field(format!("{prefix}sizes"), sizes.join(" "));
    }

    pub(crate) fn from_envelope(env: &Envelope, prefix: &str) -> Result<Self> {
        let tags: Vec<ComponentTag> = env
            .get(&format!("{prefix}tags"))?
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_>>()?;
        let parse_all = |key: &str| -> Result<Vec<usize>> {
            env.get(&format!("{prefix}{key}"))?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Data(format!("malformed integer {t:?} in {key}"))))
                .collect()
        };
        let layers = parse_all("layer_groups")?;
        let sizes = parse_all("sizes")?;
        if tags.len() != layers.len() || tags.len() != sizes.len() {
            return Err(Error::Data("group structure fields have different lengths".into()));
        }
        let mut start = 0;
        let groups = tags
            .into_iter()
            .zip(layers)
            .zip(sizes)
            .map(|((tag, layer_group), size)| {
                let g = Group { tag, layer_group, rows: start..start + size };
                start += size;
                g
            })
            .collect();
        Ok(GroupStructure { groups, total_rows: start })
    }
}

/// Factorized representation of a sample set: blocks stacked row-wise, one
/// column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStack {
    pub blocks: Vec<ComponentBlock>,
}

impl ComponentStack {
    pub fn new(blocks: Vec<ComponentBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("a component stack needs at least one block".into()));
        }
        let n = blocks[0].matrix.ncols();
        if let Some(b) = blocks.iter().find(|b| b.matrix.ncols() != n) {
            return Err(Error::Dimension(format!(
                "block {} has {} columns, expected {n}",
                b.tag,
                b.matrix.ncols()
            )));
        }
        Ok(ComponentStack { blocks })
    }

    /// Deep-network layout: `Z_r^1, Z_d^1, …, Z_r^L, Z_d^L, Y^L` with
    /// `Y^L = [Y_r^L; Y_d^L]`. `specific[i]` holds layer `i + 1`'s pair.
    pub fn deep(specific: Vec<(DMatrix<f64>, DMatrix<f64>)>, y_r: &DMatrix<f64>, y_d: &DMatrix<f64>) -> Result<Self> {
        let depth = specific.len();
        let n = y_r.ncols();
        let mut blocks = Vec::with_capacity(2 * depth + 1);
        for (i, (zr, zd)) in specific.into_iter().enumerate() {
            blocks.push(ComponentBlock { tag: ComponentTag::Zr(i + 1), layer_group: i, matrix: zr });
            blocks.push(ComponentBlock { tag: ComponentTag::Zd(i + 1), layer_group: i, matrix: zd });
        }
        blocks.push(ComponentBlock {
            tag: ComponentTag::Y(depth),
            layer_group: depth,
            matrix: linalg::vstack(&[y_r, y_d], n),
        });
        ComponentStack::new(blocks)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn samples(&self) -> usize {
        self.blocks[0].matrix.ncols()
    }

    pub fn rows(&self) -> usize {
        self.blocks.iter().map(|b| b.matrix.nrows()).sum()
    }

    pub fn structure(&self) -> GroupStructure {
        let mut start = 0;
        let groups = self
            .blocks
            .iter()
            .map(|b| {
                let g = Group { tag: b.tag.clone(), layer_group: b.layer_group, rows: start..start + b.matrix.nrows() };
                start = g.rows.end;
                g
            })
            .collect();
        GroupStructure { groups, total_rows: start }
    }

    /// All blocks stacked vertically (rows × samples).
    pub fn stacked(&self) -> DMatrix<f64> {
        let refs: Vec<&DMatrix<f64>> = self.blocks.iter().map(|b| &b.matrix).collect();
        linalg::vstack(&refs, self.samples())
    }

    pub fn block(&self, tag: &ComponentTag) -> Option<&ComponentBlock> {
        self.blocks.iter().find(|b| &b.tag == tag)
    }

    /// Blocks whose tag satisfies `keep`, in order.
    pub fn select(&self, keep: impl Fn(&ComponentTag) -> bool) -> Result<Self> {
        ComponentStack::new(self.blocks.iter().filter(|b| keep(&b.tag)).cloned().collect())
    }

    /// Appends a block with its own layer group.
    pub fn push_named(&mut self, name: &str, matrix: DMatrix<f64>) -> Result<()> {
        if matrix.ncols() != self.samples() {
            return Err(Error::Dimension(format!("block {name} has {} columns, expected {}", matrix.ncols(), self.samples())));
        }
        let layer_group = self.blocks.iter().map(|b| b.layer_group + 1).max().unwrap_or(0);
        self.blocks.push(ComponentBlock { tag: ComponentTag::Named(name.to_string()), layer_group, matrix });
        Ok(())
    }

    /// Stack restricted to the given sample columns.
    pub fn columns(&self, idx: &[usize]) -> Self {
        ComponentStack {
            blocks: self
                .blocks
                .iter()
                .map(|b| ComponentBlock {
                    tag: b.tag.clone(),
                    layer_group: b.layer_group,
                    matrix: b.matrix.select_columns(idx),
                })
                .collect(),
        }
    }
}

/// A component stack with the sample ids and (optional) labels it was built
/// from; the on-disk form of `factorize` output.
#[derive(Debug, Clone, PartialEq)]
pub struct StackBundle {
    pub stack: ComponentStack,
    pub ids: Vec<String>,
    pub labels: Option<LabelVector>,
}

impl Persist for StackBundle {
    const KIND: &'static str = "component-stack";

    fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(Self::KIND);
        env.field("ids", self.ids.join(" "));
        if let Some(l) = &self.labels {
            let v: Vec<String> = l.labels.iter().map(|x| x.to_string()).collect();
            env.field("num_classes", l.num_classes).field("labels", v.join(" "));
        }
        self.stack.structure().to_envelope(&mut env, "");
        for (i, b) in self.stack.blocks.iter().enumerate() {
            env.matrix(format!("block{i}"), &b.matrix);
        }
        env
    }

    fn from_envelope(env: &Envelope) -> Result<Self> {
        let structure = GroupStructure::from_envelope(env, "")?;
        let mut blocks = Vec::with_capacity(structure.groups.len());
        for (i, g) in structure.groups.iter().enumerate() {
            let matrix = env.get_matrix(&format!("block{i}"))?.clone();
            if matrix.nrows() != g.rows.len() {
                return Err(Error::Data(format!("block {} row count disagrees with its declared size", g.tag)));
            }
            blocks.push(ComponentBlock { tag: g.tag.clone(), layer_group: g.layer_group, matrix });
        }
        let stack = ComponentStack::new(blocks)?;
        let ids: Vec<String> = env.get("ids")?.split_whitespace().map(String::from).collect();
        if ids.len() != stack.samples() {
            return Err(Error::Data(format!("stack has {} samples but {} ids", stack.samples(), ids.len())));
        }
        let labels = if env.has("labels") {
            let labels: Vec<usize> = env
                .get("labels")?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Data(format!("malformed label {t:?}"))))
                .collect::<Result<_>>()?;
            Some(LabelVector::new(labels, env.get_parsed("num_classes")?)?)
        } else {
            None
        };
        Ok(StackBundle { stack, ids, labels })
    }
}
