//! Local + holistic composition. One local network is shared by all temporal
//! segments; its last shared outputs, concatenated over segments and joined
//! with the holistic features, feed a second (holistic) network. The final
//! stack keeps every layer's specific components from both networks.

use std::cmp::Ordering;

use nalgebra::DMatrix;

use crate::deepnet::{self, DeepModel, DeepTraining, LayerSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::matrixio::{Dataset, Envelope, FeatureMatrix, Persist};
use crate::preprocess::WhitenerPair;
use crate::ssca::{LayerFactorization, Schedule};
use crate::stack::{ComponentBlock, ComponentStack, ComponentTag};

/// Default whitened dimension of the holistic network's inputs.
pub const DEFAULT_HOLISTIC_INPUT_DIM: usize = 200;
pub const DEFAULT_SEGMENTS: usize = 4;

/// Per-segment `(r, d)` matrices, one column per sample.
pub type Segments = [(FeatureMatrix, FeatureMatrix)];

#[derive(Debug, Clone, PartialEq)]
pub struct ComposeConfig {
    pub local: Vec<LayerSpec>,
    pub holistic: Vec<LayerSpec>,
    /// Whitened dims of raw segment features; `None` means the segments are
    /// already whitened and scaled.
    pub segment_dims: Option<(usize, usize)>,
    /// Upper bound on the whitened dims of the holistic network's inputs.
    pub holistic_input_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedModel {
    pub local: DeepModel,
    /// Whitens the composed inputs of the holistic network.
    pub stack_whiteners: WhitenerPair,
    pub holistic: DeepModel,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedTraining {
    pub model: ComposedModel,
    pub local: DeepTraining,
    pub holistic: DeepTraining,
}

fn check_segments(segments: &Segments) -> Result<()> {
    let Some((r0, d0)) = segments.first() else {
        return Err(Error::InvalidArgument("at least one segment is required".into()));
    };
    for (k, (r, d)) in segments.iter().enumerate() {
        if r.nrows() != r0.nrows() || d.nrows() != d0.nrows() {
            return Err(Error::Dimension(format!("segment {k} dimensions differ from segment 0")));
        }
        if r.ncols() != r0.ncols() || d.ncols() != r0.ncols() {
            return Err(Error::Dimension(format!("segment {k} has a different sample count")));
        }
    }
    Ok(())
}

fn cmp_columns(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Pools every segment of every sample into one column set and sorts the
/// columns canonically, so the result depends only on the multiset of
/// `(r, d)` column pairs.
pub fn pool_segments(segments: &Segments) -> Result<(FeatureMatrix, FeatureMatrix)> {
    check_segments(segments)?;
    let (dr, dd) = (segments[0].0.nrows(), segments[0].1.nrows());
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (r, d) in segments {
        for j in 0..r.ncols() {
            let mut c: Vec<f64> = r.column(j).iter().copied().collect();
            c.extend(d.column(j).iter());
            cols.push(c);
        }
    }
    cols.sort_by(|a, b| cmp_columns(a, b));
    let n = cols.len();
    Ok((
        DMatrix::from_fn(dr, n, |i, j| cols[j][i]),
        DMatrix::from_fn(dd, n, |i, j| cols[j][dr + i]),
    ))
}

/// Trains the shared local network on the pooled segments.
pub fn train_local(
    segments: &Segments,
    specs: &[LayerSpec],
    segment_dims: Option<(usize, usize)>,
    schedule: &Schedule,
) -> Result<DeepTraining> {
    let (pr, pd) = pool_segments(segments)?;
    match segment_dims {
        Some((a, b)) => deepnet::train_deep_raw(&pr, &pd, a, b, specs, schedule),
        None => deepnet::train_deep(&pr, &pd, specs, schedule),
    }
}

fn local_factorizations(local: &DeepModel, segments: &Segments) -> Result<Vec<Vec<LayerFactorization>>> {
    check_segments(segments)?;
    segments.iter().map(|(r, d)| local.factorize_layers(r, d)).collect()
}

fn assemble(per_segment: &[Vec<LayerFactorization>], hr: &FeatureMatrix, hd: &FeatureMatrix) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let n = hr.ncols();
    if hd.ncols() != n || per_segment.iter().any(|f| f.last().is_some_and(|l| l.y_r.ncols() != n)) {
        return Err(Error::Dimension("holistic features and segments have different sample counts".into()));
    }
    let mut r: Vec<&DMatrix<f64>> = per_segment.iter().map(|f| &f.last().expect("non-empty").y_r).collect();
    let mut d: Vec<&DMatrix<f64>> = per_segment.iter().map(|f| &f.last().expect("non-empty").y_d).collect();
    r.push(hr);
    d.push(hd);
    Ok((linalg::vstack(&r, n), linalg::vstack(&d, n)))
}

/// Holistic network inputs: per sample, the local network's last `Y_r` of
/// every segment in order followed by the holistic `r` features (and the
/// same for `d`).
pub fn compose_inputs(
    local: &DeepModel,
    segments: &Segments,
    hr: &FeatureMatrix,
    hd: &FeatureMatrix,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    assemble(&local_factorizations(local, segments)?, hr, hd)
}

fn stack_dim(rows: usize, n: usize, cap: usize) -> usize {
    rows.min(n).min(cap).max(1)
}

pub fn train_composed(
    segments: &Segments,
    hr: &FeatureMatrix,
    hd: &FeatureMatrix,
    cfg: &ComposeConfig,
    schedule: &Schedule,
) -> Result<ComposedTraining> {
    if cfg.holistic.is_empty() || cfg.local.is_empty() {
        return Err(Error::InvalidArgument("both local and holistic networks need at least one layer".into()));
    }
    let local = train_local(segments, &cfg.local, cfg.segment_dims, schedule)?;
    let (cr, cd) = compose_inputs(&local.model, segments, hr, hd)?;
    let n = cr.ncols();
    let w = WhitenerPair::fit(
        &cr,
        &cd,
        stack_dim(cr.nrows(), n, cfg.holistic_input_dim),
        stack_dim(cd.nrows(), n, cfg.holistic_input_dim),
    )?;
    let (wr, wd) = w.apply(&cr, &cd)?;
    // holistic layers continue the layer numbering for seeding
    let hs = Schedule { seed: deepnet::layer_seed(schedule.seed, cfg.local.len()), ..*schedule };
    let holistic = deepnet::train_deep(&wr, &wd, &cfg.holistic, &hs)?;
    let model = ComposedModel {
        local: local.model.clone(),
        stack_whiteners: w,
        holistic: holistic.model.clone(),
        segments: segments.len(),
    };
    Ok(ComposedTraining { model, local, holistic })
}

pub fn train_composed_dataset(data: &Dataset, cfg: &ComposeConfig, schedule: &Schedule) -> Result<ComposedTraining> {
    train_composed(&data.segments, &data.holistic_r, &data.holistic_d, cfg, schedule)
}

impl ComposedModel {
    pub fn depth(&self) -> usize {
        self.local.depth() + self.holistic.depth()
    }
}

/// `Z_r^1, Z_d^1, …, Z_r^L, Z_d^L, Y^L` with `L = l1 + l2`. Local `Z`
/// blocks concatenate the segments in order.
pub fn factorize_composed(
    m: &ComposedModel,
    segments: &Segments,
    hr: &FeatureMatrix,
    hd: &FeatureMatrix,
) -> Result<ComponentStack> {
    if segments.len() != m.segments {
        return Err(Error::Dimension(format!(
            "model was trained with {} segments, input has {}",
            m.segments,
            segments.len()
        )));
    }
    let per_segment = local_factorizations(&m.local, segments)?;
    let (cr, cd) = assemble(&per_segment, hr, hd)?;
    let n = cr.ncols();
    let (wr, wd) = m.stack_whiteners.apply(&cr, &cd)?;
    let hol = m.holistic.factorize_layers(&wr, &wd)?;
    let l1 = m.local.depth();
    let mut blocks = Vec::with_capacity(2 * m.depth() + 1);
    for layer in 0..l1 {
        let zr: Vec<&DMatrix<f64>> = per_segment.iter().map(|f| &f[layer].z_r).collect();
        let zd: Vec<&DMatrix<f64>> = per_segment.iter().map(|f| &f[layer].z_d).collect();
        blocks.push(ComponentBlock { tag: ComponentTag::Zr(layer + 1), layer_group: layer, matrix: linalg::vstack(&zr, n) });
        blocks.push(ComponentBlock { tag: ComponentTag::Zd(layer + 1), layer_group: layer, matrix: linalg::vstack(&zd, n) });
    }
    for (j, f) in hol.iter().enumerate() {
        let l = l1 + j;
        blocks.push(ComponentBlock { tag: ComponentTag::Zr(l + 1), layer_group: l, matrix: f.z_r.clone() });
        blocks.push(ComponentBlock { tag: ComponentTag::Zd(l + 1), layer_group: l, matrix: f.z_d.clone() });
    }
    let last = hol.last().expect("non-empty");
    let depth = m.depth();
    blocks.push(ComponentBlock {
        tag: ComponentTag::Y(depth),
        layer_group: depth,
        matrix: linalg::vstack(&[&last.y_r, &last.y_d], n),
    });
    ComponentStack::new(blocks)
}

pub fn factorize_dataset(m: &ComposedModel, data: &Dataset) -> Result<ComponentStack> {
    factorize_composed(m, &data.segments, &data.holistic_r, &data.holistic_d)
}

impl Persist for ComposedModel {
    const KIND: &'static str = "composed";

    fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(Self::KIND);
        env.field("segments", self.segments)
            .nest("local", &self.local.to_envelope())
            .nest("stack", &self.stack_whiteners.to_envelope())
            .nest("holistic", &self.holistic.to_envelope());
        env
    }

    fn from_envelope(env: &Envelope) -> Result<Self> {
        let segments: usize = env.get_parsed("segments")?;
        if segments == 0 {
            return Err(Error::Data("composed model has 0 segments".into()));
        }
        let m = ComposedModel {
            local: DeepModel::from_envelope(&env.sub("local")?)?,
            stack_whiteners: WhitenerPair::from_envelope(&env.sub("stack")?)?,
            holistic: DeepModel::from_envelope(&env.sub("holistic")?)?,
            segments,
        };
        let first = &m.holistic.layers[0].dims;
        if m.stack_whiteners.r.output_dim() != first.d_r || m.stack_whiteners.d.output_dim() != first.d_d {
            return Err(Error::Data("stack whiteners do not match the holistic network's input dims".into()));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssca::SscaHyper;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rows: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, n, |_, _| rng.random_range(0.0..1.0))
    }

    fn data(s: usize, n: usize, seed: u64) -> (Vec<(DMatrix<f64>, DMatrix<f64>)>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segs = (0..s).map(|_| (unit(5, n, &mut rng), unit(4, n, &mut rng))).collect();
        (segs, unit(6, n, &mut rng), unit(5, n, &mut rng))
    }

    fn spec(y: usize, z: usize) -> LayerSpec {
        LayerSpec { y_dim: y, z_dim: z, hyper: SscaHyper::default() }
    }

    fn cfg(l1: usize, l2: usize) -> ComposeConfig {
        ComposeConfig {
            local: vec![spec(3, 2); l1],
            holistic: vec![spec(4, 3); l2],
            segment_dims: None,
            holistic_input_dim: 8,
        }
    }

    fn sched() -> Schedule {
        Schedule { outer_rounds: 1, inner_max_iter: 10, seed: 11 }
    }

    #[test]
    fn pooling_counts_and_order_invariance() {
        let (segs, _, _) = data(3, 7, 1);
        let (pr, pd) = pool_segments(&segs).unwrap();
        assert_eq!((pr.ncols(), pd.ncols()), (21, 21));
        let perm = [6, 2, 0, 5, 1, 3, 4];
        let shuffled: Vec<_> = segs.iter().map(|(r, d)| (r.select_columns(&perm), d.select_columns(&perm))).collect();
        assert_eq!(pool_segments(&shuffled).unwrap(), (pr, pd));
        let a = train_local(&segs, &[spec(3, 2)], None, &sched()).unwrap().model;
        let b = train_local(&shuffled, &[spec(3, 2)], None, &sched()).unwrap().model;
        assert_eq!(a, b);
    }

    #[test]
    fn single_segment_is_train_deep() {
        let (segs, _, _) = data(1, 9, 2);
        let (pr, pd) = pool_segments(&segs).unwrap();
        let a = train_local(&segs, &[spec(3, 2)], None, &sched()).unwrap().model;
        let b = deepnet::train_deep(&pr, &pd, &[spec(3, 2)], &sched()).unwrap().model;
        assert_eq!(a, b);
    }

    #[test]
    fn composed_inputs_align_with_manual_assembly() {
        let (segs, hr, hd) = data(2, 8, 3);
        let local = train_local(&segs, &[spec(3, 2)], None, &sched()).unwrap().model;
        let (cr, cd) = compose_inputs(&local, &segs, &hr, &hd).unwrap();
        assert_eq!((cr.nrows(), cd.nrows()), (2 * 3 + 6, 2 * 3 + 5));
        for k in [0, 5] {
            let f0 = local.layers[0].forward(&segs[0].0.columns(k, 1).into_owned(), &segs[0].1.columns(k, 1).into_owned()).unwrap();
            let f1 = local.layers[0].forward(&segs[1].0.columns(k, 1).into_owned(), &segs[1].1.columns(k, 1).into_owned()).unwrap();
            let mut expect: Vec<f64> = f0.y_r.iter().copied().collect();
            expect.extend(f1.y_r.iter());
            expect.extend(hr.column(k).iter());
            assert_eq!(cr.column(k).iter().copied().collect::<Vec<_>>(), expect);
        }
        let empty = DMatrix::<f64>::zeros(0, 8);
        let (only, _) = compose_inputs(&local, &segs[..1], &empty, &empty).unwrap();
        assert_eq!(only, local.forward_last_y_r(&segs[0].0, &segs[0].1));
    }

    impl DeepModel {
        fn forward_last_y_r(&self, r: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
            self.factorize_layers(r, d).unwrap().pop().unwrap().y_r
        }
    }

    #[test]
    fn seven_block_layout_and_partition() {
        let (segs, hr, hd) = data(4, 12, 4);
        let t = train_composed(&segs, &hr, &hd, &cfg(1, 2), &sched()).unwrap();
        let s = factorize_composed(&t.model, &segs, &hr, &hd).unwrap();
        let rows: Vec<usize> = s.blocks.iter().map(|b| b.matrix.nrows()).collect();
        assert_eq!(rows, vec![8, 8, 3, 3, 3, 3, 8]);
        let tags: Vec<String> = s.blocks.iter().map(|b| b.tag.to_string()).collect();
        assert_eq!(tags, ["Z_r^1", "Z_d^1", "Z_r^2", "Z_d^2", "Z_r^3", "Z_d^3", "Y^3"]);
        s.structure().validate().unwrap();
        // manual chain for the local Z blocks
        let f = t.model.local.factorize_layers(&segs[2].0, &segs[2].1).unwrap();
        assert_eq!(s.blocks[0].matrix.rows(4, 2), f[0].z_r.rows(0, 2));
        assert_eq!(factorize_composed(&t.model, &segs, &hr, &hd).unwrap(), s);
        assert!(factorize_composed(&t.model, &segs[..3], &hr, &hd).is_err());
    }

    #[test]
    fn constant_holistic_features_still_train() {
        let (segs, _, _) = data(2, 10, 5);
        let hr = DMatrix::from_element(3, 10, 0.7);
        let hd = DMatrix::from_element(2, 10, -1.0);
        let t = train_composed(&segs, &hr, &hd, &cfg(1, 1), &sched()).unwrap();
        let s = factorize_composed(&t.model, &segs, &hr, &hd).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.stacked().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn persist_round_trip_and_determinism() {
        let (segs, hr, hd) = data(2, 10, 6);
        let mut c = cfg(1, 1);
        c.segment_dims = Some((4, 3));
        let a = train_composed(&segs, &hr, &hd, &c, &sched()).unwrap().model;
        let b = train_composed(&segs, &hr, &hd, &c, &sched()).unwrap().model;
        assert_eq!(a, b);
        let env = Envelope::parse(&a.to_envelope().render(&[]), std::path::Path::new("m")).unwrap();
        assert_eq!(ComposedModel::from_envelope(&env).unwrap(), a);
    }
}
