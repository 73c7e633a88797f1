//! Greedy layer-wise stacking of SSCA layers. Layer `i > 1` consumes the
//! re-whitened shared components of layer `i - 1`; every layer's specific
//! components go straight to the component stack.

use crate::error::{Error, Result};
use crate::matrixio::{Envelope, FeatureMatrix, Persist};
use crate::preprocess::WhitenerPair;
use crate::ssca::{self, LayerDims, LayerFactorization, LayerTraining, Schedule, SscaHyper, SscaLayer};
use crate::stack::ComponentStack;

/// Per-layer configuration; input dimensions follow from the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub y_dim: usize,
    pub z_dim: usize,
    pub hyper: SscaHyper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepModel {
    /// Whitening of raw inputs, when the model was trained from raw features.
    pub input: Option<WhitenerPair>,
    pub layers: Vec<SscaLayer>,
    /// `between[i]` whitens layer `i + 1`'s shared outputs for layer `i + 2`.
    pub between: Vec<WhitenerPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepTraining {
    pub model: DeepModel,
    pub layers: Vec<LayerTraining>,
}

/// Seed for layer `index` (0-based) derived from the run seed.
pub fn layer_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

/// Trains layers one after another on already whitened and scaled inputs.
pub fn train_deep(
    xr: &FeatureMatrix,
    xd: &FeatureMatrix,
    specs: &[LayerSpec],
    schedule: &Schedule,
) -> Result<DeepTraining> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("a deep model needs at least one layer".into()));
    }
    let mut layers = Vec::with_capacity(specs.len());
    let mut between = Vec::new();
    let mut traces = Vec::with_capacity(specs.len());
    let mut inputs = (xr.clone(), xd.clone());
    for (i, spec) in specs.iter().enumerate() {
        if i > 0 {
            let prev: &SscaLayer = &layers[i - 1];
            let f = prev.forward(&inputs.0, &inputs.1)?;
            // capped by the sample count, like the input whitening
            let k = prev.dims.y_dim.min(f.y_r.ncols());
            let w = WhitenerPair::fit(&f.y_r, &f.y_d, k, k).map_err(|e| {
                Error::Data(format!("whitening the shared outputs of layer {i} failed: {e}"))
            })?;
            inputs = w.apply(&f.y_r, &f.y_d)?;
            between.push(w);
        }
        let dims = LayerDims { d_r: inputs.0.nrows(), d_d: inputs.1.nrows(), y_dim: spec.y_dim, z_dim: spec.z_dim };
        let sched = Schedule { seed: layer_seed(schedule.seed, i), ..*schedule };
        let t = ssca::train_layer(&inputs.0, &inputs.1, &spec.hyper, &dims, &sched)?;
        layers.push(SscaLayer { dims, hyper: spec.hyper, params: t.params.clone() });
        traces.push(t);
    }
    Ok(DeepTraining { model: DeepModel { input: None, layers, between }, layers: traces })
}

/// Fits input whiteners to `(dim_r, dim_d)` outputs, then trains on the
/// whitened data. The whiteners are stored in the model.
pub fn train_deep_raw(
    xr: &FeatureMatrix,
    xd: &FeatureMatrix,
    dim_r: usize,
    dim_d: usize,
    specs: &[LayerSpec],
    schedule: &Schedule,
) -> Result<DeepTraining> {
    let w = WhitenerPair::fit(xr, xd, dim_r, dim_d)?;
    let (wr, wd) = w.apply(xr, xd)?;
    let mut t = train_deep(&wr, &wd, specs, schedule)?;
    t.model.input = Some(w);
    Ok(t)
}

impl DeepModel {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn last(&self) -> &SscaLayer {
        self.layers.last().expect("deep model has at least one layer")
    }

    /// Per-layer factorizations, running the chain of layers and
    /// between-layer whiteners.
    pub fn factorize_layers(&self, xr: &FeatureMatrix, xd: &FeatureMatrix) -> Result<Vec<LayerFactorization>> {
        let (mut cur_r, mut cur_d) = match &self.input {
            Some(w) => w.apply(xr, xd)?,
            None => (xr.clone(), xd.clone()),
        };
        let mut out = Vec::with_capacity(self.depth());
        for (i, layer) in self.layers.iter().enumerate() {
            let f = layer.forward(&cur_r, &cur_d)?;
            if i + 1 < self.depth() {
                let (r, d) = self.between[i].apply(&f.y_r, &f.y_d)?;
                cur_r = r;
                cur_d = d;
            }
            out.push(f);
        }
        Ok(out)
    }
}

/// `Z_r^1, Z_d^1, …, Z_r^L, Z_d^L, Y^L`
pub fn factorize(m: &DeepModel, xr: &FeatureMatrix, xd: &FeatureMatrix) -> Result<ComponentStack> {
    let fs = m.factorize_layers(xr, xd)?;
    let last = fs.last().expect("non-empty").clone();
    ComponentStack::deep(fs.into_iter().map(|f| (f.z_r, f.z_d)).collect(), &last.y_r, &last.y_d)
}

impl Persist for DeepModel {
    const KIND: &'static str = "dssca";

    fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(Self::KIND);
        env.field("depth", self.depth()).field("has_input_whitener", self.input.is_some());
        if let Some(w) = &self.input {
            env.nest("input", &w.to_envelope());
        }
        for (i, l) in self.layers.iter().enumerate() {
            env.nest(&format!("layer{}", i + 1), &l.to_envelope());
        }
        for (i, w) in self.between.iter().enumerate() {
            env.nest(&format!("between{}", i + 1), &w.to_envelope());
        }
        env
    }

    fn from_envelope(env: &Envelope) -> Result<Self> {
        let depth: usize = env.get_parsed("depth")?;
        if depth == 0 {
            return Err(Error::Data("dssca model has depth 0".into()));
        }
        let input = if env.get_parsed::<bool>("has_input_whitener")? {
            Some(WhitenerPair::from_envelope(&env.sub("input")?)?)
        } else {
            None
        };
        let layers = (1..=depth)
            .map(|i| SscaLayer::from_envelope(&env.sub(&format!("layer{i}"))?))
            .collect::<Result<Vec<_>>>()?;
        let between = (1..depth)
            .map(|i| WhitenerPair::from_envelope(&env.sub(&format!("between{i}"))?))
            .collect::<Result<Vec<_>>>()?;
        for (i, w) in between.iter().enumerate() {
            let next = &layers[i + 1].dims;
            if w.r.output_dim() != next.d_r || w.d.output_dim() != next.d_d {
                return Err(Error::Data(format!("whitener before layer {} does not match its input dims", i + 2)));
            }
        }
        Ok(DeepModel { input, layers, between })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rows: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, n, |_, _| rng.random_range(0.0..1.0))
    }

    fn specs(l: usize) -> Vec<LayerSpec> {
        vec![LayerSpec { y_dim: 4, z_dim: 3, hyper: SscaHyper::default() }; l]
    }

    fn sched() -> Schedule {
        Schedule { outer_rounds: 1, inner_max_iter: 15, seed: 3 }
    }

    #[test]
    fn single_layer_is_train_layer() {
        let (xr, xd) = (unit(6, 20, 1), unit(5, 20, 2));
        let t = train_deep(&xr, &xd, &specs(1), &sched()).unwrap();
        let dims = LayerDims { d_r: 6, d_d: 5, y_dim: 4, z_dim: 3 };
        let direct = ssca::train_layer(&xr, &xd, &SscaHyper::default(), &dims, &sched()).unwrap();
        assert_eq!(t.model.layers[0].params, direct.params);
    }

    #[test]
    fn greedy_freeze() {
        let (xr, xd) = (unit(6, 20, 1), unit(5, 20, 2));
        let one = train_deep(&xr, &xd, &specs(1), &sched()).unwrap().model;
        let two = train_deep(&xr, &xd, &specs(2), &sched()).unwrap().model;
        let render = |l: &SscaLayer| l.to_envelope().render(&[]);
        assert_eq!(render(&one.layers[0]), render(&two.layers[0]));
        assert_eq!(two.layers[1].dims.d_r, 4);
    }

    #[test]
    fn stack_shape_and_manual_chain() {
        let (xr, xd) = (unit(6, 20, 1), unit(5, 20, 2));
        let m = train_deep(&xr, &xd, &specs(2), &sched()).unwrap().model;
        let s = factorize(&m, &xr, &xd).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.rows(), 4 * 3 + 8);
        let f1 = m.layers[0].forward(&xr, &xd).unwrap();
        let (ir, id) = m.between[0].apply(&f1.y_r, &f1.y_d).unwrap();
        let f2 = m.layers[1].forward(&ir, &id).unwrap();
        assert_eq!(s.blocks[0].matrix, f1.z_r);
        assert_eq!(s.blocks[3].matrix, f2.z_d);
        assert_eq!(s.blocks[4].matrix.rows(0, 4), f2.y_r.rows(0, 4));
        assert_eq!(s.blocks[4].matrix.rows(4, 4), f2.y_d.rows(0, 4));
        // single sample
        let one = factorize(&m, &xr.columns(0, 1).into_owned(), &xd.columns(0, 1).into_owned()).unwrap();
        assert!(one.blocks.iter().all(|b| b.matrix.ncols() == 1));
        assert_eq!(factorize(&m, &xr, &xd).unwrap(), s);
    }

    #[test]
    fn persist_round_trip() {
        let (xr, xd) = (unit(6, 20, 1), unit(5, 20, 2));
        let m = train_deep_raw(&xr, &xd, 5, 4, &specs(2), &sched()).unwrap().model;
        let env = Envelope::parse(&m.to_envelope().render(&[]), std::path::Path::new("m")).unwrap();
        assert_eq!(DeepModel::from_envelope(&env).unwrap(), m);
    }

    #[test]
    fn empty_specs_rejected() {
        assert!(train_deep(&unit(2, 4, 0), &unit(2, 4, 1), &[], &sched()).is_err());
    }
}
