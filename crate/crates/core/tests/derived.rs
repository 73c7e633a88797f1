use std::path::Path;

use dssca::baseline;
use dssca::config::RunConfig;
use dssca::deepnet::{self, LayerSpec};
use dssca::matrixio::LabelVector;
use dssca::pipeline::{self, EvalReport};
use dssca::preprocess::WhitenerPair;
use dssca::ssca::{self, LayerDims, LayerParams, Schedule, SscaHyper};
use dssca::sslm::{self, CvGrid, SearchMode, SslmOptions};
use dssca::stack::{ComponentBlock, ComponentStack, ComponentTag};
use dssca::synth::{self, LabelDependence, SynthSpec};
use dssca::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn unit(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.0))
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `σ(Σ_k m[i,k] x[k,j] + b[i])` with explicit loops.
fn loop_layer(m: &DMatrix<f64>, x: &DMatrix<f64>, b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), x.ncols(), |i, j| {
        let mut s = b[i];
        for k in 0..m.ncols() {
            s += m[(i, k)] * x[(k, j)];
        }
        sig(s)
    })
}

fn loop_decoder(q: &DMatrix<f64>, u: &DMatrix<f64>, b: &[f64], y: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(q.nrows(), y.ncols(), |i, j| {
        let mut s = b[i];
        for k in 0..q.ncols() {
            s += q[(i, k)] * y[(k, j)];
        }
        for k in 0..u.ncols() {
            s += u[(i, k)] * z[(k, j)];
        }
        sig(s)
    })
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_params(dims: &LayerDims, seed: u64) -> LayerParams {
    let mut p = LayerParams::init(dims, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for b in [&mut p.b_yr, &mut p.b_yd, &mut p.b_zr, &mut p.b_zd, &mut p.b_xr, &mut p.b_xd] {
        b.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    p
}

#[test]
fn forward_and_reconstruct_match_loop_oracle() {
    let dims = LayerDims { d_r: 3, d_d: 4, y_dim: 4, z_dim: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_params(&dims, 1);
    let xr = unit(3, 3, &mut rng);
    let xd = unit(4, 3, &mut rng);
    let f = ssca::forward(&p, &xr, &xd).unwrap();
    assert!(max_abs_diff(&f.y_r, &loop_layer(&p.w_r, &xr, p.b_yr.as_slice())) < 1e-12);
    assert!(max_abs_diff(&f.y_d, &loop_layer(&p.w_d, &xd, p.b_yd.as_slice())) < 1e-12);
    assert!(max_abs_diff(&f.z_r, &loop_layer(&p.v_r, &xr, p.b_zr.as_slice())) < 1e-12);
    assert!(max_abs_diff(&f.z_d, &loop_layer(&p.v_d, &xd, p.b_zd.as_slice())) < 1e-12);
    let (rr, rd) = ssca::reconstruct(&p, &f).unwrap();
    assert!(max_abs_diff(&rr, &loop_decoder(&p.q_r, &p.u_r, p.b_xr.as_slice(), &f.y_r, &f.z_r)) < 1e-12);
    assert!(max_abs_diff(&rd, &loop_decoder(&p.q_d, &p.u_d, p.b_xd.as_slice(), &f.y_d, &f.z_d)) < 1e-12);
}

fn kl_rows(m: &DMatrix<f64>, rho: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..m.nrows() {
        let q = (0..m.ncols()).map(|j| m[(i, j)]).sum::<f64>() / m.ncols() as f64;
        total += rho * (rho / q).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - q)).ln();
    }
    total
}

fn sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            s += (a[(i, j)] - b[(i, j)]).powi(2);
        }
    }
    s
}

#[test]
fn cost_matches_term_by_term_recomputation() {
    let dims = LayerDims { d_r: 7, d_d: 7, y_dim: 3, z_dim: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xr = unit(7, 5, &mut rng);
    let xd = unit(7, 5, &mut rng);
    let p = random_params(&dims, 2);
    let h = SscaHyper { lambda: 0.3, zeta_r: 0.7, zeta_d: 1.3, alpha_r: 0.2, alpha_d: 0.4, beta_r: 0.5, beta_d: 0.6, rho_y: 0.1, rho_z: 0.2, exact_norms: false };
    let yr = loop_layer(&p.w_r, &xr, p.b_yr.as_slice());
    let yd = loop_layer(&p.w_d, &xd, p.b_yd.as_slice());
    let zr = loop_layer(&p.v_r, &xr, p.b_zr.as_slice());
    let zd = loop_layer(&p.v_d, &xd, p.b_zd.as_slice());
    let rr = loop_decoder(&p.q_r, &p.u_r, p.b_xr.as_slice(), &yr, &zr);
    let rd = loop_decoder(&p.q_d, &p.u_d, p.b_xd.as_slice(), &yd, &zd);
    let n2 = 2.0 * 5.0;
    let weights = [&p.w_r, &p.w_d, &p.v_r, &p.v_d, &p.q_r, &p.q_d, &p.u_r, &p.u_d];
    let wsq: f64 = weights.iter().flat_map(|m| m.iter()).map(|v| v * v).sum();
    let squared = sq(&yr, &yd) / n2
        + h.lambda * 0.5 * wsq
        + h.zeta_r * sq(&rr, &xr) / n2
        + h.zeta_d * sq(&rd, &xd) / n2
        + h.alpha_r * kl_rows(&yr, h.rho_y)
        + h.alpha_d * kl_rows(&yd, h.rho_y)
        + h.beta_r * kl_rows(&zr, h.rho_z)
        + h.beta_d * kl_rows(&zd, h.rho_z);
    let got = ssca::cost(&p, &xr, &xd, &h).unwrap().0;
    assert!((got - squared).abs() < 1e-10 * squared.max(1.0), "{got} vs {squared}");

    let he = SscaHyper { exact_norms: true, ..h };
    let eps = ssca::NORM_EPS;
    let exact = (sq(&yr, &yd) + eps).sqrt()
        + he.lambda * (wsq + eps).sqrt()
        + he.zeta_r * (sq(&rr, &xr) + eps).sqrt()
        + he.zeta_d * (sq(&rd, &xd) + eps).sqrt()
        + he.alpha_r * kl_rows(&yr, he.rho_y)
        + he.alpha_d * kl_rows(&yd, he.rho_y)
        + he.beta_r * kl_rows(&zr, he.rho_z)
        + he.beta_d * kl_rows(&zd, he.rho_z);
    let got = ssca::cost(&p, &xr, &xd, &he).unwrap().0;
    assert!((got - exact).abs() < 1e-10 * exact.max(1.0), "{got} vs {exact}");
}

fn whitened_holistic(spec: &SynthSpec, dim: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let data = synth::generate(spec).unwrap();
    let w = WhitenerPair::fit(&data.holistic_r, &data.holistic_d, dim, dim).unwrap();
    w.apply(&data.holistic_r, &data.holistic_d).unwrap()
}

#[test]
fn duplicated_modality_shrinks_similarity_residual() {
    let dims = LayerDims { d_r: 8, d_d: 8, y_dim: 3, z_dim: 3 };
    for seed in 0..10 {
        let spec = SynthSpec { n: 100, dim_r: 8, dim_d: 8, seed, ..Default::default() };
        let (x, _) = whitened_holistic(&spec, 8);
        let before = ssca::similarity_residual(&ssca::forward(&LayerParams::init(&dims, seed), &x, &x).unwrap());
        let h = SscaHyper { exact_norms: true, ..Default::default() };
        let t = ssca::train_layer(&x, &x, &h, &dims, &Schedule { seed, ..Default::default() }).unwrap();
        let after = ssca::similarity_residual(&ssca::forward(&t.params, &x, &x).unwrap());
        assert!(before >= 10.0 * after, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn second_layer_is_at_least_as_shared_as_the_first() {
    let hyper = SscaHyper { exact_norms: true, ..Default::default() };
    let specs = vec![LayerSpec { y_dim: 4, z_dim: 4, hyper }; 2];
    for seed in 0..5 {
        let spec = SynthSpec { seed, ..Default::default() };
        let (xr, xd) = whitened_holistic(&spec, 20);
        let t = deepnet::train_deep(&xr, &xd, &specs, &Schedule { seed, ..Default::default() }).unwrap();
        let fs = t.model.factorize_layers(&xr, &xd).unwrap();
        let (r1, r2) = (ssca::similarity_residual(&fs[0]), ssca::similarity_residual(&fs[1]));
        assert!(r2 <= r1, "seed {seed}: layer 1 {r1}, layer 2 {r2}");
    }
}

#[test]
fn cv_prefers_some_component_regularization_with_a_noise_block() {
    let classes = 3;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let labels = LabelVector::new((0..n).map(|j| j % classes).collect(), classes).unwrap();
        let centers = gaussian(4, classes, &mut rng);
        let informative = DMatrix::from_fn(4, n, |i, j| centers[(i, labels.labels[j])] + 0.8 * rng.sample::<f64, _>(StandardNormal));
        let block = |tag, layer_group, matrix| ComponentBlock { tag, layer_group, matrix };
        let stack = ComponentStack::new(vec![
            block(ComponentTag::Y(1), 0, informative),
            block(ComponentTag::Named("noise".into()), 1, gaussian(6, n, &mut rng)),
        ])
        .unwrap();
        let grid = CvGrid { e: sslm::DEFAULT_GRID.to_vec(), l: vec![0.0], w: vec![0.01], mode: SearchMode::Full };
        let cv = sslm::cv_select_gammas(&stack.stacked(), &labels, &stack.structure(), &grid, &SslmOptions::default()).unwrap();
        assert!(cv.best.e > 0.0, "seed {seed}: {:?}", cv.evaluated);
    }
}

#[test]
fn low_noise_synthetic_pairs_are_strongly_correlated() {
    for seed in 0..10 {
        let spec = SynthSpec { shared: 2, noise: 0.01, classes: 2, seed, ..Default::default() };
        let data = synth::generate(&spec).unwrap();
        let c = baseline::cca_fit(&data.holistic_r, &data.holistic_d, 2, None).unwrap();
        assert!(c.correlations.iter().all(|&r| r >= 0.8), "seed {seed}: {:?}", c.correlations);
    }
}

#[test]
fn accuracy_is_confusion_trace_over_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = LabelVector::new((0..50).map(|_| rng.random_range(0..4)).collect(), 4).unwrap();
    let pred: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
    let r = EvalReport::new(&truth, &pred, None).unwrap();
    let hits = truth.labels.iter().zip(&pred).filter(|(a, b)| a == b).count();
    assert_eq!(r.accuracy(), hits as f64 / 50.0);
    assert_eq!(r.confusion_matrix().trace(), hits as f64);
}

#[test]
fn shared_only_pipeline_beats_majority_rate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { n: 200, dim_r: 10, dim_d: 10, segments: 2, dependence: LabelDependence::SharedOnly, seed: 3, ..Default::default() };
    let data = synth::generate(&spec).unwrap();
    data.write(dir.path(), &[]).unwrap();
    let mut cfg = RunConfig::with_seed(3);
    for (k, v) in [
        ("segment_dim_r", "8"),
        ("segment_dim_d", "8"),
        ("holistic_input_dim", "16"),
        ("local_y_dim", "4"),
        ("local_z_dim", "4"),
        ("holistic_y_dim", "4"),
        ("holistic_z_dim", "4"),
        ("outer_rounds", "3"),
        ("inner_max_iter", "100"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let out = pipeline::run_pipeline(&cfg, dir.path()).unwrap();
    let report = out.report.unwrap();
    let (_, test) = data.split();
    let test = test.unwrap();
    let mut counts = vec![0; spec.classes];
    test.labels.labels.iter().for_each(|&c| counts[c] += 1);
    let majority = *counts.iter().max().unwrap() as f64 / test.len() as f64;
    assert!(report.accuracy() > majority, "accuracy {} vs majority {majority}", report.accuracy());
    assert!(Path::new(&out.out_dir).join("eval.kv").exists());
}
