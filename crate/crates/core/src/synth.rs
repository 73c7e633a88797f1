//! Seeded two-modality data with known shared and modality-specific latent
//! structure.
//!
//! Observations are `X_r = σ(A_r s + B_r p_r + σ_noise ε)` and likewise for
//! `d`, with standard normal latents. Every random quantity comes from one
//! ChaCha8 stream per role, all keyed by the synth seed:
//!
//! | stream | contents |
//! |---|---|
//! | 0 | mixing matrices `A_r, B_r, A_d, B_d`, then the segment mixings in the same order |
//! | 1 | label weights |
//! | 2 | latent draws `s, p_r, p_d` per candidate sample, rejected candidates included |
//! | 3 | holistic observation noise, `r` then `d` per accepted sample |
//! | 4 | per-segment latent jitter and segment noise |

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::parse_key_values;
use crate::error::{Error, Result};
use crate::matrixio::{
    self, Dataset, DatasetManifest, Envelope, FeatureMatrix, FileRef, LabelVector, Persist, SampleRecord, Split,
};

/// Scale of the per-segment deviation of the latents from the sample's own.
pub const SEGMENT_JITTER: f64 = 0.5;
/// Pre-activation clamp; keeps observations strictly inside `(0, 1)`.
const PREACT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelDependence {
    SharedOnly,
    SpecificOnly,
    Mixed,
}

impl fmt::Display for LabelDependence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelDependence::SharedOnly => "shared-only",
            LabelDependence::SpecificOnly => "specific-only",
            LabelDependence::Mixed => "mixed",
        })
    }
}

impl std::str::FromStr for LabelDependence {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared-only" => Ok(LabelDependence::SharedOnly),
            "specific-only" => Ok(LabelDependence::SpecificOnly),
            "mixed" => Ok(LabelDependence::Mixed),
            other => Err(Error::InvalidArgument(format!(
                "label dependence must be shared-only, specific-only or mixed, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub shared: usize,
    pub specific_r: usize,
    pub specific_d: usize,
    pub dim_r: usize,
    pub dim_d: usize,
    pub noise: f64,
    pub classes: usize,
    pub dependence: LabelDependence,
    pub segments: usize,
    pub seed: u64,
    /// Fraction of samples (the last ones) assigned to the test split.
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 500,
            shared: 4,
            specific_r: 4,
            specific_d: 4,
            dim_r: 20,
            dim_d: 20,
            noise: 0.05,
            classes: 4,
            dependence: LabelDependence::SharedOnly,
            segments: 4,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.n, self.shared, self.specific_r, self.specific_d, self.dim_r, self.dim_d, self.segments];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("synth dimensions and counts must be >= 1: {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!("synth needs at least 2 classes, got {}", self.classes)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidArgument(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction)));
        }
        Ok(())
    }

    pub fn test_count(&self) -> usize {
        (self.test_fraction * self.n as f64).round() as usize
    }

    fn latent_dim(&self) -> usize {
        match self.dependence {
            LabelDependence::SharedOnly => self.shared,
            LabelDependence::SpecificOnly => self.specific_r + self.specific_d,
            LabelDependence::Mixed => self.shared + self.specific_r + self.specific_d,
        }
    }

    /// Spec file text; `parse` reads it back.
    pub fn render(&self) -> String {
        format!(
            "n = {}\nshared = {}\nspecific_r = {}\nspecific_d = {}\ndim_r = {}\ndim_d = {}\nnoise = {}\nclasses = {}\n\
             dependence = {}\nsegments = {}\nseed = {}\ntest_fraction = {}\n",
            self.n,
            self.shared,
            self.specific_r,
            self.specific_d,
            self.dim_r,
            self.dim_d,
            matrixio::format_f64(self.noise),
            self.classes,
            self.dependence,
            self.segments,
            self.seed,
            matrixio::format_f64(self.test_fraction)
        )
    }

    /// `key = value` spec file; omitted keys keep their defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut s = SynthSpec::default();
        for (k, v, ln) in parse_key_values(text, path)? {
            let bad = || Error::parse(path, ln, format!("cannot parse {k} = {v:?}"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            match k.as_str() {
                "n" => s.n = int()?,
                "shared" => s.shared = int()?,
                "specific_r" => s.specific_r = int()?,
                "specific_d" => s.specific_d = int()?,
                "specific" => {
                    s.specific_r = int()?;
                    s.specific_d = s.specific_r;
                }
                "dim_r" => s.dim_r = int()?,
                "dim_d" => s.dim_d = int()?,
                "dim" => {
                    s.dim_r = int()?;
                    s.dim_d = s.dim_r;
                }
                "noise" => s.noise = v.parse().map_err(|_| bad())?,
                "classes" => s.classes = int()?,
                "dependence" => s.dependence = v.parse().map_err(|e: Error| Error::parse(path, ln, e.to_string()))?,
                "segments" => s.segments = int()?,
                "seed" => s.seed = v.parse().map_err(|_| bad())?,
                "test_fraction" => s.test_fraction = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::parse(path, ln, format!("unknown synth key {k:?}"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Mixing matrices of one observation channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixing {
    pub a_r: DMatrix<f64>,
    pub b_r: DMatrix<f64>,
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub holistic: Mixing,
    pub segment: Mixing,
    /// `classes × latent`; labels are the argmax of `W h`.
    pub label_weights: DMatrix<f64>,
    pub shared: DMatrix<f64>,
    pub specific_r: DMatrix<f64>,
    pub specific_d: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub holistic_r: FeatureMatrix,
    pub holistic_d: FeatureMatrix,
    pub segments: Vec<(FeatureMatrix, FeatureMatrix)>,
    pub labels: LabelVector,
    pub truth: SynthTruth,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    // filled row by row so the stream layout reads naturally
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

fn mixing(rng: &mut ChaCha8Rng, s: &SynthSpec) -> Mixing {
    let sr = 1.0 / ((s.shared + s.specific_r) as f64).sqrt();
    let sd = 1.0 / ((s.shared + s.specific_d) as f64).sqrt();
    Mixing {
        a_r: normal_matrix(rng, s.dim_r, s.shared, sr),
        b_r: normal_matrix(rng, s.dim_r, s.specific_r, sr),
        a_d: normal_matrix(rng, s.dim_d, s.shared, sd),
        b_d: normal_matrix(rng, s.dim_d, s.specific_d, sd),
    }
}

fn observe(a: &DMatrix<f64>, b: &DMatrix<f64>, s: &DVector<f64>, p: &DVector<f64>, noise: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut v = a * s + b * p;
    for x in v.iter_mut() {
        let pre = (*x + noise * rng.sample::<f64, _>(StandardNormal)).clamp(-PREACT_CLAMP, PREACT_CLAMP);
        *x = 1.0 / (1.0 + (-pre).exp());
    }
    v
}

fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Label-relevant latent vector for one sample.
pub fn label_latent(dep: LabelDependence, s: &[f64], pr: &[f64], pd: &[f64]) -> DVector<f64> {
    let parts: Vec<&[f64]> = match dep {
        LabelDependence::SharedOnly => vec![s],
        LabelDependence::SpecificOnly => vec![pr, pd],
        LabelDependence::Mixed => vec![s, pr, pd],
    };
    DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.into_iter().flatten().copied())
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let n = spec.n;
    let mut mix_rng = stream(spec.seed, 0);
    let holistic = mixing(&mut mix_rng, spec);
    let segment = mixing(&mut mix_rng, spec);
    let label_weights = normal_matrix(&mut stream(spec.seed, 1), spec.classes, spec.latent_dim(), 1.0);
    let mut latent_rng = stream(spec.seed, 2);
    let mut noise_rng = stream(spec.seed, 3);
    let mut seg_rng = stream(spec.seed, 4);

    let quota = n.div_ceil(spec.classes);
    let mut counts = vec![0usize; spec.classes];
    let max_draws = 1000 * n;
    let mut draws = 0;
    let mut shared = DMatrix::zeros(spec.shared, n);
    let mut specific_r = DMatrix::zeros(spec.specific_r, n);
    let mut specific_d = DMatrix::zeros(spec.specific_d, n);
    let mut labels = Vec::with_capacity(n);
    let mut hr = DMatrix::zeros(spec.dim_r, n);
    let mut hd = DMatrix::zeros(spec.dim_d, n);
    let mut segs = vec![(DMatrix::zeros(spec.dim_r, n), DMatrix::zeros(spec.dim_d, n)); spec.segments];
    for j in 0..n {
        let (s, pr, pd, label) = loop {
            if draws == max_draws {
                return Err(Error::Data(format!(
                    "could not balance {} classes within {max_draws} draws; with a {}-dimensional label latent \
                     some classes may be unreachable, use fewer classes or more latent dimensions",
                    spec.classes,
                    spec.latent_dim()
                )));
            }
            draws += 1;
            let s = normal_vec(&mut latent_rng, spec.shared);
            let pr = normal_vec(&mut latent_rng, spec.specific_r);
            let pd = normal_vec(&mut latent_rng, spec.specific_d);
            let h = label_latent(spec.dependence, s.as_slice(), pr.as_slice(), pd.as_slice());
            let label = argmax(&(&label_weights * h));
            if counts[label] < quota {
                counts[label] += 1;
                break (s, pr, pd, label);
            }
        };
        labels.push(label);
        shared.set_column(j, &s);
        specific_r.set_column(j, &pr);
        specific_d.set_column(j, &pd);
        hr.set_column(j, &observe(&holistic.a_r, &holistic.b_r, &s, &pr, spec.noise, &mut noise_rng));
        hd.set_column(j, &observe(&holistic.a_d, &holistic.b_d, &s, &pd, spec.noise, &mut noise_rng));
        for (seg_r, seg_d) in segs.iter_mut() {
            let sk = &s + normal_vec(&mut seg_rng, spec.shared) * SEGMENT_JITTER;
            let prk = &pr + normal_vec(&mut seg_rng, spec.specific_r) * SEGMENT_JITTER;
            let pdk = &pd + normal_vec(&mut seg_rng, spec.specific_d) * SEGMENT_JITTER;
            seg_r.set_column(j, &observe(&segment.a_r, &segment.b_r, &sk, &prk, spec.noise, &mut seg_rng));
            seg_d.set_column(j, &observe(&segment.a_d, &segment.b_d, &sk, &pdk, spec.noise, &mut seg_rng));
        }
    }
    Ok(SynthData {
        holistic_r: hr,
        holistic_d: hd,
        segments: segs,
        labels: LabelVector::new(labels, spec.classes)?,
        truth: SynthTruth { spec: *spec, holistic, segment, label_weights, shared, specific_r, specific_d },
    })
}

pub fn sample_id(j: usize) -> String {
    format!("s{j:04}")
}

impl SynthData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            ids: idx.iter().map(|&j| sample_id(j)).collect(),
            labels: LabelVector {
                labels: idx.iter().map(|&j| self.labels.labels[j]).collect(),
                num_classes: self.labels.num_classes,
            },
            holistic_r: self.holistic_r.select_columns(idx),
            holistic_d: self.holistic_d.select_columns(idx),
            segments: self.segments.iter().map(|(r, d)| (r.select_columns(idx), d.select_columns(idx))).collect(),
        }
    }

    /// Train split and, if non-empty, test split.
    pub fn split(&self) -> (Dataset, Option<Dataset>) {
        let n = self.len();
        let n_train = n - self.truth.spec.test_count();
        let train: Vec<usize> = (0..n_train).collect();
        let test: Vec<usize> = (n_train..n).collect();
        (self.subset(&train), (!test.is_empty()).then(|| self.subset(&test)))
    }

    pub fn manifest(&self) -> DatasetManifest {
        let n_train = self.len() - self.truth.spec.test_count();
        let at = |file: &str, j: usize| FileRef { path: file.into(), column: Some(j) };
        let samples = (0..self.len())
            .map(|j| SampleRecord {
                id: sample_id(j),
                split: if j < n_train { Split::Train } else { Split::Test },
                label: self.labels.labels[j],
                holistic_r: at("holistic_r.mat", j),
                holistic_d: at("holistic_d.mat", j),
                segments: (0..self.segments.len())
                    .map(|k| (at(&format!("segment{k}_r.mat"), j), at(&format!("segment{k}_d.mat"), j)))
                    .collect(),
            })
            .collect();
        DatasetManifest { num_classes: self.labels.num_classes, samples }
    }

    /// Writes matrices, `labels.txt`, `manifest.txt`, `spec.txt` and the
    /// ground truth (`truth.model`) into `dir`.
    pub fn write(&self, dir: &Path, header: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        matrixio::write_matrix_with_header(&self.holistic_r, header, dir.join("holistic_r.mat"))?;
        matrixio::write_matrix_with_header(&self.holistic_d, header, dir.join("holistic_d.mat"))?;
        for (k, (r, d)) in self.segments.iter().enumerate() {
            matrixio::write_matrix_with_header(r, header, dir.join(format!("segment{k}_r.mat")))?;
            matrixio::write_matrix_with_header(d, header, dir.join(format!("segment{k}_d.mat")))?;
        }
        matrixio::write_labels(&self.labels, dir.join("labels.txt"))?;
        matrixio::write_manifest(&self.manifest(), dir.join("manifest.txt"))?;
        let spec_path = dir.join("spec.txt");
        std::fs::write(&spec_path, self.truth.spec.render()).map_err(|e| Error::io(&spec_path, e))?;
        matrixio::save_model_with_header(&self.truth, header, dir.join("truth.model"))
    }
}

impl Persist for SynthTruth {
    const KIND: &'static str = "synth-truth";

    fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(Self::KIND);
        let s = &self.spec;
        env.field("n", s.n)
            .field("shared", s.shared)
            .field("specific_r", s.specific_r)
            .field("specific_d", s.specific_d)
            .field("dim_r", s.dim_r)
            .field("dim_d", s.dim_d)
            .real("noise", s.noise)
            .field("classes", s.classes)
            .field("dependence", s.dependence)
            .field("segments", s.segments)
            .field("seed", s.seed)
            .real("test_fraction", s.test_fraction);
        for (prefix, m) in [("holistic", &self.holistic), ("segment", &self.segment)] {
            env.matrix(format!("{prefix}.A_r"), &m.a_r)
                .matrix(format!("{prefix}.B_r"), &m.b_r)
                .matrix(format!("{prefix}.A_d"), &m.a_d)
                .matrix(format!("{prefix}.B_d"), &m.b_d);
        }
        env.matrix("label_weights", &self.label_weights)
            .matrix("shared", &self.shared)
            .matrix("specific_r", &self.specific_r)
            .matrix("specific_d", &self.specific_d);
        env
    }

    fn from_envelope(env: &Envelope) -> Result<Self> {
        let spec = SynthSpec {
            n: env.get_parsed("n")?,
            shared: env.get_parsed("shared")?,
            specific_r: env.get_parsed("specific_r")?,
            specific_d: env.get_parsed("specific_d")?,
            dim_r: env.get_parsed("dim_r")?,
            dim_d: env.get_parsed("dim_d")?,
            noise: env.get_parsed("noise")?,
            classes: env.get_parsed("classes")?,
            dependence: env.get("dependence")?.parse()?,
            segments: env.get_parsed("segments")?,
            seed: env.get_parsed("seed")?,
            test_fraction: env.get_parsed("test_fraction")?,
        };
        let mix = |prefix: &str| -> Result<Mixing> {
            Ok(Mixing {
                a_r: env.get_matrix(&format!("{prefix}.A_r"))?.clone(),
                b_r: env.get_matrix(&format!("{prefix}.B_r"))?.clone(),
                a_d: env.get_matrix(&format!("{prefix}.A_d"))?.clone(),
                b_d: env.get_matrix(&format!("{prefix}.B_d"))?.clone(),
            })
        };
        Ok(SynthTruth {
            spec,
            holistic: mix("holistic")?,
            segment: mix("segment")?,
            label_weights: env.get_matrix("label_weights")?.clone(),
            shared: env.get_matrix("shared")?.clone(),
            specific_r: env.get_matrix("specific_r")?.clone(),
            specific_d: env.get_matrix("specific_d")?.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { n: 60, dim_r: 6, dim_d: 5, segments: 2, ..SynthSpec::default() }
    }

    #[test]
    fn deterministic_and_in_open_interval() {
        let a = generate(&small()).unwrap();
        assert_eq!(a, generate(&small()).unwrap());
        let other = generate(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.holistic_r, other.holistic_r);
        let all = a.holistic_r.iter().chain(a.holistic_d.iter()).chain(a.segments.iter().flat_map(|(r, d)| r.iter().chain(d.iter())));
        assert!(all.into_iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn labels_follow_the_latent_classifier() {
        for dep in [LabelDependence::SharedOnly, LabelDependence::SpecificOnly, LabelDependence::Mixed] {
            let d = generate(&SynthSpec { noise: 0.0, dependence: dep, ..small() }).unwrap();
            let t = &d.truth;
            for j in 0..d.len() {
                let h = label_latent(
                    dep,
                    t.shared.column(j).as_slice(),
                    t.specific_r.column(j).as_slice(),
                    t.specific_d.column(j).as_slice(),
                );
                assert_eq!(argmax(&(&t.label_weights * h)), d.labels.labels[j]);
            }
        }
    }

    #[test]
    fn classes_are_balanced() {
        let d = generate(&SynthSpec::default()).unwrap();
        let mut counts = vec![0; 4];
        d.labels.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| (c as f64 - 125.0).abs() <= 12.5), "{counts:?}");
    }

    #[test]
    fn spec_text_round_trip() {
        let s = SynthSpec { noise: 0.125, dependence: LabelDependence::Mixed, seed: 9, ..small() };
        assert_eq!(SynthSpec::parse(&s.render(), Path::new("s")).unwrap(), s);
        let p = SynthSpec::parse("# tiny\nn = 10\ndim = 3\nspecific = 2\n", Path::new("s")).unwrap();
        assert_eq!((p.n, p.dim_r, p.dim_d, p.specific_d), (10, 3, 3, 2));
        assert!(SynthSpec::parse("colour = red", Path::new("s")).is_err());
        assert!(SynthSpec::parse("classes = 1", Path::new("s")).is_err());
    }

    #[test]
    fn written_dataset_loads_back() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path(), &["synthetic".to_string()]).unwrap();
        let m = matrixio::read_manifest(dir.path().join("manifest.txt")).unwrap();
        let train = matrixio::load_dataset(&m, dir.path(), Split::Train).unwrap().unwrap();
        let test = matrixio::load_dataset(&m, dir.path(), Split::Test).unwrap().unwrap();
        let (a, b) = d.split();
        assert_eq!(train, a);
        assert_eq!(Some(test), b);
        let truth: SynthTruth = matrixio::load_model(dir.path().join("truth.model")).unwrap();
        assert_eq!(truth, d.truth);
    }
}
