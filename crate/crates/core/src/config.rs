//! Flat `key = value` run configuration. Every key except `seed` has a
//! default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::compose::ComposeConfig;
use crate::deepnet::LayerSpec;
use crate::error::{Error, Result};
use crate::sslm::{CvGrid, Gammas, SearchMode, SslmOptions};
use crate::ssca::{Schedule, SscaHyper};

/// Parses `key = value` lines; `#` starts a comment line. Returns
/// `(key, value, line)` triples in file order and rejects duplicates.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ln = i + 1;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, ln, format!("expected `key = value`, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::parse(path, ln, "empty key"));
        }
        if let Some((_, _, first)) = out.iter().find(|(key, _, _)| key == k) {
            return Err(Error::parse(path, ln, format!("duplicate key {k:?} (first on line {first})")));
        }
        out.push((k.to_string(), v.to_string(), ln));
    }
    Ok(out)
}

/// `(key, default, description)`; an empty default marks a required key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "", "run seed; all randomness derives from it (required)"),
    ("manifest", "manifest.txt", "dataset manifest, relative to the config file"),
    ("out", "out", "output directory, relative to the config file"),
    ("threads", "0", "worker threads, 0 = all cores"),
    ("segment_dim_r", "100", "whitened dim of r segment features (capped by data)"),
    ("segment_dim_d", "100", "whitened dim of d segment features (capped by data)"),
    ("holistic_input_dim", "200", "whitened dim of the holistic network inputs (capped by data)"),
    ("local_layers", "1", "depth of the local network"),
    ("local_y_dim", "100", "shared units per local layer"),
    ("local_z_dim", "100", "specific units per local layer"),
    ("holistic_layers", "2", "depth of the holistic network"),
    ("holistic_y_dim", "200", "shared units per holistic layer"),
    ("holistic_z_dim", "200", "specific units per holistic layer"),
    ("lambda", "1e-4", "weight decay"),
    ("zeta", "1", "reconstruction weight, both modalities"),
    ("alpha", "0.1", "sparsity weight on shared units, both modalities"),
    ("beta", "0.1", "sparsity weight on specific units, both modalities"),
    ("rho", "0.05", "target mean activation of shared and specific units"),
    ("exact_norms", "false", "use smoothed unsquared norms in both objectives"),
    ("outer_rounds", "5", "alternation rounds per layer"),
    ("inner_max_iter", "200", "optimizer iterations per phase"),
    ("gamma_e", "0.01", "component-wise group norm weight"),
    ("gamma_l", "0.01", "layer-wise group norm weight"),
    ("gamma_w", "0.01", "classifier weight decay"),
    ("sslm_max_iter", "2000", "classifier optimizer iterations"),
    ("cv", "false", "select the three gammas by leave-one-out cross-validation"),
    ("cv_grid", "0,1e-3,1e-2,1e-1,1,10", "comma-separated values tried for each gamma"),
    ("cv_mode", "full", "`full` grid or `coordinate` sweeps"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Effective value of every key, defaults included.
    pub values: BTreeMap<String, String>,
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidArgument(format!("config key {key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().filter(|(_, d, _)| !d.is_empty()).map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        for (k, v, ln) in parse_key_values(text, path)? {
            if !KEYS.iter().any(|(key, _, _)| *key == k) {
                return Err(Error::parse(path, ln, format!("unknown config key {k:?}")));
            }
            values.insert(k, v);
        }
        if !values.contains_key("seed") {
            return Err(Error::InvalidArgument(format!("{}: config key `seed` is required", path.display())));
        }
        let cfg = RunConfig { values };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// A config with every default and the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self::parse(&format!("seed = {seed}"), Path::new("<defaults>")).expect("defaults are valid")
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(Error::InvalidArgument(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        self.seed()?;
        self.compose()?;
        self.sslm()?;
        self.cv_grid()?;
        self.get::<usize>("threads")?;
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        parse_value(key, self.raw(key))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn hyper(&self) -> Result<SscaHyper> {
        let (zeta, alpha, beta, rho): (f64, f64, f64, f64) =
            (self.get("zeta")?, self.get("alpha")?, self.get("beta")?, self.get("rho")?);
        let h = SscaHyper {
            lambda: self.get("lambda")?,
            zeta_r: zeta,
            zeta_d: zeta,
            alpha_r: alpha,
            alpha_d: alpha,
            beta_r: beta,
            beta_d: beta,
            rho_y: rho,
            rho_z: rho,
            exact_norms: self.get("exact_norms")?,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Ok(Schedule { outer_rounds: self.get("outer_rounds")?, inner_max_iter: self.get("inner_max_iter")?, seed: self.seed()? })
    }

    fn layers(&self, prefix: &str, hyper: SscaHyper) -> Result<Vec<LayerSpec>> {
        let n: usize = self.get(&format!("{prefix}_layers"))?;
        let spec = LayerSpec { y_dim: self.get(&format!("{prefix}_y_dim"))?, z_dim: self.get(&format!("{prefix}_z_dim"))?, hyper };
        if n == 0 || spec.y_dim == 0 || spec.z_dim == 0 {
            return Err(Error::InvalidArgument(format!("{prefix} layer count and unit counts must be >= 1")));
        }
        Ok(vec![spec; n])
    }

    /// Network configuration; segment dims are upper bounds resolved
    /// against the data by the pipeline.
    pub fn compose(&self) -> Result<ComposeConfig> {
        let h = self.hyper()?;
        let dims = (self.get::<usize>("segment_dim_r")?, self.get::<usize>("segment_dim_d")?);
        let hid: usize = self.get("holistic_input_dim")?;
        if dims.0 == 0 || dims.1 == 0 || hid == 0 {
            return Err(Error::InvalidArgument("whitened dims must be >= 1".into()));
        }
        Ok(ComposeConfig {
            local: self.layers("local", h)?,
            holistic: self.layers("holistic", h)?,
            segment_dims: Some(dims),
            holistic_input_dim: hid,
        })
    }

    pub fn sslm(&self) -> Result<SslmOptions> {
        let gammas = Gammas { e: self.get("gamma_e")?, l: self.get("gamma_l")?, w: self.get("gamma_w")? };
        gammas.validate()?;
        let mut o = SslmOptions { gammas, exact_norms: self.get("exact_norms")?, ..SslmOptions::default() };
        o.minimize.max_iterations = self.get("sslm_max_iter")?;
        Ok(o)
    }

    /// `None` when cross-validation is disabled.
    pub fn cv_grid(&self) -> Result<Option<CvGrid>> {
        let values = parse_grid(self.raw("cv_grid"))?;
        let mode = match self.raw("cv_mode") {
            "full" => SearchMode::Full,
            "coordinate" => SearchMode::Coordinate,
            other => return Err(Error::InvalidArgument(format!("cv_mode must be `full` or `coordinate`, got {other:?}"))),
        };
        Ok(self.get::<bool>("cv")?.then(|| CvGrid { e: values.clone(), l: values.clone(), w: values, mode }))
    }

    /// Canonical `key = value` text of the effective configuration.
    pub fn render(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.values[*k])).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Comma-separated non-negative reals.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = text
        .split(',')
        .map(|t| parse_value::<f64>("grid", t.trim()))
        .collect::<Result<_>>()?;
    if values.is_empty() || values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("grid {text:?} must list finite non-negative values")));
    }
    Ok(values)
}

/// Documented defaults as a loadable config file: a `# description` line
/// before each `key = default`. Required keys are left commented out.
pub fn describe_defaults() -> String {
    KEYS.iter()
        .map(|(k, d, doc)| match d.is_empty() {
            true => format!("# {doc}\n# {k} = <required>\n"),
            false => format!("# {doc}\n{k} = {d}\n"),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("# run\nseed = 7\nlocal_y_dim = 12\n", Path::new("c")).unwrap();
        assert_eq!(c.seed().unwrap(), 7);
        let comp = c.compose().unwrap();
        assert_eq!(comp.local[0].y_dim, 12);
        assert_eq!(comp.holistic.len(), 2);
        assert_eq!(comp.holistic_input_dim, 200);
        assert_eq!(c.cv_grid().unwrap(), None);
    }

    #[test]
    fn defaults_dump_loads_once_seeded() {
        let text = describe_defaults();
        assert!(RunConfig::parse(&text, Path::new("d")).is_err());
        let c = RunConfig::parse(&format!("{text}seed = 3\n"), Path::new("d")).unwrap();
        assert_eq!(c.hash(), RunConfig::with_seed(3).hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("local_y_dim = 3", Path::new("c")).is_err());
        let e = RunConfig::parse("seed = 1\nbogus = 2", Path::new("c")).unwrap_err();
        assert_eq!(e.to_string(), "c:2: unknown config key \"bogus\"");
        assert!(RunConfig::parse("seed = 1\nseed = 2", Path::new("c")).is_err());
        assert!(RunConfig::parse("seed = 1\nrho = 2", Path::new("c")).is_err());
        assert!(RunConfig::parse("seed = 1\ncv_mode = random", Path::new("c")).is_err());
        assert!(RunConfig::parse("seed = 1\nno equals sign", Path::new("c")).is_err());
    }

    #[test]
    fn hash_tracks_effective_values() {
        let a = RunConfig::parse("seed = 1", Path::new("a")).unwrap();
        let b = RunConfig::parse("seed = 1\nlambda = 1e-4\n", Path::new("b")).unwrap();
        let c = RunConfig::parse("seed = 2", Path::new("c")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
        assert_eq!(RunConfig::parse(&a.render(), Path::new("r")).unwrap(), a);
    }

    #[test]
    fn cv_grid_parsing() {
        let c = RunConfig::parse("seed = 1\ncv = true\ncv_grid = 0, 0.5\ncv_mode = coordinate", Path::new("c")).unwrap();
        let g = c.cv_grid().unwrap().unwrap();
        assert_eq!(g.e, vec![0.0, 0.5]);
        assert_eq!(g.mode, SearchMode::Coordinate);
        assert!(parse_grid("1,-1").is_err());
    }
}
