//! Evaluation reports and the end-to-end run: whitening, composed network
//! training, factorization, classifier training and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::compose::{self, ComposedModel, ComposedTraining};
use crate::config::RunConfig;
use crate::deepnet::DeepTraining;
use crate::error::{Error, Result};
use crate::matrixio::{self, format_f64, Dataset, LabelVector, Split};
use crate::sslm::{self, Contribution, SslmModel};
use crate::stack::StackBundle;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `c × c` counts; rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub contributions: Option<Vec<Contribution>>,
}

impl EvalReport {
    pub fn new(truth: &LabelVector, predicted: &[usize], contributions: Option<Vec<Contribution>>) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Dimension(format!("{} labels but {} predictions", truth.len(), predicted.len())));
        }
        let c = truth.num_classes;
        let mut confusion = vec![vec![0; c]; c];
        for (&t, &p) in truth.labels.iter().zip(predicted) {
            if p >= c {
                return Err(Error::Data(format!("prediction {p} is not below the {c} classes of the labels")));
            }
            confusion[t][p] += 1;
        }
        Ok(EvalReport { confusion, contributions })
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.num_classes()).map(|i| self.confusion[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total().max(1) as f64
    }

    /// `(samples, correct)` for each true class.
    pub fn per_class(&self) -> Vec<(usize, usize)> {
        self.confusion.iter().enumerate().map(|(i, row)| (row.iter().sum(), row[i])).collect()
    }

    pub fn confusion_matrix(&self) -> DMatrix<f64> {
        let c = self.num_classes();
        DMatrix::from_fn(c, c, |i, j| self.confusion[i][j] as f64)
    }

    pub fn human(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy {:.4} ({}/{})", self.accuracy(), self.correct(), self.total());
        let _ = writeln!(out, "\nclass  samples  correct  accuracy");
        for (i, (n, k)) in self.per_class().into_iter().enumerate() {
            let acc = if n == 0 { "-".to_string() } else { format!("{:.4}", k as f64 / n as f64) };
            let _ = writeln!(out, "{i:>5}  {n:>7}  {k:>7}  {acc:>8}");
        }
        let _ = writeln!(out, "\nconfusion (rows = truth, columns = prediction)");
        let _ = write!(out, "     ");
        for j in 0..self.num_classes() {
            let _ = write!(out, " {j:>5}");
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{i:>5}");
            for v in row {
                let _ = write!(out, " {v:>5}");
            }
            out.push('\n');
        }
        if let Some(c) = &self.contributions {
            out.push('\n');
            out.push_str(&contributions_table(c));
        }
        out
    }

    /// `key = value` lines followed by the confusion matrix in MAT form.
    pub fn machine(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples = {}", self.total());
        let _ = writeln!(out, "correct = {}", self.correct());
        let _ = writeln!(out, "accuracy = {}", format_f64(self.accuracy()));
        for (i, (n, k)) in self.per_class().into_iter().enumerate() {
            let _ = writeln!(out, "class.{i}.samples = {n}");
            let _ = writeln!(out, "class.{i}.correct = {k}");
        }
        if let Some(cs) = &self.contributions {
            for c in cs {
                let _ = writeln!(out, "contribution.{} = {}", c.tag, format_f64(c.proportion));
            }
        }
        out.push_str("confusion =\n");
        out.push_str(&matrixio::render_matrix(&self.confusion_matrix()));
        out
    }
}

/// Component shares laid out as a header row of tags over a row of
/// proportions; switched-off components are marked with `*`.
pub fn contributions_table(cs: &[Contribution]) -> String {
    let width = cs.iter().map(|c| c.tag.to_string().len()).max().unwrap_or(0).max(7);
    let mut head = String::new();
    let mut vals = String::new();
    for c in cs {
        let _ = write!(head, " {:>width$}", c.tag.to_string());
        let mark = if c.off { "*" } else { "" };
        let _ = write!(vals, " {:>width$}", format!("{:.4}{mark}", c.proportion));
    }
    let sum: f64 = cs.iter().map(|c| c.proportion).sum();
    format!("component contributions (sum {sum:.4})\n{}\n{}\n", head.trim_start(), vals.trim_start())
}

/// Factorizes `data`, classifies every sample and reports against its labels.
pub fn run_eval(net: &ComposedModel, clf: &SslmModel, data: &Dataset) -> Result<EvalReport> {
    if clf.num_classes() != data.labels.num_classes {
        return Err(Error::Data(format!(
            "classifier has {} classes, labels declare {}",
            clf.num_classes(),
            data.labels.num_classes
        )));
    }
    let stack = compose::factorize_dataset(net, data)?;
    if stack.structure().groups.iter().map(|g| g.rows.len()).collect::<Vec<_>>()
        != clf.structure.groups.iter().map(|g| g.rows.len()).collect::<Vec<_>>()
    {
        return Err(Error::Dimension("classifier groups do not match the network's component stack".into()));
    }
    let pred = clf.classify_batch(&stack.stacked())?;
    EvalReport::new(&data.labels, &pred, Some(sslm::component_contributions(clf)?))
}

/// Provenance lines written at the top of every artifact.
pub fn provenance(cfg: &RunConfig) -> Result<Vec<String>> {
    Ok(vec![
        format!("dssca {}", env!("CARGO_PKG_VERSION")),
        format!("config_hash {}", cfg.hash()),
        format!("seed {}", cfg.seed()?),
    ])
}

/// Summary of every layer's training run as `key = value` lines.
pub fn training_summary(prefix: &str, t: &DeepTraining) -> String {
    let mut out = String::new();
    for (i, l) in t.layers.iter().enumerate() {
        let costs: Vec<String> = l.phase_costs.iter().map(|v| format_f64(*v)).collect();
        let statuses: Vec<&str> = l.statuses.iter().map(|s| s.as_str()).collect();
        let monotone = l.accepted.windows(2).all(|w| w[1] <= w[0]);
        let _ = writeln!(out, "{prefix}.layer{}.phase_costs = {}", i + 1, costs.join(" "));
        let _ = writeln!(out, "{prefix}.layer{}.statuses = {}", i + 1, statuses.join(" "));
        let _ = writeln!(out, "{prefix}.layer{}.stopped_early = {}", i + 1, l.stopped_early);
        let _ = writeln!(out, "{prefix}.layer{}.non_increasing = {monotone}", i + 1);
    }
    out
}

fn with_header(header: &[String], body: &str) -> String {
    let mut out: String = header.iter().map(|h| format!("# {h}\n")).collect();
    out.push_str(body);
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub report: Option<EvalReport>,
    pub notices: Vec<String>,
}

/// Caps the configured segment whitening dims by the data.
fn resolve_segment_dims(cfg: &mut compose::ComposeConfig, data: &Dataset) {
    let pooled = data.len() * data.segments.len();
    if let (Some((r, d)), Some((sr, sd))) = (cfg.segment_dims, data.segments.first()) {
        cfg.segment_dims = Some((r.min(sr.nrows()).min(pooled), d.min(sd.nrows()).min(pooled)));
    }
}

/// Runs every stage. Relative `manifest` and `out` paths resolve against
/// `base`. Artifacts: `network.model`, `classifier.model`, `train.stack`,
/// `test.stack`, `training.txt`, `cv.txt`, `eval.txt`, `eval.kv`.
pub fn run_pipeline(cfg: &RunConfig, base: &Path) -> Result<PipelineOutcome> {
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() { p } else { base.join(p) }
    };
    let manifest_path = resolve(cfg.raw("manifest"));
    let out = resolve(cfg.raw("out"));
    let header = provenance(cfg)?;
    let stage = |name: &'static str| move |e: Error| e.context(name);

    let manifest = matrixio::read_manifest(&manifest_path).map_err(stage("load"))?;
    let mbase = manifest_path.parent().unwrap_or(Path::new("."));
    let train = matrixio::load_dataset(&manifest, mbase, Split::Train)
        .map_err(stage("load"))?
        .ok_or_else(|| Error::Data("load: the manifest has no training samples".into()))?;
    let test = matrixio::load_dataset(&manifest, mbase, Split::Test).map_err(stage("load"))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut ccfg = cfg.compose()?;
    resolve_segment_dims(&mut ccfg, &train);
    let ComposedTraining { model: net, local, holistic } =
        compose::train_composed_dataset(&train, &ccfg, &cfg.schedule()?).map_err(stage("train"))?;
    matrixio::save_model_with_header(&net, &header, out.join("network.model"))?;
    let summary = training_summary("local", &local) + &training_summary("holistic", &holistic);
    write_text(&out.join("training.txt"), &with_header(&header, &summary))?;

    let stack = compose::factorize_dataset(&net, &train).map_err(stage("factorize"))?;
    let bundle = StackBundle { stack, ids: train.ids.clone(), labels: Some(train.labels.clone()) };
    matrixio::save_model_with_header(&bundle, &header, out.join("train.stack"))?;
    let a = bundle.stack.stacked();
    let structure = bundle.stack.structure();

    let mut opts = cfg.sslm()?;
    if let Some(grid) = cfg.cv_grid()? {
        let cv = sslm::cv_select_gammas(&a, &train.labels, &structure, &grid, &opts).map_err(stage("cv"))?;
        let mut text = String::new();
        for (g, acc) in &cv.evaluated {
            let _ = writeln!(text, "{} {} {} {}", format_f64(g.e), format_f64(g.l), format_f64(g.w), format_f64(*acc));
        }
        let _ = writeln!(text, "best = {} {} {}", format_f64(cv.best.e), format_f64(cv.best.l), format_f64(cv.best.w));
        write_text(&out.join("cv.txt"), &with_header(&header, &format!("# gamma_e gamma_l gamma_w loo_accuracy\n{text}")))?;
        opts.gammas = cv.best;
    }
    let clf = sslm::train_sslm(&a, &train.labels, &structure, &opts).map_err(stage("sslm"))?.model;
    matrixio::save_model_with_header(&clf, &header, out.join("classifier.model"))?;

    let mut notices = Vec::new();
    let report = match test {
        None => {
            notices.push("no test split in the manifest; evaluation skipped".to_string());
            None
        }
        Some(test) => {
            let stack = compose::factorize_dataset(&net, &test).map_err(stage("factorize"))?;
            let tb = StackBundle { stack, ids: test.ids.clone(), labels: Some(test.labels.clone()) };
            matrixio::save_model_with_header(&tb, &header, out.join("test.stack"))?;
            let r = run_eval(&net, &clf, &test).map_err(stage("eval"))?;
            write_text(&out.join("eval.txt"), &with_header(&header, &r.human()))?;
            write_text(&out.join("eval.kv"), &with_header(&header, &r.machine()))?;
            Some(r)
        }
    };
    Ok(PipelineOutcome { out_dir: out, report, notices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::ComponentTag;

    #[test]
    fn perfect_and_constant_predictors() {
        let truth = LabelVector::new(vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        let r = EvalReport::new(&truth, &truth.labels, None).unwrap();
        assert_eq!(r.accuracy(), 1.0);
        assert_eq!(r.confusion_matrix(), DMatrix::from_diagonal_element(3, 3, 2.0));
        let c = EvalReport::new(&truth, &[1; 6], None).unwrap();
        assert!((c.accuracy() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.per_class()[1], (2, 2));
        assert!(EvalReport::new(&truth, &[5; 6], None).is_err());
    }

    #[test]
    fn machine_format_embeds_confusion() {
        let truth = LabelVector::new(vec![0, 1, 1], 2).unwrap();
        let cs = vec![Contribution { tag: ComponentTag::Yr, norm: 1.0, proportion: 1.0, off: false }];
        let r = EvalReport::new(&truth, &[0, 0, 1], Some(cs)).unwrap();
        let m = r.machine();
        assert!(m.contains("correct = 2\n"));
        assert!(m.contains("contribution.Y_r = 1\n"));
        let mat = m.split("confusion =\n").nth(1).unwrap();
        assert_eq!(matrixio::parse_matrix(mat, Path::new("m")).unwrap(), r.confusion_matrix());
        assert!(r.human().contains("rows = truth"));
    }
}
