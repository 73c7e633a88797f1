use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dssca::baseline::{self, CcaRicaModel, RicaHyper, RicaObjective};
use dssca::compose::{self, ComposedModel};
use dssca::config::{self, RunConfig};
use dssca::deepnet::{self, DeepModel, DeepTraining};
use dssca::matrixio::{self, format_f64, Envelope, LabelVector, Persist, Split};
use dssca::optim::{self, MinimizeOptions};
use dssca::pipeline::{self, EvalReport};
use dssca::preprocess::{self, Whitener};
use dssca::ssca::{self, LayerDims, LayerParams, Phase, PhaseObjective, SscaHyper, SscaLayer};
use dssca::sslm::{self, CvGrid, Gammas, SearchMode, SslmModel, SslmObjective, SslmOptions};
use dssca::stack::{ComponentStack, StackBundle};
use dssca::synth::{self, SynthSpec};
use dssca::{DMatrix, Error, Result};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "dssca", version, about = "Shared-specific component factorization and group-sparse classification")]
struct Cli {
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic two-modality dataset.
    Synth(SynthArgs),
    /// Fit or apply a whitening transform.
    #[command(subcommand)]
    Preprocess(PreprocessCmd),
    /// Train a single layer, a deep network or a composed local/holistic network.
    Train(TrainArgs),
    /// Compute the component stack of inputs under a trained model.
    Factorize(FactorizeArgs),
    /// Train the group-sparse classifier on a labeled component stack.
    SslmTrain(SslmTrainArgs),
    /// Predict labels for a component stack.
    Classify(ClassifyArgs),
    /// Evaluate a classifier on labeled data.
    Eval(EvalArgs),
    /// Print the per-component share of the classifier weights.
    ReportContributions(ContributionArgs),
    /// Compare analytic gradients with central differences on a random instance.
    Gradcheck(GradcheckArgs),
    /// Linear baselines.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// Run every stage from a config file.
    Run(RunArgs),
    /// Print every config key with its default.
    ConfigDefaults,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// `key = value` spec file; omitted keys keep their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Extra `key=value` spec overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum PreprocessCmd {
    /// Fit a whitener to a matrix file.
    Fit {
        #[arg(long)]
        input: PathBuf,
        /// Output dimension.
        #[arg(long)]
        dim: usize,
        /// Eigenvalue ridge; defaults to a small multiple of the mean variance.
        #[arg(long)]
        ridge: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Whiten a matrix file with a fitted whitener.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the final scaling into [0, 1].
        #[arg(long)]
        no_scale: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainKind {
    Layer,
    Deep,
    Composed,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    kind: TrainKind,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// `r` inputs (layer: already whitened into [0, 1]; deep: raw features).
    #[arg(long, required_unless_present = "manifest")]
    xr: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    xd: Option<PathBuf>,
    /// Dataset manifest; composed training uses its training split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the training summary here.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct FactorizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, conflicts_with = "manifest")]
    xr: Option<PathBuf>,
    #[arg(long, requires = "xr")]
    xd: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output stack bundle.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SslmTrainArgs {
    /// Labeled stack bundle.
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    gamma_e: f64,
    #[arg(long, default_value_t = 0.01)]
    gamma_l: f64,
    #[arg(long, default_value_t = 0.01)]
    gamma_w: f64,
    /// Smoothed unsquared group norms.
    #[arg(long)]
    exact_norms: bool,
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    /// Select the gammas by leave-one-out CV over these comma-separated values.
    #[arg(long, value_name = "LIST")]
    cv_grid: Option<String>,
    #[arg(long, value_enum, default_value = "full")]
    cv_mode: CvMode,
    /// Write the CV table here.
    #[arg(long)]
    cv_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CvMode {
    Full,
    Coordinate,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stack: PathBuf,
    /// Predicted labels file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    classifier: PathBuf,
    /// Labeled stack bundle.
    #[arg(long, required_unless_present_all = ["network", "manifest"])]
    stack: Option<PathBuf>,
    #[arg(long, conflicts_with = "stack", requires = "manifest")]
    network: Option<PathBuf>,
    #[arg(long, requires = "network")]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for `eval.txt` and `eval.kv`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ContributionArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradTarget {
    Ssca,
    Sslm,
    Rica,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum)]
    target: GradTarget,
    #[arg(long)]
    seed: u64,
    /// SSCA parameter subset: y, z or all.
    #[arg(long, default_value = "all")]
    phase: String,
    #[arg(long)]
    exact_norms: bool,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Subcommand)]
enum BaselineCmd {
    /// CCA shared projections plus RICA specific projections.
    CcaRica {
        #[arg(long)]
        xr: PathBuf,
        #[arg(long)]
        xd: PathBuf,
        /// Shared (canonical) components.
        #[arg(long)]
        k: usize,
        /// Specific components per modality.
        #[arg(long)]
        z: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        ridge: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 500)]
        max_iter: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::Numerical(_) => 3,
        Error::Parse { .. } | Error::Io { .. } | Error::Dimension(_) | Error::Data(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn set_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("cannot configure {n} threads: {e}")))
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        set_threads(n)?;
    }
    match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Preprocess(c) => preprocess_cmd(c),
        Command::Train(a) => train_cmd(a),
        Command::Factorize(a) => factorize_cmd(a),
        Command::SslmTrain(a) => sslm_train_cmd(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ReportContributions(a) => {
            let m: SslmModel = matrixio::load_model(&a.model)?;
            print!("{}", pipeline::contributions_table(&sslm::component_contributions(&m)?));
            Ok(())
        }
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Baseline(c) => baseline_cmd(c),
        Command::Run(a) => run_cmd(a, cli.threads.is_some()),
        Command::ConfigDefaults => {
            print!("{}", config::describe_defaults());
            Ok(())
        }
    }
}

fn split_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::InvalidArgument(format!("override {s:?} is not `key=value`")))
}

fn load_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.config, a.seed) {
        (Some(path), seed) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            let has_seed = config::parse_key_values(&text, path)?.iter().any(|(k, _, _)| k == "seed");
            match seed {
                Some(s) if !has_seed => RunConfig::parse(&format!("{text}\nseed = {s}\n"), path)?,
                _ => RunConfig::parse(&text, path)?,
            }
        }
        (None, Some(s)) => RunConfig::with_seed(s),
        (None, None) => return Err(Error::InvalidArgument("a seed is required (--seed or `seed` in --config)".into())),
    };
    if let Some(s) = a.seed {
        cfg.set("seed", s)?;
    }
    for o in &a.overrides {
        let (k, v) = split_override(o)?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn header(command: &str) -> Vec<String> {
    vec![format!("dssca {VERSION}"), format!("command {command}")]
}

fn with_header(header: &[String], body: &str) -> String {
    let mut out: String = header.iter().map(|h| format!("# {h}\n")).collect();
    out.push_str(body);
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mut lines = match &a.spec {
        Some(p) => {
            SynthSpec::read(p)?;
            std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?
        }
        None => String::new(),
    };
    lines = lines.lines().filter(|l| l.split_once('=').is_none_or(|(k, _)| k.trim() != "seed")).collect::<Vec<_>>().join("\n");
    let mut text = String::new();
    let overridden: Vec<(&str, &str)> = a.overrides.iter().map(|o| split_override(o)).collect::<Result<_>>()?;
    for l in lines.lines() {
        let key = l.split_once('=').map(|(k, _)| k.trim());
        if key.is_none_or(|k| !overridden.iter().any(|(o, _)| *o == k)) {
            text.push_str(l);
            text.push('\n');
        }
    }
    for (k, v) in &overridden {
        let _ = writeln!(text, "{k} = {v}");
    }
    let _ = writeln!(text, "seed = {}", a.seed);
    let spec = SynthSpec::parse(&text, a.spec.as_deref().unwrap_or(Path::new("<arguments>")))?;
    let data = synth::generate(&spec)?;
    let mut h = header("synth");
    h.push(format!("seed {}", spec.seed));
    data.write(&a.out, &h)?;
    let (train, test) = data.split();
    println!(
        "wrote {} samples ({} train, {} test) with {} classes to {}",
        data.len(),
        train.len(),
        test.map_or(0, |t| t.len()),
        spec.classes,
        a.out.display()
    );
    Ok(())
}

fn preprocess_cmd(c: PreprocessCmd) -> Result<()> {
    match c {
        PreprocessCmd::Fit { input, dim, ridge, out } => {
            let x = matrixio::read_matrix(&input)?;
            let w = preprocess::fit_whitener(&x, dim, ridge)?;
            matrixio::save_model_with_header(&w, &header("preprocess fit"), &out)?;
            let kept: Vec<String> = w.eigenvalues.iter().map(|v| format_f64(*v)).collect();
            println!("whitener {} -> {} dims, eigenvalues {}", w.input_dim(), w.output_dim(), kept.join(" "));
        }
        PreprocessCmd::Apply { model, input, out, no_scale } => {
            let w: Whitener = matrixio::load_model(&model)?;
            let x = matrixio::read_matrix(&input)?;
            let y = if no_scale { w.whiten(&x)? } else { w.apply(&x)? };
            matrixio::write_matrix_with_header(&y, &header("preprocess apply"), &out)?;
        }
    }
    Ok(())
}

fn read_pair(xr: &Option<PathBuf>, xd: &Option<PathBuf>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match (xr, xd) {
        (Some(r), Some(d)) => Ok((matrixio::read_matrix(r)?, matrixio::read_matrix(d)?)),
        _ => Err(Error::InvalidArgument("both --xr and --xd are required".into())),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(Error::InvalidArgument)
}

fn load_split(manifest: &Path, split: Split) -> Result<matrixio::Dataset> {
    let m = matrixio::read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    matrixio::load_dataset(&m, base, split)?
        .ok_or_else(|| Error::Data(format!("{}: no {} samples", manifest.display(), split.as_str())))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let head = pipeline::provenance(&cfg)?;
    let hyper = cfg.hyper()?;
    let schedule = cfg.schedule()?;
    let spec = |layers: usize| -> Result<Vec<deepnet::LayerSpec>> {
        let s = deepnet::LayerSpec { y_dim: cfg.get("holistic_y_dim")?, z_dim: cfg.get("holistic_z_dim")?, hyper };
        Ok(vec![s; layers])
    };
    let summary = match a.kind {
        TrainKind::Layer => {
            let (xr, xd) = read_pair(&a.xr, &a.xd)?;
            let s = spec(1)?.remove(0);
            let dims = LayerDims { d_r: xr.nrows(), d_d: xd.nrows(), y_dim: s.y_dim, z_dim: s.z_dim };
            let t = ssca::train_layer(&xr, &xd, &hyper, &dims, &schedule)?;
            let layer = SscaLayer { dims, hyper, params: t.params.clone() };
            matrixio::save_model_with_header(&layer, &head, &a.out)?;
            let wrapped = DeepTraining { model: DeepModel { input: None, layers: vec![layer], between: vec![] }, layers: vec![t] };
            pipeline::training_summary("layer", &wrapped)
        }
        TrainKind::Deep => {
            let (xr, xd) = read_pair(&a.xr, &a.xd)?;
            let cap: usize = cfg.get("holistic_input_dim")?;
            let n = xr.ncols();
            let dim = |rows: usize| rows.min(n).min(cap).max(1);
            let t = deepnet::train_deep_raw(&xr, &xd, dim(xr.nrows()), dim(xd.nrows()), &spec(cfg.get("holistic_layers")?)?, &schedule)?;
            matrixio::save_model_with_header(&t.model, &head, &a.out)?;
            pipeline::training_summary("deep", &t)
        }
        TrainKind::Composed => {
            let manifest = a.manifest.as_ref().ok_or_else(|| Error::InvalidArgument("composed training needs --manifest".into()))?;
            let train = load_split(manifest, Split::Train)?;
            let mut cc = cfg.compose()?;
            if let Some((r, d)) = cc.segment_dims {
                let n = train.len();
                let rows = train.segments.first().map_or((r, d), |(sr, sd)| (sr.nrows(), sd.nrows()));
                cc.segment_dims = Some((r.min(rows.0).min(n), d.min(rows.1).min(n)));
            }
            let t = compose::train_composed_dataset(&train, &cc, &schedule)?;
            matrixio::save_model_with_header(&t.model, &head, &a.out)?;
            pipeline::training_summary("local", &t.local) + &pipeline::training_summary("holistic", &t.holistic)
        }
    };
    print!("{summary}");
    if let Some(p) = &a.summary {
        write_text(p, &with_header(&head, &summary))?;
    }
    Ok(())
}

fn factorize_cmd(a: FactorizeArgs) -> Result<()> {
    let env = matrixio::load_envelope(&a.model)?;
    let (stack, ids, labels) = match (env.kind.as_str(), &a.manifest) {
        ("composed", Some(manifest)) => {
            let net = ComposedModel::from_envelope(&env)?;
            let data = load_split(manifest, parse_split(&a.split)?)?;
            (compose::factorize_dataset(&net, &data)?, data.ids, Some(data.labels))
        }
        ("composed", None) => return Err(Error::InvalidArgument("a composed model needs --manifest".into())),
        (kind, _) => {
            let (xr, xd) = read_pair(&a.xr, &a.xd)?;
            let stack = factorize_pair(kind, &env, &xr, &xd)?;
            let ids = (0..xr.ncols()).map(synth::sample_id).collect();
            (stack, ids, None)
        }
    };
    let tags: Vec<String> = stack.blocks.iter().map(|b| format!("{}({})", b.tag, b.matrix.nrows())).collect();
    println!("{} samples, {} blocks: {}", stack.samples(), stack.len(), tags.join(" "));
    matrixio::save_model_with_header(&StackBundle { stack, ids, labels }, &header("factorize"), &a.out)
}

fn factorize_pair(kind: &str, env: &Envelope, xr: &DMatrix<f64>, xd: &DMatrix<f64>) -> Result<ComponentStack> {
    match kind {
        "dssca" => deepnet::factorize(&DeepModel::from_envelope(env)?, xr, xd),
        "ssca-layer" => {
            let f = SscaLayer::from_envelope(env)?.forward(xr, xd)?;
            ComponentStack::deep(vec![(f.z_r, f.z_d)], &f.y_r, &f.y_d)
        }
        "cca-rica" => baseline::ccarica_factorize(&CcaRicaModel::from_envelope(env)?, xr, xd),
        other => Err(Error::Data(format!("cannot factorize with a model of kind {other:?}"))),
    }
}

fn sslm_train_cmd(a: SslmTrainArgs) -> Result<()> {
    let bundle: StackBundle = matrixio::load_model(&a.stack)?;
    let labels = bundle.labels.as_ref().ok_or_else(|| Error::Data(format!("{}: stack has no labels", a.stack.display())))?;
    let gammas = Gammas { e: a.gamma_e, l: a.gamma_l, w: a.gamma_w };
    gammas.validate()?;
    let mut opts = SslmOptions { gammas, exact_norms: a.exact_norms, ..Default::default() };
    opts.minimize.max_iterations = a.max_iter;
    let matrix = bundle.stack.stacked();
    let structure = bundle.stack.structure();
    if let Some(list) = &a.cv_grid {
        let values = config::parse_grid(list)?;
        let mode = match a.cv_mode {
            CvMode::Full => SearchMode::Full,
            CvMode::Coordinate => SearchMode::Coordinate,
        };
        let grid = CvGrid { e: values.clone(), l: values.clone(), w: values, mode };
        let cv = sslm::cv_select_gammas(&matrix, labels, &structure, &grid, &opts)?;
        let mut table = String::from("# gamma_e gamma_l gamma_w loo_accuracy\n");
        for (g, acc) in &cv.evaluated {
            let _ = writeln!(table, "{} {} {} {}", format_f64(g.e), format_f64(g.l), format_f64(g.w), format_f64(*acc));
        }
        let _ = writeln!(table, "best = {} {} {}", format_f64(cv.best.e), format_f64(cv.best.l), format_f64(cv.best.w));
        print!("{table}");
        if let Some(p) = &a.cv_out {
            write_text(p, &with_header(&header("sslm-train"), &table))?;
        }
        opts.gammas = cv.best;
    }
    let t = sslm::train_sslm(&matrix, labels, &structure, &opts)?;
    let pred = t.model.classify_batch(&matrix)?;
    let train_acc = EvalReport::new(labels, &pred, None)?.accuracy();
    println!("status {} after {} iterations, training accuracy {train_acc:.4}", t.status.as_str(), t.iterations);
    matrixio::save_model_with_header(&t.model, &header("sslm-train"), &a.out)
}

fn classify_cmd(a: ClassifyArgs) -> Result<()> {
    let m: SslmModel = matrixio::load_model(&a.model)?;
    let bundle: StackBundle = matrixio::load_model(&a.stack)?;
    let pred = m.classify_batch(&bundle.stack.stacked())?;
    match &a.out {
        Some(p) => matrixio::write_labels(&LabelVector::new(pred, m.num_classes())?, p),
        None => {
            for (id, l) in bundle.ids.iter().zip(&pred) {
                println!("{id} {l}");
            }
            Ok(())
        }
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let clf: SslmModel = matrixio::load_model(&a.classifier)?;
    let report = match (&a.stack, &a.network, &a.manifest) {
        (Some(s), _, _) => {
            let bundle: StackBundle = matrixio::load_model(s)?;
            let labels = bundle.labels.as_ref().ok_or_else(|| Error::Data(format!("{}: stack has no labels", s.display())))?;
            let pred = clf.classify_batch(&bundle.stack.stacked())?;
            EvalReport::new(labels, &pred, Some(sslm::component_contributions(&clf)?))?
        }
        (None, Some(net), Some(manifest)) => {
            let net: ComposedModel = matrixio::load_model(net)?;
            pipeline::run_eval(&net, &clf, &load_split(manifest, parse_split(&a.split)?)?)?
        }
        _ => return Err(Error::InvalidArgument("give --stack, or --network with --manifest".into())),
    };
    print!("{}", report.human());
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        let h = header("eval");
        write_text(&dir.join("eval.txt"), &with_header(&h, &report.human()))?;
        write_text(&dir.join("eval.kv"), &with_header(&h, &report.machine()))?;
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let unit = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| DMatrix::from_fn(r, c, |_, _| rng.random_range(0.0..1.0));
    let centered = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let result = match a.target {
        GradTarget::Ssca => {
            let dims = LayerDims { d_r: 7, d_d: 6, y_dim: 4, z_dim: 3 };
            let (xr, xd) = (unit(7, 5, &mut rng), unit(6, 5, &mut rng));
            let h = SscaHyper { exact_norms: a.exact_norms, lambda: 0.01, ..Default::default() };
            let phase: Phase = a.phase.parse()?;
            let obj = PhaseObjective::new(&LayerParams::init(&dims, a.seed), &xr, &xd, &h, phase)?;
            let x = obj.point();
            optim::grad_check(&obj, &x, a.step, x.len())?
        }
        GradTarget::Sslm => {
            let n = 8;
            let stack = ComponentStack::deep(
                vec![(centered(2, n, &mut rng), centered(2, n, &mut rng))],
                &centered(2, n, &mut rng),
                &centered(2, n, &mut rng),
            )?;
            let a_mat = stack.stacked();
            let structure = stack.structure();
            let labels = LabelVector::new((0..n).map(|j| j % 3).collect(), 3)?;
            let obj = SslmObjective::new(&a_mat, &sslm::class_assignment(&labels), &structure, Gammas::default(), a.exact_norms)?;
            let x: Vec<f64> = (0..a_mat.nrows() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            optim::grad_check(&obj, &x, a.step, x.len())?
        }
        GradTarget::Rica => {
            let x = centered(5, 4, &mut rng);
            let wc = centered(2, 5, &mut rng);
            let obj = RicaObjective::new(&x, &wc, 3, RicaHyper::default())?;
            let w: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
            optim::grad_check(&obj, &w, a.step, w.len())?
        }
    };
    println!("{} coordinates, max relative error {:e}", result.probes.len(), result.max_relative_error);
    if result.max_relative_error >= a.tolerance {
        return Err(Error::Numerical(format!(
            "gradient check failed: {:e} exceeds tolerance {:e}",
            result.max_relative_error, a.tolerance
        )));
    }
    Ok(())
}

fn baseline_cmd(c: BaselineCmd) -> Result<()> {
    let BaselineCmd::CcaRica { xr, xd, k, z, seed, ridge, lambda, max_iter, out } = c;
    let (xr, xd) = (matrixio::read_matrix(&xr)?, matrixio::read_matrix(&xd)?);
    let hyper = RicaHyper { lambda, ..Default::default() };
    let opts = MinimizeOptions { max_iterations: max_iter, ..Default::default() };
    let t = baseline::ccarica_fit(&xr, &xd, k, z, ridge, &hyper, seed, &opts)?;
    let corr: Vec<String> = t.model.cca.correlations.iter().map(|v| format!("{v:.6}")).collect();
    println!("canonical correlations {}", corr.join(" "));
    println!("rica status r={} d={}", t.rica_r.status.as_str(), t.rica_d.status.as_str());
    let mut h = header("baseline cca-rica");
    h.push(format!("seed {seed}"));
    matrixio::save_model_with_header(&t.model, &h, &out)
}

fn run_cmd(a: RunArgs, threads_given: bool) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    if !threads_given {
        let n: usize = cfg.get("threads")?;
        set_threads(n)?;
    }
    let base = a.cfg.config.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)).unwrap_or_else(|| PathBuf::from("."));
    let outcome = pipeline::run_pipeline(&cfg, &base)?;
    for n in &outcome.notices {
        println!("notice: {n}");
    }
    if let Some(r) = &outcome.report {
        print!("{}", r.human());
    }
    println!("artifacts in {}", outcome.out_dir.display());
    Ok(())
}
