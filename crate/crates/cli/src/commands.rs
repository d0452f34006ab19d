//! Subcommand implementations. Each one validates its inputs and the state of
//! its output paths before writing anything.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use factorial_flow::data::Encoding;
use factorial_flow::evaluation::report::{csv_table, markdown_table, projection_csv};
use factorial_flow::evaluation::{manipulation_eval, project_2d, train_classifier, ManipulationReport, MlpClassifier};
use factorial_flow::factorize::{class_means, encode_batch, factor_span, manipulate_batch, write_codes};
use factorial_flow::priors::{LatentPartition, Regime};
use factorial_flow::synthetic::SyntheticSpec;
use factorial_flow::trainer::evaluate;
use factorial_flow::{Checkpoint, FlowModel, LabeledDataset, PriorSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::Split;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Stream offsets so data, initialisation and classifiers draw from
/// unrelated sequences of the same seed.
const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;
const INIT_STREAM: u64 = 16;

pub struct Context {
    pub config: RunConfig,
    pub hash: String,
    pub overwrite: bool,
}

impl Context {
    pub fn new(config: RunConfig, overwrite: bool) -> Self {
        let hash = config.hash();
        Self {
            config,
            hash,
            overwrite,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.config.out.join("data")
    }

    pub fn dataset_path(&self, split: Split) -> PathBuf {
        let custom = match split {
            Split::Train => &self.config.data.train_path,
            Split::Test => &self.config.data.test_path,
        };
        custom
            .clone()
            .unwrap_or_else(|| self.data_dir().join(format!("{}.txt", split.name())))
    }

    pub fn model_dir(&self, name: &str) -> PathBuf {
        self.config.out.join("models").join(name)
    }

    /// Directory name of the model described by the config.
    pub fn default_model_name(&self) -> String {
        let regime = self.config.regime().unwrap_or(Regime::Factorial);
        model_name(regime, self.discriminative_factor())
    }

    fn discriminative_factor(&self) -> &str {
        self.config
            .model
            .factor
            .as_deref()
            .unwrap_or(&self.config.data.factors[0].name)
    }

    fn provenance(&self) -> String {
        format!("config={}", self.hash)
    }

    fn check_outputs(&self, paths: &[PathBuf]) -> Result<(), CliError> {
        if self.overwrite {
            return Ok(());
        }
        match paths.iter().find(|p| p.exists()) {
            Some(p) => Err(CliError::Validation(format!(
                "{} already exists (pass --overwrite to replace it)",
                p.display()
            ))),
            None => Ok(()),
        }
    }

    fn load_split(&self, split: Split) -> Result<LabeledDataset, CliError> {
        let path = self.dataset_path(split);
        if !path.exists() {
            return Err(CliError::Validation(format!(
                "{} dataset {} not found (run gen-data first)",
                split.name(),
                path.display()
            )));
        }
        LabeledDataset::load(&path).map_err(|e| CliError::Validation(e.to_string()))
    }

    fn load_checkpoint(&self, name: &str) -> Result<Checkpoint, CliError> {
        let path = self.model_dir(name).join(CHECKPOINT_FILE);
        if !path.exists() {
            return Err(CliError::Validation(format!(
                "missing checkpoint {} (train the model first)",
                path.display()
            )));
        }
        Checkpoint::load(&path).map_err(|e| CliError::Validation(e.to_string()))
    }
}

pub fn model_name(regime: Regime, factor: &str) -> String {
    match regime {
        Regime::Standard => "nf".into(),
        Regime::Discriminative => format!("dnf-{factor}"),
        Regime::Factorial => "fdnf".into(),
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct SpecFile<'a> {
    obs_dim: usize,
    seed: u64,
    noise: &'a [f64],
    factors: Vec<SpecFactor<'a>>,
}

#[derive(Serialize)]
struct SpecFactor<'a> {
    name: &'a str,
    classes: usize,
    loading: Vec<Vec<f64>>,
    class_means: Vec<Vec<f64>>,
}

fn spec_toml(spec: &SyntheticSpec, provenance: &str) -> String {
    let rows = |a: &ndarray::Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect();
    let file = SpecFile {
        obs_dim: spec.obs_dim,
        seed: spec.seed,
        noise: &spec.noise,
        factors: spec
            .factors
            .iter()
            .map(|f| SpecFactor {
                name: &f.name,
                classes: f.classes,
                loading: rows(&f.loading),
                class_means: rows(&f.class_means),
            })
            .collect(),
    };
    format!("# {provenance}\n{}", toml::to_string(&file).expect("spec serialises"))
}

/// Writes `data/train.txt`, `data/test.txt` and `data/spec.toml`.
pub fn gen_data(ctx: &Context) -> Result<PathBuf, CliError> {
    let dir = ctx.data_dir();
    let train_path = dir.join("train.txt");
    let test_path = dir.join("test.txt");
    let spec_path = dir.join("spec.toml");
    ctx.check_outputs(&[train_path.clone(), test_path.clone(), spec_path.clone()])?;
    let spec = ctx.config.synthetic_spec()?;
    let train = spec.generate(ctx.config.data.train_per_cell, TRAIN_STREAM)?;
    let test = spec.generate(ctx.config.data.test_per_cell, TEST_STREAM)?;
    ensure_dir(&dir)?;
    let source = ctx.provenance();
    train.save_with_source(&train_path, Encoding::Text, Some(&source))?;
    test.save_with_source(&test_path, Encoding::Text, Some(&source))?;
    write_file(&spec_path, &spec_toml(&spec, &source))?;
    Ok(dir)
}

/// Model and prior freshly initialised for `regime` on `dataset`.
fn initial_state(
    config: &RunConfig,
    regime: Regime,
    factor: &str,
    dataset: &LabeledDataset,
) -> Result<(FlowModel, PriorSpec), CliError> {
    let d = dataset.dim();
    if d != config.data.obs_dim {
        return Err(CliError::Validation(format!(
            "dataset has D = {d} but data.obs_dim = {}",
            config.data.obs_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(INIT_STREAM);
    let model = FlowModel::for_training(config.flow_config(), &mut rng)?;
    let prior = match regime {
        Regime::Standard => PriorSpec::standard(d),
        Regime::Discriminative => {
            let fi = dataset
                .factor_index(factor)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            PriorSpec::discriminative(d, factor, dataset.factors()[fi].classes, &mut rng)?
        }
        Regime::Factorial => {
            let widths = config.partition_widths();
            if widths.len() != dataset.factors().len() {
                return Err(CliError::Validation(format!(
                    "partition has {} slices but the dataset has {} factors",
                    widths.len(),
                    dataset.factors().len()
                )));
            }
            let names: Vec<&str> = dataset.factors().iter().map(|f| f.name.as_str()).collect();
            let counts: Vec<usize> = dataset.factors().iter().map(|f| f.classes).collect();
            let partition =
                LatentPartition::new(names, &widths).map_err(|e| CliError::Validation(e.to_string()))?;
            PriorSpec::factorial(partition, &counts, &mut rng)?
        }
    };
    Ok((model, prior))
}

/// Trains one model into `models/<name>/`: `checkpoint.bin` after every
/// epoch, `epoch_NNNN.bin` every `checkpoint_every` epochs, and `train.log`.
fn train_model(
    ctx: &Context,
    regime: Regime,
    factor: &str,
    dataset: &LabeledDataset,
    resume: bool,
) -> Result<PathBuf, CliError> {
    let name = model_name(regime, factor);
    let dir = ctx.model_dir(&name);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let log_path = dir.join("train.log");
    let (mut model, mut prior, state) = if resume {
        let ckpt = ctx.load_checkpoint(&name)?;
        if ckpt.prior.regime() != regime || ckpt.model.dim() != dataset.dim() {
            return Err(CliError::Validation(format!(
                "checkpoint {} does not match the configured {} model",
                ckpt_path.display(),
                regime.name()
            )));
        }
        (ckpt.model, ckpt.prior, ckpt.state)
    } else {
        ctx.check_outputs(&[ckpt_path.clone(), log_path.clone()])?;
        let (m, p) = initial_state(&ctx.config, regime, factor, dataset)?;
        (m, p, None)
    };
    let train_config = ctx.config.train_config();
    ensure_dir(&dir)?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)?;
    writeln!(log, "# {} model={name}", ctx.provenance())?;
    let every = train_config.checkpoint_every;
    let result = factorial_flow::train(&mut model, &mut prior, dataset, &train_config, state, |p| {
        writeln!(log, "{}", p.log_line())?;
        let ckpt = Checkpoint {
            model: p.model.clone(),
            prior: p.prior.clone(),
            state: Some(p.state.clone()),
        };
        let epoch = p.record.epoch;
        if every > 0 && epoch % every == 0 {
            ckpt.save(&dir.join(format!("epoch_{epoch:04}.bin")))?;
        }
        ckpt.save(&ckpt_path)
    });
    match result {
        Ok(_) => Ok(ckpt_path),
        Err(e) => {
            let _ = writeln!(log, "failed: {e}");
            Err(e.into())
        }
    }
}

pub fn train(ctx: &Context, resume: bool) -> Result<PathBuf, CliError> {
    let regime = ctx.config.regime()?;
    let dataset = ctx.load_split(Split::Train)?;
    train_model(ctx, regime, ctx.discriminative_factor(), &dataset, resume)
}

/// Writes `codes_<split>.csv` and `projection_<split>.csv` next to the
/// checkpoint.
pub fn encode(ctx: &Context, model: Option<&str>, split: Split, factor: Option<&str>) -> Result<PathBuf, CliError> {
    let name = model.map(str::to_string).unwrap_or_else(|| ctx.default_model_name());
    let ckpt = ctx.load_checkpoint(&name)?;
    let dataset = ctx.load_split(split)?;
    let span = match factor {
        Some(f) => {
            if ckpt.prior.regime() != Regime::Factorial {
                return Err(CliError::Validation(format!(
                    "model `{name}` has a {} prior; partial codes need a factorial prior",
                    ckpt.prior.regime().name()
                )));
            }
            if ckpt.prior.partition().index_of(f).is_none() {
                return Err(CliError::Validation(format!("model `{name}` has no factor `{f}`")));
            }
            factor_span(&ckpt.prior, f)
        }
        None => 0..ckpt.model.dim(),
    };
    if dataset.dim() != ckpt.model.dim() {
        return Err(CliError::Validation(format!(
            "dataset has D = {} but the model expects {}",
            dataset.dim(),
            ckpt.model.dim()
        )));
    }
    let dir = ctx.model_dir(&name);
    let codes_path = dir.join(format!("codes_{}.csv", split.name()));
    let suffix = factor.map(|f| format!("_{f}")).unwrap_or_default();
    let proj_path = dir.join(format!("projection_{}{suffix}.csv", split.name()));
    ctx.check_outputs(&[codes_path.clone(), proj_path.clone()])?;

    let codes = encode_batch(&ckpt.model, dataset.features())?;
    let projection = project_2d(codes.slice(ndarray::s![.., span]))?;
    write_codes(&codes_path, &ckpt.prior, &dataset, codes.view(), Some(&ctx.provenance()))?;
    let csv = format!(
        "# {}\n{}",
        ctx.provenance(),
        projection_csv(&dataset, projection.coords.view())
    );
    write_file(&proj_path, &csv)?;
    Ok(codes_path)
}

/// Shifts every `split` sample of class `from` to class `to` (class means
/// estimated on the training split) and writes the results as a dataset whose
/// `factor` label is `to`.
pub fn manipulate(
    ctx: &Context,
    model: Option<&str>,
    factor: &str,
    from: usize,
    to: usize,
    split: Split,
) -> Result<PathBuf, CliError> {
    let name = model.map(str::to_string).unwrap_or_else(|| ctx.default_model_name());
    let ckpt = ctx.load_checkpoint(&name)?;
    let train = ctx.load_split(Split::Train)?;
    let dataset = ctx.load_split(split)?;
    let fi = dataset
        .factor_index(factor)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let classes = dataset.factors()[fi].classes;
    if from >= classes || to >= classes {
        return Err(CliError::Validation(format!(
            "factor `{factor}` has {classes} classes; got {from} -> {to}"
        )));
    }
    let rows: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels(fi)[i] == from).collect();
    if rows.is_empty() {
        return Err(CliError::Validation(format!(
            "no {} samples of `{factor}` class {from}",
            split.name()
        )));
    }
    let path = ctx
        .model_dir(&name)
        .join(format!("manipulated_{factor}_{from}_to_{to}_{}.txt", split.name()));
    ctx.check_outputs(std::slice::from_ref(&path))?;

    let means = class_means(&ckpt.model, &ckpt.prior, &train, factor)?;
    let subset = dataset.select(&rows);
    let moved = manipulate_batch(&ckpt.model, &means, subset.features(), from, to)?;
    let mut labels: Vec<Vec<usize>> = (0..subset.factors().len()).map(|f| subset.labels(f).to_vec()).collect();
    labels[fi].fill(to);
    let out = LabeledDataset::new(subset.ids().to_vec(), moved, subset.factors().to_vec(), labels)?;
    out.save_with_source(&path, Encoding::Text, Some(&ctx.provenance()))?;
    Ok(path)
}

/// One classifier per dataset factor, trained on raw training observations.
fn observation_classifiers(ctx: &Context, train: &LabeledDataset) -> Result<Vec<MlpClassifier>, CliError> {
    (0..train.factors().len())
        .into_par_iter()
        .map(|f| {
            let config = ctx.config.classifier_config(100 + f as u64);
            train_classifier(train.features(), train.labels(f), train.factors()[f].classes, &config)
                .map(|(c, _)| c)
                .map_err(CliError::from)
        })
        .collect()
}

fn manipulation_reports(
    ckpt: &Checkpoint,
    classifiers: &[MlpClassifier],
    train: &LabeledDataset,
    test: &LabeledDataset,
    factors: &[String],
) -> Result<Vec<ManipulationReport>, CliError> {
    factors
        .par_iter()
        .map(|f| {
            let means = class_means(&ckpt.model, &ckpt.prior, train, f)?;
            Ok(manipulation_eval(&ckpt.model, &means, classifiers, test, f, false)?)
        })
        .collect()
}

fn factor_names(dataset: &LabeledDataset) -> Vec<String> {
    dataset.factors().iter().map(|f| f.name.clone()).collect()
}

fn accuracy_lines(classifiers: &[MlpClassifier], test: &LabeledDataset) -> Result<String, CliError> {
    let mut out = String::from("| Factor | Classes | Test accuracy on x |\n|---|---:|---:|\n");
    for (f, c) in classifiers.iter().enumerate() {
        let acc = c.accuracy(test.features(), test.labels(f))?;
        let _ = writeln!(out, "| {} | {} | {acc:.3} |", test.factors()[f].name, test.factors()[f].classes);
    }
    Ok(out)
}

/// Writes `report.md` and `report.csv` for one model.
pub fn eval(ctx: &Context, model: Option<&str>) -> Result<PathBuf, CliError> {
    let name = model.map(str::to_string).unwrap_or_else(|| ctx.default_model_name());
    let ckpt = ctx.load_checkpoint(&name)?;
    let train = ctx.load_split(Split::Train)?;
    let test = ctx.load_split(Split::Test)?;
    let dir = ctx.model_dir(&name);
    let md_path = dir.join("report.md");
    let csv_path = dir.join("report.csv");
    ctx.check_outputs(&[md_path.clone(), csv_path.clone()])?;

    let classifiers = observation_classifiers(ctx, &train)?;
    let reports = manipulation_reports(&ckpt, &classifiers, &train, &test, &factor_names(&test))?;
    let rows = vec![(name.clone(), reports)];
    let nll = evaluate(&ckpt.model, &ckpt.prior, &test)?;
    let mut md = format!("# Manipulation report: {name}\n\n{}\n\n", ctx.provenance());
    let _ = writeln!(
        md,
        "Test NLL: {:.4} nats ({:.4} per dimension)\n",
        nll.nll,
        nll.nll / test.dim() as f64
    );
    md.push_str(&accuracy_lines(&classifiers, &test)?);
    md.push('\n');
    md.push_str(&markdown_table(&rows));
    write_file(&md_path, &md)?;
    write_file(&csv_path, &format!("# {}\n{}", ctx.provenance(), csv_table(&rows)))?;
    Ok(md_path)
}

/// Accuracy of a classifier trained on one factor's partial code (train
/// split) at predicting `target`, measured on the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureCheck {
    pub code: String,
    pub target: String,
    pub accuracy: f64,
    pub chance: f64,
}

#[derive(Clone, Debug)]
pub struct BenchSummary {
    /// `(model label, one report per factor)` in the order NF, DNF, f-DNF.
    pub rows: Vec<(String, Vec<ManipulationReport>)>,
    pub structure: Vec<StructureCheck>,
    pub markdown: String,
    pub csv: String,
}

fn structure_checks(
    ctx: &Context,
    ckpt: &Checkpoint,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<Vec<StructureCheck>, CliError> {
    let z_train = encode_batch(&ckpt.model, train.features())?;
    let z_test = encode_batch(&ckpt.model, test.features())?;
    let part = ckpt.prior.partition();
    let jobs: Vec<(usize, usize)> = (0..part.len())
        .flat_map(|c| (0..test.factors().len()).map(move |t| (c, t)))
        .collect();
    jobs.par_iter()
        .map(|&(c, t)| {
            let span = part.range(c);
            let config = ctx.config.classifier_config(200 + (c * 16 + t) as u64);
            let classes = test.factors()[t].classes;
            let (clf, _) = train_classifier(
                z_train.slice(ndarray::s![.., span.clone()]),
                train.labels(t),
                classes,
                &config,
            )?;
            let accuracy = clf.accuracy(z_test.slice(ndarray::s![.., span]), test.labels(t))?;
            Ok(StructureCheck {
                code: part.names()[c].clone(),
                target: test.factors()[t].name.clone(),
                accuracy,
                chance: 1.0 / classes as f64,
            })
        })
        .collect()
}

/// Full comparison: fresh data, NF, one DNF per factor, factorial DNF, one
/// shared set of observation classifiers. Writes `bench_report.md` and
/// `bench_report.csv` in the output directory.
pub fn bench(ctx: &Context) -> Result<BenchSummary, CliError> {
    let factors: Vec<String> = ctx.config.data.factors.iter().map(|f| f.name.clone()).collect();
    let mut jobs = vec![(Regime::Standard, factors[0].clone())];
    jobs.extend(factors.iter().map(|f| (Regime::Discriminative, f.clone())));
    jobs.push((Regime::Factorial, factors[0].clone()));

    let md_path = ctx.config.out.join("bench_report.md");
    let csv_path = ctx.config.out.join("bench_report.csv");
    let mut outputs = vec![
        ctx.data_dir().join("train.txt"),
        ctx.data_dir().join("test.txt"),
        md_path.clone(),
        csv_path.clone(),
    ];
    for (r, f) in &jobs {
        outputs.push(ctx.model_dir(&model_name(*r, f)).join(CHECKPOINT_FILE));
    }
    ctx.check_outputs(&outputs)?;
    let mut config = ctx.config.clone();
    config.data.train_path = None;
    config.data.test_path = None;
    let data_ctx = Context {
        config,
        hash: ctx.hash.clone(),
        overwrite: true,
    };
    gen_data(&data_ctx)?;
    let train = data_ctx.load_split(Split::Train)?;
    let test = data_ctx.load_split(Split::Test)?;

    let checkpoints: Vec<Checkpoint> = jobs
        .par_iter()
        .map(|(r, f)| {
            let path = train_model(&data_ctx, *r, f, &train, false)?;
            Checkpoint::load(&path).map_err(CliError::from)
        })
        .collect::<Result<_, _>>()?;
    let classifiers = observation_classifiers(ctx, &train)?;

    let nf = manipulation_reports(&checkpoints[0], &classifiers, &train, &test, &factors)?;
    let mut dnf = Vec::with_capacity(factors.len());
    for (k, f) in factors.iter().enumerate() {
        let mut r = manipulation_reports(&checkpoints[1 + k], &classifiers, &train, &test, std::slice::from_ref(f))?;
        dnf.push(r.remove(0));
    }
    let fdnf_ckpt = checkpoints.last().expect("factorial model");
    let fdnf = manipulation_reports(fdnf_ckpt, &classifiers, &train, &test, &factors)?;
    let rows = vec![("NF".to_string(), nf), ("DNF".to_string(), dnf), ("f-DNF".to_string(), fdnf)];
    let structure = structure_checks(ctx, fdnf_ckpt, &train, &test)?;

    let mut md = format!("# Manipulation benchmark\n\n{}\n\n", ctx.provenance());
    md.push_str(
        "Posteriors come from MLP classifiers trained on raw observations. DNF rows use the model \
         conditioned on the manipulated factor.\n\n",
    );
    md.push_str("## Test NLL\n\n| Model | nats | nats/dim |\n|---|---:|---:|\n");
    for ((r, f), ckpt) in jobs.iter().zip(&checkpoints) {
        let nll = evaluate(&ckpt.model, &ckpt.prior, &test)?;
        let _ = writeln!(
            md,
            "| {} | {:.4} | {:.4} |",
            model_name(*r, f),
            nll.nll,
            nll.nll / test.dim() as f64
        );
    }
    md.push_str("\n## Observation classifiers\n\n");
    md.push_str(&accuracy_lines(&classifiers, &test)?);
    md.push_str("\n## Manipulation\n\n");
    md.push_str(&markdown_table(&rows));
    md.push_str("## Class structure of f-DNF partial codes\n\n| Code | Predicts | Test accuracy | Chance |\n|---|---|---:|---:|\n");
    for s in &structure {
        let _ = writeln!(md, "| z^{} | {} | {:.3} | {:.3} |", s.code, s.target, s.accuracy, s.chance);
    }
    let csv = format!("# {}\n{}", ctx.provenance(), csv_table(&rows));
    write_file(&md_path, &md)?;
    write_file(&csv_path, &csv)?;
    Ok(BenchSummary {
        rows,
        structure,
        markdown: md,
        csv,
    })
}
