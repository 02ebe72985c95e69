use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use fusionhead::eval::{
    cv_aggregate, macro_roc, multiclass_roc, stratified_kfold, stratified_split, Averaging,
    MetricsReport, METRIC_NAMES,
};
use fusionhead::explain::{
    lime_image, lime_tabular, shap_exact, shap_kernel, Attribution, LimeConfig, Method,
    PipelinePredictor, UnitMode, EXACT_SHAP_MAX_DIM,
};
use fusionhead::features::{
    build_feature_table, builtin_extractor, default_branches, AugmentParams, DatasetManifest,
    Extractor, FeatureTable, ManifestEntry, SourceTag,
};
use fusionhead::io::{
    format_float, load_checkpoint, read_feature_csv, read_manifest, read_ppm, save_checkpoint,
    write_feature_csv, write_json, write_manifest, write_ppm, write_text, ModelBundle,
};
use fusionhead::mlp::{argmax, predict_proba, MlpModel, MlpSpec};
use fusionhead::numeric::RNG_ALGORITHM;
use fusionhead::optim::{
    train, EpochRecord, OptimizerConfig, OptimizerKind, TrainConfig, TrainOutcome, TrainStatus,
};
use fusionhead::pca::{pca_fit, pca_transform, PcaModel};
use fusionhead::synth::{render_sample, synth_dataset, SynthConfig};
use fusionhead::{Error, Matrix, RandomStream, Result};

use crate::args::*;

pub const SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const GRID_FILE: &str = "grid.json";
pub const ROC_FILE: &str = "roc.csv";
pub const MODEL_FILE: &str = "model.fhc";
pub const ATTRIBUTION_FILE: &str = "attribution.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const TEST_FILE: &str = "test.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Train / validation / test proportions of a single run.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.68, 0.17, 0.15];
/// Held-out share before cross-validation.
pub const CV_TEST_FRACTION: f64 = 0.15;

const SPLIT_TAG: u64 = 1;
const AUGMENT_TAG: u64 = 2;
const INIT_TAG: u64 = 3;
const FOLD_TAG: u64 = 4;
const BACKGROUND_TAG: u64 = 5;
const EXPLAIN_TAG: u64 = 6;

/// Stand-in extractor name for models trained on a feature CSV.
pub const PRECOMPUTED: &str = "precomputed";

pub fn run(cli: &Cli) -> Result<()> {
    let out = &cli.global.out;
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;
    match &cli.command {
        Command::GenData(a) => run_gen_data(cli, a),
        Command::Extract(a) => run_extract(cli, a),
        Command::Train(a) => run_train(cli, a),
        Command::Evaluate(a) => run_evaluate(cli, a),
        Command::Cv(a) => run_cv(cli, a),
        Command::Sweep(a) => run_sweep(cli, a),
        Command::Roc(a) => run_roc(cli, a),
        Command::Explain(a) => run_explain(cli, a),
    }
}

struct Timer(BTreeMap<&'static str, f64>, Instant);

impl Timer {
    fn new() -> Self {
        Timer(BTreeMap::new(), Instant::now())
    }

    fn lap(&mut self, name: &'static str) {
        let now = Instant::now();
        self.0.insert(name, (now - self.1).as_secs_f64());
        self.1 = now;
    }

    fn finish(mut self) -> BTreeMap<&'static str, f64> {
        let total = self.0.values().sum();
        self.0.insert("total", total);
        self.0
    }
}

fn averaging(a: AveragingArg) -> Averaging {
    match a {
        AveragingArg::Weighted => Averaging::Weighted,
        AveragingArg::Macro => Averaging::Macro,
        AveragingArg::Micro => Averaging::Micro,
    }
}

fn mlp_spec(arch: Arch, input: usize, classes: usize) -> MlpSpec {
    match arch {
        Arch::Reference => MlpSpec::reference(input, classes),
        Arch::Compact => MlpSpec::compact(input, classes),
    }
}

fn train_config(m: &ModelArgs, kind: OptimizerKind, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: m.batch_size,
        max_epochs: m.epochs,
        early_stop_patience: m.patience,
        plateau_patience: m.plateau_patience,
        optimizer: OptimizerConfig::new(kind, lr),
        seed,
        ..TrainConfig::default()
    }
}

fn check_variance(v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::InvalidArgument(format!("--variance {v} outside (0, 1]")));
    }
    Ok(())
}

/// PCA fitted on `train`, an MLP trained on the projection.
struct Fitted {
    pca: PcaModel,
    outcome: TrainOutcome,
}

fn fit_head(
    train_set: &FeatureTable,
    val_set: Option<&FeatureTable>,
    m: &ModelArgs,
    config: &TrainConfig,
    init_seed: u64,
) -> Result<Fitted> {
    let pca = pca_fit(&train_set.features, m.variance)?;
    let train_z = project(&pca, train_set)?;
    let val_z = val_set.map(|v| project(&pca, v)).transpose()?;
    let spec = mlp_spec(m.arch, pca.k, train_set.class_count());
    let model = MlpModel::init(&spec, &mut RandomStream::derived(init_seed, INIT_TAG))?;
    let outcome = train(model, &train_z, val_z.as_ref(), config)?;
    Ok(Fitted { pca, outcome })
}

fn project(pca: &PcaModel, table: &FeatureTable) -> Result<FeatureTable> {
    table.with_features(pca_transform(pca, &table.features)?)
}

fn score(fitted: &Fitted, table: &FeatureTable, avg: Averaging) -> Result<MetricsReport> {
    let probs = predict_proba(&fitted.outcome.model, &pca_transform(&fitted.pca, &table.features)?)?;
    MetricsReport::compute(&table.labels, &probs, avg)
}

fn parse_optimizer(name: &str) -> Result<OptimizerKind> {
    name.parse()
}

// ---------------------------------------------------------------- gen-data

fn run_gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let out = &cli.global.out;
    let data = synth_dataset(&SynthConfig {
        classes: a.classes,
        dim: a.dim,
        per_class: a.per_class,
        separation: a.separation,
        seed: cli.global.seed,
    })?;
    write_feature_csv(&out.join(FEATURES_FILE), &data.table)?;
    println!("wrote {} rows of {} features", data.table.len(), data.table.dim());
    if a.images {
        if a.image_size < 8 {
            return Err(Error::InvalidArgument("--image-size must be at least 8".into()));
        }
        let dir = out.join("images");
        let table = &data.table;
        let entries: Vec<ManifestEntry> = (0..table.len())
            .into_par_iter()
            .map(|r| {
                let img = render_sample(table.features.row(r), &data.directions, a.image_size)?;
                let path = dir.join(format!("{}.ppm", table.ids[r]));
                write_ppm(&path, &img)?;
                Ok(ManifestEntry {
                    id: table.ids[r].clone(),
                    path,
                    label: table.class_names[table.labels[r]].clone(),
                    source: SourceTag::Synthetic,
                })
            })
            .collect::<Result<_>>()?;
        let manifest = DatasetManifest::new(table.class_names.clone(), entries)?;
        write_manifest(&out.join(MANIFEST_FILE), &manifest)?;
        println!("wrote {} images and {MANIFEST_FILE}", manifest.len());
    }
    Ok(())
}

// ---------------------------------------------------------------- extract

fn extractor_names(a: &dyn Extractor, b: &dyn Extractor) -> Vec<(String, usize)> {
    vec![
        (a.name().to_string(), a.output_dim()),
        (b.name().to_string(), b.output_dim()),
    ]
}

fn run_extract(cli: &Cli, a: &ExtractArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let (ea, eb) = default_branches();
    let mut stream = RandomStream::derived(cli.global.seed, AUGMENT_TAG);
    let table = build_feature_table(
        &manifest,
        ea.as_ref(),
        eb.as_ref(),
        a.augment_copies,
        &AugmentParams::default(),
        &mut stream,
    )?;
    write_feature_csv(&cli.global.out.join(FEATURES_FILE), &table)?;
    println!("extracted {} rows of {} features", table.len(), table.dim());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Serialize)]
struct DataSummary {
    classes: Vec<String>,
    input_dim: usize,
    rows: BTreeMap<&'static str, usize>,
    pca_components: usize,
    retained_variance: f64,
    extractors: Vec<(String, usize)>,
}

#[derive(Serialize)]
struct TrainingSummary {
    optimizer: String,
    learning_rate: f64,
    epochs_run: usize,
    best_epoch: usize,
    status: TrainStatus,
    history: Vec<EpochRecord>,
}

impl TrainingSummary {
    fn new(o: &TrainOutcome, config: &TrainConfig) -> Self {
        TrainingSummary {
            optimizer: config.optimizer.kind.to_string(),
            learning_rate: config.optimizer.learning_rate,
            epochs_run: o.history.len(),
            best_epoch: o.best_epoch,
            status: o.status,
            history: o.history.clone(),
        }
    }
}

#[derive(Serialize)]
struct TrainReport<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a Cli,
    rng_algorithm: &'static str,
    data: DataSummary,
    training: TrainingSummary,
    validation: MetricsReport,
    test: MetricsReport,
    timings: BTreeMap<&'static str, f64>,
}

/// Train/validation/test tables for a single run, from a feature CSV or
/// from images (only the training split is augmented).
fn load_splits(cli: &Cli, input: &InputArgs) -> Result<([FeatureTable; 3], Vec<(String, usize)>)> {
    let seed = cli.global.seed;
    match (&input.features, &input.manifest) {
        (Some(path), None) => {
            let table = read_feature_csv(path, None)?;
            let parts = stratified_split(&table.labels, &SPLIT_FRACTIONS, seed ^ SPLIT_TAG)?;
            let dim = table.dim();
            let [a, b, c] = [0, 1, 2].map(|i| table.select(&parts[i]));
            Ok(([a, b, c], vec![(PRECOMPUTED.to_string(), dim)]))
        }
        (None, Some(path)) => {
            let manifest = read_manifest(path)?;
            let labels: Vec<usize> = manifest
                .entries()
                .iter()
                .map(|e| manifest.label_index(&e.label).expect("label set covers entries"))
                .collect();
            let parts = stratified_split(&labels, &SPLIT_FRACTIONS, seed ^ SPLIT_TAG)?;
            let (ea, eb) = default_branches();
            let mut stream = RandomStream::derived(seed, AUGMENT_TAG);
            let params = AugmentParams::default();
            let mut tables = Vec::with_capacity(3);
            for (i, part) in parts.iter().enumerate() {
                let copies = if i == 0 { input.augment_copies } else { 0 };
                tables.push(build_feature_table(
                    &manifest.subset(part),
                    ea.as_ref(),
                    eb.as_ref(),
                    copies,
                    &params,
                    &mut stream,
                )?);
            }
            let [a, b, c]: [FeatureTable; 3] = tables.try_into().expect("three splits");
            Ok(([a, b, c], extractor_names(ea.as_ref(), eb.as_ref())))
        }
        _ => Err(Error::InvalidArgument("give exactly one of --features or --manifest".into())),
    }
}

fn check_nonempty(tables: &[&FeatureTable], names: &[&str]) -> Result<()> {
    for (t, n) in tables.iter().zip(names) {
        if t.is_empty() {
            return Err(Error::Data(format!("the {n} split is empty; more samples per class are needed")));
        }
    }
    Ok(())
}

fn run_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut timer = Timer::new();
    check_variance(a.model.variance)?;
    let kind = parse_optimizer(&a.optimizer)?;
    let config = train_config(&a.model, kind, a.lr, cli.global.seed);
    config.validate()?;
    let ([train_set, val_set, test_set], extractors) = load_splits(cli, &a.input)?;
    check_nonempty(&[&train_set, &val_set, &test_set], &["train", "validation", "test"])?;
    timer.lap("load");

    let fitted = fit_head(&train_set, Some(&val_set), &a.model, &config, cli.global.seed)?;
    timer.lap("train");
    let avg = averaging(a.model.averaging);
    let validation = score(&fitted, &val_set, avg)?;
    let test = score(&fitted, &test_set, avg)?;

    let out = &cli.global.out;
    let bundle = ModelBundle::new(
        train_set.class_names.clone(),
        extractors.clone(),
        fitted.pca.clone(),
        fitted.outcome.model.clone(),
        cli.global.seed,
    )?;
    save_checkpoint(&out.join(MODEL_FILE), &bundle)?;
    write_feature_csv(&out.join(TEST_FILE), &test_set)?;
    timer.lap("evaluate");

    let report = TrainReport {
        schema_version: SCHEMA_VERSION,
        command: "train",
        config: cli,
        rng_algorithm: RNG_ALGORITHM,
        data: DataSummary {
            classes: train_set.class_names.clone(),
            input_dim: train_set.dim(),
            rows: BTreeMap::from([
                ("train", train_set.len()),
                ("validation", val_set.len()),
                ("test", test_set.len()),
            ]),
            pca_components: fitted.pca.k,
            retained_variance: fitted.pca.retained_ratio(),
            extractors,
        },
        training: TrainingSummary::new(&fitted.outcome, &config),
        validation,
        test,
        timings: timer.finish(),
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    println!(
        "test accuracy {:.4}, auc {:.4} after {} epochs (best {})",
        report.test.accuracy,
        report.test.auc,
        report.training.epochs_run,
        report.training.best_epoch
    );
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Serialize)]
struct EvaluateReport<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a Cli,
    classes: Vec<String>,
    rows: usize,
    test: MetricsReport,
    timings: BTreeMap<&'static str, f64>,
}

fn load_scored(model: &Path, features: &Path) -> Result<(ModelBundle, FeatureTable, Matrix)> {
    let bundle = load_checkpoint(model)?;
    let table = read_feature_csv(features, Some(&bundle.labels))?;
    let probs = bundle.predict_fused(&table.features)?;
    Ok((bundle, table, probs))
}

fn run_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let mut timer = Timer::new();
    let (bundle, table, probs) = load_scored(&a.model, &a.features)?;
    let test = MetricsReport::compute(&table.labels, &probs, averaging(a.averaging))?;
    timer.lap("evaluate");
    let report = EvaluateReport {
        schema_version: SCHEMA_VERSION,
        command: "evaluate",
        config: cli,
        classes: bundle.labels,
        rows: table.len(),
        test,
        timings: timer.finish(),
    };
    write_json(&cli.global.out.join(REPORT_FILE), &report)?;
    println!("accuracy {:.4}, auc {:.4} on {} rows", report.test.accuracy, report.test.auc, report.rows);
    Ok(())
}

// ---------------------------------------------------------------- cv

/// The seven headline metrics in a fixed order.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kappa: f64,
    pub mcc: f64,
    pub auc: f64,
}

impl MetricRow {
    fn from_values(v: [f64; 7]) -> Self {
        MetricRow {
            accuracy: v[0],
            precision: v[1],
            recall: v[2],
            f1: v[3],
            kappa: v[4],
            mcc: v[5],
            auc: v[6],
        }
    }
}

#[derive(Serialize)]
struct FoldRow {
    fold: usize,
    train_rows: usize,
    validation_rows: usize,
    pca_components: usize,
    epochs_run: usize,
    best_epoch: usize,
    train_accuracy: f64,
    #[serde(flatten)]
    validation: MetricRow,
}

#[derive(Serialize)]
struct FinalModel {
    epochs: usize,
    pca_components: usize,
    rows: usize,
}

#[derive(Serialize)]
struct CvReport<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a Cli,
    rng_algorithm: &'static str,
    classes: Vec<String>,
    input_dim: usize,
    folds: Vec<FoldRow>,
    mean: MetricRow,
    std: MetricRow,
    best_fold: usize,
    final_model: FinalModel,
    test: MetricsReport,
    timings: BTreeMap<&'static str, f64>,
}

fn run_cv(cli: &Cli, a: &CvArgs) -> Result<()> {
    let mut timer = Timer::new();
    check_variance(a.model.variance)?;
    let seed = cli.global.seed;
    let kind = parse_optimizer(&a.optimizer)?;
    train_config(&a.model, kind, a.lr, seed).validate()?;
    let table = read_feature_csv(&a.features, None)?;
    let parts = stratified_split(&table.labels, &[1.0 - CV_TEST_FRACTION, CV_TEST_FRACTION], seed ^ SPLIT_TAG)?;
    let (pool, test_set) = (table.select(&parts[0]), table.select(&parts[1]));
    check_nonempty(&[&pool, &test_set], &["cross-validation", "test"])?;
    let plan = stratified_kfold(&pool.labels, a.folds, seed ^ FOLD_TAG)?;
    timer.lap("load");

    let avg = averaging(a.model.averaging);
    let results: Vec<(FoldRow, MetricsReport)> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(i, fold)| {
            let fold_seed = RandomStream::derived(seed, FOLD_TAG + i as u64).seed();
            let train_set = pool.select(&fold.train);
            let val_set = pool.select(&fold.validation);
            let config = train_config(&a.model, kind, a.lr, fold_seed);
            let fitted = fit_head(&train_set, Some(&val_set), &a.model, &config, fold_seed)?;
            let val = score(&fitted, &val_set, avg)?;
            let train_metrics = score(&fitted, &train_set, avg)?;
            let row = FoldRow {
                fold: i + 1,
                train_rows: train_set.len(),
                validation_rows: val_set.len(),
                pca_components: fitted.pca.k,
                epochs_run: fitted.outcome.history.len(),
                best_epoch: fitted.outcome.best_epoch,
                train_accuracy: train_metrics.accuracy,
                validation: MetricRow::from_values(val.scalars()),
            };
            Ok((row, val))
        })
        .collect::<Result<_>>()?;
    timer.lap("folds");

    let reports: Vec<MetricsReport> = results.iter().map(|r| r.1.clone()).collect();
    let summary = cv_aggregate(&reports);
    let pick = |f: fn(&fusionhead::eval::MetricSummary) -> f64| {
        MetricRow::from_values(METRIC_NAMES.map(|n| f(&summary[n])))
    };
    let (mean, std) = (pick(|s| s.mean), pick(|s| s.std));
    // Highest validation accuracy; the earliest fold wins ties.
    let best = results
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if r.1.accuracy > results[best].1.accuracy { i } else { best });
    let final_epochs = results[best].0.best_epoch;

    let mut final_args = a.model.clone();
    final_args.epochs = final_epochs;
    let config = train_config(&final_args, kind, a.lr, seed);
    let fitted = fit_head(&pool, None, &final_args, &config, seed)?;
    let test = score(&fitted, &test_set, avg)?;
    let out = &cli.global.out;
    let bundle = ModelBundle::new(
        pool.class_names.clone(),
        vec![(PRECOMPUTED.to_string(), pool.dim())],
        fitted.pca.clone(),
        fitted.outcome.model.clone(),
        seed,
    )?;
    save_checkpoint(&out.join(MODEL_FILE), &bundle)?;
    write_feature_csv(&out.join(TEST_FILE), &test_set)?;
    timer.lap("final");

    let report = CvReport {
        schema_version: SCHEMA_VERSION,
        command: "cv",
        config: cli,
        rng_algorithm: RNG_ALGORITHM,
        classes: pool.class_names.clone(),
        input_dim: pool.dim(),
        folds: results.into_iter().map(|r| r.0).collect(),
        mean,
        std,
        best_fold: best + 1,
        final_model: FinalModel {
            epochs: final_epochs,
            pca_components: fitted.pca.k,
            rows: pool.len(),
        },
        test,
        timings: timer.finish(),
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    println!(
        "{}-fold accuracy {:.4} ± {:.4}; test accuracy {:.4}",
        a.folds, report.mean.accuracy, report.std.accuracy, report.test.accuracy
    );
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Serialize)]
struct PhaseScores {
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
}

impl From<&MetricsReport> for PhaseScores {
    fn from(m: &MetricsReport) -> Self {
        PhaseScores {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }
}

#[derive(Serialize)]
struct SweepCell {
    optimizer: String,
    learning_rate: f64,
    epochs_run: usize,
    best_epoch: usize,
    status: TrainStatus,
    train: PhaseScores,
    val: PhaseScores,
    test: PhaseScores,
}

#[derive(Serialize)]
struct CellRef {
    optimizer: String,
    learning_rate: f64,
}

#[derive(Serialize)]
struct BestCell {
    optimizer: String,
    learning_rate: f64,
    val_accuracy: f64,
    test_accuracy: f64,
}

#[derive(Serialize)]
struct SweepReport<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a Cli,
    rng_algorithm: &'static str,
    rows: BTreeMap<&'static str, usize>,
    pca_components: usize,
    optimizers: Vec<String>,
    learning_rates: Vec<f64>,
    cells: Vec<SweepCell>,
    best_cell: BestCell,
    reference_cell: CellRef,
    timings: BTreeMap<&'static str, f64>,
}

fn run_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let mut timer = Timer::new();
    check_variance(a.model.variance)?;
    let seed = cli.global.seed;
    let kinds: Vec<OptimizerKind> = a.optimizers.iter().map(|o| parse_optimizer(o)).collect::<Result<_>>()?;
    if kinds.is_empty() || a.lrs.is_empty() {
        return Err(Error::InvalidArgument("the sweep needs at least one optimizer and one learning rate".into()));
    }
    for &lr in &a.lrs {
        train_config(&a.model, kinds[0], lr, seed).validate()?;
    }
    let table = read_feature_csv(&a.features, None)?;
    let parts = stratified_split(&table.labels, &SPLIT_FRACTIONS, seed ^ SPLIT_TAG)?;
    let [train_set, val_set, test_set] = [0, 1, 2].map(|i| table.select(&parts[i]));
    check_nonempty(&[&train_set, &val_set, &test_set], &["train", "validation", "test"])?;
    let pca = pca_fit(&train_set.features, a.model.variance)?;
    let [train_z, val_z, test_z] =
        [&train_set, &val_set, &test_set].map(|t| project(&pca, t));
    let (train_z, val_z, test_z) = (train_z?, val_z?, test_z?);
    timer.lap("load");

    let avg = averaging(a.model.averaging);
    let grid: Vec<(OptimizerKind, f64)> = kinds
        .iter()
        .flat_map(|&k| a.lrs.iter().map(move |&lr| (k, lr)))
        .collect();
    let spec = mlp_spec(a.model.arch, pca.k, train_set.class_count());
    // Every cell starts from the same initial weights and batch order.
    let init = MlpModel::init(&spec, &mut RandomStream::derived(seed, INIT_TAG))?;
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(kind, lr)| {
            let config = train_config(&a.model, kind, lr, seed);
            let outcome = train(init.clone(), &train_z, Some(&val_z), &config)?;
            let phase = |t: &FeatureTable| -> Result<MetricsReport> {
                let probs = predict_proba(&outcome.model, &t.features)?;
                MetricsReport::compute(&t.labels, &probs, avg)
            };
            Ok(SweepCell {
                optimizer: kind.to_string(),
                learning_rate: lr,
                epochs_run: outcome.history.len(),
                best_epoch: outcome.best_epoch,
                status: outcome.status,
                train: (&phase(&train_z)?).into(),
                val: (&phase(&val_z)?).into(),
                test: (&phase(&test_z)?).into(),
            })
        })
        .collect::<Result<_>>()?;
    timer.lap("grid");

    let best = cells
        .iter()
        .enumerate()
        .fold(0, |b, (i, c)| if c.val.accuracy > cells[b].val.accuracy { i } else { b });
    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        command: "sweep",
        config: cli,
        rng_algorithm: RNG_ALGORITHM,
        rows: BTreeMap::from([
            ("train", train_set.len()),
            ("validation", val_set.len()),
            ("test", test_set.len()),
        ]),
        pca_components: pca.k,
        optimizers: kinds.iter().map(|k| k.to_string()).collect(),
        learning_rates: a.lrs.clone(),
        best_cell: BestCell {
            optimizer: cells[best].optimizer.clone(),
            learning_rate: cells[best].learning_rate,
            val_accuracy: cells[best].val.accuracy,
            test_accuracy: cells[best].test.accuracy,
        },
        reference_cell: CellRef {
            optimizer: OptimizerKind::Adam.to_string(),
            learning_rate: 1e-4,
        },
        cells,
        timings: timer.finish(),
    };
    write_json(&cli.global.out.join(GRID_FILE), &report)?;
    println!(
        "{} cells; best {} at {} (val accuracy {:.4})",
        report.cells.len(),
        report.best_cell.optimizer,
        report.best_cell.learning_rate,
        report.best_cell.val_accuracy
    );
    Ok(())
}

// ---------------------------------------------------------------- roc

fn roc_rows(out: &mut String, class: &str, curve: &fusionhead::eval::RocCurve) {
    for ((t, f), p) in curve.thresholds.iter().zip(&curve.fpr).zip(&curve.tpr) {
        let threshold = if t.is_nan() {
            String::new()
        } else if t.is_infinite() {
            "inf".to_string()
        } else {
            format_float(*t)
        };
        out.push_str(&format!("{class},{threshold},{},{}\n", format_float(*f), format_float(*p)));
    }
}

fn run_roc(cli: &Cli, a: &RocArgs) -> Result<()> {
    let (bundle, table, probs) = load_scored(&a.model, &a.features)?;
    let (per_class, micro) = multiclass_roc(&table.labels, &probs)?;
    let mut out = String::from("class,threshold,fpr,tpr\n");
    for (name, curve) in bundle.labels.iter().zip(&per_class) {
        match curve {
            Some(c) => roc_rows(&mut out, name, c),
            None => eprintln!("warning: class {name}: ROC undefined on this data, skipped"),
        }
    }
    roc_rows(&mut out, "micro", &micro);
    if let Some(m) = macro_roc(&per_class) {
        roc_rows(&mut out, "macro", &m);
    }
    write_text(&cli.global.out.join(ROC_FILE), &out)?;
    println!("wrote {} curves", per_class.iter().flatten().count() + 2);
    Ok(())
}

// ---------------------------------------------------------------- explain

#[derive(Serialize)]
struct RankedUnit {
    unit: usize,
    weight: f64,
}

#[derive(Serialize)]
struct AttributionReport<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a Cli,
    method: Method,
    mode: UnitMode,
    units: &'static str,
    instance: String,
    target_class: usize,
    target_label: String,
    prediction: f64,
    base_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    intercept: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fidelity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    local_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact_max_deviation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    background_rows: Option<usize>,
    n_samples: usize,
    seed: u64,
    weights: Vec<f64>,
    ranking: Vec<RankedUnit>,
    timings: BTreeMap<&'static str, f64>,
}

fn resolve_target(arg: &Option<String>, labels: &[String], predicted: usize) -> Result<usize> {
    let Some(t) = arg else {
        return Ok(predicted);
    };
    if let Some(i) = labels.iter().position(|l| l == t) {
        return Ok(i);
    }
    match t.parse::<usize>() {
        Ok(i) if i < labels.len() => Ok(i),
        _ => Err(Error::InvalidArgument(format!("unknown target class {t:?}"))),
    }
}

fn select_row(table: &FeatureTable, row: &str) -> Result<usize> {
    if let Some(i) = table.ids.iter().position(|id| id == row) {
        return Ok(i);
    }
    match row.parse::<usize>() {
        Ok(i) if i < table.len() => Ok(i),
        _ => Err(Error::InvalidArgument(format!(
            "row {row:?} is neither an id nor an index below {}",
            table.len()
        ))),
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run_explain(cli: &Cli, a: &ExplainArgs) -> Result<()> {
    let mut timer = Timer::new();
    let seed = cli.global.seed;
    let bundle = load_checkpoint(&a.model)?;
    let mut stream = RandomStream::derived(seed, EXPLAIN_TAG);
    let mut exact_max_deviation = None;
    let mut background_rows = None;

    let (attribution, instance, units) = if is_image(&a.input) {
        if a.method == MethodArg::Shap {
            return Err(Error::InvalidArgument(
                "SHAP explains feature rows over principal components; use --method lime for images".into(),
            ));
        }
        if bundle.extractors.len() != 2 || bundle.extractors.iter().any(|e| e.0 == PRECOMPUTED) {
            return Err(Error::InvalidArgument(
                "this model was trained on precomputed features; explain a CSV row instead".into(),
            ));
        }
        let ea = builtin_extractor(&bundle.extractors[0].0, bundle.extractors[0].1)?;
        let eb = builtin_extractor(&bundle.extractors[1].0, bundle.extractors[1].1)?;
        let image = read_ppm(&a.input)?;
        let predictor = PipelinePredictor {
            branch_a: ea.as_ref(),
            branch_b: eb.as_ref(),
            pca: &bundle.pca,
            mlp: &bundle.mlp,
        };
        let probs = predictor.predict_images(std::slice::from_ref(&image))?;
        let target = resolve_target(&a.target, &bundle.labels, argmax(probs.row(0)))?;
        let config = LimeConfig {
            n_samples: a.n_samples.unwrap_or(LimeConfig::default().n_samples),
            ..LimeConfig::default()
        };
        let attr = lime_image(&predictor, &image, target, &config, &mut stream)?;
        (attr, display_name(&a.input), "grid-8x8-segments")
    } else {
        let table = read_feature_csv(&a.input, Some(&bundle.labels))?;
        let r = select_row(&table, &a.row)?;
        let z = pca_transform(&bundle.pca, &table.features.select_rows(&[r]))?;
        let x = z.row(0).to_vec();
        let probs = predict_proba(&bundle.mlp, &z)?;
        let target = resolve_target(&a.target, &bundle.labels, argmax(probs.row(0)))?;

        let bg_table = match &a.background {
            Some(p) => read_feature_csv(p, Some(&bundle.labels))?,
            None => table.clone(),
        };
        if a.background_size == 0 {
            return Err(Error::InvalidArgument("--background-size must be positive".into()));
        }
        let mut picked: Vec<usize> = if bg_table.len() > a.background_size {
            let mut s = RandomStream::derived(seed, BACKGROUND_TAG);
            sample(&mut s, bg_table.len(), a.background_size).into_vec()
        } else {
            (0..bg_table.len()).collect()
        };
        picked.sort_unstable();
        let background = pca_transform(&bundle.pca, &bg_table.features.select_rows(&picked))?;
        background_rows = Some(background.rows());

        let attr = match a.method {
            MethodArg::Lime => {
                let mut mean = vec![0.0; background.cols()];
                for row in background.iter_rows() {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= background.rows() as f64);
                let config = LimeConfig {
                    n_samples: a.n_samples.unwrap_or(LimeConfig::default().n_samples),
                    ..LimeConfig::default()
                };
                lime_tabular(&bundle.mlp, &x, &mean, target, &config, &mut stream)?
            }
            MethodArg::Shap => {
                let n = a.n_samples.unwrap_or(200);
                let attr = shap_kernel(&bundle.mlp, &background, &x, target, n, &mut stream)?;
                if x.len() <= EXACT_SHAP_MAX_DIM {
                    let exact = shap_exact(&bundle.mlp, &background, &x, target)?;
                    exact_max_deviation = Some(max_deviation(&attr, &exact));
                }
                attr
            }
        };
        (attr, table.ids[r].clone(), "principal-components")
    };
    timer.lap("explain");

    let report = AttributionReport {
        schema_version: SCHEMA_VERSION,
        command: "explain",
        config: cli,
        method: attribution.method,
        mode: attribution.mode,
        units,
        instance,
        target_class: attribution.target_class,
        target_label: bundle.labels[attribution.target_class].clone(),
        prediction: attribution.prediction,
        base_value: attribution.base_value,
        intercept: attribution.intercept,
        fidelity: attribution.fidelity,
        local_residual: attribution.local_residual,
        exact_max_deviation,
        background_rows,
        n_samples: attribution.n_samples,
        seed,
        ranking: attribution
            .ranked()
            .into_iter()
            .map(|(unit, weight)| RankedUnit { unit, weight })
            .collect(),
        weights: attribution.weights,
        timings: timer.finish(),
    };
    write_json(&cli.global.out.join(ATTRIBUTION_FILE), &report)?;
    let top: Vec<String> = report.ranking.iter().take(3).map(|u| format!("{}", u.unit)).collect();
    println!(
        "explained {} for class {} ({}); top units {}",
        report.instance,
        report.target_label,
        report.units,
        top.join(", ")
    );
    if let Some(d) = exact_max_deviation {
        println!("kernel vs exact SHAP max deviation {d:.3e}");
    }
    Ok(())
}

pub fn max_deviation(a: &Attribution, b: &Attribution) -> f64 {
    a.weights
        .iter()
        .zip(&b.weights)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
