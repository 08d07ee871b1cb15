use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use adaptive_attention::analysis::{cost_report, export_scaling_tables, CostReport, ScalingRun};
use adaptive_attention::attention::AttentionVariant;
use adaptive_attention::checkpoint::{load_checkpoint, read_manifest};
use adaptive_attention::data::{
    load_cifar100, make_splits, synthetic_cifar, test_split, ChannelNorm, DatasetSplit, RawSplit, DEFAULT_VAL_COUNT,
};
use adaptive_attention::model::{Model, ModelConfig, Primitive, SizeClass};
use adaptive_attention::tensor::Float;
use adaptive_attention::train::{evaluate, train, EpochMetrics, Precision, RunMetrics, RunOutput, TrainConfig};
use adaptive_attention::verify::{check_attention, check_mask, check_ops};
use adaptive_attention::Error;
use serde::{Deserialize, Serialize};

use crate::args::{
    AnalyzeArgs, DataArgs, EvalArgs, ExportArgs, GradTarget, GradcheckArgs, ModelArgs, SpansArgs, SplitArg, TrainArgs,
};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
const NORM_KEY: &str = "norm";
const RUN_KEY: &str = "run";

#[derive(Debug)]
pub enum CliError {
    ConflictingFlags(String),
    Usage(String),
    GradCheckFailed(String),
    Core(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::ConflictingFlags(m) => write!(f, "conflicting flags: {m}"),
            CliError::Usage(m) => f.write_str(m),
            CliError::GradCheckFailed(m) => write!(f, "gradient check failed: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 1 for invalid input, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ConflictingFlags(_) | CliError::Usage(_) => 1,
            CliError::GradCheckFailed(_) => 2,
            CliError::Core(e) => match e {
                Error::InvalidConfig(_)
                | Error::ConfigMismatch(_)
                | Error::InvalidChannelPlan(_)
                | Error::FractionOutOfRange(_)
                | Error::EpochOutOfRange { .. }
                | Error::NotAdaptiveModel
                | Error::MissingFile(_)
                | Error::MissingRun(_)
                | Error::InvalidCheckpoint(_)
                | Error::EvenExtent(_)
                | Error::EmptySpanList => 1,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Dir(PathBuf),
    Synthetic { train: usize, test: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub fraction: f64,
    pub val_count: usize,
    pub split_seed: u64,
    /// Training-split statistics, filled in once the splits are built.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<ChannelNorm>,
}

/// Everything needed to repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub config: RunConfig,
    pub metrics: RunMetrics,
    pub cost: CostReport,
    /// Checkpoint the test accuracy was measured on.
    pub evaluated: String,
}

fn source_from_args(d: &DataArgs, seed: u64) -> Option<DataSource> {
    if let Some(n) = d.synthetic {
        return Some(DataSource::Synthetic {
            train: n,
            test: (n / 5).max(1),
            seed,
        });
    }
    d.data.clone().map(DataSource::Dir)
}

fn load_source(src: &DataSource) -> CliResult<(RawSplit, RawSplit)> {
    match src {
        DataSource::Dir(dir) => Ok(load_cifar100(dir)?),
        DataSource::Synthetic { train, test, seed } => Ok(synthetic_cifar(*train, *test, *seed)),
    }
}

fn check_conflicts(p: Primitive, m: &ModelArgs, span_l1: Option<f64>) -> CliResult<()> {
    let span_flags = [
        ("--ramp", m.ramp.is_some()),
        ("--init-span", m.init_span.is_some()),
        ("--span-l1", span_l1.is_some()),
    ];
    let mut bad: Vec<&str> = Vec::new();
    if p != Primitive::Adaptive {
        bad.extend(span_flags.iter().filter(|(_, set)| *set).map(|(n, _)| *n));
    }
    if p == Primitive::Conv && m.heads.is_some() {
        bad.push("--heads");
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::ConflictingFlags(format!(
            "--primitive {p} does not take {}",
            bad.join(", ")
        )))
    }
}

fn apply_model_args(cfg: &mut ModelConfig, m: &ModelArgs) {
    if let Some(h) = m.heads {
        cfg.heads = h;
    }
    if let Some(r) = m.ramp {
        cfg.ramp = r;
    }
    if let Some(z) = m.init_span {
        cfg.init_span = z;
    }
}

fn set<V>(dst: &mut V, v: Option<V>) {
    if let Some(v) = v {
        *dst = v;
    }
}

/// Merges a replayed configuration with explicit flags.
pub fn resolve_train(args: &TrainArgs) -> CliResult<RunConfig> {
    let base: Option<RunConfig> = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.clone()))?;
            Some(serde_json::from_str(&text)?)
        }
        None => None,
    };
    let primitive: Primitive = match (&base, args.model.primitive) {
        (Some(b), Some(p)) if b.model.primitive != p.into() => {
            return Err(CliError::ConflictingFlags(format!(
                "--primitive {} differs from {} in the replayed config",
                Primitive::from(p),
                b.model.primitive
            )))
        }
        (Some(b), _) => b.model.primitive,
        (None, Some(p)) => p.into(),
        (None, None) => return Err(CliError::Usage("--primitive is required without --config".into())),
    };
    check_conflicts(primitive, &args.model, args.span_l1)?;
    let size: SizeClass = match (&base, args.model.size) {
        (Some(b), Some(s)) if b.model.size != s.into() => {
            return Err(CliError::ConflictingFlags(format!(
                "--size {} differs from {} in the replayed config",
                SizeClass::from(s),
                b.model.size
            )))
        }
        (Some(b), _) => b.model.size,
        (None, s) => s.map(Into::into).unwrap_or(SizeClass::Small),
    };

    let mut model = base
        .as_ref()
        .map(|b| b.model.clone())
        .unwrap_or_else(|| ModelConfig::new(primitive, size));
    apply_model_args(&mut model, &args.model);
    model.validate()?;

    let mut tc = base
        .as_ref()
        .map(|b| b.train.clone())
        .unwrap_or_else(|| TrainConfig::for_primitive(primitive));
    set(&mut tc.epochs, args.epochs);
    set(&mut tc.batch_size, args.batch);
    set(&mut tc.lr0, args.lr);
    set(&mut tc.weight_decay, args.wd);
    set(&mut tc.span_l1, args.span_l1);
    set(&mut tc.seed, args.seed);
    if let Some(p) = args.precision {
        tc.precision = p.into();
    }
    if args.no_augment {
        tc.augment.enabled = false;
    }
    match args.warmup {
        Some(w) => tc.warmup_epochs = w,
        None if base.is_none() => tc = tc.resolved(),
        None => {}
    }
    tc.validate()?;

    let source = match (source_from_args(&args.data, tc.seed), &base) {
        (Some(s), _) => s,
        (None, Some(b)) => b.data.source.clone(),
        (None, None) => {
            return Err(CliError::Usage(
                "no dataset: pass --data DIR, set ADAPTIVE_ATTN_DATA, or use --synthetic".into(),
            ))
        }
    };
    let mut data = base.as_ref().map(|b| b.data.clone()).unwrap_or(DataConfig {
        source: source.clone(),
        fraction: 1.0,
        val_count: DEFAULT_VAL_COUNT,
        split_seed: tc.seed,
        norm: None,
    });
    data.source = source;
    data.norm = None;
    set(&mut data.fraction, args.fraction);
    set(&mut data.val_count, args.val_count);
    if base.is_none() || args.seed.is_some() {
        data.split_seed = tc.seed;
    }
    if !(data.fraction > 0.0 && data.fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(data.fraction).into());
    }

    let out = args
        .out
        .clone()
        .or_else(|| base.as_ref().map(|b| b.out.clone()))
        .unwrap_or_else(|| PathBuf::from(format!("runs/{primitive}-{size}-seed{}", tc.seed)));
    Ok(RunConfig {
        model,
        train: tc,
        data,
        out,
    })
}

struct Splits {
    train: DatasetSplit,
    val: DatasetSplit,
    test: DatasetSplit,
    norm: ChannelNorm,
}

fn build_splits(data: &DataConfig) -> CliResult<Splits> {
    let (raw_train, raw_test) = load_source(&data.source)?;
    if data.val_count >= raw_train.len() {
        return Err(Error::InvalidConfig(format!(
            "validation count {} leaves no training images out of {}",
            data.val_count,
            raw_train.len()
        ))
        .into());
    }
    let (train, val, norm) = make_splits(&raw_train, data.val_count, data.fraction, data.split_seed)?;
    let test = test_split(&raw_test, &norm);
    Ok(Splits { train, val, test, norm })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn extents_line(spans: &[Vec<f64>], model: &ModelConfig) -> String {
    let sizes = model.block_input_sizes();
    spans
        .iter()
        .zip(sizes)
        .map(|(z, s)| {
            adaptive_attention::mask::kernel_extent(z, model.ramp, s)
                .map(|e| e.to_string())
                .unwrap_or_else(|_| "?".into())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn print_epoch(row: &EpochMetrics, epochs: usize, model: &ModelConfig) {
    let mut line = format!(
        "epoch {}/{epochs}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}  lr {:.5}  {:.1}s",
        row.epoch, row.train_loss, row.train_acc, row.val_loss, row.val_acc, row.lr, row.seconds
    );
    if !row.spans.is_empty() {
        line.push_str(&format!("  extents {}", extents_line(&row.spans, model)));
    }
    eprintln!("{line}");
}

pub fn cmd_train(args: &TrainArgs, stop: &AtomicBool) -> CliResult<()> {
    let cfg = resolve_train(args)?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(&cfg, args.quiet, stop),
        Precision::F64 => train_as::<f64>(&cfg, args.quiet, stop),
    }
}

fn train_as<T: Float>(cfg: &RunConfig, quiet: bool, stop: &AtomicBool) -> CliResult<()> {
    let splits = build_splits(&cfg.data)?;
    let mut cfg = cfg.clone();
    cfg.data.norm = Some(splits.norm);
    let cfg = &cfg;
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join(CONFIG_FILE), cfg)?;

    let mut model = Model::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut out = RunOutput::new(&cfg.out);
    out.extra.insert(NORM_KEY.into(), serde_json::to_string(&splits.norm)?);
    out.extra.insert(RUN_KEY.into(), serde_json::to_string(cfg)?);
    if !quiet {
        eprintln!(
            "training {} {} on {} images ({} val, {} test) for {} epochs",
            cfg.model.primitive,
            cfg.model.size,
            splits.train.len(),
            splits.val.len(),
            splits.test.len(),
            cfg.train.epochs
        );
    }
    let epochs = cfg.train.epochs;
    let mut metrics = train(
        &mut model,
        &splits.train,
        &splits.val,
        &cfg.train,
        Some(&out),
        Some(stop),
        |row| {
            if !quiet {
                print_epoch(row, epochs, &cfg.model);
            }
        },
    )?;

    let chosen = if out.best_path().is_dir() {
        out.best_path()
    } else {
        out.last_path()
    };
    let (mut best, _) = load_checkpoint::<T>(&chosen)?;
    let (_, test_acc) = evaluate(&mut best, &splits.test, cfg.train.batch_size)?;
    metrics.test_acc = Some(test_acc);
    let summary = Summary {
        config: cfg.clone(),
        cost: cost_report(&model)?,
        metrics,
        evaluated: chosen.file_name().unwrap_or_default().to_string_lossy().into_owned(),
    };
    write_json(&cfg.out.join(SUMMARY_FILE), &summary)?;
    let status = if summary.metrics.interrupted {
        "interrupted"
    } else {
        "finished"
    };
    println!(
        "{status}: test accuracy {:.4} ({}), best val accuracy {}, outputs in {}",
        test_acc,
        summary.evaluated,
        summary
            .metrics
            .best_val_acc
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        cfg.out.display()
    );
    Ok(())
}

/// Training configuration stored with a checkpoint by `train`.
fn checkpoint_run(extra: &std::collections::BTreeMap<String, String>) -> CliResult<(RunConfig, ChannelNorm)> {
    let run = extra
        .get(RUN_KEY)
        .ok_or_else(|| Error::InvalidCheckpoint("checkpoint carries no run configuration".into()))?;
    let norm = extra
        .get(NORM_KEY)
        .ok_or_else(|| Error::InvalidCheckpoint("checkpoint carries no input normalization".into()))?;
    Ok((serde_json::from_str(run)?, serde_json::from_str(norm)?))
}

#[derive(Debug, Serialize)]
struct EvalResult {
    checkpoint: PathBuf,
    split: String,
    images: usize,
    loss: f64,
    accuracy: f64,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let meta = read_manifest(&args.checkpoint)?;
    if let Some(p) = args.primitive.map(Primitive::from) {
        if p != meta.config.primitive {
            return Err(Error::ConfigMismatch(format!(
                "--primitive {p} but the checkpoint was trained as {}",
                meta.config.primitive
            ))
            .into());
        }
    }
    if let Some(s) = args.size.map(SizeClass::from) {
        if s != meta.config.size {
            return Err(Error::ConfigMismatch(format!(
                "--size {s} but the checkpoint was trained as {}",
                meta.config.size
            ))
            .into());
        }
    }
    let (run, norm) = checkpoint_run(&meta.extra)?;
    if run.model != meta.config {
        return Err(Error::ConfigMismatch("manifest model differs from its run configuration".into()).into());
    }
    let mut data = run.data.clone();
    if let Some(src) = source_from_args(&args.data, run.train.seed) {
        data.source = src;
    }
    let splits = build_splits(&data)?;
    if splits.norm != norm && args.split != SplitArg::Test {
        return Err(Error::ConfigMismatch("dataset differs from the one the checkpoint was trained on".into()).into());
    }
    let (mut model, _) = load_checkpoint::<f32>(&args.checkpoint)?;
    let (name, split) = match args.split {
        SplitArg::Train => ("train", splits.train),
        SplitArg::Val => ("val", splits.val),
        SplitArg::Test => {
            let (_, raw_test) = load_source(&data.source)?;
            ("test", test_split(&raw_test, &norm))
        }
    };
    let (loss, accuracy) = evaluate(&mut model, &split, args.batch)?;
    let result = EvalResult {
        checkpoint: args.checkpoint.clone(),
        split: name.into(),
        images: split.len(),
        loss,
        accuracy,
    };
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_json(&out.join(CONFIG_FILE), &run)?;
        write_json(&out.join("eval.json"), &result)?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        println!("{name} accuracy {accuracy:.4} loss {loss:.4} on {} images", split.len());
    }
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let model = match &args.checkpoint {
        Some(ck) => load_checkpoint::<f32>(ck)?.0,
        None => {
            let p: Primitive = args
                .model
                .primitive
                .ok_or_else(|| CliError::Usage("--primitive or --checkpoint is required".into()))?
                .into();
            check_conflicts(p, &args.model, None)?;
            let mut cfg = ModelConfig::new(p, args.model.size.map(Into::into).unwrap_or(SizeClass::Small));
            apply_model_args(&mut cfg, &args.model);
            Model::<f32>::new(cfg, 0)?
        }
    };
    let report = cost_report(&model)?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_json(&out.join(CONFIG_FILE), &model.config)?;
        write_json(&out.join("cost.json"), &report)?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    let mut s = String::new();
    s.push_str(&format!(
        "{} {}, input {:?}\n{:<10} {:>10} {:>14} {:>14} {:>7}\n",
        report.primitive,
        report.size_class,
        report.input_shape,
        "layer",
        "params",
        "mac flops",
        "other flops",
        "extent"
    ));
    for l in &report.layers {
        s.push_str(&format!(
            "{:<10} {:>10} {:>14} {:>14} {:>7}\n",
            l.name,
            l.params,
            l.mac_flops,
            l.elementwise_flops,
            l.extent.map(|e| e.to_string()).unwrap_or_else(|| "-".into())
        ));
    }
    s.push_str(&format!(
        "total: {:.3}M params, {:.1}M FLOPS ({:.1}M multiply-accumulate)\n",
        report.params_m(),
        report.flops_m(),
        report.total_mac_flops as f64 / 1e6
    ));
    if model.config.primitive == Primitive::Adaptive {
        s.push_str(&format!(
            "adaptive extents at reporting time: {}\n",
            report
                .extents
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    print!("{s}");
    Ok(())
}

pub fn cmd_spans(args: &SpansArgs) -> CliResult<()> {
    let (model, meta) = load_checkpoint::<f32>(&args.checkpoint)?;
    let layers = model.report_learned_spans()?;
    if args.json {
        #[derive(Serialize)]
        struct Row<'a> {
            block: usize,
            spans: &'a [f64],
            max_size: usize,
            extent: usize,
        }
        let rows: Vec<Row> = layers
            .iter()
            .map(|l| Row {
                block: l.block,
                spans: &l.spans,
                max_size: l.max_size,
                extent: l.extent,
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "epoch {}", meta.epoch)?;
    writeln!(stdout, "{:<6} {:<40} {:>6}", "block", "spans", "extent")?;
    for l in &layers {
        let z = l.spans.iter().map(|z| format!("{z:.3}")).collect::<Vec<_>>().join(" ");
        writeln!(stdout, "{:<6} {:<40} {:>6}", l.block, z, l.extent)?;
    }
    let extents: Vec<String> = layers.iter().map(|l| l.extent.to_string()).collect();
    writeln!(stdout, "extents: {}", extents.join(" "))?;
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let mut results: Vec<(String, f64, f64, bool)> = Vec::new();
    let want = |t: GradTarget| args.target == t || args.target == GradTarget::All;
    if want(GradTarget::Ops) {
        for (name, r) in check_ops(args.seed)? {
            results.push((format!("ops/{name}"), r.max_rel_err(), r.tol, r.passed()));
        }
    }
    if want(GradTarget::Mask) {
        let r = check_mask(args.seed)?;
        results.push(("mask".into(), r.max_rel_err(), r.tol, r.passed()));
    }
    if want(GradTarget::Attention) {
        for (name, variant) in [
            ("attention/adaptive", AttentionVariant::Adaptive),
            ("attention/fixed", AttentionVariant::Fixed),
        ] {
            let r = check_attention(variant, args.seed)?;
            for p in &r.params {
                results.push((
                    format!("{name}/{}", p.name),
                    p.max_rel_err,
                    r.tol,
                    p.max_rel_err <= r.tol,
                ));
            }
        }
    }
    let mut failed = Vec::new();
    for (name, err, tol, ok) in &results {
        println!(
            "{} {name} max_rel_err={err:.3e} tol={tol:.0e}",
            if *ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(name.clone());
        }
    }
    if failed.is_empty() {
        println!("PASS all {} checks", results.len());
        Ok(())
    } else {
        Err(CliError::GradCheckFailed(failed.join(", ")))
    }
}

fn find_summaries(dir: &Path, found: &mut Vec<PathBuf>) -> CliResult<()> {
    if dir.join(SUMMARY_FILE).is_file() {
        found.push(dir.join(SUMMARY_FILE));
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() && !path.extension().is_some_and(|e| e == "ckpt") {
            find_summaries(&path, found)?;
        }
    }
    Ok(())
}

pub fn cmd_export(args: &ExportArgs) -> CliResult<()> {
    let mut files = Vec::new();
    for dir in &args.runs {
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir.clone()).into());
        }
        find_summaries(dir, &mut files)?;
    }
    files.sort();
    let mut runs = Vec::new();
    for f in &files {
        let s: Summary = serde_json::from_str(&fs::read_to_string(f)?)?;
        let Some(acc) = s.metrics.test_acc else {
            continue;
        };
        runs.push(ScalingRun {
            cost: s.cost,
            accuracy: acc,
            fraction: s.config.data.fraction,
        });
    }
    let t = export_scaling_tables(&runs, &args.out)?;
    println!("{} rows -> {}", t.cost_rows, t.cost_csv.display());
    println!("{} rows -> {}", t.fraction_rows, t.fraction_csv.display());
    Ok(())
}
