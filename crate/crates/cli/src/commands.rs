use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use eigenkit::datagen::{gen_mixture_dataset, gen_trace_corpus, stratified_split, MixtureDataset, Split};
use eigenkit::error::{Error, Result};
use eigenkit::head::{
    eval_early_detection, eval_window_ablation, evaluate_auroc, extract_corpus, head_train, partition, CellKind,
    HeadCheckpoint,
};
use eigenkit::monitor::{
    read_descriptor_csv, read_traces_jsonl, write_descriptor_csv, write_traces_jsonl, ActivationTrace,
    DescriptorSeries, MonitorConfig,
};
use eigenkit::rmtkd::{
    compress_pipeline, mlp_train, quantile_sweep, write_stage_csv, write_sweep_csv, MlpModel,
};
use eigenkit::rng::Rng64;

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GenKind {
    Traces,
    Mixture,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path, what: &str) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Config(format!("cannot open {what} {}: {e}", path.display())))
}

fn prepare(cfg: &RunConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.write_resolved(command)?;
    eprintln!("config: {}", path.display());
    Ok(())
}

fn load_traces(path: &Path) -> Result<Vec<ActivationTrace>> {
    read_traces_jsonl(open(path, "traces")?).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Descriptor series from either raw traces or an extracted CSV. CSV input
/// carries no split tags; a stratified split is drawn from the run seed.
fn load_series(
    traces: Option<&Path>,
    features: Option<&Path>,
    monitor: &MonitorConfig,
    seed: u64,
) -> Result<Vec<DescriptorSeries>> {
    match (traces, features) {
        (Some(t), None) => extract_corpus(&load_traces(t)?, monitor),
        (None, Some(f)) => {
            let mut series = read_descriptor_csv(open(f, "features")?, monitor.window_len)?;
            let labels = series
                .iter()
                .map(|s| {
                    s.label
                        .risk()
                        .map(usize::from)
                        .ok_or_else(|| Error::Config(format!("trace {} is unlabeled", s.trace_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let splits = stratified_split(&labels, &mut Rng64::new(seed));
            for (s, sp) in series.iter_mut().zip(splits) {
                s.split = Some(sp);
            }
            Ok(series)
        }
        (Some(_), Some(_)) => Err(Error::Config("give either --traces or --features, not both".into())),
        (None, None) => Err(Error::Config("one of --traces or --features is required".into())),
    }
}

fn load_dataset(path: Option<&Path>, cfg: &RunConfig) -> Result<MixtureDataset> {
    match path {
        Some(p) => MixtureDataset::read_csv(open(p, "dataset")?),
        None => gen_mixture_dataset(&cfg.mixture),
    }
}

pub fn gen(cfg: &RunConfig, kind: GenKind) -> Result<()> {
    prepare(cfg, "gen")?;
    match kind {
        GenKind::Traces => {
            let t = &cfg.traces;
            let traces = gen_trace_corpus(t.n_per_class, &t.template, t.family, cfg.seed)?;
            let path = cfg.out.join("traces.jsonl");
            write_traces_jsonl(create(&path)?, &traces)?;
            let mut by_label: BTreeMap<&str, usize> = BTreeMap::new();
            for tr in &traces {
                *by_label.entry(tr.label.as_str()).or_default() += 1;
            }
            println!("wrote {} traces to {}", traces.len(), path.display());
            for (label, n) in by_label {
                println!("  {label}: {n}");
            }
        }
        GenKind::Mixture => {
            let data = gen_mixture_dataset(&cfg.mixture)?;
            let path = cfg.out.join("mixture.csv");
            data.write_csv(create(&path)?)?;
            println!(
                "wrote {} samples ({} classes, width {}) to {}",
                data.labels.len(),
                data.classes,
                data.inputs.cols,
                path.display()
            );
            for split in [Split::Train, Split::Val, Split::Test] {
                println!("  {}: {}", split.as_str(), data.indices(split).len());
            }
        }
    }
    Ok(())
}

pub fn extract(cfg: &RunConfig, traces: &Path) -> Result<()> {
    prepare(cfg, "extract")?;
    let series = extract_corpus(&load_traces(traces)?, &cfg.monitor)?;
    let path = cfg.out.join("descriptors.csv");
    write_descriptor_csv(create(&path)?, &series)?;
    let rows: usize = series.iter().map(DescriptorSeries::len).sum();
    println!(
        "wrote {rows} descriptor rows for {} traces (window {}) to {}",
        series.len(),
        cfg.monitor.window_len,
        path.display()
    );
    Ok(())
}

fn split_auroc(
    params: &eigenkit::head::RecurrentHeadParams,
    series: &[DescriptorSeries],
) -> Result<Option<f64>> {
    let pos = series.iter().filter(|s| s.label.risk() == Some(true)).count();
    if pos == 0 || pos == series.len() {
        return Ok(None);
    }
    evaluate_auroc(params, series).map(Some)
}

pub fn train_head(cfg: &RunConfig, traces: Option<&Path>, features: Option<&Path>) -> Result<()> {
    prepare(cfg, "train-head")?;
    let series = load_series(traces, features, &cfg.monitor, cfg.seed)?;
    let (_, _, test) = partition(&series)?;
    let mut table = String::from("cell,params,best_epoch,val_auroc,test_auroc\n");
    for &cell in &cfg.head.cells {
        let (params, history) = head_train(&series, &cfg.head.train, cell, cfg.head.hidden_dim)?;
        let test_auroc = split_auroc(&params, &test)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("val_auroc".to_string(), history.best_val_auroc);
        if let Some(a) = test_auroc {
            metrics.insert("test_auroc".to_string(), a);
        }
        let n_params = params.num_params();
        let best_epoch = history.best_epoch;
        let val = history.best_val_auroc;
        let ck = HeadCheckpoint::new(params, cfg.monitor.window_len, cfg.head.train.clone(), history, metrics);
        let path = cfg.out.join(format!("head_{}.json", cell.as_str()));
        ck.save(&path)?;
        let test_field = test_auroc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(table, "{},{n_params},{best_epoch},{val},{test_field}", cell.as_str()).expect("string write");
        println!(
            "{}: {n_params} params, best epoch {best_epoch}, val AUROC {val:.4}, test AUROC {} -> {}",
            cell.as_str(),
            test_auroc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
            path.display()
        );
    }
    std::fs::write(cfg.out.join("head_comparison.csv"), table)?;
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    traces: Option<&Path>,
    features: Option<&Path>,
    ablation: bool,
) -> Result<()> {
    prepare(cfg, "eval")?;
    if !checkpoint.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", checkpoint.display())));
    }
    let ck = HeadCheckpoint::load(checkpoint)?;
    let monitor = MonitorConfig {
        window_len: ck.window_len,
        ..cfg.monitor
    };
    let series = load_series(traces, features, &monitor, cfg.seed)?;
    let (train, val, test) = partition(&series)?;
    let cell = ck.params.cell.as_str();

    let mut metrics = String::from("cell,split,traces,auroc\n");
    for (name, part) in [("train", &train), ("val", &val), ("test", &test), ("all", &series)] {
        if let Some(a) = split_auroc(&ck.params, part)? {
            writeln!(metrics, "{cell},{name},{},{a}", part.len()).expect("string write");
            println!("{cell} {name}: AUROC {a:.4} over {} traces", part.len());
        }
    }
    std::fs::write(cfg.out.join("metrics.csv"), metrics)?;

    let target = if test.is_empty() { &series } else { &test };
    let curve = eval_early_detection(&ck.params, target, &cfg.head.budgets)?;
    let mut ed = String::from("budget,auroc\n");
    for p in &curve {
        writeln!(ed, "{},{}", p.budget, p.auroc).expect("string write");
    }
    std::fs::write(cfg.out.join("early_detection.csv"), ed)?;
    println!("early detection: {} budgets", curve.len());

    if ablation {
        let rows = eval_window_ablation(
            ck.params.cell,
            ck.params.hidden_dim,
            &cfg.head.ablation_windows,
            &cfg.traces,
            cfg.seed,
            &cfg.monitor,
            &cfg.head.train,
        )?;
        let mut out = String::from("window_len,auroc,latency_us_per_token\n");
        for r in &rows {
            writeln!(out, "{},{},{}", r.window_len, r.auroc, r.latency_us_per_token).expect("string write");
            println!(
                "window {}: AUROC {:.4}, {:.1} us/token",
                r.window_len, r.auroc, r.latency_us_per_token
            );
        }
        std::fs::write(cfg.out.join("window_ablation.csv"), out)?;
    }
    Ok(())
}

/// Loads `--pretrained` or trains a fresh MLP (saved as `mlp_trained.json`).
fn base_model(cfg: &RunConfig, data: &MixtureDataset, pretrained: Option<&Path>) -> Result<MlpModel> {
    if let Some(p) = pretrained {
        if !p.exists() {
            return Err(Error::Config(format!("pretrained checkpoint {} not found", p.display())));
        }
        return MlpModel::load(p);
    }
    let init = MlpModel::new(&cfg.mlp.sizes, cfg.seed)?;
    let (model, history) = mlp_train(&init, data, &cfg.mlp.train)?;
    let path = cfg.out.join("mlp_trained.json");
    model.save(&path)?;
    let last = history.last().map_or(f64::NAN, |e| e.val_accuracy);
    println!(
        "trained MLP {:?} for {} epochs, val accuracy {last:.4} -> {}",
        model.widths(),
        history.len(),
        path.display()
    );
    Ok(model)
}

pub fn compress(cfg: &RunConfig, dataset: Option<&Path>, pretrained: Option<&Path>) -> Result<()> {
    prepare(cfg, "compress")?;
    let data = load_dataset(dataset, cfg)?;
    let model = base_model(cfg, &data, pretrained)?;
    let (compressed, reports, summary) = compress_pipeline(&model, &data, &cfg.pipeline)?;
    compressed.save(&cfg.out.join("mlp_compressed.json"))?;
    write_stage_csv(create(&cfg.out.join("stages.csv"))?, &reports)?;
    std::fs::write(cfg.out.join("stages.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    std::fs::write(cfg.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    for r in &reports {
        println!(
            "layer {}: width {} -> {} ({} outliers above {:.4})",
            r.layer_index, r.width_before, r.width_after, r.outliers, r.fitted.lambda_plus
        );
    }
    println!(
        "params {} -> {} (reduction {:.1}%), test accuracy {:.4} -> {:.4}",
        summary.params_before,
        summary.params_after,
        100.0 * summary.reduction,
        summary.acc_before,
        summary.acc_after
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig, dataset: Option<&Path>, pretrained: Option<&Path>) -> Result<()> {
    prepare(cfg, "sweep")?;
    let data = load_dataset(dataset, cfg)?;
    let model = base_model(cfg, &data, pretrained)?;
    let rows = quantile_sweep(&model, &data, &cfg.sweep.quantiles, &cfg.pipeline)?;
    write_sweep_csv(create(&cfg.out.join("sweep.csv"))?, &rows)?;
    for r in &rows {
        println!(
            "quantile {}: reduction {:.1}%, accuracy {:.4}, widths {:?}",
            r.quantile,
            100.0 * r.reduction,
            r.accuracy,
            r.widths_after
        );
    }
    Ok(())
}

const REPORT_ARTIFACTS: [&str; 8] = [
    "head_comparison.csv",
    "metrics.csv",
    "early_detection.csv",
    "window_ablation.csv",
    "summary.json",
    "stages.csv",
    "sweep.csv",
    "descriptors.csv",
];

/// Collects the artifacts present in the output directory into `report.md`.
pub fn report(cfg: &RunConfig) -> Result<()> {
    if !cfg.out.is_dir() {
        return Err(Error::Config(format!("output directory {} does not exist", cfg.out.display())));
    }
    let mut md = String::from("# eigenkit report\n");
    let mut found = 0;
    for name in REPORT_ARTIFACTS {
        let path: PathBuf = cfg.out.join(name);
        let Ok(text) = std::fs::read_to_string(&path) else {
            continue;
        };
        found += 1;
        // The descriptor export can be large; only its size is reported.
        if name == "descriptors.csv" {
            writeln!(md, "\n## {name}\n\n{} rows\n", text.lines().count().saturating_sub(1)).expect("string write");
            continue;
        }
        let fence = if name.ends_with(".json") { "json" } else { "csv" };
        writeln!(md, "\n## {name}\n\n```{fence}\n{}```", text).expect("string write");
    }
    if found == 0 {
        return Err(Error::Config(format!("no known artifacts in {}", cfg.out.display())));
    }
    let path = cfg.out.join("report.md");
    std::fs::write(&path, &md)?;
    print!("{md}");
    eprintln!("report: {} ({found} artifacts)", path.display());
    Ok(())
}

pub fn parse_cell(s: &str) -> std::result::Result<CellKind, String> {
    CellKind::parse(s).map_err(|e| e.to_string())
}
