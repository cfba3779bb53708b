use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use xstream_core::checkpoint::{load_checkpoint, save_checkpoint};
use xstream_core::data::{generate, import_csv, load_dataset, save_dataset, write_dataset, Dataset, Split};
use xstream_core::eval::factor_separability;
use xstream_core::gradcheck::{self, CheckMode, GradCheckConfig};
use xstream_core::loss::{AssignmentViews, LossMode, PredictionViews};
use xstream_core::model::FeatureSource;
use xstream_core::trainer::{
    evaluate_clusters, evaluate_probe, evaluate_retrieval, run_full_pipeline, write_metric_log, MetricRecord, StreamSelection,
    TargetMode, TrainConfig, TrainState,
};

use crate::config::RunConfig;
use crate::error::{invalid_config, CliError};
use crate::{CheckModeArg, EvalArgs, ExportArgs, Features, GenDataArgs, GradCheckArgs, Preset, Report, Stage, Streams, TrainArgs, TrainMode};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_owned(), source }
}

fn with_path(path: &Path, e: xstream_core::Error) -> CliError {
    match e {
        xstream_core::Error::Io(source) => CliError::Io { path: path.to_owned(), source },
        other => CliError::Core(other),
    }
}

/// VCCD files, or CSV fixtures when the extension is `.csv`.
fn load_data(path: &Path) -> Result<Dataset, CliError> {
    let loaded = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) { import_csv(path) } else { load_dataset(path) };
    loaded.map_err(|e| with_path(path, e))
}

fn load_state(path: &Path, cfg: &TrainConfig, data: &Dataset) -> Result<TrainState, CliError> {
    let tensors = load_checkpoint(path).map_err(|e| with_path(path, e))?;
    let state = TrainState::from_tensors(&tensors, cfg)?;
    let dims = [state.streams[0].encoder.input_dim(), state.streams[1].encoder.input_dim()];
    if dims != data.input_dims() {
        return Err(CliError::Core(xstream_core::Error::InvalidArgument(format!(
            "checkpoint expects input dims {dims:?}, dataset has {:?}",
            data.input_dims()
        ))));
    }
    Ok(state)
}

fn print_json(v: &Value) {
    println!("{v}");
}

pub fn parse_factor_split(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("factor split must look like 4x2, got {s:?}"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut run = RunConfig::resolve(a.config.as_deref())?;
    match a.preset {
        Preset::Default => {}
    }
    let spec = &mut run.data;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(m) = a.classes {
        spec.num_classes = m;
    }
    if let Some(split) = &a.factor_split {
        spec.factor_split = parse_factor_split(split)?;
    }
    if let Some(n) = a.samples_per_class {
        spec.samples_per_class = n;
    }
    if let Some(n) = a.test_per_class {
        spec.test_per_class = n;
    }
    spec.validate().map_err(invalid_config)?;
    let ds = generate(spec)?;
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes)?;
    std::fs::write(&a.output, &bytes).map_err(io_err(&a.output))?;
    let sep = factor_separability(&ds, spec.factor_split, run.train.eval.probe.reg)?;
    let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    print_json(&json!({
        "output": a.output,
        "classes": spec.num_classes,
        "factor_split": [spec.factor_split.0, spec.factor_split.1],
        "train": ds.train.len(),
        "test": ds.test.len(),
        "sha256": digest,
        "separability": sep.iter().map(|s| json!({"own": s.own, "other": s.other, "gap": s.gap()})).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn apply_ablation(cfg: &mut TrainConfig, spec: &str) -> Result<(), CliError> {
    let (key, value) = spec.split_once('=').ok_or_else(|| CliError::Usage(format!("ablation must be key=value, got {spec:?}")))?;
    match (key, value) {
        ("prediction-views", "all") => cfg.loss.prediction_views = PredictionViews::AllOthers,
        ("prediction-views", "other-stream") => cfg.loss.prediction_views = PredictionViews::OtherStreamOnly,
        ("assignment-views", "both") => cfg.loss.assignment_views = AssignmentViews::BothStreams,
        ("assignment-views", "other-stream") => cfg.loss.assignment_views = AssignmentViews::OtherStreamOnly,
        ("targets", "sinkhorn") => cfg.targets = TargetMode::Sinkhorn,
        ("targets", "softmax") => cfg.targets = TargetMode::Softmax,
        _ => return Err(CliError::Usage(format!("unknown ablation {spec:?}"))),
    }
    Ok(())
}

fn write_log(path: &Path, log: &[MetricRecord]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write_metric_log(log, &mut w).map_err(|e| with_path(path, e))?;
    w.flush().map_err(io_err(path))
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut run = RunConfig::resolve(a.config.as_deref())?;
    let cfg = &mut run.train;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.threads {
        cfg.threads = n;
    }
    if let Some(k) = a.prototypes {
        cfg.model.prototypes = k;
    }
    if let Some(n) = a.queue_len {
        cfg.queue_len = n;
    }
    if a.fresh_prototypes {
        cfg.fresh_prototypes = true;
    }
    if a.mode == TrainMode::Infonce {
        cfg.loss.mode = LossMode::InfonceBaseline;
    }
    for spec in &a.ablation {
        apply_ablation(cfg, spec)?;
    }
    cfg.validate().map_err(invalid_config)?;
    match (a.stage, &a.init) {
        (Stage::Cross, None) => return Err(CliError::Usage("--stage cross needs --init <stage-1 checkpoint>".into())),
        (Stage::Stage1 | Stage::Full, Some(_)) => return Err(CliError::Usage("--init only applies to --stage cross".into())),
        _ => {}
    }

    let data = load_data(&a.data)?;
    let mut log = Vec::new();
    let state = match a.stage {
        Stage::Stage1 => {
            let mut state = TrainState::init(data.input_dims(), cfg)?;
            state.run_stage1(&data, cfg, &mut log)?;
            state
        }
        Stage::Cross => {
            let init = a.init.as_deref().expect("checked above");
            let mut state = load_state(init, cfg, &data)?;
            state.run_cycles(&data, cfg, &mut log)?;
            state
        }
        Stage::Full => {
            let (state, records) = run_full_pipeline(cfg, &data)?;
            log = records;
            state
        }
    };
    save_checkpoint(&state.to_tensors()?, &a.output).map_err(|e| with_path(&a.output, e))?;
    if let Some(path) = &a.log {
        write_log(path, &log)?;
    }
    for record in log.iter().filter(|r| r.eval.is_some()) {
        print_json(&serde_json::to_value(record).expect("metric records serialise"));
    }
    Ok(())
}

fn selection(s: Streams) -> StreamSelection {
    match s {
        Streams::Rgb => StreamSelection::First,
        Streams::Flow => StreamSelection::Second,
        Streams::Both => StreamSelection::Both,
    }
}

fn feature_source(f: Features) -> FeatureSource {
    match f {
        Features::PreHead => FeatureSource::PreHead,
        Features::Head => FeatureSource::Head,
    }
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut run = RunConfig::resolve(a.config.as_deref())?;
    let cfg = &mut run.train;
    if let Some(k) = a.k_eval {
        cfg.eval.k_eval = Some(k);
    }
    if let Some(f) = a.features {
        cfg.eval.features = feature_source(f);
    }
    cfg.validate().map_err(invalid_config)?;
    let data = load_data(&a.data)?;
    let state = load_state(&a.checkpoint, cfg, &data)?;
    let sel = selection(a.streams);

    let mut out = Map::new();
    if matches!(a.report, Report::Retrieval | Report::All) {
        let rep = evaluate_retrieval(&state, &data, sel, cfg.eval.features, &cfg.eval.ks)?;
        let recall: Map<String, Value> = rep.recall_at.iter().map(|(k, v)| (format!("R@{k}"), json!(v))).collect();
        out.insert("retrieval".into(), Value::Object(recall));
    }
    if matches!(a.report, Report::Probe | Report::All) {
        out.insert("probe_top1".into(), json!(evaluate_probe(&state, &data, sel, cfg)?));
    }
    if matches!(a.report, Report::Cluster | Report::All) {
        let rep = evaluate_clusters(&state, &data, sel, cfg)?;
        out.insert("cluster".into(), serde_json::to_value(rep).expect("cluster report serialises"));
    }
    print_json(&Value::Object(out));
    Ok(())
}

pub fn grad_check(a: GradCheckArgs) -> Result<(), CliError> {
    let modes = if a.mode.is_empty() {
        CheckMode::ALL.to_vec()
    } else {
        a.mode
            .iter()
            .map(|m| match m {
                CheckModeArg::Infonce => CheckMode::Infonce,
                CheckModeArg::SingleStream => CheckMode::SingleStream,
                CheckModeArg::CrossStream => CheckMode::CrossStream,
            })
            .collect()
    };
    let cfg = GradCheckConfig { modes, seeds: (0..a.seeds).collect(), tolerance: a.tolerance, sign_flip: a.sign_flip, ..Default::default() };
    let report = gradcheck::run(&cfg).map_err(invalid_config)?;
    for r in report.results.iter().filter(|r| !r.passed) {
        print_json(&json!({"failed": r}));
    }
    print_json(&json!({"checks": report.results.len(), "max_rel_error": report.max_rel_error, "passed": report.passed}));
    if report.passed {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed(report.max_rel_error))
    }
}

pub fn export_embeddings(a: ExportArgs) -> Result<(), CliError> {
    let mut run = RunConfig::resolve(a.config.as_deref())?;
    if let Some(f) = a.features {
        run.train.eval.features = feature_source(f);
    }
    let data = load_data(&a.data)?;
    let state = load_state(&a.checkpoint, &run.train, &data)?;
    let source = run.train.eval.features;
    let embed = |split: &Split| -> Result<Split, CliError> {
        Ok(Split {
            views: [state.streams[0].encoder.embed(&split.views[0], source)?, state.streams[1].encoder.embed(&split.views[1], source)?],
            alt_views: None,
            labels: split.labels.clone(),
        })
    };
    let out = Dataset { train: embed(&data.train)?, test: embed(&data.test)? };
    save_dataset(&out, &a.output).map_err(|e| with_path(&a.output, e))?;
    print_json(&json!({"output": a.output, "dims": out.input_dims(), "train": out.train.len(), "test": out.test.len()}));
    Ok(())
}
