use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use serde_json::json;
use vltrack_core::dataset::{
    build_rl_samples, build_sft_samples, is_sequence_dir, load_corpus, load_sequence,
    parse_box_line, read_jsonl, write_jsonl, DatasetError, SequenceAnnotation,
};
use vltrack_core::exec;
use vltrack_core::grpo::{normalize_groups, read_groups, write_groups, GrpoError};
use vltrack_core::metrics::{
    aggregate, emit_report, evaluate_corpus, load_track_output, write_track_output, ReferenceRow,
    ReportFormat,
};
use vltrack_core::model_client::{
    ChatClient, EndpointConfig, JsonTransport, DEFAULT_SYSTEM_PROMPT,
};
use vltrack_core::response_format::parse;
use vltrack_core::reward::{score_batch, write_log, RewardInput, RewardWeights};
use vltrack_core::tracking::{
    run, sequence_frames, write_events, AnchorPolicy, ChatRefiner, LoopConfig, OracleTracker,
    PortError, RefinerPort, RemoteTracker, RunResult, ScriptedRefiner, Strategy, TemplatePolicy,
    TrackerPort, DEFAULT_UPDATE_INTERVAL,
};
use vltrack_core::{BoundingBox, Execution};

use crate::config::FileConfig;
use crate::manifest::{beside, RunManifest};
use crate::{
    AdvantageArgs, AnchorPolicyArg, BuildArgs, Cli, CliError, Command, EvalArgs, FormatArg,
    RefinerKind, RewardArgs, StrategyArg, TemplatePolicyArg, TrackArgs, TrackerKind,
};

pub const DEFAULT_STUB_REPLY: &str =
    "<think>The target still matches the description.</think><d>no</d><answer></answer>";

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let execution = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match &cli.command {
        Command::Eval(a) => eval(a, &file, execution),
        Command::Reward(a) => reward(a, &file, execution),
        Command::Advantage(a) => advantage(a, execution),
        Command::Track(a) => track(a, &file, execution),
        Command::BuildSft(a) => build(a, &file, false),
        Command::BuildRl(a) => build(a, &file, true),
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| internal(format!("{}: {e}", dir.display())))
}

fn create_file(path: &Path) -> Result<io::BufWriter<fs::File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::File::create(path)
        .map(io::BufWriter::new)
        .map_err(|e| internal(format!("{}: {e}", path.display())))
}

fn dataset_error(e: DatasetError) -> CliError {
    match e {
        DatasetError::Io { .. } => internal(e),
        _ => invalid(e),
    }
}

/// Loads a corpus root, or a single sequence directory as a one-element corpus.
/// Returns the annotations and the root their image paths hang off.
fn load_annotations(
    dir: &Path,
    execution: Execution,
) -> Result<(Vec<SequenceAnnotation>, PathBuf), CliError> {
    if !dir.is_dir() {
        return Err(invalid(format!("{}: not a directory", dir.display())));
    }
    if is_sequence_dir(dir) {
        let ann = load_sequence(dir).map_err(invalid)?;
        let root = dir.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((vec![ann], root))
    } else {
        let anns = load_corpus(dir, execution).map_err(invalid)?;
        if anns.is_empty() {
            return Err(invalid(format!("{}: no sequences found", dir.display())));
        }
        Ok((anns, dir.to_path_buf()))
    }
}

fn report_format(f: FormatArg) -> ReportFormat {
    match f {
        FormatArg::Tabular => ReportFormat::Tabular,
        FormatArg::Structured => ReportFormat::Structured,
        FormatArg::Plotdata => ReportFormat::Plotdata,
    }
}

fn eval(args: &EvalArgs, file: &FileConfig, execution: Execution) -> Result<(), CliError> {
    let formats = if args.format.is_empty() {
        file.eval
            .format
            .clone()
            .unwrap_or_else(|| vec![FormatArg::Tabular])
    } else {
        args.format.clone()
    };
    let references_path = args
        .references
        .clone()
        .or_else(|| file.eval.references.clone());
    let mut manifest = RunManifest::start(
        "eval",
        json!({ "format": formats, "references": references_path }),
        None,
    );

    let (anns, _) = load_annotations(&args.gt_dir, execution)?;
    let mut outputs = Vec::with_capacity(anns.len());
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    for a in &anns {
        match load_track_output(&args.pred_dir, &a.sequence_id).map_err(dataset_error)? {
            None => missing.push(a.sequence_id.clone()),
            Some(o) if o.boxes.len() != a.frame_count() => mismatched.push(format!(
                "{} (expected {} boxes, found {})",
                a.sequence_id,
                a.frame_count(),
                o.boxes.len()
            )),
            Some(o) => outputs.push(o),
        }
    }
    if !missing.is_empty() || !mismatched.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing outputs: {}", missing.join(", ")));
        }
        if !mismatched.is_empty() {
            parts.push(format!("frame count mismatch: {}", mismatched.join(", ")));
        }
        return Err(invalid(parts.join("; ")));
    }

    let records = evaluate_corpus(&anns, &outputs, execution).map_err(invalid)?;
    let mut report = aggregate(&records, &anns);
    if let Some(path) = &references_path {
        let text =
            fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        report.references = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(ReferenceRow::parse)
            .collect::<Result<_, _>>()
            .map_err(invalid)?;
        manifest.inputs.push(path.clone());
    }

    create_dir(&args.out)?;
    for f in &formats {
        let written = emit_report(&report, report_format(*f), &args.out).map_err(internal)?;
        manifest.outputs.extend(written);
    }
    println!(
        "{} sequences  PR {:.4}  NPR {:.4}  SR {:.4}  AO {:.4}  SR0.5 {:.4}  SR0.75 {:.4}",
        report.sequences,
        report.pr,
        report.npr,
        report.sr_auc,
        report.ao,
        report.sr_050,
        report.sr_075
    );
    manifest
        .inputs
        .extend([args.gt_dir.clone(), args.pred_dir.clone()]);
    manifest.finish(Some(&args.out.join("manifest.json")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseRecord {
    #[serde(default)]
    sample_id: Option<String>,
    response: String,
    #[serde(default)]
    gt: Option<BoundingBox>,
    #[serde(default)]
    pred_opt: Option<BoundingBox>,
    #[serde(default)]
    iou1: Option<f64>,
}

fn parse_box_flag(name: &str, value: &Option<String>) -> Result<Option<BoundingBox>, CliError> {
    value
        .as_deref()
        .map(|v| {
            let b = parse_box_line(v).map_err(|e| invalid(format!("--{name}: {e}")))?;
            b.validate()
                .map_err(|e| invalid(format!("--{name}: {e}")))?;
            Ok(b)
        })
        .transpose()
}

fn resolve_weights(args: &RewardArgs, file: &FileConfig) -> Result<RewardWeights, CliError> {
    let mut w = match args.weights.as_ref().or(file.reward.weights.as_ref()) {
        Some(p) => RewardWeights::load(p).map_err(invalid)?,
        None => RewardWeights::default(),
    };
    if let Some(t) = args.theta.or(file.reward.theta) {
        w.theta = t;
    }
    w.validate().map_err(invalid)?;
    Ok(w)
}

fn reward(args: &RewardArgs, file: &FileConfig, execution: Execution) -> Result<(), CliError> {
    let weights = resolve_weights(args, file)?;
    let mut manifest = RunManifest::start(
        "reward",
        serde_json::to_value(weights).map_err(internal)?,
        None,
    );
    let gt = parse_box_flag("gt", &args.gt)?;
    let pred = parse_box_flag("pred-opt", &args.pred_opt)?;
    let records: Vec<ResponseRecord> = read_jsonl(&args.responses).map_err(dataset_error)?;

    let mut inputs = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let id = r.sample_id.unwrap_or_else(|| (i + 1).to_string());
        let need = |what: &str| {
            invalid(format!(
                "sample {id}: no {what} in the record and no --{what} flag"
            ))
        };
        inputs.push(RewardInput {
            gt: r.gt.or(gt).ok_or_else(|| need("gt"))?,
            pred_refined: r.pred_opt.or(pred).ok_or_else(|| need("pred-opt"))?,
            iou_initial: r.iou1.or(args.iou1).ok_or_else(|| need("iou1"))?,
            response: parse(&r.response),
            sample_id: id,
        });
    }

    let results = score_batch(&inputs, &weights, execution);
    let mut rows = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for (input, r) in inputs.iter().zip(results) {
        match r {
            Ok(b) => rows.push((input.sample_id.as_str(), b)),
            Err(e) => errors.push(format!("sample {}: {e}", input.sample_id)),
        }
    }
    if !errors.is_empty() {
        return Err(invalid(errors.join("; ")));
    }

    manifest.inputs.push(args.responses.clone());
    match &args.out {
        Some(path) => {
            write_log(create_file(path)?, rows.iter().map(|(id, b)| (*id, b))).map_err(internal)?;
            manifest.outputs.push(path.clone());
            manifest.finish(Some(&beside(path)))
        }
        None => {
            write_log(io::stdout().lock(), rows.iter().map(|(id, b)| (*id, b)))
                .map_err(internal)?;
            manifest.finish(None)
        }
    }
}

fn grpo_error(e: GrpoError) -> CliError {
    match e {
        GrpoError::Io(_) => internal(e),
        _ => invalid(e),
    }
}

fn advantage(args: &AdvantageArgs, execution: Execution) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("advantage", json!({}), None);
    let f = fs::File::open(&args.groups_file)
        .map_err(|e| invalid(format!("{}: {e}", args.groups_file.display())))?;
    let mut groups = read_groups(BufReader::new(f)).map_err(grpo_error)?;
    normalize_groups(&mut groups, execution).map_err(grpo_error)?;
    manifest.inputs.push(args.groups_file.clone());
    match &args.out {
        Some(path) => {
            write_groups(create_file(path)?, &groups).map_err(grpo_error)?;
            manifest.outputs.push(path.clone());
            manifest.finish(Some(&beside(path)))
        }
        None => {
            write_groups(io::stdout().lock(), &groups).map_err(grpo_error)?;
            manifest.finish(None)
        }
    }
}

/// Effective `track` settings after merging flags, config file and defaults.
#[derive(Debug, Clone, serde::Serialize)]
struct TrackSettings {
    tracker: TrackerKind,
    refiner: RefinerKind,
    seed: u64,
    noise_px: f64,
    #[serde(rename = "loop")]
    loop_config: LoopConfig,
    tracker_url: Option<String>,
    refiner_endpoint: Option<EndpointConfig>,
    stub_reply: String,
    system_prompt: Option<PathBuf>,
}

fn strategy(s: StrategyArg) -> Strategy {
    match s {
        StrategyArg::Static => Strategy::Static,
        StrategyArg::Dynamic1 => Strategy::Dynamic1,
        StrategyArg::Dynamic2 => Strategy::Dynamic2,
        StrategyArg::DynamicStatic => Strategy::DynamicStatic,
    }
}

fn track_settings(args: &TrackArgs, file: &FileConfig) -> Result<TrackSettings, CliError> {
    let t = &file.track;
    let loop_config = LoopConfig {
        update_interval: args.u.or(t.u).unwrap_or(DEFAULT_UPDATE_INTERVAL),
        strategy: strategy(
            args.strategy
                .or(t.strategy)
                .unwrap_or(StrategyArg::Dynamic1),
        ),
        template_policy: match args
            .template_policy
            .or(t.template_policy)
            .unwrap_or(TemplatePolicyArg::InitialPlusRecent)
        {
            TemplatePolicyArg::InitialOnly => TemplatePolicy::InitialOnly,
            TemplatePolicyArg::InitialPlusRecent => TemplatePolicy::InitialPlusRecent,
        },
        anchor_policy: match args
            .anchor_policy
            .or(t.anchor_policy)
            .unwrap_or(AnchorPolicyArg::OnAccept)
        {
            AnchorPolicyArg::OnAccept => AnchorPolicy::OnAccept,
            AnchorPolicyArg::OnInvoke => AnchorPolicy::OnInvoke,
        },
        gate_threshold: args.gate_threshold.or(t.gate_threshold).unwrap_or(1.0),
        reward_weights: None,
    };
    loop_config.validate().map_err(invalid)?;

    let noise_px = args.noise_px.or(t.noise_px).unwrap_or(0.0);
    if !noise_px.is_finite() || noise_px < 0.0 {
        return Err(invalid(format!(
            "--noise-px must be finite and non-negative, got {noise_px}"
        )));
    }
    let tracker = args.tracker.or(t.tracker).unwrap_or(TrackerKind::Oracle);
    let refiner = args.refiner.or(t.refiner).unwrap_or(RefinerKind::Stub);
    let timeout_ms = args.timeout_ms.or(t.timeout_ms);

    let tracker_url = args.tracker_url.clone().or_else(|| t.tracker_url.clone());
    if tracker == TrackerKind::Remote && tracker_url.is_none() {
        return Err(invalid("--tracker remote needs --tracker-url"));
    }

    let refiner_endpoint = (refiner == RefinerKind::Remote).then(|| {
        let mut cfg = EndpointConfig::default();
        if let Some(u) = &t.refiner_url {
            cfg.url = u.clone();
        }
        cfg = cfg.with_env_overrides();
        if let Some(u) = &args.refiner_url {
            cfg.url = u.clone();
        }
        if let Some(m) = args.model.clone().or_else(|| t.model.clone()) {
            cfg.model = m;
        }
        if let Some(ms) = timeout_ms {
            cfg.timeout_ms = ms;
        }
        if let Some(n) = t.max_in_flight {
            cfg.max_in_flight = n;
        }
        cfg
    });

    Ok(TrackSettings {
        tracker,
        refiner,
        seed: args.seed.or(file.seed).unwrap_or(0),
        noise_px,
        loop_config,
        tracker_url,
        refiner_endpoint,
        stub_reply: args
            .stub_reply
            .clone()
            .or_else(|| t.stub_reply.clone())
            .unwrap_or_else(|| DEFAULT_STUB_REPLY.to_owned()),
        system_prompt: args
            .system_prompt
            .clone()
            .or_else(|| t.system_prompt.clone()),
    })
}

/// Per-sequence seed that does not depend on which other sequences are in the run.
fn sequence_seed(seed: u64, sequence_id: &str) -> u64 {
    // FNV-1a
    let h = sequence_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    });
    seed ^ h
}

fn track(args: &TrackArgs, file: &FileConfig, execution: Execution) -> Result<(), CliError> {
    let settings = track_settings(args, file)?;
    let mut manifest = RunManifest::start(
        "track",
        serde_json::to_value(&settings).map_err(internal)?,
        Some(settings.seed),
    );
    let (anns, root) = load_annotations(&args.sequence_dir, execution)?;
    for a in &anns {
        a.validate().map_err(invalid)?;
    }

    let system_prompt = match &settings.system_prompt {
        Some(p) => fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => DEFAULT_SYSTEM_PROMPT.to_owned(),
    };
    let chat = settings
        .refiner_endpoint
        .clone()
        .map(|c| Arc::new(ChatClient::new(c)));
    let tracker_transport = (settings.tracker == TrackerKind::Remote).then(|| {
        let mut cfg = EndpointConfig::default();
        if let Some(ms) = args.timeout_ms.or(file.track.timeout_ms) {
            cfg.timeout_ms = ms;
        }
        Arc::new(JsonTransport::new(cfg))
    });

    let results: Vec<Result<RunResult, CliError>> = exec::map(&anns, execution, |a| {
        let frames = sequence_frames(&root, a);
        let tracker: Box<dyn TrackerPort> = match &tracker_transport {
            Some(tr) => Box::new(RemoteTracker::shared(
                settings.tracker_url.as_deref().unwrap_or_default(),
                &a.sequence_id,
                tr.clone(),
            )),
            None => Box::new(OracleTracker::new(
                a.gt_boxes.clone(),
                settings.noise_px,
                sequence_seed(settings.seed, &a.sequence_id),
            )),
        };
        let refiner: Box<dyn RefinerPort> = match &chat {
            Some(c) => {
                Box::new(ChatRefiner::shared(c.clone()).with_system_prompt(system_prompt.clone()))
            }
            None => Box::new(ScriptedRefiner::always(&settings.stub_reply)),
        };
        run(
            &a.sequence_id,
            &frames,
            &a.gt_boxes[0],
            &a.language,
            tracker,
            refiner,
            &settings.loop_config,
        )
        .map_err(invalid)
    });

    create_dir(&args.out)?;
    let events_dir = args.out.join("events");
    create_dir(&events_dir)?;
    let mut unavailable = Vec::new();
    let mut failed = Vec::new();
    for result in results {
        let r = result?;
        let id = r.output.sequence_id.clone();
        manifest
            .outputs
            .push(write_track_output(&args.out, &r.output).map_err(internal)?);
        let events_path = events_dir.join(format!("{id}.jsonl"));
        write_events(create_file(&events_path)?, &r.events).map_err(internal)?;
        manifest.outputs.push(events_path);
        let accepted = r.events.iter().filter(|e| e.accepted).count();
        println!(
            "{id}: {} frames, {} refiner calls, {accepted} updates",
            r.output.boxes.len(),
            r.refiner_calls
        );
        match &r.aborted {
            Some(PortError::Unavailable(m)) => unavailable.push(format!("{id}: tracker {m}")),
            Some(PortError::Failed(m)) => failed.push(format!("{id}: tracker failed: {m}")),
            None if r.refiner_calls > 0 && r.refiner_unavailable == r.refiner_calls => unavailable
                .push(format!(
                    "{id}: refiner unreachable on all {} calls",
                    r.refiner_calls
                )),
            None => {}
        }
    }
    manifest.inputs.push(args.sequence_dir.clone());
    manifest.finish(Some(&args.out.join("manifest.json")))?;

    if !unavailable.is_empty() {
        return Err(CliError::Unavailable(unavailable.join("; ")));
    }
    if !failed.is_empty() {
        return Err(internal(failed.join("; ")));
    }
    Ok(())
}

fn build(args: &BuildArgs, file: &FileConfig, rl: bool) -> Result<(), CliError> {
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let image_root = args
        .image_root
        .clone()
        .or_else(|| file.build.image_root.clone())
        .unwrap_or_else(|| args.corpus.clone());
    let command = if rl { "build-rl" } else { "build-sft" };
    let mut manifest = RunManifest::start(
        command,
        json!({ "count": args.count, "image_root": image_root }),
        Some(seed),
    );
    let anns = load_corpus(&args.corpus, Execution::Parallel).map_err(dataset_error)?;
    let mut out = create_file(&args.out)?;
    if rl {
        let records =
            build_rl_samples(&anns, args.count, seed, &image_root).map_err(dataset_error)?;
        write_jsonl(&mut out, &records).map_err(internal)?;
    } else {
        let records =
            build_sft_samples(&anns, args.count, seed, &image_root).map_err(dataset_error)?;
        write_jsonl(&mut out, &records).map_err(internal)?;
    }
    out.flush().map_err(internal)?;
    manifest.inputs.push(args.corpus.clone());
    manifest.outputs.push(args.out.clone());
    manifest.finish(Some(&beside(&args.out)))
}
