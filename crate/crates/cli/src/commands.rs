//! Stage implementations. Every stage reads and writes under the work
//! directory and prints a one-line JSON summary on stdout.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use granary::corpus::{corpus_stats, ingest, load_corpus, LearningNode};
use granary::dataset::{
    build_domain_examples, mix_datasets, pack_sequences, read_packed, tokenize_and_mask, tokenize_cpt, write_packed,
    ChatExample, CptRecord, TokenizedExample,
};
use granary::distiller::{distill_corpus, HttpBackend, LlmBackend, MockBackend, MockBehavior, QtsaEntry};
use granary::evalharness::{grade, load_quiz, BackendResponder, ModelResponder, Responder};
use granary::jsonl::{read_jsonl, write_jsonl};
use granary::tinylm::gradcheck::{check_coordinates, sample_coordinates};
use granary::tinylm::{freeze_reference, load_checkpoint, ByteTokenizer, ModelError, Parameters, TokenId, BOS, EOS};
use granary::trainer::{objective, objective_with_grad, save_run, train, TrainMode, CHECKPOINT_FILE};

use crate::cli::{Cli, Command, DistillArgs, EvalArgs, GradcheckArgs, TrainArgs};
use crate::config::PipelineConfig;
use crate::manifest::{hash_json, WorkManifest};
use crate::CliError;

pub const NODES_FILE: &str = "nodes.jsonl";
pub const QTSA_FILE: &str = "qtsa.jsonl";
pub const JOURNAL_FILE: &str = "qtsa.journal.jsonl";
pub const SFT_FILE: &str = "sft_dataset.jsonl";
pub const CPT_FILE: &str = "cpt_dataset.jsonl";
pub const SFT_PACKED: &str = "sft_packed.bin";
pub const CPT_PACKED: &str = "cpt_packed.bin";
pub const EVAL_REPORT: &str = "eval_report.json";

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

struct Ctx {
    cfg: PipelineConfig,
    dry_run: bool,
}

impl Ctx {
    fn work(&self, name: &str) -> PathBuf {
        self.cfg.paths.workdir.join(name)
    }

    fn manifest(&self) -> Result<WorkManifest, CliError> {
        WorkManifest::load(&self.cfg.paths.workdir)
    }

    fn ensure_workdir(&self) -> Result<(), CliError> {
        let dir = &self.cfg.paths.workdir;
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
    }

    /// Warn about recorded upstream stages whose inputs, outputs or config
    /// no longer match.
    fn warn_stale(&self, upstream: &[(&str, String)]) -> Result<Vec<String>, CliError> {
        let manifest = self.manifest()?;
        let mut notes = Vec::new();
        for (stage, hash) in upstream {
            for why in manifest.staleness(stage, hash).unwrap_or_default() {
                log::warn!("stage {stage} is stale: {why}");
                notes.push(format!("{stage}: {why}"));
            }
        }
        Ok(notes)
    }

    fn finish(&self, stage: &str, hash: String, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<(), CliError> {
        let mut manifest = self.manifest()?;
        manifest.record(stage, hash, inputs, outputs);
        manifest.save(&self.cfg.paths.workdir)
    }

    fn plan(&self, command: &str, hash: &str, inputs: &[PathBuf], outputs: &[PathBuf], stale: Vec<String>) -> Value {
        let files = |ps: &[PathBuf]| {
            ps.iter()
                .map(|p| json!({"path": p.display().to_string(), "exists": p.exists()}))
                .collect::<Vec<_>>()
        };
        json!({
            "command": command,
            "dry_run": true,
            "config_hash": hash,
            "inputs": files(inputs),
            "outputs": files(outputs),
            "stale_upstream": stale,
        })
    }
}

fn emit(value: &Value) {
    println!("{value}");
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = PipelineConfig::load(cli.global.config.as_deref())?;
    cfg.apply(&cli.global.overrides());
    cfg.validate()?;
    let ctx = Ctx {
        cfg,
        dry_run: cli.global.dry_run,
    };
    match cli.command {
        Command::Ingest => cmd_ingest(&ctx),
        Command::Distill(args) => cmd_distill(&ctx, &args),
        Command::Build => cmd_build(&ctx),
        Command::Train(args) => cmd_train(&ctx, &args),
        Command::Eval(args) => cmd_eval(&ctx, &args),
        Command::Gradcheck(args) => cmd_gradcheck(&ctx, &args),
        Command::Status => cmd_status(&ctx),
    }
}

fn ingest_hash(cfg: &PipelineConfig) -> String {
    hash_json(&json!({
        "corpus_dir": cfg.paths.corpus_dir,
        "manifest": cfg.paths.manifest_path(),
        "decompose": cfg.decompose,
    }))
}

fn distill_hash(cfg: &PipelineConfig) -> String {
    hash_json(&json!({
        "n_samples": cfg.distill.n_samples,
        "temperature": cfg.distill.temperature,
        "max_tokens": cfg.distill.max_tokens,
        "backend": cfg.backend,
    }))
}

fn build_hash(cfg: &PipelineConfig) -> String {
    hash_json(&cfg.dataset)
}

fn cmd_ingest(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let manifest_path = cfg.paths.manifest_path();
    let out = ctx.work(NODES_FILE);
    let hash = ingest_hash(cfg);
    if ctx.dry_run {
        let plan = ctx.plan("ingest", &hash, &[cfg.paths.corpus_dir.clone(), manifest_path], &[out], vec![]);
        emit(&plan);
        return Ok(());
    }
    let docs = load_corpus(&cfg.paths.corpus_dir, &manifest_path).map_err(|e| CliError::Validation(e.to_string()))?;
    let nodes = ingest(&docs, &cfg.decompose);
    ctx.ensure_workdir()?;
    write_jsonl(&out, &nodes).map_err(runtime)?;
    let mut inputs = vec![manifest_path];
    inputs.extend(docs.iter().map(|d| PathBuf::from(&d.source_path)));
    ctx.finish("ingest", hash, &inputs, std::slice::from_ref(&out))?;
    let stats = corpus_stats(&nodes);
    log::info!("{} documents -> {} nodes", docs.len(), stats.node_count);
    emit(&json!({"command": "ingest", "documents": docs.len(), "stats": stats, "output": out}));
    Ok(())
}

fn backend(cfg: &PipelineConfig) -> Result<Box<dyn LlmBackend>, CliError> {
    if cfg.backend.mock {
        let behavior = MockBehavior {
            missing_answer_every: cfg.backend.mock_missing_answer_every,
            ..Default::default()
        };
        Ok(Box::new(MockBackend::with_behavior(cfg.backend.mock_seed, behavior)))
    } else {
        Ok(Box::new(HttpBackend::new(cfg.backend.http.clone()).map_err(runtime)?))
    }
}

fn cmd_distill(ctx: &Ctx, args: &DistillArgs) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let nodes_path = ctx.work(NODES_FILE);
    let out = ctx.work(QTSA_FILE);
    let mut dcfg = cfg.distill.clone();
    if dcfg.journal_path.is_none() {
        dcfg.journal_path = Some(ctx.work(JOURNAL_FILE));
    }
    if args.max_new_tasks.is_some() {
        dcfg.max_new_tasks = args.max_new_tasks;
    }
    let hash = distill_hash(cfg);
    let stale = ctx.warn_stale(&[("ingest", ingest_hash(cfg))])?;
    if ctx.dry_run {
        let outputs = [out, dcfg.journal_path.clone().expect("set above")];
        emit(&ctx.plan("distill", &hash, std::slice::from_ref(&nodes_path), &outputs, stale));
        return Ok(());
    }
    let nodes: Vec<LearningNode> = read_jsonl(&nodes_path).map_err(runtime)?;
    let backend = backend(cfg)?;
    let outcome = distill_corpus(&nodes, &dcfg, backend.as_ref()).map_err(runtime)?;
    let stats = &outcome.stats;
    log::info!(
        "{} tasks: {} kept, {} rejected ({} resumed, {} new)",
        stats.attempted,
        stats.kept,
        stats.rejected,
        stats.resumed,
        stats.newly_processed
    );
    if stats.complete {
        write_jsonl(&out, &outcome.entries).map_err(runtime)?;
        ctx.finish("distill", hash, std::slice::from_ref(&nodes_path), std::slice::from_ref(&out))?;
    } else {
        log::info!("stopped early; rerun to resume from the journal");
    }
    emit(&json!({
        "command": "distill",
        "stats": stats,
        "output": if stats.complete { Some(&out) } else { None },
    }));
    Ok(())
}

/// Cut a token stream into pieces of at most `max_len` that overlap by one
/// token, so every position after the first is still a target once.
fn chunk_example(ex: TokenizedExample, max_len: usize) -> Vec<TokenizedExample> {
    if ex.len() <= max_len {
        return vec![ex];
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + max_len).min(ex.len());
        out.push(TokenizedExample {
            input_ids: ex.input_ids[start..end].to_vec(),
            loss_mask: ex.loss_mask[start..end].to_vec(),
        });
        if end == ex.len() {
            return out;
        }
        start = end - 1;
    }
}

fn cmd_build(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let ds = &cfg.dataset;
    let nodes_path = ctx.work(NODES_FILE);
    let qtsa_path = ctx.work(QTSA_FILE);
    let mut inputs = vec![nodes_path.clone(), qtsa_path.clone()];
    if let Some(g) = &ds.general_path {
        inputs.push(g.clone());
    }
    let outputs: Vec<PathBuf> = [SFT_FILE, CPT_FILE, SFT_PACKED, CPT_PACKED]
        .iter()
        .map(|f| ctx.work(f))
        .chain([SFT_PACKED, CPT_PACKED].iter().map(|f| ctx.work(f).with_extension("json")))
        .collect();
    let hash = build_hash(cfg);
    let stale = ctx.warn_stale(&[("ingest", ingest_hash(cfg)), ("distill", distill_hash(cfg))])?;
    if ctx.dry_run {
        emit(&ctx.plan("build", &hash, &inputs, &outputs, stale));
        return Ok(());
    }

    let entries: Vec<QtsaEntry> = read_jsonl(&qtsa_path).map_err(runtime)?;
    let domain = build_domain_examples(&entries, &ds.system_prompt, ds.max_len).map_err(runtime)?;
    let general: Vec<ChatExample> = match &ds.general_path {
        Some(p) => read_jsonl(p).map_err(runtime)?,
        None => Vec::new(),
    };
    let mixed = mix_datasets(&domain, &general, ds.mix_ratio, ds.seed).map_err(runtime)?;
    write_jsonl(&ctx.work(SFT_FILE), &mixed).map_err(runtime)?;

    let tok = ByteTokenizer;
    let sft_tok: Vec<TokenizedExample> = mixed.iter().map(|e| tokenize_and_mask(e, &tok)).collect();
    let sft_packs = pack_sequences(&sft_tok, ds.max_len).map_err(runtime)?;
    write_packed(&ctx.work(SFT_PACKED), &sft_packs, ds.max_len).map_err(runtime)?;

    let nodes: Vec<LearningNode> = read_jsonl(&nodes_path).map_err(runtime)?;
    let cpt: Vec<CptRecord> = nodes.iter().map(CptRecord::from).collect();
    write_jsonl(&ctx.work(CPT_FILE), &cpt).map_err(runtime)?;
    let cpt_tok: Vec<TokenizedExample> = cpt
        .iter()
        .flat_map(|r| chunk_example(tokenize_cpt(r, &tok), ds.max_len))
        .collect();
    let cpt_packs = pack_sequences(&cpt_tok, ds.max_len).map_err(runtime)?;
    write_packed(&ctx.work(CPT_PACKED), &cpt_packs, ds.max_len).map_err(runtime)?;

    ctx.finish("build", hash, &inputs, &outputs)?;
    emit(&json!({
        "command": "build",
        "sft_examples": mixed.len(),
        "domain_examples": domain.len(),
        "general_examples": mixed.len() - domain.len(),
        "sft_packs": sft_packs.len(),
        "cpt_records": cpt.len(),
        "cpt_packs": cpt_packs.len(),
    }));
    Ok(())
}

fn load_segments(bin: &Path) -> Result<Vec<TokenizedExample>, CliError> {
    let (_, packs) = read_packed(bin).map_err(runtime)?;
    Ok(packs
        .iter()
        .flat_map(|p| (0..p.segments.len()).map(move |i| p.segment(i)))
        .collect())
}

fn cmd_train(ctx: &Ctx, args: &TrainArgs) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let mut tcfg = cfg.train.clone();
    if let Some(s) = args.steps {
        tcfg.total_steps = s;
    }
    if let Some(lr) = args.lr {
        tcfg.lr_max = lr;
    }
    tcfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let mode_name = match tcfg.mode {
        TrainMode::Cpt => "cpt",
        TrainMode::Sft => "sft",
        TrainMode::NscSft => "nsc_sft",
    };
    let data_path = ctx.work(if tcfg.mode == TrainMode::Cpt { CPT_PACKED } else { SFT_PACKED });
    let run_dir = args
        .run_dir
        .clone()
        .unwrap_or_else(|| cfg.paths.workdir.join("runs").join(mode_name));
    let mut inputs = vec![data_path.clone()];
    if let Some(p) = &args.init {
        inputs.push(p.clone());
    }
    let outputs: Vec<PathBuf> = [CHECKPOINT_FILE, granary::trainer::REPORT_FILE, granary::trainer::SUMMARY_FILE]
        .iter()
        .map(|f| run_dir.join(f))
        .collect();
    let hash = hash_json(&json!({"model": cfg.model, "train": tcfg, "init": args.init}));
    let stage = format!("train:{}", run_dir.display());
    let stale = ctx.warn_stale(&[("build", build_hash(cfg))])?;
    if ctx.dry_run {
        emit(&ctx.plan("train", &hash, &inputs, &outputs, stale));
        return Ok(());
    }

    let data = load_segments(&data_path)?;
    let init = match &args.init {
        Some(p) => load_checkpoint(p).map_err(runtime)?,
        None => Parameters::init(&cfg.model).map_err(|e| CliError::Validation(e.to_string()))?,
    };
    let reference = (tcfg.mode == TrainMode::NscSft).then(|| freeze_reference(&init));
    log::info!(
        "training {mode_name}: {} examples, {} params, {} steps",
        data.len(),
        init.len(),
        tcfg.total_steps
    );
    let mut outcome = train(&tcfg, &data, init, reference.as_ref()).map_err(runtime)?;
    save_run(&run_dir, &mut outcome).map_err(runtime)?;
    ctx.ensure_workdir()?;
    ctx.finish(&stage, hash, &inputs, &outputs)?;
    emit(&json!({
        "command": "train",
        "mode": mode_name,
        "run_dir": run_dir,
        "summary": outcome.report.summary,
    }));
    Ok(())
}

fn cmd_eval(ctx: &Ctx, args: &EvalArgs) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let quiz = args.quiz.clone().unwrap_or_else(|| cfg.eval.quiz.clone());
    let out = args.out.clone().unwrap_or_else(|| ctx.work(EVAL_REPORT));
    let mut inputs = vec![quiz.clone()];
    if let Some(c) = &args.checkpoint {
        inputs.push(c.clone());
    }
    let hash = hash_json(&json!({
        "eval": cfg.eval,
        "checkpoint": args.checkpoint,
        "backend": if args.checkpoint.is_none() { Some(&cfg.backend) } else { None },
    }));
    if ctx.dry_run {
        emit(&ctx.plan("eval", &hash, &inputs, std::slice::from_ref(&out), vec![]));
        return Ok(());
    }
    let items = load_quiz(&quiz).map_err(|e| CliError::Validation(e.to_string()))?;
    let report = match &args.checkpoint {
        Some(path) => {
            let params = load_checkpoint(path).map_err(runtime)?;
            let responder = ModelResponder {
                params: &params,
                max_new_tokens: cfg.eval.max_new_tokens,
            };
            grade(&items, &responder as &dyn Responder, cfg.eval.parallelism)
        }
        None => {
            let backend = backend(cfg)?;
            let responder = BackendResponder {
                backend: backend.as_ref(),
                retry: cfg.distill.retry,
            };
            grade(&items, &responder as &dyn Responder, cfg.eval.parallelism)
        }
    }
    .map_err(runtime)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
    std::fs::write(&out, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    if out.starts_with(&cfg.paths.workdir) {
        ctx.finish("eval", hash, &inputs, std::slice::from_ref(&out))?;
    }
    emit(&json!({
        "command": "eval",
        "accuracy": report.accuracy,
        "counts": report.counts,
        "output": out,
    }));
    Ok(())
}

/// A random byte sequence with a random loss mask that has at least one
/// target.
fn probe_example(len: usize, seed: u64) -> TokenizedExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input_ids: Vec<TokenId> = vec![BOS];
    input_ids.extend((1..len - 1).map(|_| rng.random_range(0..256) as TokenId));
    input_ids.push(EOS);
    let mut loss_mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.5)).collect();
    loss_mask[len - 1] = true;
    TokenizedExample { input_ids, loss_mask }
}

fn cmd_gradcheck(ctx: &Ctx, args: &GradcheckArgs) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let gc = &cfg.gradcheck;
    let coords_n = args.coords.unwrap_or(gc.coords);
    if coords_n == 0 {
        return Err(CliError::Validation("--coords must be >= 1".into()));
    }
    let lambda = cfg.train.lambda;
    if ctx.dry_run {
        emit(&json!({
            "command": "gradcheck",
            "dry_run": true,
            "model": cfg.model,
            "coords": coords_n,
            "seq_len": gc.seq_len,
            "lambda": lambda,
            "tolerance": gc.tolerance,
        }));
        return Ok(());
    }
    let params = Parameters::init(&cfg.model).map_err(|e| CliError::Validation(e.to_string()))?;
    let reference = Parameters::init(&granary::tinylm::ModelConfig {
        seed: cfg.model.seed.wrapping_add(1),
        ..cfg.model
    })
    .map_err(runtime)?;
    let examples = [probe_example(gc.seq_len, cfg.train.seed)];
    let anchor = (lambda > 0.0).then_some((&reference, lambda));
    let (loss, grad) = objective_with_grad(&params, &examples, anchor).map_err(runtime)?;
    let coords = sample_coordinates(params.len(), coords_n, cfg.train.seed);
    let report = check_coordinates(&params, &grad, &coords, gc.step, gc.tolerance, |p| {
        objective(p, &examples, anchor)
            .map(|b| b.total)
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))
    })
    .map_err(runtime)?;
    emit(&json!({
        "command": "gradcheck",
        "params": params.len(),
        "loss": loss,
        "lambda": lambda,
        "report": report,
    }));
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {:.3e} > {:.1e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn cmd_status(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let manifest = ctx.manifest()?;
    let current = [
        ("ingest", ingest_hash(cfg)),
        ("distill", distill_hash(cfg)),
        ("build", build_hash(cfg)),
    ];
    let mut stages = serde_json::Map::new();
    for (stage, rec) in &manifest.stages {
        let hash = current
            .iter()
            .find(|(s, _)| s == stage)
            .map(|(_, h)| h.clone())
            .unwrap_or_else(|| rec.config_hash.clone());
        let reasons = manifest.staleness(stage, &hash).unwrap_or_default();
        stages.insert(
            stage.clone(),
            json!({"completed_at": rec.completed_at, "stale": !reasons.is_empty(), "reasons": reasons}),
        );
    }
    emit(&json!({"command": "status", "workdir": cfg.paths.workdir, "stages": stages}));
    Ok(())
}
