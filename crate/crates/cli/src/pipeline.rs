//! The end-to-end run: base → cpt → sft → merge → sweep → eval → quantize →
//! footprint. Every artifact except `pipeline.log` is a pure function of the
//! configuration and its input files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use adaptkit::adapt::{chunk_documents, eval_loss, lora_init, merge_lora, train, Example, LoraAdapter, StepMetrics};
use adaptkit::ckpt::{read_checkpoint, write_checkpoint, Checkpoint, WriteOptions};
use adaptkit::evalmc::{evaluate, load_benchmark, EvalOptions, EvalReport, McqItem};
use adaptkit::merge::{linear_merge, merge_sweep, sweep_csv, MergeSpec};
use adaptkit::model::{init_params_with, ModelConfig, RunOptions, TinyLM};
use adaptkit::quant::{
    collect_hessians, footprint_of, footprint_plan, quantize_checkpoint, Footprint, QuantSpec, Scheme,
};
use adaptkit::tok::{load_corpus, Tokenizer};
use serde::Serialize;

use crate::config::{sub_seed, PipelineConfig, StageConfig};
use crate::error::{CliError, Result, StageContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Base,
    Cpt,
    Sft,
    Merge,
    Sweep,
    Eval,
    Quantize,
    Footprint,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Base,
        Stage::Cpt,
        Stage::Sft,
        Stage::Merge,
        Stage::Sweep,
        Stage::Eval,
        Stage::Quantize,
        Stage::Footprint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Cpt => "cpt",
            Stage::Sft => "sft",
            Stage::Merge => "merge",
            Stage::Sweep => "sweep",
            Stage::Eval => "eval",
            Stage::Quantize => "quantize",
            Stage::Footprint => "footprint",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

/// Stages that load their inputs from the output directory when skipped
/// upstream.
pub const TRAIN_STAGES: [Stage; 3] = [Stage::Base, Stage::Cpt, Stage::Sft];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub examples: usize,
    pub held_out: usize,
    pub trainable_params: usize,
    /// Train loss of the first optimizer step.
    pub loss_first: f64,
    /// Mean train loss over the last tenth of the steps.
    pub loss_last: f64,
    /// `1 - loss_last / loss_first`.
    pub loss_drop: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_subject: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FootprintRow {
    pub variant: String,
    pub precision: String,
    pub bytes: u64,
    pub bf16_bytes: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub stages_run: Vec<String>,
    pub stages_skipped: Vec<String>,
    pub model: BTreeMap<String, String>,
    pub param_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cpt: Option<TrainSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sft: Option<TrainSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge_weight_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_sweep_ratio: Option<f64>,
    pub eval: BTreeMap<String, EvalSummary>,
    pub footprint: Vec<FootprintRow>,
    /// SHA-256 of every checkpoint written or loaded, by artifact name.
    pub digests: BTreeMap<String, String>,
}

/// Timestamped progress log. Timestamps go to `pipeline.log` only.
struct Logger {
    file: BufWriter<File>,
    start: Instant,
    quiet: bool,
}

impl Logger {
    fn create(path: &Path, quiet: bool) -> Result<Logger> {
        let file = File::create(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(Logger {
            file: BufWriter::new(file),
            start: Instant::now(),
            quiet,
        })
    }

    fn line(&mut self, msg: &str) {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let _ = writeln!(
            self.file,
            "[{}.{:03} +{:.3}s] {msg}",
            now.as_secs(),
            now.subsec_millis(),
            self.start.elapsed().as_secs_f64()
        );
        let _ = self.file.flush();
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

/// Run-time switches that are not part of the configuration file.
#[derive(Debug, Clone, Default)]
pub struct RunFlags {
    pub skip: BTreeSet<Stage>,
    pub quiet: bool,
}

pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.tck"))
    }

    pub fn metrics(&self, stage: &str) -> PathBuf {
        self.dir.join("metrics").join(format!("{stage}.jsonl"))
    }

    pub fn eval_report(&self, name: &str) -> PathBuf {
        self.dir.join("eval").join(format!("{name}.json"))
    }

    pub fn eval_table(&self, name: &str) -> PathBuf {
        self.dir.join("eval").join(format!("{name}.tsv"))
    }

    pub fn sweep(&self) -> PathBuf {
        self.dir.join("sweep.csv")
    }

    pub fn footprint(&self) -> PathBuf {
        self.dir.join("footprint.tsv")
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("pipeline.log")
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_checkpoint(ckpt, path, WriteOptions::default())?;
    Ok(())
}

fn load(path: &Path, why: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::data(format!(
            "{} not found ({why}); run the producing stage first",
            path.display()
        )));
    }
    Ok(read_checkpoint(path)?)
}

fn model_of(cfg: &ModelConfig, params: Checkpoint) -> Result<TinyLM> {
    Ok(TinyLM::from_checkpoint(cfg.clone(), params)?)
}

/// `(prompt, response)` rows of a JSONL file.
pub fn load_sft(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let field = |k: &str| {
            v.get(k)
                .and_then(|x| x.as_str())
                .map(String::from)
                .ok_or_else(|| CliError::data(format!("{}:{}: missing string field {k:?}", path.display(), i + 1)))
        };
        out.push((field("prompt")?, field("response")?));
    }
    Ok(out)
}

pub fn sft_examples(tok: &Tokenizer, rows: &[(String, String)], max_seq: usize) -> Vec<Example> {
    rows.iter()
        .filter_map(|(p, r)| Example::prompt_response(&tok.encode(p), &tok.encode(r)))
        .filter(|ex| ex.input.len() <= max_seq)
        .collect()
}

pub fn cpt_examples(tok: &Tokenizer, docs: &[String], seq_len: usize) -> Vec<Example> {
    let ids: Vec<Vec<u32>> = docs.iter().map(|d| tok.encode(d)).collect();
    chunk_documents(&ids, seq_len)
}

pub fn metrics_jsonl(log: &[StepMetrics]) -> Result<String> {
    let mut s = String::new();
    for m in log {
        s.push_str(&serde_json::to_string(m)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn summarize_training(log: &[StepMetrics]) -> (f64, f64, f64) {
    let first = log.first().map(|m| m.train_loss).unwrap_or(f64::NAN);
    let window = (log.len() / 10).max(1);
    let tail = &log[log.len().saturating_sub(window)..];
    let last = tail.iter().map(|m| m.train_loss).sum::<f64>() / tail.len() as f64;
    (first, last, 1.0 - last / first)
}

/// Result of one LoRA training stage.
pub struct StageOutput {
    /// Base weights with the trained adapter folded in.
    pub merged: Checkpoint,
    pub adapter: LoraAdapter,
    pub steps: Vec<StepMetrics>,
    pub summary: TrainSummary,
}

/// Train one LoRA stage on top of `model`. The last `sc.held_out` examples
/// are held out. Progress lines go to `log`.
pub fn train_stage(
    name: &str,
    model: &TinyLM,
    examples: Vec<Example>,
    sc: &StageConfig,
    log: &mut dyn FnMut(&str),
) -> Result<StageOutput> {
    if examples.len() <= sc.held_out {
        return Err(CliError::data(format!(
            "{} example(s) available but held_out = {}",
            examples.len(),
            sc.held_out
        )));
    }
    let split = examples.len() - sc.held_out;
    let (train_set, held) = examples.split_at(split);
    let mut adapter = lora_init(model, &sc.lora, sub_seed(sc.train.seed, "lora-init"))?;
    let held_out_before = if held.is_empty() {
        None
    } else {
        Some(eval_loss(model, &adapter, held)?)
    };
    log(&format!(
        "{name}: {} training example(s), {} held out, {} trainable parameter(s)",
        train_set.len(),
        held.len(),
        adapter.param_count()
    ));
    let every = (sc.train.total_steps / 10).max(1);
    let steps = train(model, &mut adapter, train_set, held, &sc.train, |m| {
        if m.step % every == 0 || m.step + 1 == sc.train.total_steps {
            let eval = m.eval_loss.map(|l| format!(" held-out {l:.4}")).unwrap_or_default();
            log(&format!(
                "{name}: step {:>4} lr {:.2e} loss {:.4}{eval}",
                m.step, m.lr, m.train_loss
            ));
        }
    })?;
    let held_out_after = if held.is_empty() {
        None
    } else {
        Some(eval_loss(model, &adapter, held)?)
    };
    let merged = merge_lora(model.params(), &adapter)?;
    let (loss_first, loss_last, loss_drop) = summarize_training(&steps);
    log(&format!(
        "{name}: train loss {loss_first:.4} -> {loss_last:.4} ({:.1}% drop)",
        100.0 * loss_drop
    ));
    let summary = TrainSummary {
        steps: steps.len(),
        examples: train_set.len(),
        held_out: held.len(),
        trainable_params: adapter.param_count(),
        loss_first,
        loss_last,
        loss_drop,
        held_out_before,
        held_out_after,
    };
    Ok(StageOutput {
        merged,
        adapter,
        steps,
        summary,
    })
}

/// Pipeline wrapper: trains, then writes the metrics and adapter artifacts.
fn run_stage(
    name: &str,
    model: &TinyLM,
    examples: Vec<Example>,
    sc: &StageConfig,
    out: &Artifacts,
    log: &mut Logger,
) -> Result<(Checkpoint, TrainSummary)> {
    let o = train_stage(name, model, examples, sc, &mut |l| log.line(l))?;
    write_file(&out.metrics(name), metrics_jsonl(&o.steps)?)?;
    save(&o.adapter.to_checkpoint(), &out.checkpoint(&format!("{name}_adapter")))?;
    Ok((o.merged, o.summary))
}

fn eval_summary(r: &EvalReport) -> EvalSummary {
    EvalSummary {
        accuracy: r.accuracy,
        correct: r.correct,
        total: r.total,
        per_subject: r.per_subject.iter().map(|(k, v)| (k.clone(), v.accuracy)).collect(),
    }
}

struct EvalCtx<'a> {
    bench: &'a [McqItem],
    tok: &'a Tokenizer,
    cfg: &'a PipelineConfig,
    out: &'a Artifacts,
}

impl EvalCtx<'_> {
    fn run(&self, name: &str, model: &TinyLM, run: RunOptions, log: &mut Logger) -> Result<EvalSummary> {
        let opts = EvalOptions {
            strict: self.cfg.strict,
            run,
        };
        let report = evaluate(model, self.bench, &self.cfg.template, self.tok, &opts)?;
        write_file(
            &self.out.eval_report(name),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        write_file(&self.out.eval_table(name), report.summary_table(name))?;
        log.line(&format!(
            "eval {name}: accuracy {:.4} ({}/{})",
            report.accuracy, report.correct, report.total
        ));
        Ok(eval_summary(&report))
    }
}

fn footprint_row(variant: &str, f: &Footprint) -> FootprintRow {
    FootprintRow {
        variant: variant.to_string(),
        precision: f.precision.label().to_string(),
        bytes: f.bytes,
        bf16_bytes: f.bf16_bytes,
        ratio: f.ratio(),
    }
}

pub fn footprint_table(rows: &[FootprintRow]) -> String {
    let mut s = String::from("variant\tprecision\tbytes\tbf16_bytes\tratio\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.3}\n",
            r.variant, r.precision, r.bytes, r.bf16_bytes, r.ratio
        ));
    }
    s
}

/// Run every stage not in `flags.skip`, in order. Skipped stages read their
/// outputs from the output directory when a later stage needs them.
pub fn run_pipeline(cfg: &PipelineConfig, flags: &RunFlags) -> Result<Summary> {
    fs::create_dir_all(&cfg.output)
        .map_err(|e| CliError::data(format!("{}: {e}", cfg.output.display())))
        .stage("setup")?;
    let out = Artifacts {
        dir: cfg.output.clone(),
    };
    let mut log = Logger::create(&out.log(), flags.quiet).stage("setup")?;
    let runs = |s: Stage| !flags.skip.contains(&s);
    log.line(&format!("pipeline: seed {} -> {}", cfg.seed, out.dir.display()));

    let tok = Tokenizer::from_files(&cfg.data.vocab, &cfg.data.merges).stage("setup")?;
    let mcfg = cfg.model.resolve(tok.vocab_size()).stage("setup")?;

    let mut summary = Summary {
        seed: cfg.seed,
        stages_run: Vec::new(),
        stages_skipped: Vec::new(),
        model: mcfg.to_meta(),
        param_count: mcfg.param_count(),
        cpt: None,
        sft: None,
        merge_weight_a: None,
        best_sweep_ratio: None,
        eval: BTreeMap::new(),
        footprint: Vec::new(),
        digests: BTreeMap::new(),
    };
    for s in Stage::ALL {
        let list = if runs(s) {
            &mut summary.stages_run
        } else {
            &mut summary.stages_skipped
        };
        list.push(s.name().to_string());
    }

    let record = |summary: &mut Summary, name: &str, ck: &Checkpoint| {
        summary.digests.insert(name.to_string(), ck.digest());
    };

    // base
    let base = if runs(Stage::Base) {
        let st = Stage::Base.name();
        let params = match &cfg.base {
            Some(p) => {
                let ck = load(p, "pipeline.base").stage(st)?;
                let stored = ModelConfig::from_meta(&ck.meta);
                if stored.as_ref().is_some_and(|c| c != &mcfg) {
                    return Err(CliError::config(format!(
                        "{} was built for a different model configuration",
                        p.display()
                    ))
                    .in_stage(st));
                }
                ck
            }
            None => init_params_with(&mcfg, sub_seed(cfg.seed, "base"), cfg.model.dtype)
                .stage(st)?
                .into_params(),
        };
        save(&params, &out.checkpoint("base")).stage(st)?;
        log.line(&format!("base: {} parameters", params.param_count()));
        params
    } else {
        load(&out.checkpoint("base"), "base stage skipped").stage("base")?
    };
    record(&mut summary, "base", &base);
    let base_model = model_of(&mcfg, base.clone()).stage("base")?;

    // cpt
    let cpt = if runs(Stage::Cpt) {
        let st = Stage::Cpt.name();
        let docs = load_corpus(&cfg.data.cpt).stage(st)?;
        let examples = cpt_examples(&tok, &docs, cfg.cpt.train.seq_len.min(mcfg.max_seq));
        let (merged, ts) = run_stage(st, &base_model, examples, &cfg.cpt, &out, &mut log).stage(st)?;
        save(&merged, &out.checkpoint(st)).stage(st)?;
        summary.cpt = Some(ts);
        merged
    } else {
        load(&out.checkpoint("cpt"), "cpt stage skipped").stage("cpt")?
    };
    record(&mut summary, "cpt", &cpt);

    // sft
    let sft = if runs(Stage::Sft) {
        let st = Stage::Sft.name();
        let rows = load_sft(&cfg.data.sft).stage(st)?;
        let examples = sft_examples(&tok, &rows, mcfg.max_seq);
        let cpt_model = model_of(&mcfg, cpt.clone()).stage(st)?;
        let (merged, ts) = run_stage(st, &cpt_model, examples, &cfg.sft, &out, &mut log).stage(st)?;
        save(&merged, &out.checkpoint(st)).stage(st)?;
        summary.sft = Some(ts);
        merged
    } else {
        load(&out.checkpoint("sft"), "sft stage skipped").stage("sft")?
    };
    record(&mut summary, "sft", &sft);

    // merge
    let merged = if runs(Stage::Merge) {
        let st = Stage::Merge.name();
        let m = linear_merge(&sft, &base, &MergeSpec::new(cfg.merge_weight_a)).stage(st)?;
        save(&m, &out.checkpoint("merged")).stage(st)?;
        log.line(&format!(
            "merge: {:.2} x sft + {:.2} x base",
            cfg.merge_weight_a,
            1.0 - cfg.merge_weight_a
        ));
        summary.merge_weight_a = Some(cfg.merge_weight_a);
        m
    } else {
        load(&out.checkpoint("merged"), "merge stage skipped").stage("merge")?
    };
    record(&mut summary, "merged", &merged);
    let merged_model = model_of(&mcfg, merged.clone()).stage("merge")?;

    let needs_bench = (runs(Stage::Sweep) && !cfg.sweep.is_empty()) || runs(Stage::Eval) || runs(Stage::Quantize);
    let bench = if needs_bench {
        load_benchmark(&cfg.data.bench).stage("eval")?
    } else {
        Vec::new()
    };
    let ectx = EvalCtx {
        bench: &bench,
        tok: &tok,
        cfg,
        out: &out,
    };

    // sweep
    if runs(Stage::Sweep) && !cfg.sweep.is_empty() {
        let st = Stage::Sweep.name();
        let opts = EvalOptions {
            strict: cfg.strict,
            run: RunOptions::default(),
        };
        let rows = merge_sweep(&sft, &base, &mcfg, &cfg.sweep, &bench, &cfg.template, &tok, &opts);
        if let Some(bad) = rows.iter().find(|r| r.accuracy.is_none()) {
            return Err(CliError::data(format!(
                "ratio {}: {}",
                bad.ratio,
                bad.error.as_deref().unwrap_or("failed")
            ))
            .in_stage(st));
        }
        write_file(&out.sweep(), sweep_csv(&rows)).stage(st)?;
        let best = rows
            .iter()
            .fold(None::<(f64, f64)>, |best, r| {
                let acc = r.accuracy.unwrap_or(f64::NEG_INFINITY);
                match best {
                    Some((_, b)) if b >= acc => best,
                    _ => Some((r.ratio, acc)),
                }
            })
            .map(|(r, _)| r);
        summary.best_sweep_ratio = best;
        log.line(&format!("sweep: {} ratio(s), best weight_a {best:?}", rows.len()));
    }

    // eval
    if runs(Stage::Eval) {
        let st = Stage::Eval.name();
        for name in &cfg.eval_models {
            let (model, run) = match name.as_str() {
                "base" => (base_model.clone(), RunOptions::default()),
                "cpt" => (model_of(&mcfg, cpt.clone()).stage(st)?, RunOptions::default()),
                "sft" => (model_of(&mcfg, sft.clone()).stage(st)?, RunOptions::default()),
                "merged" => (merged_model.clone(), RunOptions::default()),
                "fp8" => {
                    let spec = QuantSpec::new(Scheme::Fp8Dynamic);
                    let q = quantize_checkpoint(&merged, &spec, None).stage(st)?;
                    (model_of(&mcfg, q).stage(st)?, RunOptions { fp8_activations: true })
                }
                // Evaluated once the quantize stage has produced it.
                _ => continue,
            };
            let s = ectx.run(name, &model, run, &mut log).stage(st)?;
            summary.eval.insert(name.clone(), s);
        }
    }

    // quantize
    let quantized = if runs(Stage::Quantize) {
        let st = Stage::Quantize.name();
        let hessians = if cfg.quant.scheme == Scheme::Int4Gptq {
            let docs = load_corpus(&cfg.data.calib).stage(st)?;
            let samples: Vec<Vec<u32>> = docs
                .iter()
                .map(|d| {
                    let mut ids = tok.encode(d);
                    ids.truncate(mcfg.max_seq);
                    ids
                })
                .filter(|ids| !ids.is_empty())
                .take(cfg.quant.calib_samples)
                .collect();
            log.line(&format!("quantize: {} calibration sample(s)", samples.len()));
            Some(collect_hessians(&merged_model, &samples, cfg.quant.damping).stage(st)?)
        } else {
            None
        };
        let q = quantize_checkpoint(&merged, &cfg.quant, hessians.as_ref()).stage(st)?;
        save(&q, &out.checkpoint("quantized")).stage(st)?;
        log.line(&format!(
            "quantize: {} -> {}",
            cfg.quant.scheme.tag(),
            out.checkpoint("quantized").display()
        ));
        if runs(Stage::Eval) && cfg.eval_models.iter().any(|m| m == "quantized") {
            let run = RunOptions {
                fp8_activations: cfg.quant.scheme == Scheme::Fp8Dynamic,
            };
            let model = model_of(&mcfg, q.clone()).stage("eval")?;
            let s = ectx.run("quantized", &model, run, &mut log).stage("eval")?;
            summary.eval.insert("quantized".into(), s);
        }
        Some(q)
    } else {
        let p = out.checkpoint("quantized");
        if p.exists() {
            Some(read_checkpoint(&p).stage("quantize")?)
        } else {
            None
        }
    };
    if let Some(q) = &quantized {
        record(&mut summary, "quantized", q);
    }

    // footprint
    if runs(Stage::Footprint) {
        let st = Stage::Footprint.name();
        let mut rows = vec![footprint_row("merged", &footprint_of(&merged).stage(st)?)];
        let fp8 = footprint_plan(&merged, &QuantSpec::new(Scheme::Fp8Dynamic));
        rows.push(footprint_row("merged-fp8-plan", &fp8));
        let int4 = footprint_plan(&merged, &int4_spec(&cfg.quant));
        rows.push(footprint_row("merged-int4-plan", &int4));
        if let Some(q) = &quantized {
            rows.push(footprint_row("quantized", &footprint_of(q).stage(st)?));
        }
        write_file(&out.footprint(), footprint_table(&rows)).stage(st)?;
        for r in &rows {
            log.line(&format!(
                "footprint {}: {} bytes ({}), {:.3}x vs BF16",
                r.variant, r.bytes, r.precision, r.ratio
            ));
        }
        summary.footprint = rows;
    }

    write_file(
        &out.summary(),
        serde_json::to_string_pretty(&summary).stage("summary")? + "\n",
    )
    .stage("summary")?;
    log.line(&format!("pipeline: done, summary in {}", out.summary().display()));
    Ok(summary)
}

/// INT4 counterpart of `spec`, keeping its group size.
fn int4_spec(spec: &QuantSpec) -> QuantSpec {
    if spec.scheme.is_int4() {
        spec.clone()
    } else {
        QuantSpec {
            group_size: spec.group_size,
            ..QuantSpec::new(Scheme::Int4Gptq)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()), Some(s));
        }
        assert_eq!(Stage::parse("train"), None);
    }

    #[test]
    fn training_summary_uses_tail_window() {
        let log: Vec<StepMetrics> = (0..20)
            .map(|i| StepMetrics {
                step: i,
                lr: 0.1,
                train_loss: 10.0 - i as f64 / 4.0,
                eval_loss: None,
                grad_norm: 1.0,
            })
            .collect();
        let (first, last, drop) = summarize_training(&log);
        assert_eq!(first, 10.0);
        assert_eq!(last, (10.0 - 18.0 / 4.0 + 10.0 - 19.0 / 4.0) / 2.0);
        assert!((drop - (1.0 - last / 10.0)).abs() < 1e-15);
    }

    #[test]
    fn footprint_table_layout() {
        let rows = [FootprintRow {
            variant: "m".into(),
            precision: "INT4".into(),
            bytes: 10,
            bf16_bytes: 35,
            ratio: 3.5,
        }];
        assert_eq!(
            footprint_table(&rows),
            "variant\tprecision\tbytes\tbf16_bytes\tratio\nm\tINT4\t10\t35\t3.500\n"
        );
    }
}
