use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptkit::ckpt::{inspect, read_checkpoint, write_checkpoint, Checkpoint, WriteOptions};
use adaptkit::evalmc::{evaluate, load_benchmark, EvalOptions, PromptFormat, PromptTemplate};
use adaptkit::merge::{linear_merge, merge_sweep, sweep_csv, MergeSpec};
use adaptkit::model::{init_params_with, ModelConfig, RunOptions, TinyLM};
use adaptkit::quant::{
    collect_hessians, footprint_of, footprint_plan, is_quantized, quantize_checkpoint, QuantSpec, Scheme,
};
use adaptkit::synth::{write_fixture, FixtureSpec};
use adaptkit::tensor::DType;
use adaptkit::tok::{corpus_stats, fertility, load_corpus, Tokenizer};
use adaptkit_cli::config::{parse_grid, sub_seed, template_from, Ini, ModelSpec, PipelineConfig, StageConfig};
use adaptkit_cli::error::{CliError, Result};
use adaptkit_cli::pipeline::{
    cpt_examples, load_sft, metrics_jsonl, run_pipeline, sft_examples, train_stage, write_file, RunFlags, Stage,
    TRAIN_STAGES,
};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adaptkit",
    version,
    about = "Adapt, merge, evaluate and quantize a tiny decoder-only LM"
)]
struct Cli {
    /// Worker threads; 0 uses every core
    #[arg(long, global = true, env = "ADAPTKIT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Corpus statistics and tokenizer fertility
    Tok {
        #[command(subcommand)]
        cmd: TokCmd,
    },
    /// Train one LoRA stage and write the merged checkpoint
    Train(TrainArgs),
    /// Linear merge of two checkpoints, optionally as a ratio sweep
    Merge(MergeArgs),
    /// Multiple-choice evaluation
    Eval(EvalArgs),
    /// Post-training quantization
    Quantize(QuantizeArgs),
    /// Memory footprint against a BF16 baseline
    Footprint(FootprintArgs),
    /// Checkpoint utilities
    Ckpt {
        #[command(subcommand)]
        cmd: CkptCmd,
    },
    /// Run the end-to-end pipeline from a configuration file
    Pipeline(PipelineArgs),
    /// Write the synthetic fixture corpus
    Synth(SynthArgs),
}

#[derive(Args)]
struct TokFiles {
    /// Vocabulary file, one token per line
    #[arg(long)]
    vocab: PathBuf,
    /// Merge rules, one "left right" pair per line
    #[arg(long)]
    merges: PathBuf,
}

impl TokFiles {
    fn load(&self) -> Result<Tokenizer> {
        Ok(Tokenizer::from_files(&self.vocab, &self.merges)?)
    }
}

#[derive(Subcommand)]
enum TokCmd {
    /// Character, word and sample counts of a corpus
    Stats {
        /// Text file, JSONL file with a "text" field, or directory of either
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Non-special tokens per word
    Fertility {
        #[command(flatten)]
        tok: TokFiles,
        /// Text file, JSONL file with a "text" field, or directory of either
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Print the token ids of a string
    Encode {
        #[command(flatten)]
        tok: TokFiles,
        /// Text to encode
        text: String,
    },
}

fn stage_parser() -> impl TypedValueParser<Value = Stage> {
    PossibleValuesParser::new(Stage::ALL.map(Stage::name)).map(|s| Stage::parse(&s).expect("listed stage"))
}

fn scheme_parser() -> impl TypedValueParser<Value = Scheme> {
    PossibleValuesParser::new(["fp8", "int4-rtn", "int4-gptq"]).map(|s| Scheme::parse(&s).expect("listed scheme"))
}

fn format_parser() -> impl TypedValueParser<Value = PromptFormat> {
    PossibleValuesParser::new(["raw", "chat"]).map(|s| PromptFormat::parse(&s).expect("listed format"))
}

fn dtype_parser() -> impl TypedValueParser<Value = DType> {
    PossibleValuesParser::new(["f32", "f64", "bf16"])
        .map(|s| DType::parse(&s.to_ascii_uppercase()).expect("listed dtype"))
}

#[derive(Args)]
struct TrainArgs {
    /// Stage to train; selects the [cpt] or [sft] section of the config
    #[arg(long, value_parser = PossibleValuesParser::new(["cpt", "sft"]))]
    stage: String,
    /// Stage configuration file
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to adapt
    #[arg(long)]
    base: PathBuf,
    /// Merged output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Training data: a corpus for cpt, prompt/response JSONL for sft
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    tok: TokFiles,
    /// Model file, when the base checkpoint carries no architecture metadata
    #[arg(long)]
    model: Option<PathBuf>,
    /// Per-step metrics as JSONL [default: <out>.jsonl]
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Also write the trained adapter
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Root seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MergeArgs {
    /// First checkpoint, weighted by --weight-a
    #[arg(long)]
    a: PathBuf,
    /// Second checkpoint, weighted by 1 - weight_a
    #[arg(long)]
    b: PathBuf,
    /// Weight of the first checkpoint
    #[arg(long, visible_alias = "w", default_value_t = 0.8)]
    weight_a: f64,
    /// Interpolate only this tensor; others are copied from --a (repeatable)
    #[arg(long, value_name = "NAME", conflicts_with = "sweep")]
    only: Vec<String>,
    /// Merged checkpoint
    #[arg(long, required_unless_present = "sweep")]
    out: Option<PathBuf>,
    /// Evaluate every ratio of start:end:step instead of writing one merge
    #[arg(
        long,
        visible_alias = "grid",
        requires = "bench",
        requires = "vocab",
        requires = "merges"
    )]
    sweep: Option<String>,
    /// Benchmark JSONL for --sweep
    #[arg(long)]
    bench: Option<PathBuf>,
    /// Vocabulary file for --sweep
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Merge rules for --sweep
    #[arg(long)]
    merges: Option<PathBuf>,
    /// Prompt template file for --sweep
    #[arg(long)]
    template: Option<PathBuf>,
    /// Sweep CSV [default: stdout]
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Model file, when the checkpoints carry no architecture metadata
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    model: PathBuf,
    /// Model file, when the checkpoint carries no architecture metadata
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark JSONL
    #[arg(long)]
    bench: PathBuf,
    #[command(flatten)]
    tok: TokFiles,
    /// Prompt format, overriding the template
    #[arg(long, value_parser = format_parser())]
    format: Option<PromptFormat>,
    /// Prompt template file ([template] or [eval] section)
    #[arg(long)]
    template: Option<PathBuf>,
    /// JSON report
    #[arg(long)]
    report: Option<PathBuf>,
    /// Summary table [default: stdout]
    #[arg(long)]
    table: Option<PathBuf>,
    /// Fail on items with no eligible answer variant
    #[arg(long)]
    strict: bool,
    /// Fake-quantize activations to FP8
    #[arg(long)]
    fp8_activations: bool,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Input checkpoint
    #[arg(long = "in")]
    input: PathBuf,
    /// Quantization scheme
    #[arg(long, value_parser = scheme_parser())]
    scheme: Scheme,
    /// INT4 group size
    #[arg(long, default_value_t = 128)]
    group: usize,
    /// Comma-separated name fragments kept in full precision [default: per scheme]
    #[arg(long, value_delimiter = ',')]
    exclude: Option<Vec<String>>,
    /// Calibration corpus, required for int4-gptq
    #[arg(long, required_if_eq("scheme", "int4-gptq"))]
    calib: Option<PathBuf>,
    /// Calibration documents to use
    #[arg(long, default_value_t = 128)]
    calib_samples: usize,
    /// Hessian damping
    #[arg(long, default_value_t = 0.01)]
    damping: f64,
    /// Vocabulary file, required for int4-gptq
    #[arg(long, required_if_eq("scheme", "int4-gptq"))]
    vocab: Option<PathBuf>,
    /// Merge rules, required for int4-gptq
    #[arg(long, required_if_eq("scheme", "int4-gptq"))]
    merges: Option<PathBuf>,
    /// Model file, when the checkpoint carries no architecture metadata
    #[arg(long)]
    model: Option<PathBuf>,
    /// Quantized checkpoint
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FootprintArgs {
    /// Checkpoint to measure
    #[arg(long = "in")]
    input: PathBuf,
    /// Estimate the footprint under this scheme instead of measuring
    #[arg(long, value_parser = scheme_parser())]
    plan: Option<Scheme>,
    /// Group size for --plan
    #[arg(long, default_value_t = 128)]
    group: usize,
    /// Row label [default: file stem]
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum CkptCmd {
    /// Names, dtypes, shapes and total bytes
    Inspect {
        /// Checkpoint file
        path: PathBuf,
    },
    /// SHA-256 of each checkpoint's canonical bytes
    Digest {
        /// Checkpoint files
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Write freshly initialized weights
    Init {
        /// Model file
        #[arg(long)]
        config: PathBuf,
        /// Vocabulary file; sets vocab_size when the model file omits it
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Initialization seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Storage dtype, overriding the model file
        #[arg(long, value_parser = dtype_parser())]
        dtype: Option<DType>,
        /// Output checkpoint
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline configuration file
    #[arg(long)]
    config: PathBuf,
    /// Root seed, overriding the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config
    #[arg(long)]
    output: Option<PathBuf>,
    /// Stage to skip; repeatable
    #[arg(long, value_parser = stage_parser())]
    skip: Vec<Stage>,
    /// Skip base, cpt and sft, reading their checkpoints from the output directory
    #[arg(long)]
    skip_train: bool,
    /// Only write the log file
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Generator seed
    #[arg(long, default_value_t = FixtureSpec::default().seed)]
    seed: u64,
    /// Continued-pretraining documents
    #[arg(long, default_value_t = FixtureSpec::default().cpt_docs)]
    cpt_docs: usize,
    /// Instruction-tuning pairs
    #[arg(long, default_value_t = FixtureSpec::default().sft_items)]
    sft_items: usize,
    /// Benchmark items
    #[arg(long, default_value_t = FixtureSpec::default().bench_items)]
    bench_items: usize,
    /// Calibration documents
    #[arg(long, default_value_t = FixtureSpec::default().calib_docs)]
    calib_docs: usize,
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn save_ckpt(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(write_checkpoint(ckpt, path, WriteOptions::default())?)
}

/// Architecture from a model file if given, else from checkpoint metadata.
fn model_config(ckpt: &Checkpoint, model: Option<&Path>, tok: Option<&Tokenizer>) -> Result<ModelConfig> {
    match model {
        Some(p) => Ok(ModelSpec::load(p)?.resolve(tok.map_or(0, Tokenizer::vocab_size))?),
        None => ModelConfig::from_meta(&ckpt.meta)
            .ok_or_else(|| CliError::config("checkpoint has no model metadata; pass a model file")),
    }
}

fn load_template(path: Option<&Path>, format: Option<PromptFormat>) -> Result<PromptTemplate> {
    let mut tmpl = match path {
        None => PromptTemplate::default(),
        Some(p) => {
            let ini = Ini::load(p)?;
            let section = if ini.has_section("template") {
                "template"
            } else {
                "eval"
            };
            template_from(&ini, section)?
        }
    };
    if let Some(f) = format {
        tmpl.format = f;
    }
    Ok(tmpl)
}

fn run_tok(cmd: TokCmd) -> Result<()> {
    match cmd {
        TokCmd::Stats { corpus } => {
            let docs = load_corpus(&corpus)?;
            let s = corpus_stats(&docs);
            println!("samples\t{}", s.samples);
            println!("characters\t{}", s.characters);
            println!("words\t{}", s.words);
            println!("avg_word_len\t{:.3}", s.avg_word_len);
        }
        TokCmd::Fertility { tok, corpus } => {
            let t = tok.load()?;
            let docs = load_corpus(&corpus)?;
            println!("fertility\t{:.3}", fertility(&t, &docs)?);
        }
        TokCmd::Encode { tok, text } => {
            let ids: Vec<String> = tok.load()?.encode(&text).iter().map(u32::to_string).collect();
            println!("{}", ids.join(" "));
        }
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let tok = a.tok.load()?;
    let base = load_ckpt(&a.base)?;
    let cfg = model_config(&base, a.model.as_deref(), Some(&tok))?;
    let sc = StageConfig::load(&a.config, &a.stage, sub_seed(a.seed, &a.stage))?;
    let examples = if a.stage == "cpt" {
        cpt_examples(&tok, &load_corpus(&a.data)?, sc.train.seq_len.min(cfg.max_seq))
    } else {
        sft_examples(&tok, &load_sft(&a.data)?, cfg.max_seq)
    };
    let model = TinyLM::from_checkpoint(cfg, base)?;
    let out = train_stage(&a.stage, &model, examples, &sc, &mut |l| eprintln!("{l}"))?;
    save_ckpt(&out.merged, &a.out)?;
    if let Some(p) = &a.adapter {
        save_ckpt(&out.adapter.to_checkpoint(), p)?;
    }
    let metrics = a.metrics.unwrap_or_else(|| a.out.with_extension("jsonl"));
    write_file(&metrics, metrics_jsonl(&out.steps)?)?;
    println!("{}", serde_json::to_string_pretty(&out.summary)?);
    Ok(())
}

fn run_merge(a: MergeArgs) -> Result<()> {
    let ca = load_ckpt(&a.a)?;
    let cb = load_ckpt(&a.b)?;
    let Some(grid) = &a.sweep else {
        let spec = MergeSpec {
            weight_a: a.weight_a,
            filter: (!a.only.is_empty()).then(|| a.only.iter().cloned().collect()),
        };
        let m = linear_merge(&ca, &cb, &spec)?;
        let out = a.out.as_deref().expect("clap requires --out without --sweep");
        save_ckpt(&m, out)?;
        println!("{}\t{}", out.display(), m.digest());
        return Ok(());
    };
    let ratios = parse_grid(grid).map_err(CliError::config)?;
    let tok = Tokenizer::from_files(a.vocab.as_deref().unwrap(), a.merges.as_deref().unwrap())?;
    let cfg = model_config(&ca, a.model.as_deref(), Some(&tok))?;
    let bench = load_benchmark(a.bench.as_deref().unwrap())?;
    let tmpl = load_template(a.template.as_deref(), None)?;
    let rows = merge_sweep(&ca, &cb, &cfg, &ratios, &bench, &tmpl, &tok, &EvalOptions::default());
    let csv = sweep_csv(&rows);
    match &a.csv {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(r) = rows.iter().find(|r| r.accuracy.is_none()) {
        return Err(CliError::data(format!(
            "ratio {}: {}",
            r.ratio,
            r.error.as_deref().unwrap_or("failed")
        )));
    }
    if let Some(p) = &a.out {
        save_ckpt(&linear_merge(&ca, &cb, &MergeSpec::new(a.weight_a))?, p)?;
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let tok = a.tok.load()?;
    let ckpt = load_ckpt(&a.model)?;
    let cfg = model_config(&ckpt, a.config.as_deref(), Some(&tok))?;
    let model = TinyLM::from_checkpoint(cfg, ckpt)?;
    let bench = load_benchmark(&a.bench)?;
    let tmpl = load_template(a.template.as_deref(), a.format)?;
    let opts = EvalOptions {
        strict: a.strict,
        run: RunOptions {
            fp8_activations: a.fp8_activations,
        },
    };
    let report = evaluate(&model, &bench, &tmpl, &tok, &opts)?;
    if let Some(p) = &a.report {
        write_file(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    let name = a
        .model
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let table = report.summary_table(&name);
    match &a.table {
        Some(p) => write_file(p, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn run_quantize(a: QuantizeArgs) -> Result<()> {
    let ckpt = load_ckpt(&a.input)?;
    let d = QuantSpec::new(a.scheme);
    let spec = QuantSpec {
        scheme: a.scheme,
        group_size: a.group,
        exclusions: a.exclude.unwrap_or(d.exclusions),
        calib_samples: a.calib_samples,
        damping: a.damping,
    };
    spec.validate()?;
    let hessians = if a.scheme == Scheme::Int4Gptq {
        let tok = Tokenizer::from_files(a.vocab.as_deref().unwrap(), a.merges.as_deref().unwrap())?;
        let cfg = model_config(&ckpt, a.model.as_deref(), Some(&tok))?;
        let samples: Vec<Vec<u32>> = load_corpus(a.calib.as_deref().unwrap())?
            .iter()
            .map(|d| {
                let mut ids = tok.encode(d);
                ids.truncate(cfg.max_seq);
                ids
            })
            .filter(|ids| !ids.is_empty())
            .take(spec.calib_samples)
            .collect();
        let model = TinyLM::from_checkpoint(cfg, ckpt.clone())?;
        Some(collect_hessians(&model, &samples, spec.damping)?)
    } else {
        None
    };
    let q = quantize_checkpoint(&ckpt, &spec, hessians.as_ref())?;
    save_ckpt(&q, &a.out)?;
    println!("{}", footprint_of(&q)?.row(&stem(&a.out)));
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn run_footprint(a: FootprintArgs) -> Result<()> {
    let ckpt = load_ckpt(&a.input)?;
    let f = match a.plan {
        Some(scheme) if !is_quantized(&ckpt) => footprint_plan(
            &ckpt,
            &QuantSpec {
                group_size: a.group,
                ..QuantSpec::new(scheme)
            },
        ),
        Some(_) => return Err(CliError::data("--plan expects an unquantized checkpoint")),
        None => footprint_of(&ckpt)?,
    };
    println!("variant\tprecision\tbytes\tbf16_bytes\tratio");
    println!("{}", f.row(&a.variant.unwrap_or_else(|| stem(&a.input))));
    Ok(())
}

fn run_ckpt(cmd: CkptCmd) -> Result<()> {
    match cmd {
        CkptCmd::Inspect { path } => print!("{}", inspect(&load_ckpt(&path)?)),
        CkptCmd::Digest { paths } => {
            for p in paths {
                println!("{}\t{}", load_ckpt(&p)?.digest(), p.display());
            }
        }
        CkptCmd::Init {
            config,
            vocab,
            seed,
            dtype,
            out,
        } => {
            let spec = ModelSpec::load(&config)?;
            let tok_vocab = match &vocab {
                Some(v) => fs::read_to_string(v)
                    .map_err(|e| CliError::data(format!("{}: {e}", v.display())))?
                    .lines()
                    .count(),
                None => 0,
            };
            let cfg = spec.resolve(tok_vocab)?;
            let params = init_params_with(&cfg, seed, dtype.unwrap_or(spec.dtype))?.into_params();
            save_ckpt(&params, &out)?;
            println!("{}\t{}", params.digest(), out.display());
        }
    }
    Ok(())
}

fn run_pipeline_cmd(a: PipelineArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = a.output {
        cfg.output = out;
    }
    let mut skip: BTreeSet<Stage> = a.skip.into_iter().collect();
    if a.skip_train {
        skip.extend(TRAIN_STAGES);
    }
    let summary = run_pipeline(&cfg, &RunFlags { skip, quiet: a.quiet })?;
    for (name, e) in &summary.eval {
        println!("{name}\taccuracy\t{:.4}", e.accuracy);
    }
    for (name, d) in &summary.digests {
        println!("{name}\tsha256\t{d}");
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let spec = FixtureSpec {
        seed: a.seed,
        cpt_docs: a.cpt_docs,
        sft_items: a.sft_items,
        bench_items: a.bench_items,
        calib_docs: a.calib_docs,
    };
    write_fixture(&a.out, &spec).map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    match cli.cmd {
        Cmd::Tok { cmd } => run_tok(cmd),
        Cmd::Train(a) => run_train(a),
        Cmd::Merge(a) => run_merge(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Quantize(a) => run_quantize(a),
        Cmd::Footprint(a) => run_footprint(a),
        Cmd::Ckpt { cmd } => run_ckpt(cmd),
        Cmd::Pipeline(a) => run_pipeline_cmd(a),
        Cmd::Synth(a) => run_synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
