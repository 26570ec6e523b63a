//! Flat `key = value` files with `[section]` headers.
//!
//! ```text
//! # comment
//! [pipeline]
//! seed = 2024
//! ```
//!
//! Lines starting with `#` or `;` are comments. Keys before the first
//! header belong to the unnamed section `""`. Values run to the end of the
//! line and are trimmed; there are no inline comments or quoting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use adaptkit::adapt::{LoraConfig, TrainConfig};
use adaptkit::evalmc::{PromptFormat, PromptTemplate};
use adaptkit::merge::ratio_grid;
use adaptkit::model::ModelConfig;
use adaptkit::quant::{QuantSpec, Scheme};
use adaptkit::rng::Stream;
use adaptkit::tensor::DType;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub file: Option<PathBuf>,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn new(line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            file: None,
            line,
            message: message.into(),
        }
    }

    fn in_file(mut self, path: &Path) -> Self {
        self.file.get_or_insert_with(|| path.to_path_buf());
        self
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.file {
            write!(f, "{}", p.display())?;
            if let Some(l) = self.line {
                write!(f, ":{l}")?;
            }
            write!(f, ": ")?;
        } else if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ini {
    /// section → key → (value, line)
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Ini> {
        let mut ini = Ini::default();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::new(Some(line_no), "unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(ConfigError::new(Some(line_no), "empty section name"));
                }
                if ini.sections.contains_key(name) {
                    return Err(ConfigError::new(Some(line_no), format!("duplicate section [{name}]")));
                }
                current = name.to_string();
                ini.sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(Some(line_no), format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::new(Some(line_no), "empty key"));
            }
            let section = ini.sections.entry(current.clone()).or_default();
            if section.contains_key(key) {
                return Err(ConfigError::new(Some(line_no), format!("duplicate key {key:?}")));
            }
            section.insert(key.to_string(), (value.trim().to_string(), line_no));
        }
        Ok(ini)
    }

    pub fn load(path: &Path) -> Result<Ini> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(None, format!("cannot read config: {e}")).in_file(path))?;
        Ini::parse(&text).map_err(|e| e.in_file(path))
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|(v, _)| v.as_str())
    }

    fn line(&self, section: &str, key: &str) -> Option<usize> {
        self.sections.get(section)?.get(key).map(|(_, l)| *l)
    }

    /// Parsed value, or `None` when the key is absent.
    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| ConfigError::new(self.line(section, key), format!("[{section}] {key} = {v:?}: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.get(section, key)?
            .ok_or_else(|| ConfigError::new(None, format!("missing required key [{section}] {key}")))
    }

    /// Comma-separated list; absent or empty gives `None`.
    pub fn list(&self, section: &str, key: &str) -> Option<Vec<String>> {
        let v = self.raw(section, key)?;
        if v.is_empty() {
            return Some(Vec::new());
        }
        Some(v.split(',').map(|s| s.trim().to_string()).collect())
    }

    /// Reject sections and keys outside `schema`.
    pub fn check(&self, schema: &[(&str, &[&str])]) -> Result<()> {
        for (name, keys) in &self.sections {
            let Some((_, allowed)) = schema.iter().find(|(s, _)| s == name) else {
                let line = keys.values().map(|(_, l)| *l).min();
                return Err(ConfigError::new(line, format!("unknown section [{name}]")));
            };
            for (key, (_, line)) in keys {
                if !allowed.contains(&key.as_str()) {
                    return Err(ConfigError::new(
                        Some(*line),
                        format!("unknown key {key:?} in [{name}]"),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn bool_value(ini: &Ini, section: &str, key: &str, default: bool) -> Result<bool> {
    match ini.raw(section, key) {
        None => Ok(default),
        Some("true" | "yes" | "1") => Ok(true),
        Some("false" | "no" | "0") => Ok(false),
        Some(v) => Err(ConfigError::new(
            ini.line(section, key),
            format!("[{section}] {key} = {v:?}: expected true or false"),
        )),
    }
}

const MODEL_KEYS: &[&str] = &[
    "vocab_size",
    "d_model",
    "n_layers",
    "n_heads",
    "head_dim",
    "d_ff",
    "rope_base",
    "max_seq",
    "tie_lm_head",
    "dtype",
];

/// Architecture plus the storage dtype of freshly initialized weights.
/// `vocab_size` may be omitted and filled from the tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub vocab_size: Option<usize>,
    pub config: ModelConfig,
    pub dtype: DType,
}

impl ModelSpec {
    pub fn from_ini(ini: &Ini) -> Result<ModelSpec> {
        ini.check(&[("model", MODEL_KEYS)])?;
        let s = "model";
        let vocab_size = ini.get(s, "vocab_size")?;
        let dtype_name: String = ini.get_or(s, "dtype", "f32".to_string())?;
        let dtype = DType::parse(&dtype_name.to_ascii_uppercase())
            .filter(|d| d.is_float())
            .ok_or_else(|| ConfigError::new(ini.line(s, "dtype"), format!("unsupported dtype {dtype_name:?}")))?;
        let config = ModelConfig {
            vocab_size: vocab_size.unwrap_or(0),
            d_model: ini.require(s, "d_model")?,
            n_layers: ini.require(s, "n_layers")?,
            n_heads: ini.require(s, "n_heads")?,
            head_dim: ini.require(s, "head_dim")?,
            d_ff: ini.require(s, "d_ff")?,
            rope_base: ini.get_or(s, "rope_base", 10000.0)?,
            max_seq: ini.require(s, "max_seq")?,
            tie_lm_head: bool_value(ini, s, "tie_lm_head", false)?,
        };
        Ok(ModelSpec {
            vocab_size,
            config,
            dtype,
        })
    }

    pub fn load(path: &Path) -> Result<ModelSpec> {
        ModelSpec::from_ini(&Ini::load(path)?).map_err(|e| e.in_file(path))
    }

    /// Final config for a tokenizer of `tok_vocab` entries.
    pub fn resolve(&self, tok_vocab: usize) -> Result<ModelConfig> {
        let mut cfg = self.config.clone();
        match self.vocab_size {
            Some(v) if v < tok_vocab => {
                return Err(ConfigError::new(
                    None,
                    format!("vocab_size {v} is smaller than the tokenizer vocabulary ({tok_vocab})"),
                ))
            }
            Some(v) => cfg.vocab_size = v,
            None => cfg.vocab_size = tok_vocab,
        }
        cfg.validate().map_err(|e| ConfigError::new(None, e.to_string()))?;
        Ok(cfg)
    }
}

const STAGE_KEYS: &[&str] = &[
    "rank",
    "alpha",
    "dropout",
    "targets",
    "train_embeddings",
    "peak_lr",
    "steps",
    "warmup",
    "micro_batch",
    "accum_steps",
    "seq_len",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "eval_every",
    "held_out",
];

/// One LoRA training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub lora: LoraConfig,
    pub train: TrainConfig,
    /// Examples reserved for held-out loss.
    pub held_out: usize,
}

impl StageConfig {
    pub fn from_section(ini: &Ini, s: &str, seed: u64) -> Result<StageConfig> {
        let ld = LoraConfig::default();
        let targets = match ini.list(s, "targets") {
            None => ld.targets.clone(),
            Some(names) => LoraConfig::parse_targets(&names)
                .map_err(|e| ConfigError::new(ini.line(s, "targets"), e.to_string()))?,
        };
        let lora = LoraConfig {
            rank: ini.get_or(s, "rank", ld.rank)?,
            alpha: ini.get_or(s, "alpha", ld.alpha)?,
            dropout: ini.get_or(s, "dropout", ld.dropout)?,
            targets,
            train_embeddings: bool_value(ini, s, "train_embeddings", ld.train_embeddings)?,
        };
        lora.validate()
            .map_err(|e| ConfigError::new(None, format!("[{s}] {e}")))?;
        let td = TrainConfig::default();
        let train = TrainConfig {
            peak_lr: ini.get_or(s, "peak_lr", td.peak_lr)?,
            total_steps: ini.get_or(s, "steps", td.total_steps)?,
            warmup_steps: ini.get_or(s, "warmup", td.warmup_steps)?,
            micro_batch: ini.get_or(s, "micro_batch", td.micro_batch)?,
            accum_steps: ini.get_or(s, "accum_steps", td.accum_steps)?,
            seq_len: ini.get_or(s, "seq_len", td.seq_len)?,
            weight_decay: ini.get_or(s, "weight_decay", td.weight_decay)?,
            adam_beta1: ini.get_or(s, "beta1", td.adam_beta1)?,
            adam_beta2: ini.get_or(s, "beta2", td.adam_beta2)?,
            adam_eps: ini.get_or(s, "eps", td.adam_eps)?,
            seed,
            eval_every: ini.get_or(s, "eval_every", td.eval_every)?,
        };
        train
            .validate()
            .map_err(|e| ConfigError::new(None, format!("[{s}] {e}")))?;
        Ok(StageConfig {
            lora,
            train,
            held_out: ini.get_or(s, "held_out", 0)?,
        })
    }

    pub fn load(path: &Path, section: &str, seed: u64) -> Result<StageConfig> {
        let ini = Ini::load(path)?;
        ini.check(&[(section, STAGE_KEYS)]).map_err(|e| e.in_file(path))?;
        StageConfig::from_section(&ini, section, seed).map_err(|e| e.in_file(path))
    }
}

pub fn template_from(ini: &Ini, s: &str) -> Result<PromptTemplate> {
    let d = PromptTemplate::default();
    let format = match ini.raw(s, "format") {
        None => d.format,
        Some(v) => PromptFormat::parse(v)
            .ok_or_else(|| ConfigError::new(ini.line(s, "format"), format!("unknown prompt format {v:?}")))?,
    };
    let letters = match ini.list(s, "letters") {
        None => d.letters.clone(),
        Some(l) => l
            .try_into()
            .map_err(|_| ConfigError::new(ini.line(s, "letters"), "letters needs exactly four entries"))?,
    };
    let tmpl = PromptTemplate {
        format,
        question_label: ini.get_or(s, "question_label", d.question_label)?,
        answer_label: ini.get_or(s, "answer_label", d.answer_label)?,
        system_text: ini.get_or(s, "system_text", d.system_text)?,
        letters,
    };
    tmpl.validate().map_err(|e| ConfigError::new(None, e.to_string()))?;
    Ok(tmpl)
}

/// `start:end:step`.
pub fn parse_grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, c] = parts[..] else {
        return Err(format!("expected start:end:step, got {s:?}"));
    };
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    let (start, end, step) = (num(a)?, num(b)?, num(c)?);
    if !(step > 0.0) || !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end {
        return Err(format!("invalid grid {s:?}"));
    }
    Ok(ratio_grid(start, end, step))
}

pub fn quant_from(ini: &Ini, s: &str) -> Result<QuantSpec> {
    let scheme_name: String = ini.get_or(s, "scheme", Scheme::Int4Gptq.tag().to_string())?;
    let scheme = Scheme::parse(&scheme_name).map_err(|e| ConfigError::new(ini.line(s, "scheme"), e.to_string()))?;
    let d = QuantSpec::new(scheme);
    let spec = QuantSpec {
        scheme,
        group_size: ini.get_or(s, "group_size", d.group_size)?,
        exclusions: ini.list(s, "exclude").unwrap_or(d.exclusions),
        calib_samples: ini.get_or(s, "calib_samples", d.calib_samples)?,
        damping: ini.get_or(s, "damping", d.damping)?,
    };
    spec.validate().map_err(|e| ConfigError::new(None, e.to_string()))?;
    Ok(spec)
}

/// Paths of the pipeline's input files, resolved against the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub cpt: PathBuf,
    pub sft: PathBuf,
    pub bench: PathBuf,
    pub calib: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub model_path: PathBuf,
    pub model: ModelSpec,
    /// Start from this checkpoint instead of a fresh initialization.
    pub base: Option<PathBuf>,
    pub data: DataPaths,
    pub cpt: StageConfig,
    pub sft: StageConfig,
    pub merge_weight_a: f64,
    pub sweep: Vec<f64>,
    pub template: PromptTemplate,
    pub eval_models: Vec<String>,
    pub strict: bool,
    pub quant: QuantSpec,
}

pub const EVAL_TARGETS: [&str; 6] = ["base", "cpt", "sft", "merged", "quantized", "fp8"];

const PIPELINE_SCHEMA: &[(&str, &[&str])] = &[
    ("pipeline", &["seed", "output", "model", "base"]),
    ("data", &["vocab", "merges", "cpt", "sft", "bench", "calib"]),
    ("cpt", STAGE_KEYS),
    ("sft", STAGE_KEYS),
    ("merge", &["weight_a", "sweep"]),
    (
        "eval",
        &[
            "format",
            "question_label",
            "answer_label",
            "system_text",
            "letters",
            "models",
            "strict",
        ],
    ),
    (
        "quant",
        &["scheme", "group_size", "exclude", "calib_samples", "damping"],
    ),
];

/// Seed for one named component, derived from the root seed.
pub fn sub_seed(root: u64, component: &str) -> u64 {
    Stream::new(root, "pipeline").child(component).key()
}

impl PipelineConfig {
    pub fn from_ini(ini: &Ini, base_dir: &Path) -> Result<PipelineConfig> {
        ini.check(PIPELINE_SCHEMA)?;
        let path = |s: &str, k: &str| -> Result<PathBuf> {
            let v: String = ini.require(s, k)?;
            Ok(base_dir.join(v))
        };
        let seed = ini.get_or("pipeline", "seed", 0u64)?;
        let model_path = path("pipeline", "model")?;
        let model = ModelSpec::load(&model_path)?;
        let data = DataPaths {
            vocab: path("data", "vocab")?,
            merges: path("data", "merges")?,
            cpt: path("data", "cpt")?,
            sft: path("data", "sft")?,
            bench: path("data", "bench")?,
            calib: path("data", "calib")?,
        };
        let merge_weight_a = ini.get_or("merge", "weight_a", 0.8)?;
        if !(0.0..=1.0).contains(&merge_weight_a) {
            return Err(ConfigError::new(
                ini.line("merge", "weight_a"),
                "weight_a must lie in [0, 1]",
            ));
        }
        let sweep = match ini.raw("merge", "sweep") {
            None => ratio_grid(0.10, 0.95, 0.05),
            Some("") | Some("none") => Vec::new(),
            Some(v) => parse_grid(v).map_err(|e| ConfigError::new(ini.line("merge", "sweep"), e))?,
        };
        let eval_models = ini
            .list("eval", "models")
            .unwrap_or_else(|| ["sft", "merged", "quantized"].map(String::from).to_vec());
        if let Some(bad) = eval_models.iter().find(|m| !EVAL_TARGETS.contains(&m.as_str())) {
            return Err(ConfigError::new(
                ini.line("eval", "models"),
                format!(
                    "unknown eval target {bad:?}; expected one of {}",
                    EVAL_TARGETS.join(", ")
                ),
            ));
        }
        Ok(PipelineConfig {
            seed,
            output: base_dir.join(ini.get_or("pipeline", "output", "out".to_string())?),
            model_path,
            model,
            base: ini.get::<String>("pipeline", "base")?.map(|b| base_dir.join(b)),
            data,
            cpt: StageConfig::from_section(ini, "cpt", sub_seed(seed, "cpt"))?,
            sft: StageConfig::from_section(ini, "sft", sub_seed(seed, "sft"))?,
            merge_weight_a,
            sweep,
            template: template_from(ini, "eval")?,
            eval_models,
            strict: bool_value(ini, "eval", "strict", false)?,
            quant: quant_from(ini, "quant")?,
        })
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let ini = Ini::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::from_ini(&ini, dir).map_err(|e| e.in_file(path))
    }

    /// Same configuration with every seeded component re-derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.cpt.train.seed = sub_seed(seed, "cpt");
        self.sft.train.seed = sub_seed(seed, "sft");
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use adaptkit::model::Proj;

    #[test]
    fn parses_sections_comments_and_blank_lines() {
        let ini = Ini::parse("top = 1\n# c\n; c\n\n[a]\nx = hello world \ny=2\n[b]\n").unwrap();
        assert_eq!(ini.raw("", "top"), Some("1"));
        assert_eq!(ini.raw("a", "x"), Some("hello world"));
        assert_eq!(ini.get::<u32>("a", "y").unwrap(), Some(2));
        assert!(ini.has_section("b"));
        assert_eq!(ini.get::<u32>("b", "y").unwrap(), None);
    }

    #[test]
    fn reports_line_numbers() {
        let e = Ini::parse("[a]\nx = 1\nbogus\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        let e = Ini::parse("[a]\nx = 1\nx = 2\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        let ini = Ini::parse("[a]\nn = abc\n").unwrap();
        let e = ini.get::<u32>("a", "n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(Ini::parse("[a\n").is_err());
        assert!(Ini::parse("[a]\n[a]\n").is_err());
    }

    #[test]
    fn schema_rejects_unknown_keys() {
        let ini = Ini::parse("[a]\nx = 1\ny = 2\n").unwrap();
        assert!(ini.check(&[("a", &["x", "y"])]).is_ok());
        assert_eq!(ini.check(&[("a", &["x"])]).unwrap_err().line, Some(3));
        assert!(ini.check(&[("b", &["x"])]).is_err());
    }

    #[test]
    fn lists_and_bools() {
        let ini = Ini::parse("[s]\nt = q_proj, v_proj\ne =\nb = yes\nc = maybe\n").unwrap();
        assert_eq!(ini.list("s", "t").unwrap(), vec!["q_proj", "v_proj"]);
        assert_eq!(ini.list("s", "e").unwrap(), Vec::<String>::new());
        assert!(bool_value(&ini, "s", "b", false).unwrap());
        assert!(bool_value(&ini, "s", "c", false).is_err());
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0.5:0.2:0.1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn stage_section_defaults_and_overrides() {
        let ini = Ini::parse("[cpt]\nrank = 4\ntargets = q_proj,v_proj\nsteps = 10\nwarmup = 2\n").unwrap();
        let s = StageConfig::from_section(&ini, "cpt", 9).unwrap();
        assert_eq!(s.lora.rank, 4);
        assert_eq!(s.lora.targets, vec![Proj::Q, Proj::V]);
        assert_eq!(s.train.total_steps, 10);
        assert_eq!(s.train.seed, 9);
        let bad = Ini::parse("[cpt]\ntargets = nope\n").unwrap();
        assert!(StageConfig::from_section(&bad, "cpt", 0).is_err());
    }

    #[test]
    fn model_spec_resolves_vocab_from_tokenizer() {
        let ini =
            Ini::parse("[model]\nd_model = 8\nn_layers = 1\nn_heads = 2\nhead_dim = 4\nd_ff = 16\nmax_seq = 16\n")
                .unwrap();
        let spec = ModelSpec::from_ini(&ini).unwrap();
        assert_eq!(spec.resolve(40).unwrap().vocab_size, 40);
        assert_eq!(spec.dtype, DType::F32);
        let fixed = ModelSpec {
            vocab_size: Some(10),
            ..spec
        };
        assert!(fixed.resolve(40).is_err());
    }

    #[test]
    fn sub_seeds_differ_by_component() {
        assert_ne!(sub_seed(1, "cpt"), sub_seed(1, "sft"));
        assert_ne!(sub_seed(1, "cpt"), sub_seed(2, "cpt"));
        assert_eq!(sub_seed(3, "base"), sub_seed(3, "base"));
    }
}
