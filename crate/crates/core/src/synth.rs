//! Synthetic data for tests, demos and the bundled pipeline fixture.
//!
//! Two skills share one syllable alphabet:
//! - `order`: syllables follow a fixed cycle (`ba be bi bo bu da ...`);
//! - `color`: every syllable has a fixed color (`ba is red .`).
//!
//! Multiple-choice items ask for the successor of a syllable or for its
//! color. The fixture tokenizer turns every lexicon word, bare or preceded
//! by a space or newline, into a single token.

use std::fs;
use std::io;
use std::path::Path;

use crate::evalmc::{build_prompt, render, McqItem, PromptFormat, PromptTemplate, LETTERS};
use crate::rng::{Cursor, Stream};
use crate::tok::Tokenizer;

pub const SYLLABLES: [&str; 20] = [
    "ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du", "ka", "ke", "ki", "ko", "ku", "ma", "me", "mi", "mo",
    "mu",
];
pub const COLORS: [&str; 5] = ["red", "blue", "green", "black", "white"];
pub const SKILLS: [&str; 2] = ["order", "color"];

const FUNCTION_WORDS: [&str; 9] = ["is", ".", "?", "what", "follows", "color", "comes", "after", "then"];
const EXTRA_TOKENS: [&str; 3] = ["<unk>", "<bos>", "<eos>"];

fn color_index(syllable: usize) -> usize {
    (Stream::new(0, "synth-colors").bits(syllable as u64) % COLORS.len() as u64) as usize
}

pub fn color_of(syllable: &str) -> Option<&'static str> {
    SYLLABLES
        .iter()
        .position(|&s| s == syllable)
        .map(|i| COLORS[color_index(i)])
}

pub fn successor(syllable: &str) -> Option<&'static str> {
    SYLLABLES
        .iter()
        .position(|&s| s == syllable)
        .map(|i| SYLLABLES[(i + 1) % SYLLABLES.len()])
}

fn order_doc(c: &mut Cursor) -> String {
    let start = c.below(SYLLABLES.len());
    let len = 6 + c.below(5);
    (0..len)
        .map(|i| SYLLABLES[(start + i) % SYLLABLES.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

fn color_doc(c: &mut Cursor) -> String {
    let facts = 3 + c.below(3);
    (0..facts)
        .map(|_| {
            let s = c.below(SYLLABLES.len());
            format!("{} is {} .", SYLLABLES[s], COLORS[color_index(s)])
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Documents for one skill.
pub fn skill_corpus(skill: &str, n: usize, seed: u64) -> Vec<String> {
    let mut c = Stream::new(seed, "synth-corpus").child(skill).cursor();
    (0..n)
        .map(|_| match skill {
            "order" => order_doc(&mut c),
            _ => color_doc(&mut c),
        })
        .collect()
}

/// Alternating documents from both skills.
pub fn two_skill_corpus(n: usize, seed: u64) -> Vec<String> {
    let order = skill_corpus("order", n.div_ceil(2), seed);
    let color = skill_corpus("color", n / 2, seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(if i % 2 == 0 {
            order[i / 2].clone()
        } else {
            color[i / 2].clone()
        });
    }
    out
}

fn mcq_item(skill: &str, c: &mut Cursor, index: usize) -> McqItem {
    let s = c.below(SYLLABLES.len());
    let (question, correct, pool): (String, &str, Vec<&str>) = match skill {
        "order" => (
            format!("what follows {} ?", SYLLABLES[s]),
            SYLLABLES[(s + 1) % SYLLABLES.len()],
            SYLLABLES.to_vec(),
        ),
        _ => (
            format!("what color is {} ?", SYLLABLES[s]),
            COLORS[color_index(s)],
            COLORS.to_vec(),
        ),
    };
    let mut distractors: Vec<&str> = pool.into_iter().filter(|&p| p != correct).collect();
    c.shuffle(&mut distractors);
    let answer = c.below(4);
    let mut options: Vec<String> = distractors[..3].iter().map(|s| s.to_string()).collect();
    options.insert(answer, correct.to_string());
    McqItem {
        question,
        options: options.try_into().expect("four options"),
        answer,
        subject: Some(skill.to_string()),
        id: Some(format!("{skill}-{index}")),
    }
}

/// Items drawn from `skills` in rotation.
pub fn mcq_items(skills: &[&str], n: usize, seed: u64) -> Vec<McqItem> {
    let mut c = Stream::new(seed, "synth-mcq").cursor();
    (0..n).map(|i| mcq_item(skills[i % skills.len()], &mut c, i)).collect()
}

/// Balanced two-skill benchmark.
pub fn mcq_suite(n: usize, seed: u64) -> Vec<McqItem> {
    mcq_items(&SKILLS, n, seed)
}

/// Prompt text and target completion (`" L"`) for instruction tuning.
pub fn sft_pairs(items: &[McqItem], tmpl: &PromptTemplate) -> Vec<(String, String)> {
    items
        .iter()
        .map(|it| (render(&build_prompt(it, tmpl)), format!(" {}", tmpl.letters[it.answer])))
        .collect()
}

/// Random whitespace-separated words over a small alphabet, with irregular
/// spacing and occasional empty documents.
pub fn random_documents(n: usize, seed: u64) -> Vec<String> {
    const ALPHABET: [char; 8] = ['a', 'b', 'c', 'd', 'é', 'ж', 'ӯ', '.'];
    const SPACES: [&str; 4] = [" ", "  ", "\t", "\n"];
    let mut c = Stream::new(seed, "synth-random-docs").cursor();
    (0..n)
        .map(|_| {
            let words = c.below(12);
            let mut doc = String::new();
            if c.below(4) == 0 {
                doc.push(' ');
            }
            for w in 0..words {
                if w > 0 {
                    doc.push_str(SPACES[c.below(SPACES.len())]);
                }
                for _ in 0..1 + c.below(7) {
                    doc.push(ALPHABET[c.below(ALPHABET.len())]);
                }
            }
            doc
        })
        .collect()
}

/// Token streams of a two-symbol grammar: `0` is always followed by `1`
/// and `1` by `0`, from a random start symbol.
pub fn two_symbol_grammar(n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut c = Stream::new(seed, "synth-grammar").cursor();
    (0..n)
        .map(|_| {
            let start = c.below(2) as u32;
            (0..len as u32).map(|i| (start + i) % 2).collect()
        })
        .collect()
}

/// Words the fixture tokenizer knows, in a fixed order.
pub fn lexicon() -> Vec<String> {
    let tmpl = PromptTemplate::default();
    let mut words: Vec<String> = Vec::new();
    let mut add = |w: &str| {
        if !words.iter().any(|x| x == w) {
            words.push(w.to_string());
        }
    };
    SYLLABLES.iter().for_each(|w| add(w));
    COLORS.iter().for_each(|w| add(w));
    FUNCTION_WORDS.iter().for_each(|w| add(w));
    add(&format!("{}:", tmpl.question_label));
    add(&format!("{}:", tmpl.answer_label));
    for l in LETTERS {
        add(l);
        add(&format!("{l}."));
    }
    for w in tmpl.system_text.split_whitespace() {
        add(w);
    }
    for role in ["system", "user", "assistant"] {
        add(&format!("<|{role}|>"));
    }
    words
}

/// BPE that maps each lexicon word, bare or after a space or newline, to
/// one token.
pub fn fixture_tokenizer() -> Tokenizer {
    let forms: Vec<String> = lexicon()
        .iter()
        .flat_map(|w| [w.clone(), format!(" {w}"), format!("\n{w}")])
        .collect();
    Tokenizer::from_pieces(forms.iter().map(String::as_str), &EXTRA_TOKENS)
}

/// Sizes of the generated fixture.
#[derive(Debug, Clone, Copy)]
pub struct FixtureSpec {
    pub seed: u64,
    pub cpt_docs: usize,
    pub sft_items: usize,
    pub bench_items: usize,
    pub calib_docs: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 2024,
            cpt_docs: 400,
            sft_items: 200,
            bench_items: 100,
            calib_docs: 128,
        }
    }
}

/// Write `vocab.txt`, `merges.txt`, `cpt.txt` (one document per line),
/// `sft.jsonl` (`prompt`/`response`), `bench.jsonl` and `calib.txt`.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let tok = fixture_tokenizer();
    tok.write_files(&dir.join("vocab.txt"), &dir.join("merges.txt"))?;
    let lines = |docs: Vec<String>| docs.join("\n") + "\n";
    fs::write(dir.join("cpt.txt"), lines(two_skill_corpus(spec.cpt_docs, spec.seed)))?;
    fs::write(
        dir.join("calib.txt"),
        lines(two_skill_corpus(spec.calib_docs, spec.seed + 1)),
    )?;
    let tmpl = PromptTemplate {
        format: PromptFormat::Raw,
        ..PromptTemplate::default()
    };
    let sft: Vec<String> = sft_pairs(&mcq_suite(spec.sft_items, spec.seed + 2), &tmpl)
        .into_iter()
        .map(|(p, r)| serde_json::json!({"prompt": p, "response": r}).to_string())
        .collect();
    fs::write(dir.join("sft.jsonl"), lines(sft))?;
    let bench: Vec<String> = mcq_suite(spec.bench_items, spec.seed + 3)
        .iter()
        .map(McqItem::to_json_line)
        .collect();
    fs::write(dir.join("bench.jsonl"), lines(bench))
}
