//! Character-level and BPE tokenizers, corpus statistics and fertility.
//!
//! BPE pre-tokenization splits text into pieces: each maximal run of
//! non-whitespace characters together with the single whitespace character
//! immediately before it (so `"ab ab"` gives `"ab"` and `" ab"`). Any other
//! whitespace character forms a piece of its own. Inside a piece the initial
//! symbols are single characters, and the lowest-ranked applicable merge is
//! applied to the leftmost matching pair until no merge applies.
//!
//! A character with no vocabulary entry becomes its UTF-8 bytes as `<0xNN>`
//! tokens when the vocabulary has them, otherwise the `<unk>` token, and is
//! dropped when neither exists.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

pub const UNK: &str = "<unk>";

/// Tokens treated as special when present in a loaded vocabulary, in
/// addition to any `<|...|>` token.
pub const DEFAULT_SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<s>", "</s>"];

#[derive(Debug, Error)]
pub enum TokError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("vocab line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("merges line {line}: expected \"left right\", got {text:?}")]
    MalformedMerge { line: usize, text: String },
    #[error("merges line {line}: {what} {token:?} is not in the vocabulary")]
    MergeNotInVocab {
        line: usize,
        what: &'static str,
        token: String,
    },
    #[error("{path}: line {line}: {reason}")]
    Corpus { path: PathBuf, line: usize, reason: String },
    #[error("corpus has no words; fertility is undefined")]
    NoWords,
}

pub type Result<T> = std::result::Result<T, TokError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokKind {
    CharLevel,
    Bpe,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    kind: TokKind,
    tokens: Vec<String>,
    vocab: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    specials: BTreeSet<u32>,
    unk: Option<u32>,
    byte_fallback: bool,
}

impl Tokenizer {
    /// One token per listed character, with `<unk>` at id 0.
    pub fn char_level(alphabet: impl IntoIterator<Item = char>) -> Self {
        let mut tokens = vec![UNK.to_string()];
        let mut seen = BTreeSet::new();
        for c in alphabet {
            if seen.insert(c) {
                tokens.push(c.to_string());
            }
        }
        Self::build(TokKind::CharLevel, tokens, Vec::new(), BTreeSet::new()).expect("char vocab is consistent")
    }

    /// BPE over `tokens` (id = position) with merges in priority order.
    pub fn bpe(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let specials = default_specials(&tokens);
        Self::build(TokKind::Bpe, tokens, merges, specials)
    }

    /// BPE whose merges assemble every given word, bare and with a leading
    /// space, into one token.
    pub fn word_level<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = words.into_iter().collect();
        let forms: Vec<String> = words.iter().flat_map(|w| [w.to_string(), format!(" {w}")]).collect();
        Self::from_pieces(forms.iter().map(String::as_str), &[])
    }

    /// BPE whose merges turn each given piece into a single token. `extra`
    /// tokens (for example `<unk>` or specials) come first in the vocabulary.
    pub fn from_pieces<'a>(pieces: impl IntoIterator<Item = &'a str>, extra: &[&str]) -> Self {
        let mut tokens: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
        let mut merges: Vec<(String, String)> = Vec::new();
        let mut ranks = HashMap::new();
        for piece in pieces {
            for c in piece.chars() {
                if known.insert(c.to_string()) {
                    tokens.push(c.to_string());
                }
            }
            // A new rule ranks below every existing one, so it only fires
            // where earlier pieces were already fully merged.
            loop {
                let symbols = apply_merges(piece, &ranks);
                if symbols.len() <= 1 {
                    break;
                }
                let (l, r) = (symbols[0].clone(), symbols[1].clone());
                let joined = format!("{l}{r}");
                if known.insert(joined.clone()) {
                    tokens.push(joined);
                }
                ranks.insert((l.clone(), r.clone()), merges.len());
                merges.push((l, r));
            }
        }
        Self::bpe(tokens, merges).expect("piece vocab is consistent")
    }

    fn build(
        kind: TokKind,
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
        specials: BTreeSet<u32>,
    ) -> Result<Self> {
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if vocab.insert(t.clone(), i as u32).is_some() {
                return Err(TokError::DuplicateToken {
                    line: i + 1,
                    token: t.clone(),
                });
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, (l, r)) in merges.iter().enumerate() {
            for (what, tok) in [("left", l.clone()), ("right", r.clone()), ("output", format!("{l}{r}"))] {
                if !vocab.contains_key(&tok) {
                    return Err(TokError::MergeNotInVocab {
                        line: i + 1,
                        what,
                        token: tok,
                    });
                }
            }
            ranks.entry((l.clone(), r.clone())).or_insert(i);
        }
        let unk = vocab.get(UNK).copied();
        let byte_fallback = (0..=255u8).any(|b| vocab.contains_key(&byte_token(b)));
        Ok(Self {
            kind,
            tokens,
            vocab,
            merges,
            ranks,
            specials,
            unk,
            byte_fallback,
        })
    }

    /// Load a vocabulary (one token per line, id = line index) and a merges
    /// file (`left right` per line, priority = line order). Lines use the
    /// escapes `\n`, `\t`, `\r`, `\s` (space) and `\\`.
    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self> {
        let tokens: Vec<String> = read_text(vocab)?.lines().map(unescape).collect();
        let mut rules = Vec::new();
        for (i, line) in read_text(merges)?.lines().enumerate() {
            if line.is_empty() || line.starts_with("#version") {
                continue;
            }
            match line.split_once(' ') {
                Some((l, r)) if !l.is_empty() && !r.is_empty() && !r.contains(' ') => {
                    rules.push((unescape(l), unescape(r)))
                }
                _ => {
                    return Err(TokError::MalformedMerge {
                        line: i + 1,
                        text: line.to_string(),
                    })
                }
            }
        }
        Self::bpe(tokens, rules)
    }

    /// Write the vocabulary and merges in the format [`from_files`] reads.
    pub fn write_files(&self, vocab: &Path, merges: &Path) -> std::io::Result<()> {
        let mut v = String::new();
        for t in &self.tokens {
            v.push_str(&escape(t));
            v.push('\n');
        }
        fs::write(vocab, v)?;
        let mut m = String::new();
        for (l, r) in &self.merges {
            m.push_str(&format!("{} {}\n", escape(l), escape(r)));
        }
        fs::write(merges, m)
    }

    pub fn kind(&self) -> TokKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn specials(&self) -> &BTreeSet<u32> {
        &self.specials
    }

    pub fn set_specials(&mut self, specials: BTreeSet<u32>) {
        self.specials = specials;
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.specials.contains(&id)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        match self.kind {
            TokKind::CharLevel => {
                let mut buf = [0u8; 4];
                for c in text.chars() {
                    match self.vocab.get(c.encode_utf8(&mut buf) as &str) {
                        Some(&id) => out.push(id),
                        None => self.push_unknown(c, &mut out),
                    }
                }
            }
            TokKind::Bpe => {
                for piece in pretokenize(text) {
                    self.encode_piece(piece, &mut out);
                }
            }
        }
        out
    }

    /// Concatenated token strings; byte-fallback tokens are reassembled.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            let Some(t) = self.token(id) else { continue };
            match parse_byte_token(t) {
                Some(b) => bytes.push(b),
                None => bytes.extend_from_slice(t.as_bytes()),
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn push_unknown(&self, c: char, out: &mut Vec<u32>) {
        if self.byte_fallback {
            let mut buf = [0u8; 4];
            let ids: Option<Vec<u32>> = c
                .encode_utf8(&mut buf)
                .bytes()
                .map(|b| self.vocab.get(&byte_token(b)).copied())
                .collect();
            if let Some(ids) = ids {
                out.extend(ids);
                return;
            }
        }
        if let Some(unk) = self.unk {
            out.push(unk);
        }
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        for s in apply_merges(piece, &self.ranks) {
            match self.vocab.get(&s) {
                Some(&id) => out.push(id),
                None => {
                    for c in s.chars() {
                        self.push_unknown(c, out);
                    }
                }
            }
        }
    }
}

/// Merge the characters of `piece`, always applying the lowest-ranked rule
/// at its leftmost position.
fn apply_merges(piece: &str, ranks: &HashMap<(String, String), usize>) -> Vec<String> {
    let mut symbols: Vec<String> = piece.chars().map(String::from).collect();
    loop {
        let best = symbols
            .windows(2)
            .enumerate()
            .filter_map(|(i, w)| ranks.get(&(w[0].clone(), w[1].clone())).map(|&rank| (rank, i)))
            .min();
        let Some((_, i)) = best else { break };
        let right = symbols.remove(i + 1);
        symbols[i].push_str(&right);
    }
    symbols
}

fn default_specials(tokens: &[String]) -> BTreeSet<u32> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            DEFAULT_SPECIALS.contains(&t.as_str()) || (t.starts_with("<|") && t.ends_with("|>") && t.len() > 4)
        })
        .map(|(i, _)| i as u32)
        .collect()
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn parse_byte_token(t: &str) -> Option<u8> {
    let hex = t.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

/// Split text into BPE pieces (see module docs).
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let idx: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < idx.len() {
        let (start, c) = idx[i];
        let mut j = i + 1;
        if c.is_whitespace() {
            // Attach this whitespace to a following word, if one starts next.
            if j < idx.len() && !idx[j].1.is_whitespace() {
                while j < idx.len() && !idx[j].1.is_whitespace() {
                    j += 1;
                }
            }
        } else {
            while j < idx.len() && !idx[j].1.is_whitespace() {
                j += 1;
            }
        }
        let end = idx.get(j).map_or(text.len(), |&(p, _)| p);
        pieces.push(&text[start..end]);
        i = j;
    }
    pieces
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            ' ' => out.push_str("\\s"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('s') => out.push(' '),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CorpusStats {
    pub characters: u64,
    pub words: u64,
    pub avg_word_len: f64,
    pub samples: u64,
}

pub fn corpus_stats<S: AsRef<str> + Sync>(corpus: &[S]) -> CorpusStats {
    let (characters, words, word_chars) = corpus
        .par_iter()
        .map(|doc| {
            let doc = doc.as_ref();
            let mut words = 0u64;
            let mut word_chars = 0u64;
            for w in doc.split_whitespace() {
                words += 1;
                word_chars += w.chars().count() as u64;
            }
            (doc.chars().count() as u64, words, word_chars)
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    CorpusStats {
        characters,
        words,
        avg_word_len: if words == 0 {
            0.0
        } else {
            word_chars as f64 / words as f64
        },
        samples: corpus.len() as u64,
    }
}

/// Non-special tokens and whitespace words summed over the corpus.
pub fn token_word_counts<S: AsRef<str> + Sync>(tok: &Tokenizer, corpus: &[S]) -> (u64, u64) {
    corpus
        .par_iter()
        .map(|doc| {
            let doc = doc.as_ref();
            let tokens = tok.encode(doc).into_iter().filter(|&id| !tok.is_special(id)).count();
            (tokens as u64, doc.split_whitespace().count() as u64)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
}

/// Tokens per whitespace word, excluding special tokens.
pub fn fertility<S: AsRef<str> + Sync>(tok: &Tokenizer, corpus: &[S]) -> Result<f64> {
    let (tokens, words) = token_word_counts(tok, corpus);
    if words == 0 {
        return Err(TokError::NoWords);
    }
    Ok(tokens as f64 / words as f64)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| TokError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Documents from a file or directory. `.jsonl` files contribute the
/// `"text"` field of each line; other files contribute one document per
/// non-empty line. Directories are read in file-name order.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let io_err = |source| TokError::Io {
        path: path.to_path_buf(),
        source,
    };
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut docs = Vec::new();
        for f in files {
            docs.extend(load_corpus(&f)?);
        }
        return Ok(docs);
    }
    let text = read_text(path)?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        let mut docs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let corpus_err = |reason: String| TokError::Corpus {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| corpus_err(e.to_string()))?;
            let t = v
                .get("text")
                .and_then(|t| t.as_str())
                .ok_or_else(|| corpus_err("missing string field \"text\"".into()))?;
            docs.push(t.to_string());
        }
        Ok(docs)
    } else {
        Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ab_bpe() -> Tokenizer {
        Tokenizer::bpe(
            vec!["a".into(), "b".into(), "ab".into()],
            vec![("a".into(), "b".into())],
        )
        .unwrap()
    }

    #[test]
    fn char_level_examples() {
        let tok = Tokenizer::char_level("abcd ".chars());
        assert_eq!(tok.encode("ab cd").len(), 5);
        assert_eq!(tok.encode(""), Vec::<u32>::new());
        assert_eq!(tok.encode("z"), vec![0]);
        assert_eq!(fertility(&tok, &["ab cd"]).unwrap(), 2.5);
    }

    #[test]
    fn bpe_single_rule_trace() {
        let tok = ab_bpe();
        assert_eq!(tok.encode("ab"), vec![2]);
        assert_eq!(tok.encode("ab ab"), vec![2, 2]);
        assert_eq!(fertility(&tok, &["ab ab"]).unwrap(), 1.0);
    }

    #[test]
    fn merge_priority_is_line_order() {
        let tokens: Vec<String> = ["a", "b", "c", "ab", "bc"].iter().map(|s| s.to_string()).collect();
        let first_bc =
            Tokenizer::bpe(tokens.clone(), vec![("b".into(), "c".into()), ("a".into(), "b".into())]).unwrap();
        assert_eq!(first_bc.encode("abc"), vec![0, 4]);
        let first_ab = Tokenizer::bpe(tokens, vec![("a".into(), "b".into()), ("b".into(), "c".into())]).unwrap();
        assert_eq!(first_ab.encode("abc"), vec![3, 2]);
    }

    #[test]
    fn pretokenize_keeps_leading_whitespace() {
        assert_eq!(pretokenize("ab ab"), vec!["ab", " ab"]);
        assert_eq!(pretokenize("  x\ny "), vec![" ", " x", "\ny", " "]);
        assert_eq!(pretokenize(""), Vec::<&str>::new());
    }

    #[test]
    fn byte_fallback_and_unk() {
        let mut tokens: Vec<String> = vec!["a".into()];
        tokens.extend((0..=255u8).map(byte_token));
        let tok = Tokenizer::bpe(tokens, vec![]).unwrap();
        let ids = tok.encode("aé");
        assert_eq!(ids.len(), 3);
        assert_eq!(tok.decode(&ids), "aé");

        let tok = Tokenizer::bpe(vec!["<unk>".into(), "a".into()], vec![]).unwrap();
        assert_eq!(tok.encode("ax"), vec![1, 0]);
    }

    #[test]
    fn merge_output_must_be_in_vocab() {
        let err = Tokenizer::bpe(vec!["a".into(), "b".into()], vec![("a".into(), "b".into())]);
        assert!(matches!(err, Err(TokError::MergeNotInVocab { what: "output", .. })));
    }

    #[test]
    fn specials_are_excluded_from_fertility() {
        let mut tok = ab_bpe();
        tok.set_specials([2].into());
        assert_eq!(fertility(&tok, &["ab a"]).unwrap(), 0.5);
    }

    #[test]
    fn corpus_stats_examples() {
        let s = corpus_stats(&["ab cd"]);
        assert_eq!((s.characters, s.words, s.avg_word_len, s.samples), (5, 2, 2.0, 1));
        let s = corpus_stats(&["", "x"]);
        assert_eq!((s.characters, s.words, s.avg_word_len), (1, 1, 1.0));
        assert_eq!(corpus_stats::<&str>(&[]), CorpusStats::default());
        assert!(matches!(fertility(&ab_bpe(), &[" "]), Err(TokError::NoWords)));
    }

    #[test]
    fn corpus_stats_match_reference_counter() {
        let docs = crate::synth::random_documents(1000, 7);
        let s = corpus_stats(&docs);
        // One sequential pass with a hand-rolled word state machine.
        let (mut chars, mut words, mut word_chars) = (0u64, 0u64, 0u64);
        for d in &docs {
            let mut in_word = false;
            for c in d.chars() {
                chars += 1;
                if c.is_whitespace() {
                    in_word = false;
                } else {
                    if !in_word {
                        words += 1;
                    }
                    in_word = true;
                    word_chars += 1;
                }
            }
        }
        assert_eq!((s.characters, s.words), (chars, words));
        assert_eq!(s.avg_word_len, word_chars as f64 / words as f64);
        assert_eq!(s.samples, 1000);
    }

    #[test]
    fn escape_roundtrip_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let tokens: Vec<String> = ["a", " ", "\n", "\\", " a", "\na"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let merges = vec![(" ".to_string(), "a".to_string()), ("\n".to_string(), "a".to_string())];
        let tok = Tokenizer::bpe(tokens, merges).unwrap();
        let (v, m) = (dir.path().join("v.txt"), dir.path().join("m.txt"));
        tok.write_files(&v, &m).unwrap();
        let back = Tokenizer::from_files(&v, &m).unwrap();
        for text in ["a a\na", " \\ "] {
            assert_eq!(back.encode(text), tok.encode(text));
        }
        assert_eq!(back.encode(" a"), vec![4]);
    }

    #[test]
    fn malformed_merge_line() {
        let dir = tempfile::tempdir().unwrap();
        let (v, m) = (dir.path().join("v.txt"), dir.path().join("m.txt"));
        fs::write(&v, "a\nb\nab\n").unwrap();
        fs::write(&m, "a b\nab\n").unwrap();
        assert!(matches!(
            Tokenizer::from_files(&v, &m),
            Err(TokError::MalformedMerge { line: 2, .. })
        ));
    }

    #[test]
    fn jsonl_and_text_corpora() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.jsonl"), "{\"text\": \"x y\"}\n\n{\"text\": \"z\"}\n").unwrap();
        fs::write(dir.path().join("b.txt"), "one\n\ntwo three\n").unwrap();
        let docs = load_corpus(dir.path()).unwrap();
        assert_eq!(docs, vec!["x y", "z", "one", "two three"]);
        fs::write(dir.path().join("bad.jsonl"), "{\"t\": 1}\n").unwrap();
        assert!(matches!(
            load_corpus(&dir.path().join("bad.jsonl")),
            Err(TokError::Corpus { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn word_level_fertility_is_one(words in proptest::collection::vec("[a-e]{1,5}", 1..12), splits in proptest::collection::vec(1usize..4, 1..6)) {
            let tok = Tokenizer::word_level(words.iter().map(String::as_str));
            let mut docs = Vec::new();
            let mut it = words.iter().cycle();
            for n in splits {
                let doc: Vec<&str> = (0..n).map(|_| it.next().unwrap().as_str()).collect();
                docs.push(doc.join(" "));
            }
            prop_assert_eq!(fertility(&tok, &docs).unwrap(), 1.0);
        }

        #[test]
        fn char_level_fertility_is_chars_over_words(docs in proptest::collection::vec("[ab ]{0,12}", 1..6)) {
            let tok = Tokenizer::char_level("ab ".chars());
            let chars: usize = docs.iter().map(|d| d.chars().count()).sum();
            let words: usize = docs.iter().map(|d| d.split_whitespace().count()).sum();
            prop_assume!(words > 0);
            prop_assert_eq!(fertility(&tok, &docs).unwrap(), chars as f64 / words as f64);
        }

        #[test]
        fn encode_is_deterministic(text in "[ab \n]{0,20}") {
            let tok = ab_bpe();
            prop_assert_eq!(tok.encode(&text), tok.encode(&text));
        }

        #[test]
        fn fertility_at_least_one_with_full_coverage(docs in proptest::collection::vec("[ab ]{0,12}", 1..6)) {
            let tok = Tokenizer::char_level("ab ".chars());
            let words: usize = docs.iter().map(|d| d.split_whitespace().count()).sum();
            prop_assume!(words > 0);
            prop_assert!(fertility(&tok, &docs).unwrap() >= 1.0);
        }
    }
}
