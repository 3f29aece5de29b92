//! Parallel-corpus preparation: tokenization, frequency-ranked vocabularies,
//! id encoding and `(F, E)`-bucketed minibatches.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const DEFAULT_VOCAB_SIZE: usize = 80_000;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_MAX_LEN: usize = 50;

/// Rendering of the not-found id in decoded output.
pub const NF_TOKEN: &str = "NF";
/// Rendering of the end-of-sentence id in decoded output.
pub const EOS_TOKEN: &str = "EOS";

/// French elided forms that are split off at the apostrophe and keep it.
const ELISIONS: &[&str] = &[
    "c", "d", "j", "l", "m", "n", "s", "t", "qu", "jusqu", "lorsqu", "puisqu", "quoiqu",
];

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Splits a line into lowercase word and punctuation tokens.
///
/// Punctuation characters become tokens of their own, except `-`, `.` and `,`
/// between two alphanumerics (`peut-être`, `3.5`, `1,000`). French elisions
/// (`l'`, `d'`, `qu'`, ...) are split after the apostrophe, which stays with
/// the elided word; other word-internal apostrophes (`aujourd'hui`) are kept.
/// Typographic apostrophes are normalized to `'`.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in line.split_whitespace() {
        let chars: Vec<char> = chunk.chars().flat_map(char::to_lowercase).collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let prev_alnum = i > 0 && chars[i - 1].is_alphanumeric();
            let next_alnum = chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if c.is_alphanumeric() {
                word.push(c);
            } else if is_apostrophe(c) && prev_alnum && next_alnum {
                if ELISIONS.contains(&word.as_str()) {
                    word.push('\'');
                    tokens.push(std::mem::take(&mut word));
                } else {
                    word.push('\'');
                }
            } else if matches!(c, '-' | '.' | ',') && prev_alnum && next_alnum {
                word.push(c);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(if is_apostrophe(c) { "'".into() } else { c.to_string() });
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Which side of the parallel corpus a sequence belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Source,
    Target,
}

/// Frequency-ranked token list. Ranked tokens take ids `0..len`, followed by
/// the not-found id and the end-of-sentence id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    size_limit: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens already in rank order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid token {tok:?} at rank {i}")));
            }
            if tok.to_lowercase() != *tok {
                return Err(Error::Vocabulary(format!("token {tok:?} is not lowercase")));
            }
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {tok:?}")));
            }
        }
        let size_limit = tokens.len();
        Ok(Vocabulary {
            tokens,
            index,
            size_limit,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// The limit the vocabulary was built with (at least the ranked count).
    pub fn size_limit(&self) -> usize {
        self.size_limit
    }

    pub fn ranked_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn nf_id(&self) -> TokenId {
        self.tokens.len() as TokenId
    }

    pub fn eos_id(&self) -> TokenId {
        self.tokens.len() as TokenId + 1
    }

    /// Total number of ids, including not-found and end-of-sentence.
    pub fn id_count(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(self.nf_id())
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        match id as usize {
            i if i < self.tokens.len() => Some(&self.tokens[i]),
            i if i == self.tokens.len() => Some(NF_TOKEN),
            i if i == self.tokens.len() + 1 => Some(EOS_TOKEN),
            _ => None,
        }
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id as usize) < self.id_count()
    }

    /// Reads a vocabulary file: one token per line, in rank order.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut tokens = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::file(path, e))?;
            let line = line.trim_end_matches('\r');
            if !line.is_empty() {
                tokens.push(line.to_owned());
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for tok in &self.tokens {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }
}

/// Counts tokens over `lines` and keeps the `size_limit` most frequent,
/// ordered by descending count with ties broken lexicographically.
pub fn build_vocabulary<I, S>(lines: I, size_limit: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if size_limit == 0 {
        return Err(Error::Config("vocabulary size limit must be at least 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for line in lines {
        for tok in tokenize(line.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(size_limit);
    let mut vocab = Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())?;
    vocab.size_limit = size_limit;
    Ok(vocab)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub side: Side,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, side: Side) -> Self {
        TokenSequence { ids, side }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        match self.ids.iter().find(|&&id| !vocab.contains_id(id)) {
            Some(&id) => Err(Error::InvalidId {
                id,
                len: vocab.id_count(),
            }),
            None => Ok(()),
        }
    }
}

/// Maps a line to ids, sending out-of-vocabulary tokens to the not-found id
/// and appending the end-of-sentence id.
pub fn encode(line: &str, vocab: &Vocabulary, side: Side) -> TokenSequence {
    let mut ids: Vec<TokenId> = tokenize(line).iter().map(|t| vocab.id(t)).collect();
    ids.push(vocab.eos_id());
    TokenSequence { ids, side }
}

/// Maps ids back to token strings (`NF` / `EOS` for the reserved ids).
pub fn decode<'v>(seq: &TokenSequence, vocab: &'v Vocabulary) -> Result<Vec<&'v str>> {
    seq.ids
        .iter()
        .map(|&id| {
            vocab.token(id).ok_or(Error::InvalidId {
                id,
                len: vocab.id_count(),
            })
        })
        .collect()
}

/// Renders emitted ids as a sentence: stops at end-of-sentence, shows the
/// not-found id as `NF`.
pub fn render(ids: &[TokenId], vocab: &Vocabulary) -> String {
    let words: Vec<&str> = ids
        .iter()
        .take_while(|&&id| id != vocab.eos_id())
        .map(|&id| vocab.token(id).unwrap_or(NF_TOKEN))
        .collect();
    words.join(" ")
}

pub type SequencePair = (TokenSequence, TokenSequence);

/// A minibatch in which every source has length `source_len` and every target
/// has length `target_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pairs: Vec<SequencePair>,
    source_len: usize,
    target_len: usize,
}

impl Batch {
    pub fn new(pairs: Vec<SequencePair>) -> Result<Self> {
        let (source_len, target_len) = match pairs.first() {
            Some((s, t)) => (s.len(), t.len()),
            None => return Err(Error::EmptyInput("batch has no pairs")),
        };
        if source_len == 0 || target_len == 0 {
            return Err(Error::EmptyInput("batch sequences must be non-empty"));
        }
        for (s, t) in &pairs {
            if s.len() != source_len || t.len() != target_len {
                return Err(Error::dim(
                    "Batch::new",
                    format!("({source_len}, {target_len})"),
                    format!("({}, {})", s.len(), t.len()),
                ));
            }
        }
        Ok(Batch {
            pairs,
            source_len,
            target_len,
        })
    }

    pub fn pairs(&self) -> &[SequencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }
}

/// Result of [`make_batches`] along with what was discarded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batching {
    pub batches: Vec<Batch>,
    /// Pairs whose source or target exceeded the length cap.
    pub over_length: usize,
    /// Pairs left over after cutting full batches from their `(F, E)` group.
    pub leftover: usize,
}

impl fmt::Display for Batching {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} batches, {} pairs dropped over length, {} pairs dropped in undersized groups",
            self.batches.len(),
            self.over_length,
            self.leftover
        )
    }
}

/// Groups pairs by exact `(F, E)` length and cuts each group into full
/// batches of `batch_size`. Pairs longer than `max_len` on either side are
/// discarded first; leftovers smaller than a full batch are dropped.
///
/// Groups are emitted in ascending `(F, E)` order and keep input order.
pub fn make_batches<I>(pairs: I, batch_size: usize, max_len: usize) -> Result<Batching>
where
    I: IntoIterator<Item = SequencePair>,
{
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<SequencePair>> = BTreeMap::new();
    let mut out = Batching::default();
    for (src, tgt) in pairs {
        if src.len() > max_len || tgt.len() > max_len {
            out.over_length += 1;
            continue;
        }
        if src.is_empty() || tgt.is_empty() {
            out.leftover += 1;
            continue;
        }
        groups.entry((src.len(), tgt.len())).or_default().push((src, tgt));
    }
    for (_, group) in groups {
        let full = group.len() / batch_size;
        out.leftover += group.len() - full * batch_size;
        let mut it = group.into_iter();
        for _ in 0..full {
            out.batches.push(Batch::new(it.by_ref().take(batch_size).collect())?);
        }
    }
    Ok(out)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| Error::file(path, e)))
        .collect()
}

/// Reads a sentence-aligned corpus: line `k` of `source` pairs with line `k`
/// of `target`.
pub fn read_parallel(source: &Path, target: &Path) -> Result<Vec<(String, String)>> {
    let src = read_lines(source)?;
    let tgt = read_lines(target)?;
    if src.len() != tgt.len() {
        return Err(Error::dim(
            "read_parallel (line counts)",
            src.len(),
            tgt.len(),
        ));
    }
    Ok(src.into_iter().zip(tgt).collect())
}

/// Reads one file of sentences, one per line.
pub fn read_sentences(path: &Path) -> Result<Vec<String>> {
    read_lines(path)
}

pub fn encode_parallel(
    lines: &[(String, String)],
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
) -> Vec<SequencePair> {
    lines
        .iter()
        .map(|(s, t)| {
            (
                encode(s, source_vocab, Side::Source),
                encode(t, target_vocab, Side::Target),
            )
        })
        .collect()
}

fn join_ids(ids: &[TokenId]) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Writes batches as tab-separated lines `batch-index \t source ids \t target ids`.
pub fn write_batches<W: Write>(batches: &[Batch], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    for (i, batch) in batches.iter().enumerate() {
        for (s, t) in batch.pairs() {
            writeln!(w, "{i}\t{}\t{}", join_ids(&s.ids), join_ids(&t.ids))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the format produced by [`write_batches`].
pub fn read_batches(path: &Path) -> Result<Vec<Batch>> {
    let label = path.display().to_string();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: label.clone(),
        line,
        message,
    };
    let mut batches = Vec::new();
    let mut current: Option<(usize, Vec<SequencePair>)> = None;
    for (n, line) in read_lines(path)?.iter().enumerate() {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(lineno, format!("expected 3 fields, found {}", fields.len())));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad batch index {:?}", fields[0])))?;
        let ids = |field: &str, side| -> Result<TokenSequence> {
            let ids = field
                .split_whitespace()
                .map(|x| x.parse::<TokenId>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(lineno, e.to_string()))?;
            Ok(TokenSequence::new(ids, side))
        };
        let pair = (ids(fields[1], Side::Source)?, ids(fields[2], Side::Target)?);
        match &mut current {
            Some((i, pairs)) if *i == index => pairs.push(pair),
            _ => {
                if let Some((_, pairs)) = current.take() {
                    batches.push(Batch::new(pairs).map_err(|e| parse_err(lineno, e.to_string()))?);
                }
                current = Some((index, vec![pair]));
            }
        }
    }
    if let Some((_, pairs)) = current {
        batches.push(Batch::new(pairs)?);
    }
    Ok(batches)
}
