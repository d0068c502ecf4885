//! Instances, lexicons, static embeddings and dataset utilities.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const NODE0: &str = "<node0>";

/// Label order is fixed: positive = 0, neutral = 1, negative = 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Neutral => 1,
            Polarity::Negative => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Polarity> {
        Polarity::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "neutral" => Ok(Polarity::Neutral),
            "negative" => Ok(Polarity::Negative),
            other => Err(Error::Invalid(format!("unknown polarity `{other}`"))),
        }
    }
}

/// One classification unit: a tokenized sentence with one aspect span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    /// Half-open token range `[start, end)`.
    pub aspect_span: (usize, usize),
    pub polarity: Polarity,
    /// External parse heads, 0-based, `-1` marks the parse root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_heads: Option<Vec<i64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    tokens: Vec<String>,
    aspect_span: (usize, usize),
    polarity: String,
    #[serde(default)]
    parse_heads: Option<Vec<i64>>,
    #[serde(default)]
    id: Option<String>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
        aspect_span: (usize, usize),
        polarity: Polarity,
    ) -> Result<Self> {
        let inst = Instance {
            id: id.into(),
            tokens,
            aspect_span,
            polarity,
            parse_heads: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn aspect_tokens(&self) -> &[String] {
        &self.tokens[self.aspect_span.0..self.aspect_span.1]
    }

    pub fn in_aspect(&self, token: usize) -> bool {
        (self.aspect_span.0..self.aspect_span.1).contains(&token)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: &str| Error::InvalidInstance {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.tokens.is_empty() {
            return Err(invalid("empty token list"));
        }
        let (i, j) = self.aspect_span;
        if j <= i {
            return Err(invalid("empty aspect span"));
        }
        if j > self.tokens.len() {
            return Err(invalid("aspect span exceeds sentence"));
        }
        if let Some(heads) = &self.parse_heads {
            validate_heads(heads, self.tokens.len()).map_err(|m| invalid(&m))?;
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("instance serializes")
    }
}

fn validate_heads(heads: &[i64], n: usize) -> std::result::Result<(), String> {
    if heads.len() != n {
        return Err(format!("parse_heads has {} entries for {n} tokens", heads.len()));
    }
    let roots = heads.iter().filter(|&&h| h == -1).count();
    if roots == 0 {
        return Err("no parse root".into());
    }
    if roots > 1 {
        return Err("multiple parse roots".into());
    }
    if let Some(h) = heads.iter().find(|&&h| h < -1 || h >= n as i64) {
        return Err(format!("parse head {h} out of range"));
    }
    // Every node must reach the root by following heads.
    for start in 0..n {
        let mut node = start;
        let mut steps = 0;
        while heads[node] != -1 {
            node = heads[node] as usize;
            steps += 1;
            if steps > n {
                return Err("parse heads contain a cycle".into());
            }
        }
    }
    Ok(())
}

/// Read one instance per line. Blank lines are skipped; missing ids become
/// 1-based line numbers.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let id = raw.id.unwrap_or_else(|| lineno.to_string());
        let polarity = raw.polarity.parse().map_err(|_| Error::InvalidInstance {
            id: id.clone(),
            message: format!("unknown polarity `{}`", raw.polarity),
        })?;
        let inst = Instance {
            id,
            tokens: raw.tokens,
            aspect_span: raw.aspect_span,
            polarity,
            parse_heads: raw.parse_heads,
        };
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        writeln!(f, "{}", inst.to_json_line())?;
    }
    Ok(())
}

/// Deterministic shuffle-and-cut; dev gets `round(n * dev_fraction)` items.
pub fn split(
    instances: &[Instance],
    dev_fraction: f64,
    seed: u64,
) -> Result<(Vec<Instance>, Vec<Instance>)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::Invalid(format!("dev fraction {dev_fraction} not in (0, 1)")));
    }
    if instances.len() < 2 {
        return Err(Error::Invalid("need at least 2 instances to split".into()));
    }
    let n = instances.len();
    let n_dev = dev_split_size(n, dev_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let dev = order[..n_dev].iter().map(|&i| instances[i].clone()).collect();
    let train = order[n_dev..].iter().map(|&i| instances[i].clone()).collect();
    Ok((train, dev))
}

/// `round(n * fraction)`, kept within `1..n` so both sides are non-empty.
pub fn dev_split_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LabelCounts {
    pub positive: usize,
    pub neutral: usize,
    pub negative: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.positive + self.neutral + self.negative
    }
}

pub fn stats(instances: &[Instance]) -> LabelCounts {
    let mut c = LabelCounts::default();
    for inst in instances {
        match inst.polarity {
            Polarity::Positive => c.positive += 1,
            Polarity::Neutral => c.neutral += 1,
            Polarity::Negative => c.negative += 1,
        }
    }
    c
}

/// Positive and negative opinion words, lowercased.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    pub positive: BTreeSet<String>,
    pub negative: BTreeSet<String>,
}

impl Lexicon {
    pub fn new<I, J, S, T>(positive: I, negative: J) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let positive: BTreeSet<String> =
            positive.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        let negative: BTreeSet<String> =
            negative.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        if let Some(w) = positive.intersection(&negative).next() {
            return Err(Error::Invalid(format!("lexicon word `{w}` is both positive and negative")));
        }
        Ok(Lexicon { positive, negative })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            positive: Vec<String>,
            negative: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(&fs::read_to_string(path)?)?;
        Lexicon::new(raw.positive, raw.negative)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "positive": self.positive, "negative": self.negative })
    }

    pub fn contains(&self, word: &str) -> bool {
        let w = word.to_lowercase();
        self.positive.contains(&w) || self.negative.contains(&w)
    }

    /// All words, positive first, each list in sorted order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.positive.iter().chain(&self.negative).map(String::as_str)
    }
}

/// Static word vectors with reserved `UNK`, `PAD` and `NODE0` entries.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
}

impl EmbeddingTable {
    /// Random vectors in `uniform(-0.1, 0.1)` for the reserved entries plus `words`.
    pub fn random<I, S>(words: I, dim: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut table = EmbeddingTable {
            dim,
            words: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in [UNK, PAD, NODE0].into_iter().map(str::to_string).chain(words.into_iter().map(|w| w.as_ref().to_string())) {
            if !table.index.contains_key(&w) {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
                table.push(w, &v);
            }
        }
        table
    }

    /// Parse `word v1 … vd` lines. Reserved entries absent from the file are
    /// drawn from a seeded `uniform(-0.1, 0.1)`.
    pub fn load(path: impl AsRef<Path>, dim: usize, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(BufReader::new(fs::File::open(path)?), dim, seed, path)
    }

    pub fn parse(reader: impl BufRead, dim: usize, seed: u64, origin: &Path) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        let mut table = EmbeddingTable {
            dim,
            words: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
        };
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                message: format!("`{word}`: {e}"),
            })?;
            if values.len() != dim {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: idx + 1,
                    message: format!(
                        "dimension mismatch for `{word}`: expected {dim}, found {}",
                        values.len()
                    ),
                });
            }
            if table.index.contains_key(word) {
                warn!("duplicate embedding for `{word}` at line {}; keeping the first", idx + 1);
                continue;
            }
            table.push(word.to_string(), &values);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for reserved in [UNK, PAD, NODE0] {
            if !table.index.contains_key(reserved) {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
                table.push(reserved.to_string(), &v);
            }
        }
        Ok(table)
    }

    fn push(&mut self, word: String, v: &[f64]) {
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.vectors.extend_from_slice(v);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Row index of `word`, or of `UNK` when unseen.
    pub fn index_of(&self, word: &str) -> usize {
        self.index
            .get(word)
            .copied()
            .unwrap_or_else(|| self.index[UNK])
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn vector(&self, word: &str) -> &[f64] {
        let i = self.index_of(word);
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn flat_values(&self) -> &[f64] {
        &self.vectors
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn inst(id: usize, polarity: Polarity) -> Instance {
        Instance::new(id.to_string(), vec!["a".into(), "b".into()], (0, 1), polarity).unwrap()
    }

    #[test]
    fn minimal_line_loads() {
        let f = write_tmp(r#"{"tokens":["great","food"],"aspect_span":[1,2],"polarity":"positive"}"#);
        let data = load_jsonl(f.path()).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].aspect_tokens(), &["food".to_string()]);
        assert_eq!(data[0].id, "1");
        assert_eq!(data[0].polarity, Polarity::Positive);
    }

    #[test]
    fn empty_aspect_span_rejected() {
        let f = write_tmp(r#"{"tokens":["great","food"],"aspect_span":[2,2],"polarity":"positive"}"#);
        let err = load_jsonl(f.path()).unwrap_err().to_string();
        assert!(err.contains("empty aspect span"), "{err}");
    }

    #[test]
    fn multiple_parse_roots_rejected() {
        let f = write_tmp(
            r#"{"tokens":["great","food"],"aspect_span":[1,2],"polarity":"positive","parse_heads":[-1,-1],"id":"x"}"#,
        );
        let err = load_jsonl(f.path()).unwrap_err().to_string();
        assert!(err.contains("multiple parse roots") && err.contains("`x`"), "{err}");
    }

    #[test]
    fn cyclic_heads_rejected() {
        let f = write_tmp(
            r#"{"tokens":["a","b","c"],"aspect_span":[0,1],"polarity":"neutral","parse_heads":[-1,2,1]}"#,
        );
        assert!(load_jsonl(f.path()).unwrap_err().to_string().contains("cycle"));
    }

    #[test]
    fn malformed_json_reports_line() {
        let f = write_tmp("{\"tokens\":[\"a\"],\"aspect_span\":[0,1],\"polarity\":\"neutral\"}\n{oops\n");
        match load_jsonl(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_polarity_rejected() {
        let f = write_tmp(r#"{"tokens":["a"],"aspect_span":[0,1],"polarity":"conflict"}"#);
        assert!(load_jsonl(f.path()).unwrap_err().to_string().contains("conflict"));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let data: Vec<_> = (0..10).map(|i| inst(i, Polarity::Neutral)).collect();
        let (train, dev) = split(&data, 0.1, 3).unwrap();
        assert_eq!((train.len(), dev.len()), (9, 1));
        assert_eq!(split(&data, 0.1, 3).unwrap(), (train, dev));
        assert!(split(&data[..1], 0.1, 3).is_err());
        assert!(split(&data, 1.0, 3).is_err());
    }

    #[test]
    fn split_size_arithmetic() {
        assert_eq!(dev_split_size(2620, 0.1), 262);
    }

    #[test]
    fn stats_counts() {
        assert_eq!(stats(&[]), LabelCounts::default());
        let data = [inst(0, Polarity::Positive), inst(1, Polarity::Neutral), inst(2, Polarity::Negative)];
        assert_eq!(
            stats(&data),
            LabelCounts {
                positive: 1,
                neutral: 1,
                negative: 1
            }
        );
    }

    #[test]
    fn embeddings_parse_and_oov() {
        let t = EmbeddingTable::parse(Cursor::new("the 0.1 0.2\n"), 2, 0, Path::new("mem")).unwrap();
        assert_eq!(t.vector("the"), &[0.1, 0.2]);
        assert_eq!(t.vector("unseen"), t.vector(UNK));
        assert!(t.contains(PAD) && t.contains(NODE0));
    }

    #[test]
    fn embedding_dimension_mismatch_names_word() {
        let err = EmbeddingTable::parse(Cursor::new("the 0.1 0.2 0.3\n"), 2, 0, Path::new("mem"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("the") && err.contains("dimension"), "{err}");
    }

    #[test]
    fn duplicate_embedding_keeps_first() {
        let t = EmbeddingTable::parse(Cursor::new("a 1 1\na 2 2\n"), 2, 0, Path::new("mem")).unwrap();
        assert_eq!(t.vector("a"), &[1.0, 1.0]);
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn lexicon_must_be_disjoint() {
        assert!(Lexicon::new(["Good"], ["good"]).is_err());
        let lex = Lexicon::new(["Great"], ["awful"]).unwrap();
        assert!(lex.contains("GREAT"));
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_instance() -> impl Strategy<Value = Instance> {
        (1usize..8)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec("[a-z]{1,6}", n),
                    (0..n).prop_flat_map(move |i| (Just(i), i + 1..=n)),
                    0usize..3,
                    "[a-z0-9]{1,5}",
                )
            })
            .prop_map(|(tokens, span, p, id)| Instance {
                id,
                tokens,
                aspect_span: span,
                polarity: Polarity::from_index(p).unwrap(),
                parse_heads: None,
            })
    }

    proptest! {
        #[test]
        fn serialize_then_load_is_identity(data in proptest::collection::vec(arb_instance(), 1..6)) {
            let f = tempfile::NamedTempFile::new().unwrap();
            write_jsonl(f.path(), &data).unwrap();
            prop_assert_eq!(load_jsonl(f.path()).unwrap(), data);
        }

        #[test]
        fn split_partitions(n in 2usize..40, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let data: Vec<_> = (0..n)
                .map(|i| Instance::new(i.to_string(), vec!["w".into()], (0, 1), Polarity::ALL[i % 3]).unwrap())
                .collect();
            let (train, dev) = split(&data, frac, seed).unwrap();
            prop_assert_eq!(train.len() + dev.len(), n);
            let mut ids: Vec<_> = train.iter().chain(&dev).map(|i| i.id.clone()).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
            prop_assert_eq!(stats(&train).total() + stats(&dev).total(), n);
        }
    }
}
