//! Synthetic domain-shift corpora and their on-disk format.
//!
//! The task is symbol transduction: the reference output is the input's
//! clean form mapped through a fixed cyclic alphabet shift. Source splits
//! observe inputs verbatim; target splits corrupt inputs before the model
//! sees them, either stochastically (neighbor substitutions) or
//! deterministically (accent-style pair swaps), while references stay tied
//! to the clean form. Adapting to the target therefore means learning to
//! undo input corruption without ever seeing a target reference.
//!
//! Corpora serialize to a line-oriented TAB format, one utterance per
//! line, with a single `# alphabet=N` header:
//!
//! ```text
//! # alphabet=26
//! target-adapt-0000<TAB>target-adapt<TAB>noise<TAB>d g k ...<TAB>g j n ...
//! ```
//!
//! Fields are id, split, domain kind, space-separated input symbols, and
//! space-separated reference symbols. The format round-trips losslessly.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{TokenId, Vocab};
use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("duplicate utterance id {0}")]
    DuplicateId(String),
    #[error("token {token} is not a content symbol of a {alphabet}-letter alphabet")]
    BadToken { token: TokenId, alphabet: usize },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Vocab(#[from] crate::model::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The transduction rule: output symbol index = (input index + shift) mod
/// alphabet, applied to the clean input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub alphabet: usize,
    pub shift: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.alphabet < 2 {
            return Err(DataError::InvalidSpec(format!(
                "alphabet must have at least 2 symbols, got {}",
                self.alphabet
            )));
        }
        Ok(())
    }

    /// Maps clean symbol indices to output symbol indices.
    pub fn apply(&self, clean: &[usize]) -> Vec<usize> {
        clean.iter().map(|&s| (s + self.shift) % self.alphabet).collect()
    }
}

/// How a domain corrupts observed inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Corruption {
    /// Inputs pass through untouched.
    Clean,
    /// Each position is independently replaced, with probability `p`, by a
    /// uniform cyclic neighbor within `radius`. A zero radius leaves no
    /// neighbors to pick, degenerating to a no-op.
    Noise { p: f64, radius: usize },
    /// Deterministic symbol-pair swaps: every occurrence of either symbol
    /// in a pair becomes the other.
    Accent { swaps: Vec<(usize, usize)> },
}

impl Corruption {
    pub fn kind(&self) -> DomainKind {
        match self {
            Corruption::Clean => DomainKind::Clean,
            Corruption::Noise { .. } => DomainKind::Noise,
            Corruption::Accent { .. } => DomainKind::Accent,
        }
    }

    pub fn validate(&self, alphabet: usize) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidSpec(msg));
        match self {
            Corruption::Clean => Ok(()),
            Corruption::Noise { p, radius: _ } => {
                if !(*p > 0.0 && *p <= 1.0) {
                    return bad(format!(
                        "noise probability must lie in (0, 1]; use the clean kind for p = 0, got {p}"
                    ));
                }
                Ok(())
            }
            Corruption::Accent { swaps } => {
                if swaps.is_empty() {
                    return bad("accent corruption needs at least one swap pair".into());
                }
                let mut seen = BTreeSet::new();
                for &(a, b) in swaps {
                    if a >= alphabet || b >= alphabet {
                        return bad(format!(
                            "swap pair ({a}, {b}) exceeds the {alphabet}-symbol alphabet"
                        ));
                    }
                    if a == b {
                        return bad(format!("swap pair ({a}, {b}) maps a symbol to itself"));
                    }
                    if !seen.insert(a) || !seen.insert(b) {
                        return bad("swap pairs must not share symbols".into());
                    }
                }
                Ok(())
            }
        }
    }

    fn corrupt<R: Rng>(&self, clean: &[usize], alphabet: usize, rng: &mut R) -> Vec<usize> {
        match self {
            Corruption::Clean => clean.to_vec(),
            Corruption::Noise { p, radius } => {
                let offsets: Vec<isize> =
                    (1..=*radius as isize).flat_map(|d| [d, -d]).collect();
                clean
                    .iter()
                    .map(|&s| {
                        if offsets.is_empty() || rng.gen::<f64>() >= *p {
                            return s;
                        }
                        let d = offsets[rng.gen_range(0..offsets.len())];
                        (s as isize + d).rem_euclid(alphabet as isize) as usize
                    })
                    .collect()
            }
            Corruption::Accent { swaps } => {
                let mut table: Vec<usize> = (0..alphabet).collect();
                for &(a, b) in swaps {
                    table[a] = b;
                    table[b] = a;
                }
                clean.iter().map(|&s| table[s]).collect()
            }
        }
    }
}

/// Which corruption family produced an utterance's inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DomainKind {
    Clean,
    Noise,
    Accent,
}

/// The four benchmark splits. Source splits share the source corruption
/// (normally clean); target splits share the target corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitId {
    SourceTrain,
    SourceTest,
    /// Unlabeled-by-convention adaptation pool; references exist in the
    /// file but adaptation must consume the inputs-only view.
    TargetAdapt,
    TargetTest,
}

impl SplitId {
    pub const ALL: [SplitId; 4] = [
        SplitId::SourceTrain,
        SplitId::SourceTest,
        SplitId::TargetAdapt,
        SplitId::TargetTest,
    ];
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainKind::Clean => "clean",
            DomainKind::Noise => "noise",
            DomainKind::Accent => "accent",
        })
    }
}

impl fmt::Display for SplitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitId::SourceTrain => "source-train",
            SplitId::SourceTest => "source-test",
            SplitId::TargetAdapt => "target-adapt",
            SplitId::TargetTest => "target-test",
        })
    }
}

impl FromStr for DomainKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "clean" => Ok(DomainKind::Clean),
            "noise" => Ok(DomainKind::Noise),
            "accent" => Ok(DomainKind::Accent),
            other => Err(format!("unknown domain kind {other:?}")),
        }
    }
}

impl FromStr for SplitId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        SplitId::ALL
            .into_iter()
            .find(|split| split.to_string() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

/// Per-split utterance counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub source_train: usize,
    pub source_test: usize,
    pub target_adapt: usize,
    pub target_test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: SplitId) -> usize {
        match split {
            SplitId::SourceTrain => self.source_train,
            SplitId::SourceTest => self.source_test,
            SplitId::TargetAdapt => self.target_adapt,
            SplitId::TargetTest => self.target_test,
        }
    }
}

/// Everything the generator needs: the task, utterance lengths, one
/// corruption per domain, and split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub task: TaskSpec,
    pub min_len: usize,
    pub max_len: usize,
    pub source: Corruption,
    pub target: Corruption,
    pub counts: SplitSizes,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            task: TaskSpec {
                alphabet: 26,
                shift: 3,
            },
            min_len: 5,
            max_len: 20,
            source: Corruption::Clean,
            target: Corruption::Noise { p: 0.15, radius: 2 },
            counts: SplitSizes {
                source_train: 2000,
                source_test: 300,
                target_adapt: 500,
                target_test: 300,
            },
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        self.task.validate()?;
        self.source.validate(self.task.alphabet)?;
        self.target.validate(self.task.alphabet)?;
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::InvalidSpec(format!(
                "utterance lengths must satisfy 1 <= min <= max, got {}..={}",
                self.min_len, self.max_len
            )));
        }
        for split in SplitId::ALL {
            if self.counts.get(split) == 0 {
                return Err(DataError::InvalidSpec(format!(
                    "split {split} must hold at least one utterance"
                )));
            }
        }
        Ok(())
    }

    fn corruption(&self, split: SplitId) -> &Corruption {
        match split {
            SplitId::SourceTrain | SplitId::SourceTest => &self.source,
            SplitId::TargetAdapt | SplitId::TargetTest => &self.target,
        }
    }
}

/// One observed input with its reference output, both as content token ids
/// of the corpus vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub split: SplitId,
    pub domain: DomainKind,
    pub input: Vec<TokenId>,
    pub reference: Vec<TokenId>,
}

/// A labeled utterance collection over one alphabet. Construction
/// validates that every token is a content symbol and ids are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainCorpus {
    alphabet: usize,
    utterances: Vec<Utterance>,
}

impl DomainCorpus {
    pub fn new(alphabet: usize, utterances: Vec<Utterance>) -> Result<Self, DataError> {
        let vocab = Vocab::for_alphabet(alphabet)?;
        let mut seen = BTreeSet::new();
        for utt in &utterances {
            if !seen.insert(utt.id.as_str()) {
                return Err(DataError::DuplicateId(utt.id.clone()));
            }
            for &token in utt.input.iter().chain(&utt.reference) {
                if !vocab.is_content(token) {
                    return Err(DataError::BadToken { token, alphabet });
                }
            }
        }
        drop(seen);
        Ok(DomainCorpus {
            alphabet,
            utterances,
        })
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::for_alphabet(self.alphabet).expect("validated at construction")
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn select(&self, split: SplitId) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// `(input, reference)` slices of one split, for supervised training
    /// and evaluation.
    pub fn labeled_pairs(&self, split: SplitId) -> Vec<(&[TokenId], &[TokenId])> {
        self.select(split)
            .map(|u| (u.input.as_slice(), u.reference.as_slice()))
            .collect()
    }

    /// The inputs-only view adaptation code consumes; references cannot be
    /// reached through it.
    pub fn unlabeled(&self, split: SplitId) -> UnlabeledCorpus<'_> {
        UnlabeledCorpus {
            items: self
                .select(split)
                .map(|u| UnlabeledUtterance {
                    id: &u.id,
                    input: &u.input,
                })
                .collect(),
        }
    }

    /// The subset of one split as its own corpus.
    pub fn filter(&self, split: SplitId) -> DomainCorpus {
        DomainCorpus {
            alphabet: self.alphabet,
            utterances: self.select(split).cloned().collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let vocab = self.vocab();
        let mut out = String::new();
        out.push_str(&format!("# alphabet={}\n", self.alphabet));
        for utt in &self.utterances {
            let syms = |tokens: &[TokenId]| {
                tokens
                    .iter()
                    .map(|&t| vocab.symbol(t).expect("validated content token"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                utt.id,
                utt.split,
                utt.domain,
                syms(&utt.input),
                syms(&utt.reference)
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DataError::Malformed {
            line: 1,
            message: "empty file".into(),
        })?;
        let alphabet: usize = header
            .strip_prefix("# alphabet=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Malformed {
                line: 1,
                message: format!("expected `# alphabet=N` header, got {header:?}"),
            })?;
        let vocab = Vocab::for_alphabet(alphabet)?;

        let mut utterances = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, split, domain, input, reference] = fields[..] else {
                return Err(DataError::Malformed {
                    line: lineno,
                    message: format!("expected 5 TAB-separated fields, got {}", fields.len()),
                });
            };
            let bad = |message: String| DataError::Malformed {
                line: lineno,
                message,
            };
            let tokens = |field: &str| -> Result<Vec<TokenId>, DataError> {
                field
                    .split(' ')
                    .map(|sym| {
                        vocab
                            .token(sym)
                            .filter(|&t| vocab.is_content(t))
                            .ok_or_else(|| bad(format!("unknown symbol {sym:?}")))
                    })
                    .collect()
            };
            utterances.push(Utterance {
                id: id.to_string(),
                split: split.parse().map_err(bad)?,
                domain: domain.parse().map_err(bad)?,
                input: tokens(input)?,
                reference: tokens(reference)?,
            });
        }
        DomainCorpus::new(alphabet, utterances)
    }
}

/// Conventional per-split file name inside a corpus directory.
pub fn split_filename(split: SplitId) -> String {
    format!("{split}.tsv")
}

/// Writes one file per split under `dir`, named by [`split_filename`].
pub fn save_splits(corpus: &DomainCorpus, dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut written = Vec::with_capacity(SplitId::ALL.len());
    for split in SplitId::ALL {
        let path = dir.join(split_filename(split));
        corpus.filter(split).save(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Loads one conventional split file from a corpus directory.
pub fn load_split(dir: &Path, split: SplitId) -> Result<DomainCorpus, DataError> {
    DomainCorpus::load(&dir.join(split_filename(split)))
}

/// Inputs without references.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlabeledCorpus<'a> {
    items: Vec<UnlabeledUtterance<'a>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnlabeledUtterance<'a> {
    pub id: &'a str,
    pub input: &'a [TokenId],
}

impl<'a> UnlabeledCorpus<'a> {
    pub fn items(&self) -> &[UnlabeledUtterance<'a>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Draws all four splits deterministically. Each split gets its own seed
/// stream derived from the global seed, so regenerating with the same seed
/// reproduces the corpus byte for byte and no split's draws influence
/// another's.
pub fn generate_corpus(spec: &CorpusSpec, global_seed: u64) -> Result<DomainCorpus, DataError> {
    spec.validate()?;
    let vocab = Vocab::for_alphabet(spec.task.alphabet)?;
    let mut utterances = Vec::new();
    for split in SplitId::ALL {
        let corruption = spec.corruption(split);
        let mut rng = seed::rng(global_seed, &format!("corpus/{split}"));
        for k in 0..spec.counts.get(split) {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let clean: Vec<usize> = (0..len)
                .map(|_| rng.gen_range(0..spec.task.alphabet))
                .collect();
            let observed = corruption.corrupt(&clean, spec.task.alphabet, &mut rng);
            let output = spec.task.apply(&clean);
            let ids = |indices: &[usize]| {
                indices
                    .iter()
                    .map(|&s| vocab.content_id(s).expect("index within alphabet"))
                    .collect::<Vec<TokenId>>()
            };
            utterances.push(Utterance {
                id: format!("{split}-{k:04}"),
                split,
                domain: corruption.kind(),
                input: ids(&observed),
                reference: ids(&output),
            });
        }
    }
    DomainCorpus::new(spec.task.alphabet, utterances)
}
