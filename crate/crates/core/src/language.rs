//! The instruction language: three referents joined by order connectors.
//!
//! Every instruction is a sequence of "go to the <color>" clauses. Clauses are
//! joined by `,` (linear) or by a single trailing `, but first` / `, but before`
//! (non-linear). The connector automaton is
//!
//! ```text
//! start --comma--> comma --comma--> comma
//!                  comma --but first--> but-first   (accepting, no exits)
//!                  comma --but before--> but-before (accepting, no exits)
//! ```
//!
//! where the first clause is read as an implicit `comma` edge out of `start`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_SUBGOALS: usize = 6;
pub const TRAIN_MAX_SUBGOALS: usize = 3;
pub const VOCAB_SIZE: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LanguageError {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("malformed clause at token {position}: {reason}")]
    MalformedClause { position: usize, reason: String },
    #[error("connector count {connectors} does not match {subgoals} sub-goals")]
    Arity { subgoals: usize, connectors: usize },
    #[error("connector sequence rejected by the order-connector automaton")]
    NotAccepted,
    #[error("invalid sub-goal range {min}..={max}")]
    InvalidRange { min: usize, max: usize },
    #[error("training proportion {0} outside (0, 1]")]
    InvalidProportion(f64),
    #[error("training split is empty ({candidates} candidates at proportion {proportion})")]
    EmptyTrain { proportion: f64, candidates: usize },
    #[error("unknown language subset `{0}`")]
    UnknownSubset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Referent {
    Red,
    Blue,
    Green,
}

impl Referent {
    pub const ALL: [Referent; 3] = [Referent::Red, Referent::Blue, Referent::Green];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Referent::Red => "red",
            Referent::Blue => "blue",
            Referent::Green => "green",
        }
    }
}

impl fmt::Display for Referent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connector {
    Comma,
    ButFirst,
    ButBefore,
}

impl Connector {
    pub const ALL: [Connector; 3] = [Connector::Comma, Connector::ButFirst, Connector::ButBefore];

    pub fn is_linear(self) -> bool {
        self == Connector::Comma
    }

    /// Text placed between two rendered clauses.
    fn separator(self) -> &'static str {
        match self {
            Connector::Comma => ", ",
            Connector::ButFirst => ", but first ",
            Connector::ButBefore => ", but before ",
        }
    }
}

/// Vocabulary tokens. The discriminant is the token id fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Go,
    To,
    The,
    Red,
    Blue,
    Green,
    Comma,
    But,
    First,
    Before,
}

impl Token {
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_word(word: &str) -> Option<Token> {
        Some(match word {
            "go" => Token::Go,
            "to" => Token::To,
            "the" => Token::The,
            "red" => Token::Red,
            "blue" => Token::Blue,
            "green" => Token::Green,
            "," => Token::Comma,
            "but" => Token::But,
            "first" => Token::First,
            "before" => Token::Before,
            _ => return None,
        })
    }

    pub fn word(self) -> &'static str {
        match self {
            Token::Go => "go",
            Token::To => "to",
            Token::The => "the",
            Token::Red => "red",
            Token::Blue => "blue",
            Token::Green => "green",
            Token::Comma => ",",
            Token::But => "but",
            Token::First => "first",
            Token::Before => "before",
        }
    }

    fn referent(self) -> Option<Referent> {
        match self {
            Token::Red => Some(Referent::Red),
            Token::Blue => Some(Referent::Blue),
            Token::Green => Some(Referent::Green),
            _ => None,
        }
    }

    fn from_referent(r: Referent) -> Token {
        match r {
            Referent::Red => Token::Red,
            Referent::Blue => Token::Blue,
            Referent::Green => Token::Green,
        }
    }
}

/// Lowercases and splits a surface string into vocabulary tokens, then
/// checks that the tokens form a well-formed clause sequence.
pub fn tokenize(text: &str) -> Result<Vec<Token>, LanguageError> {
    let tokens = lex(text)?;
    parse_tokens(&tokens)?;
    Ok(tokens)
}

fn lex(text: &str) -> Result<Vec<Token>, LanguageError> {
    let lowered = text.to_lowercase().replace(',', " , ");
    lowered
        .split_whitespace()
        .map(|w| Token::from_word(w).ok_or_else(|| LanguageError::UnknownToken(w.to_string())))
        .collect()
}

/// Recovers sub-goals and connectors from a token sequence.
pub fn parse_tokens(tokens: &[Token]) -> Result<(Vec<Referent>, Vec<Connector>), LanguageError> {
    let malformed = |position: usize, reason: &str| LanguageError::MalformedClause {
        position,
        reason: reason.to_string(),
    };
    let mut subgoals = Vec::new();
    let mut connectors = Vec::new();
    let mut pos = 0;
    loop {
        for expected in [Token::Go, Token::To, Token::The] {
            match tokens.get(pos) {
                Some(&t) if t == expected => pos += 1,
                Some(_) => return Err(malformed(pos, &format!("expected `{}`", expected.word()))),
                None => return Err(malformed(pos, "unexpected end of instruction")),
            }
        }
        match tokens.get(pos).and_then(|t| t.referent()) {
            Some(r) => subgoals.push(r),
            None => return Err(malformed(pos, "expected a color")),
        }
        pos += 1;
        match tokens.get(pos) {
            None => break,
            Some(Token::Comma) => pos += 1,
            Some(_) => return Err(malformed(pos, "expected `,` or end of instruction")),
        }
        let connector = match (tokens.get(pos), tokens.get(pos + 1)) {
            (Some(Token::But), Some(Token::First)) => {
                pos += 2;
                Connector::ButFirst
            }
            (Some(Token::But), Some(Token::Before)) => {
                pos += 2;
                Connector::ButBefore
            }
            (Some(Token::But), _) => {
                return Err(malformed(pos + 1, "expected `first` or `before`"))
            }
            _ => Connector::Comma,
        };
        connectors.push(connector);
    }
    Ok((subgoals, connectors))
}

/// An instruction in surface order. Construction only checks arity; whether
/// the connector sequence belongs to the language is decided by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Instruction {
    subgoals: Vec<Referent>,
    connectors: Vec<Connector>,
}

impl Instruction {
    pub fn new(subgoals: Vec<Referent>, connectors: Vec<Connector>) -> Result<Self, LanguageError> {
        if subgoals.is_empty() || connectors.len() + 1 != subgoals.len() {
            return Err(LanguageError::Arity {
                subgoals: subgoals.len(),
                connectors: connectors.len(),
            });
        }
        Ok(Self {
            subgoals,
            connectors,
        })
    }

    pub fn parse(text: &str) -> Result<Self, LanguageError> {
        let (subgoals, connectors) = parse_tokens(&lex(text)?)?;
        Self::new(subgoals, connectors)
    }

    pub fn subgoals(&self) -> &[Referent] {
        &self.subgoals
    }

    pub fn connectors(&self) -> &[Connector] {
        &self.connectors
    }

    pub fn n_subgoals(&self) -> usize {
        self.subgoals.len()
    }

    pub fn is_comma_only(&self) -> bool {
        self.connectors.iter().all(|c| c.is_linear())
    }

    /// Canonical surface string, e.g. "Go to the red, but first go to the blue".
    pub fn text(&self) -> String {
        let mut out = format!("Go to the {}", self.subgoals[0]);
        for (c, r) in self.connectors.iter().zip(&self.subgoals[1..]) {
            out.push_str(c.separator());
            out.push_str("go to the ");
            out.push_str(r.name());
        }
        out
    }

    pub fn tokens(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.subgoals.len() * 6);
        for (i, &r) in self.subgoals.iter().enumerate() {
            if i > 0 {
                out.push(Token::Comma);
                match self.connectors[i - 1] {
                    Connector::Comma => {}
                    Connector::ButFirst => out.extend([Token::But, Token::First]),
                    Connector::ButBefore => out.extend([Token::But, Token::Before]),
                }
            }
            out.extend([Token::Go, Token::To, Token::The, Token::from_referent(r)]);
        }
        out
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens().into_iter().map(Token::id).collect()
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// The resolved visitation order of an instruction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExecutionPlan(Vec<Referent>);

impl ExecutionPlan {
    pub fn new(order: Vec<Referent>) -> Self {
        Self(order)
    }

    pub fn order(&self) -> &[Referent] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has_consecutive_repeat(&self) -> bool {
        self.0.windows(2).any(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FsaState {
    Start,
    Comma,
    ButFirst,
    ButBefore,
}

/// Runs the connector automaton. The first clause is the implicit `comma`
/// edge leaving `start`; each connector then labels one further edge.
pub fn fsa_accepts(connectors: &[Connector]) -> bool {
    let edges = std::iter::once(Connector::Comma).chain(connectors.iter().copied());
    let mut state = FsaState::Start;
    for c in edges {
        state = match (state, c) {
            (FsaState::Start, Connector::Comma) => FsaState::Comma,
            (FsaState::Comma, Connector::Comma) => FsaState::Comma,
            (FsaState::Comma, Connector::ButFirst) => FsaState::ButFirst,
            (FsaState::Comma, Connector::ButBefore) => FsaState::ButBefore,
            _ => return false,
        };
    }
    state != FsaState::Start
}

/// Resolves the order of execution. Fails only when the connector sequence
/// is not accepted by the automaton.
pub fn resolve_plan(instr: &Instruction) -> Result<ExecutionPlan, LanguageError> {
    if !fsa_accepts(&instr.connectors) {
        return Err(LanguageError::NotAccepted);
    }
    let mut order = instr.subgoals.clone();
    let n = order.len();
    match instr.connectors.last() {
        Some(Connector::ButFirst) => order.rotate_right(1),
        Some(Connector::ButBefore) => order.swap(n - 2, n - 1),
        _ => {}
    }
    Ok(ExecutionPlan(order))
}

/// True iff the instruction belongs to the generated language.
pub fn validate(instr: &Instruction) -> bool {
    let n = instr.subgoals.len();
    if n == 0 || n > MAX_SUBGOALS || instr.connectors.len() + 1 != n {
        return false;
    }
    match resolve_plan(instr) {
        Ok(plan) => !plan.has_consecutive_repeat(),
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LanguageSubset {
    #[serde(rename = "comma")]
    Comma,
    #[serde(rename = "comma-butfirst")]
    CommaButFirst,
    #[serde(rename = "comma-butbefore")]
    CommaButBefore,
}

impl LanguageSubset {
    pub const ALL: [LanguageSubset; 3] = [
        LanguageSubset::Comma,
        LanguageSubset::CommaButFirst,
        LanguageSubset::CommaButBefore,
    ];

    pub fn allowed_connectors(self) -> &'static [Connector] {
        match self {
            LanguageSubset::Comma => &[Connector::Comma],
            LanguageSubset::CommaButFirst => &[Connector::Comma, Connector::ButFirst],
            LanguageSubset::CommaButBefore => &[Connector::Comma, Connector::ButBefore],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LanguageSubset::Comma => "comma",
            LanguageSubset::CommaButFirst => "comma-butfirst",
            LanguageSubset::CommaButBefore => "comma-butbefore",
        }
    }

    /// Row label used in the summary tables.
    pub fn title(self) -> &'static str {
        match self {
            LanguageSubset::Comma => "Comma",
            LanguageSubset::CommaButFirst => "Comma-ButFirst",
            LanguageSubset::CommaButBefore => "Comma-ButBefore",
        }
    }

    pub fn contains(self, instr: &Instruction) -> bool {
        instr
            .connectors
            .iter()
            .all(|c| self.allowed_connectors().contains(c))
    }
}

impl fmt::Display for LanguageSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LanguageSubset {
    type Err = LanguageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        match key.as_str() {
            "comma" => Ok(LanguageSubset::Comma),
            "commabutfirst" => Ok(LanguageSubset::CommaButFirst),
            "commabutbefore" => Ok(LanguageSubset::CommaButBefore),
            _ => Err(LanguageError::UnknownSubset(s.to_string())),
        }
    }
}

/// Subsets containing an instruction. Comma-only instructions belong to all three.
pub fn subset_membership(instr: &Instruction) -> BTreeSet<LanguageSubset> {
    LanguageSubset::ALL
        .into_iter()
        .filter(|s| s.contains(instr))
        .collect()
}

/// All valid instructions of `subset` with `min..=max` sub-goals, ordered by
/// (sub-goal count, referent tuple, connector profile with comma-only first).
pub fn enumerate_instructions(
    subset: LanguageSubset,
    min_subgoals: usize,
    max_subgoals: usize,
) -> Result<Vec<Instruction>, LanguageError> {
    if min_subgoals < 1 || min_subgoals > max_subgoals || max_subgoals > MAX_SUBGOALS {
        return Err(LanguageError::InvalidRange {
            min: min_subgoals,
            max: max_subgoals,
        });
    }
    let mut out = Vec::new();
    for n in min_subgoals..=max_subgoals {
        for code in 0..3usize.pow(n as u32) {
            let tuple = referent_tuple(code, n);
            for &last in subset.allowed_connectors() {
                if n == 1 && last != Connector::Comma {
                    continue;
                }
                let mut connectors = vec![Connector::Comma; n - 1];
                if let Some(slot) = connectors.last_mut() {
                    *slot = last;
                }
                let instr = Instruction {
                    subgoals: tuple.clone(),
                    connectors,
                };
                if validate(&instr) {
                    out.push(instr);
                }
            }
        }
    }
    Ok(out)
}

/// The `code`-th referent tuple of length `n` in lexicographic order.
fn referent_tuple(mut code: usize, n: usize) -> Vec<Referent> {
    let mut tuple = vec![Referent::Red; n];
    for slot in tuple.iter_mut().rev() {
        *slot = Referent::ALL[code % 3];
        code /= 3;
    }
    tuple
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub proportion: f64,
    pub seed: u64,
    pub train_max_subgoals: usize,
    pub total_max_subgoals: usize,
}

impl SplitSpec {
    pub fn new(proportion: f64, seed: u64) -> Self {
        Self {
            proportion,
            seed,
            train_max_subgoals: TRAIN_MAX_SUBGOALS,
            total_max_subgoals: MAX_SUBGOALS,
        }
    }

    /// Round-half-up of `proportion * candidates`.
    pub fn train_count(&self, candidates: usize) -> usize {
        (self.proportion * candidates as f64 + 0.5 + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Instruction>,
    pub test: Vec<Instruction>,
}

/// Seeded sample (without replacement) of the short-instruction pool for
/// training; every longer instruction goes to the test set. The sampled
/// training instructions keep enumeration order.
pub fn split_train_test(subset: LanguageSubset, spec: &SplitSpec) -> Result<Split, LanguageError> {
    if !(spec.proportion > 0.0 && spec.proportion <= 1.0) {
        return Err(LanguageError::InvalidProportion(spec.proportion));
    }
    let candidates = enumerate_instructions(subset, 1, spec.train_max_subgoals)?;
    let test =
        enumerate_instructions(subset, spec.train_max_subgoals + 1, spec.total_max_subgoals)?;
    let k = spec.train_count(candidates.len());
    if k == 0 {
        return Err(LanguageError::EmptyTrain {
            proportion: spec.proportion,
            candidates: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = index::sample(&mut rng, candidates.len(), k.min(candidates.len())).into_vec();
    picked.sort_unstable();
    let train = picked.into_iter().map(|i| candidates[i].clone()).collect();
    Ok(Split { train, test })
}

/// One line of a language dump file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageRecord {
    pub text: String,
    pub subgoals: Vec<Referent>,
    pub connectors: Vec<Connector>,
    pub plan: ExecutionPlan,
    pub n_subgoals: usize,
    pub subsets: Vec<LanguageSubset>,
}

impl LanguageRecord {
    pub fn from_instruction(instr: &Instruction) -> Result<Self, LanguageError> {
        Ok(Self {
            text: instr.text(),
            subgoals: instr.subgoals.clone(),
            connectors: instr.connectors.clone(),
            plan: resolve_plan(instr)?,
            n_subgoals: instr.n_subgoals(),
            subsets: subset_membership(instr).into_iter().collect(),
        })
    }
}
