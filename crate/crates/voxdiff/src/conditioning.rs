//! Prompt construction, tokenization and condition embeddings.
//!
//! Prompts come from a closed template grammar over two tasks with three
//! levels each. Tokens map through a fixed vocabulary built from the template
//! words plus reserved pad/null/unknown entries; embeddings are rows of a
//! trainable table. The null condition is a learned token used both for
//! prompt dropout during training and as the unconditional branch of
//! classifier-free guidance.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD_ID: u32 = 0;
pub const NULL_ID: u32 = 1;
pub const UNKNOWN_ID: u32 = 2;
pub const MAX_TOKENS: usize = 16;

/// Default embedding width.
pub const EMBED_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    /// Lesion-burden grading: minimal / moderate / high load.
    LesionLoad,
    /// Cognitive status: normal / mild impairment / dementia.
    Cognition,
}

impl Task {
    pub fn all() -> [Task; 2] {
        [Task::LesionLoad, Task::Cognition]
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "lesion" | "lesion-load" => Ok(Task::LesionLoad),
            "cognition" => Ok(Task::Cognition),
            other => Err(Error::invalid(format!(
                "unknown task {other:?}; expected \"lesion\" or \"cognition\""
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::LesionLoad => "lesion",
            Task::Cognition => "cognition",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Low,
    Medium,
    High,
}

impl Level {
    pub fn all() -> [Level; 3] {
        [Level::Low, Level::Medium, Level::High]
    }

    pub fn index(&self) -> usize {
        match self {
            Level::Low => 0,
            Level::Medium => 1,
            Level::High => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Level> {
        match i {
            0 => Ok(Level::Low),
            1 => Ok(Level::Medium),
            2 => Ok(Level::High),
            other => Err(Error::invalid(format!("level index {other} out of range"))),
        }
    }

    pub fn parse(s: &str) -> Result<Level> {
        match s {
            "low" => Ok(Level::Low),
            "medium" => Ok(Level::Medium),
            "high" => Ok(Level::High),
            other => Err(Error::invalid(format!(
                "unknown level {other:?}; expected low, medium or high"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::Medium => "medium",
            Level::High => "high",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One of the six prompt classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PromptClass {
    pub task: Task,
    pub level: Level,
}

impl PromptClass {
    pub fn new(task: Task, level: Level) -> Self {
        PromptClass { task, level }
    }

    pub fn all_for(task: Task) -> [PromptClass; 3] {
        [
            PromptClass::new(task, Level::Low),
            PromptClass::new(task, Level::Medium),
            PromptClass::new(task, Level::High),
        ]
    }
}

/// Deterministic prompt template for a class.
pub fn build_prompt(class: PromptClass) -> String {
    match (class.task, class.level) {
        (Task::LesionLoad, Level::Low) => "Subject has minimal lesion load.".to_string(),
        (Task::LesionLoad, Level::Medium) => "Subject has moderate lesion load.".to_string(),
        (Task::LesionLoad, Level::High) => "Subject has high lesion load.".to_string(),
        (Task::Cognition, Level::Low) => "Subject is cognitively normal.".to_string(),
        (Task::Cognition, Level::Medium) => {
            "Subject has mild cognitive impairment.".to_string()
        }
        (Task::Cognition, Level::High) => "Subject has Alzheimer's disease.".to_string(),
    }
}

/// Resolve a prompt string back to its class. Used by the CLI to validate
/// user-supplied prompts against the grammar.
pub fn parse_prompt(text: &str) -> Result<PromptClass> {
    let wanted = text.trim();
    for task in Task::all() {
        for class in PromptClass::all_for(task) {
            if build_prompt(class).eq_ignore_ascii_case(wanted) {
                return Ok(class);
            }
        }
    }
    let valid: Vec<String> = Task::all()
        .iter()
        .flat_map(|&t| PromptClass::all_for(t))
        .map(|c| format!("{:?}", build_prompt(c)))
        .collect();
    Err(Error::invalid(format!(
        "prompt {wanted:?} is outside the grammar; valid prompts: {}",
        valid.join(", ")
    )))
}

/// Token ids, padded to MAX_TOKENS with PAD_ID as a suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Ids up to the first pad.
    pub fn active_ids(&self) -> &[u32] {
        let len = self.ids.iter().position(|&i| i == PAD_ID).unwrap_or(self.ids.len());
        &self.ids[..len]
    }

    pub fn null() -> TokenSequence {
        let mut ids = vec![PAD_ID; MAX_TOKENS];
        ids[0] = NULL_ID;
        TokenSequence { ids }
    }

    pub fn is_null(&self) -> bool {
        self.active_ids() == [NULL_ID]
    }
}

/// Fixed vocabulary over the template grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Reserved entries first, then template words in first-appearance order
    /// over the six prompts.
    pub fn standard() -> Vocabulary {
        let mut words: Vec<String> = vec!["<pad>".into(), "<null>".into(), "<unk>".into()];
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            index.insert(w.clone(), i as u32);
        }
        for task in Task::all() {
            for class in PromptClass::all_for(task) {
                for word in split_words(&build_prompt(class)) {
                    if !index.contains_key(&word) {
                        index.insert(word.clone(), words.len() as u32);
                        words.push(word);
                    }
                }
            }
        }
        Vocabulary { words, index }
    }

    pub fn from_words(words: Vec<String>) -> Result<Vocabulary> {
        if words.len() < 3 || words[0] != "<pad>" || words[1] != "<null>" || words[2] != "<unk>" {
            return Err(Error::data(
                "vocabulary must start with <pad>, <null>, <unk>".to_string(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
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

    /// Lowercase, strip terminal punctuation, split on whitespace, map
    /// through the vocabulary. Unknown words map to UNKNOWN_ID.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        if text.trim().is_empty() {
            return Err(Error::invalid("tokenize: text must be nonempty"));
        }
        let mut ids: Vec<u32> = split_words(text)
            .into_iter()
            .map(|w| self.index.get(&w).copied().unwrap_or(UNKNOWN_ID))
            .collect();
        ids.truncate(MAX_TOKENS);
        while ids.len() < MAX_TOKENS {
            ids.push(PAD_ID);
        }
        Ok(TokenSequence { ids })
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.trim()
        .trim_end_matches(['.', '!', '?'])
        .to_lowercase()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

/// A sequence of embedding rows for cross-attention, or the learned null row.
#[derive(Clone, Debug)]
pub struct ConditionEmbedding {
    pub vectors: Tensor, // [L, E]
    pub is_null: bool,
}

/// Look up token embeddings from a [V, E] table; pad rows are dropped.
pub fn encode(table: &Tensor, tokens: &TokenSequence) -> Result<ConditionEmbedding> {
    let (v, e) = table.dims2()?;
    let active = tokens.active_ids();
    if active.is_empty() {
        return Err(Error::invalid("encode: token sequence is all padding"));
    }
    let mut data = Vec::with_capacity(active.len() * e);
    for &id in active {
        let id = id as usize;
        if id >= v {
            return Err(Error::invalid(format!(
                "encode: token id {id} outside table of {v} rows"
            )));
        }
        data.extend_from_slice(&table.data()[id * e..(id + 1) * e]);
    }
    Ok(ConditionEmbedding {
        vectors: Tensor::new(&[active.len(), e], data)?,
        is_null: tokens.is_null(),
    })
}

/// The learned null-token embedding, used both for classifier-free-guidance
/// training dropout and for the unconditional sampling branch.
pub fn null_condition(table: &Tensor) -> Result<ConditionEmbedding> {
    let mut emb = encode(table, &TokenSequence::null())?;
    emb.is_null = true;
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn prompt_templates_match_grammar() {
        assert_eq!(
            build_prompt(PromptClass::new(Task::LesionLoad, Level::High)),
            "Subject has high lesion load."
        );
        assert_eq!(
            build_prompt(PromptClass::new(Task::LesionLoad, Level::Low)),
            "Subject has minimal lesion load."
        );
        assert_eq!(
            build_prompt(PromptClass::new(Task::Cognition, Level::Low)),
            "Subject is cognitively normal."
        );
        assert_eq!(
            build_prompt(PromptClass::new(Task::Cognition, Level::High)),
            "Subject has Alzheimer's disease."
        );
    }

    #[test]
    fn six_prompts_tokenize_pairwise_distinct() {
        let vocab = Vocabulary::standard();
        let mut seen: Vec<TokenSequence> = Vec::new();
        for task in Task::all() {
            for class in PromptClass::all_for(task) {
                let toks = vocab.tokenize(&build_prompt(class)).unwrap();
                assert!(
                    !seen.contains(&toks),
                    "prompt token collision for {class:?}"
                );
                assert!(parse_prompt(&build_prompt(class)).unwrap() == class);
                seen.push(toks);
            }
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn tokenize_matches_grammar_words() {
        let vocab = Vocabulary::standard();
        let toks = vocab.tokenize("Subject has high lesion load.").unwrap();
        let words: Vec<&str> = toks
            .active_ids()
            .iter()
            .map(|&i| vocab.words()[i as usize].as_str())
            .collect();
        assert_eq!(words, ["subject", "has", "high", "lesion", "load"]);
        // pad ids only as a suffix
        assert!(toks.ids()[words.len()..].iter().all(|&i| i == PAD_ID));
    }

    #[test]
    fn tokenize_case_folds() {
        let vocab = Vocabulary::standard();
        let a = vocab.tokenize("Subject has HIGH lesion load.").unwrap();
        let b = vocab.tokenize("subject has high lesion load").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tokenize_rejects_empty_and_maps_unknown() {
        let vocab = Vocabulary::standard();
        assert!(vocab.tokenize("").is_err());
        assert!(vocab.tokenize("   ").is_err());
        let toks = vocab.tokenize("subject has zebra lesion load").unwrap();
        assert_eq!(toks.active_ids()[2], UNKNOWN_ID);
    }

    #[test]
    fn encode_is_pure_lookup() {
        let vocab = Vocabulary::standard();
        let mut rng = CounterRng::new(31);
        let table = Tensor::randn(&[vocab.len(), 8], &mut rng);
        let a = vocab.tokenize("Subject has minimal lesion load.").unwrap();
        let e1 = encode(&table, &a).unwrap();
        let e2 = encode(&table, &a).unwrap();
        assert!(e1.vectors.bit_eq(&e2.vectors));
        assert!(!e1.is_null);
    }

    #[test]
    fn prompts_differing_in_one_word_differ_in_one_row() {
        let vocab = Vocabulary::standard();
        let mut rng = CounterRng::new(32);
        let table = Tensor::randn(&[vocab.len(), 8], &mut rng);
        let a = encode(
            &table,
            &vocab.tokenize("Subject has minimal lesion load.").unwrap(),
        )
        .unwrap();
        let b = encode(
            &table,
            &vocab.tokenize("Subject has high lesion load.").unwrap(),
        )
        .unwrap();
        let (l, e) = a.vectors.dims2().unwrap();
        let mut differing_rows = 0;
        for r in 0..l {
            let ra = &a.vectors.data()[r * e..(r + 1) * e];
            let rb = &b.vectors.data()[r * e..(r + 1) * e];
            if ra != rb {
                differing_rows += 1;
            }
        }
        assert_eq!(differing_rows, 1);
    }

    #[test]
    fn null_condition_is_single_learned_row() {
        let vocab = Vocabulary::standard();
        let mut rng = CounterRng::new(33);
        let table = Tensor::randn(&[vocab.len(), 8], &mut rng);
        let n1 = null_condition(&table).unwrap();
        let n2 = null_condition(&table).unwrap();
        assert!(n1.is_null);
        assert_eq!(n1.vectors.shape(), &[1, 8]);
        assert!(n1.vectors.bit_eq(&n2.vectors));
        let expect = &table.data()[NULL_ID as usize * 8..(NULL_ID as usize + 1) * 8];
        assert_eq!(n1.vectors.data(), expect);
    }

    #[test]
    fn null_row_changes_after_table_update() {
        let vocab = Vocabulary::standard();
        let mut rng = CounterRng::new(34);
        let table = Tensor::randn(&[vocab.len(), 8], &mut rng);
        let before = null_condition(&table).unwrap();
        // Simulate one optimizer step touching the null row.
        let mut data = table.data().to_vec();
        for v in &mut data[NULL_ID as usize * 8..(NULL_ID as usize + 1) * 8] {
            *v += 0.01;
        }
        let after_table = Tensor::new(table.shape(), data).unwrap();
        let after = null_condition(&after_table).unwrap();
        assert!(!before.vectors.bit_eq(&after.vectors));
    }

    #[test]
    fn invalid_prompt_lists_valid_ones() {
        let err = parse_prompt("Subject has enormous lesion load.")
            .unwrap_err()
            .to_string();
        assert!(err.contains("Subject has high lesion load."), "{err}");
        assert!(err.contains("Subject is cognitively normal."), "{err}");
    }
}
