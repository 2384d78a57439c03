//! Domain vocabulary: tokens, the six-field intake record, and the
//! block-aligned prompt template that embeds a record into a fixed-length
//! token sequence.
//!
//! The tokenizer is a deterministic whitespace/punctuation splitter with
//! stable hashing. It is not meant to be compatible with any real model
//! tokenizer; it only has to preserve prefix structure so that block-level
//! cache matching behaves like a production serving stack.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque token identifier.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct TokenId(pub u64);

impl From<u64> for TokenId {
    fn from(v: u64) -> Self {
        TokenId(v)
    }
}

/// Reserved filler token used to pad field slots up to their block budget.
pub const FILLER_TOKEN: TokenId = TokenId(0);

/// The word form of the filler token. Tokenizing this word yields
/// [`FILLER_TOKEN`]; no other word can hash to it.
pub const FILLER_WORD: &str = "xpadx";

/// A tokenized text with its source preserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub source_text: String,
}

impl TokenSeq {
    /// Wraps a raw token vector that has no textual source (engineered
    /// probe sequences, rendered prompts).
    pub fn from_raw(tokens: Vec<TokenId>) -> Self {
        TokenSeq {
            tokens,
            source_text: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over bytes. Stable across platforms and builds.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn word_token(word: &str) -> TokenId {
    if word == FILLER_WORD {
        return FILLER_TOKEN;
    }
    let mut h = fnv1a64(word.as_bytes());
    if h == FILLER_TOKEN.0 {
        h = FNV_PRIME; // keep the filler id reserved
    }
    TokenId(h)
}

/// Splits on whitespace and punctuation; every alphanumeric run becomes one
/// token with a stable id. Deterministic: equal texts yield equal sequences.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut tokens = Vec::new();
    let mut start = None::<usize>;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            tokens.push(word_token(&text[s..i]));
        }
    }
    if let Some(s) = start {
        tokens.push(word_token(&text[s..]));
    }
    TokenSeq {
        tokens,
        source_text: text.to_string(),
    }
}

/// Errors from record validation and prompt rendering.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("field {field} renders to {len} tokens, slot capacity is {capacity}")]
    FieldTooLong {
        field: Field,
        len: usize,
        capacity: usize,
    },
    #[error("age {0} out of range 0..=120")]
    InvalidAge(u16),
    #[error("text field exceeds 100 characters ({0})")]
    TextTooLong(usize),
    #[error("unknown value {value:?} for field {field}")]
    InvalidValue { field: Field, value: String },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
}

/// The six intake-form fields, in prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Age,
    Gender,
    DiseaseHistory,
    Symptoms,
    Duration,
    ChiefComplaint,
}

impl Field {
    pub const ALL: [Field; 6] = [
        Field::Age,
        Field::Gender,
        Field::DiseaseHistory,
        Field::Symptoms,
        Field::Duration,
        Field::ChiefComplaint,
    ];

    pub fn index(self) -> usize {
        Field::ALL.iter().position(|f| *f == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::Age => "age",
            Field::Gender => "gender",
            Field::DiseaseHistory => "disease_history",
            Field::Symptoms => "symptoms",
            Field::Duration => "duration",
            Field::ChiefComplaint => "chief_complaint",
        }
    }
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn label(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }

    pub fn from_label(s: &str) -> Option<Gender> {
        Gender::ALL.into_iter().find(|g| g.label() == s)
    }
}

/// The ten predefined chief-complaint options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChiefComplaint {
    TreatmentOptions,
    MedicationManagement,
    DietaryGuidance,
    SymptomAssessment,
    PreventionAdvice,
    TestInterpretation,
    SpecialistReferral,
    RecoveryOutlook,
    SideEffectReview,
    LifestyleAdjustment,
}

impl ChiefComplaint {
    pub const ALL: [ChiefComplaint; 10] = [
        ChiefComplaint::TreatmentOptions,
        ChiefComplaint::MedicationManagement,
        ChiefComplaint::DietaryGuidance,
        ChiefComplaint::SymptomAssessment,
        ChiefComplaint::PreventionAdvice,
        ChiefComplaint::TestInterpretation,
        ChiefComplaint::SpecialistReferral,
        ChiefComplaint::RecoveryOutlook,
        ChiefComplaint::SideEffectReview,
        ChiefComplaint::LifestyleAdjustment,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ChiefComplaint::TreatmentOptions => "treatment options",
            ChiefComplaint::MedicationManagement => "medication management",
            ChiefComplaint::DietaryGuidance => "dietary guidance",
            ChiefComplaint::SymptomAssessment => "symptom assessment",
            ChiefComplaint::PreventionAdvice => "prevention advice",
            ChiefComplaint::TestInterpretation => "test interpretation",
            ChiefComplaint::SpecialistReferral => "specialist referral",
            ChiefComplaint::RecoveryOutlook => "recovery outlook",
            ChiefComplaint::SideEffectReview => "side effect review",
            ChiefComplaint::LifestyleAdjustment => "lifestyle adjustment",
        }
    }

    pub fn from_label(s: &str) -> Option<ChiefComplaint> {
        ChiefComplaint::ALL.into_iter().find(|c| c.label() == s)
    }
}

/// One victim or attacker input: the six structured fields of the intake
/// form. Free-text fields are capped at 100 characters; empty text renders
/// as pure filler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub age: u8,
    pub gender: Gender,
    pub disease_history: String,
    pub symptoms: String,
    pub duration: String,
    pub chief_complaint: ChiefComplaint,
}

const TEXT_CHAR_BUDGET: usize = 100;

const DIGIT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

impl FieldRecord {
    pub fn new(
        age: u16,
        gender: Gender,
        disease_history: impl Into<String>,
        symptoms: impl Into<String>,
        duration: impl Into<String>,
        chief_complaint: ChiefComplaint,
    ) -> Result<FieldRecord, ModelError> {
        if age > 120 {
            return Err(ModelError::InvalidAge(age));
        }
        let disease_history = disease_history.into();
        let symptoms = symptoms.into();
        for text in [&disease_history, &symptoms] {
            if text.chars().count() > TEXT_CHAR_BUDGET {
                return Err(ModelError::TextTooLong(text.chars().count()));
            }
        }
        Ok(FieldRecord {
            age: age as u8,
            gender,
            disease_history,
            symptoms,
            duration: duration.into(),
            chief_complaint,
        })
    }

    /// Canonical string value of a field, as used by corpus models and
    /// attack bookkeeping.
    pub fn value(&self, field: Field) -> String {
        match field {
            Field::Age => format!("{}", self.age),
            Field::Gender => self.gender.label().to_string(),
            Field::DiseaseHistory => self.disease_history.clone(),
            Field::Symptoms => self.symptoms.clone(),
            Field::Duration => self.duration.clone(),
            Field::ChiefComplaint => self.chief_complaint.label().to_string(),
        }
    }

    /// Overwrites one field from its canonical string value.
    pub fn set_value(&mut self, field: Field, value: &str) -> Result<(), ModelError> {
        match field {
            Field::Age => {
                let age: u16 = value.parse().map_err(|_| ModelError::InvalidValue {
                    field,
                    value: value.to_string(),
                })?;
                if age > 120 {
                    return Err(ModelError::InvalidAge(age));
                }
                self.age = age as u8;
            }
            Field::Gender => {
                self.gender = Gender::from_label(value).ok_or_else(|| ModelError::InvalidValue {
                    field,
                    value: value.to_string(),
                })?;
            }
            Field::DiseaseHistory => self.disease_history = value.to_string(),
            Field::Symptoms => self.symptoms = value.to_string(),
            Field::Duration => self.duration = value.to_string(),
            Field::ChiefComplaint => {
                self.chief_complaint =
                    ChiefComplaint::from_label(value).ok_or_else(|| ModelError::InvalidValue {
                        field,
                        value: value.to_string(),
                    })?;
            }
        }
        Ok(())
    }

    /// Serialized word sequence for one field. Numeric fields spell each
    /// decimal digit (73 -> "seven three"), enums use their canonical label.
    fn serialize_field(&self, field: Field) -> String {
        match field {
            Field::Age => {
                let digits = format!("{:02}", self.age);
                let words: Vec<&str> = digits
                    .bytes()
                    .map(|b| DIGIT_WORDS[(b - b'0') as usize])
                    .collect();
                words.join(" ")
            }
            Field::Gender => self.gender.label().to_string(),
            Field::DiseaseHistory => self.disease_history.clone(),
            Field::Symptoms => self.symptoms.clone(),
            Field::Duration => self.duration.clone(),
            Field::ChiefComplaint => self.chief_complaint.label().to_string(),
        }
    }
}

/// Block span of one field slot within a rendered prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpan {
    pub field: Field,
    /// First block of the slot.
    pub start_block: usize,
    /// Slot length in blocks.
    pub blocks: usize,
}

impl FieldSpan {
    /// One past the slot's last block; the analyzer's field-hit threshold.
    pub fn end_block(&self) -> usize {
        self.start_block + self.blocks
    }
}

/// Declarative template description. Slots are sized in whole blocks and
/// separated by at least two blocks of fixed template text.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateSpec {
    pub block_size: usize,
    pub preamble: String,
    pub separator: String,
    pub postamble: String,
    /// Blocks per field, in [`Field::ALL`] order.
    pub slot_blocks: [usize; 6],
    /// When non-zero, this many extra tokens are prepended without
    /// re-aligning, pushing every slot off its block boundary. Only used
    /// for robustness experiments; block spans are then approximate.
    pub misalign_tokens: usize,
}

impl Default for TemplateSpec {
    fn default() -> Self {
        TemplateSpec {
            block_size: 16,
            preamble: "you are a careful medical assistant review the patient intake form \
                       below and answer the chief complaint using the structured fields"
                .to_string(),
            separator: "next intake entry".to_string(),
            postamble: "respond with numbered recommendations citing the relevant fields"
                .to_string(),
            slot_blocks: [2, 2, 4, 4, 2, 2],
            misalign_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Fixed(Vec<TokenId>),
    Slot { field: Field, capacity: usize },
}

/// A compiled prompt template: fixed token segments interleaved with
/// block-aligned field slots. Rendering any record yields the same total
/// length.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    block_size: usize,
    segments: Vec<Segment>,
    spans: Vec<FieldSpan>,
    total_tokens: usize,
}

const MIN_SEPARATOR_BLOCKS: usize = 2;

fn pad_to_blocks(mut tokens: Vec<TokenId>, block_size: usize, min_blocks: usize) -> Vec<TokenId> {
    let blocks = (tokens.len().div_ceil(block_size)).max(min_blocks);
    tokens.resize(blocks * block_size, FILLER_TOKEN);
    tokens
}

impl PromptTemplate {
    pub fn build(spec: &TemplateSpec) -> Result<PromptTemplate, ModelError> {
        if spec.block_size == 0 {
            return Err(ModelError::InvalidTemplate("block_size must be >= 1".into()));
        }
        if spec.slot_blocks.contains(&0) {
            return Err(ModelError::InvalidTemplate(
                "every field slot needs at least one block".into(),
            ));
        }
        let b = spec.block_size;
        let mut segments = Vec::new();
        let mut spans = Vec::new();
        let mut cursor = 0usize;

        let mut preamble = pad_to_blocks(tokenize(&spec.preamble).tokens, b, 1);
        if spec.misalign_tokens > 0 {
            preamble.extend(std::iter::repeat_n(FILLER_TOKEN, spec.misalign_tokens));
        }
        cursor += preamble.len();
        segments.push(Segment::Fixed(preamble));

        let separator = pad_to_blocks(tokenize(&spec.separator).tokens, b, MIN_SEPARATOR_BLOCKS);
        for (i, field) in Field::ALL.into_iter().enumerate() {
            if i > 0 {
                cursor += separator.len();
                segments.push(Segment::Fixed(separator.clone()));
            }
            let capacity = spec.slot_blocks[i] * b;
            if spec.misalign_tokens == 0 {
                debug_assert_eq!(cursor % b, 0, "slot must begin on a block boundary");
            }
            spans.push(FieldSpan {
                field,
                start_block: cursor / b,
                blocks: spec.slot_blocks[i],
            });
            segments.push(Segment::Slot { field, capacity });
            cursor += capacity;
        }

        let postamble = pad_to_blocks(tokenize(&spec.postamble).tokens, b, MIN_SEPARATOR_BLOCKS);
        cursor += postamble.len();
        segments.push(Segment::Fixed(postamble));

        Ok(PromptTemplate {
            block_size: b,
            segments,
            spans,
            total_tokens: cursor,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Total rendered length in tokens, identical for every record.
    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn total_blocks(&self) -> usize {
        self.total_tokens / self.block_size
    }

    /// Block spans of the field slots: non-overlapping, sorted, and
    /// consistent with [`PromptTemplate::render`] output.
    pub fn field_boundaries(&self) -> Vec<FieldSpan> {
        self.spans.clone()
    }

    pub fn span(&self, field: Field) -> FieldSpan {
        self.spans[field.index()]
    }

    /// Serializes the record into the template. Each field is right-padded
    /// with filler tokens to its slot's exact capacity.
    pub fn render(&self, record: &FieldRecord) -> Result<TokenSeq, ModelError> {
        let mut out = Vec::with_capacity(self.total_tokens);
        for seg in &self.segments {
            match seg {
                Segment::Fixed(tokens) => out.extend_from_slice(tokens),
                Segment::Slot { field, capacity } => {
                    let words = record.serialize_field(*field);
                    let toks = tokenize(&words).tokens;
                    if toks.len() > *capacity {
                        return Err(ModelError::FieldTooLong {
                            field: *field,
                            len: toks.len(),
                            capacity: *capacity,
                        });
                    }
                    out.extend_from_slice(&toks);
                    out.extend(std::iter::repeat_n(FILLER_TOKEN, capacity - toks.len()));
                }
            }
        }
        debug_assert_eq!(out.len(), self.total_tokens);
        Ok(TokenSeq::from_raw(out))
    }
}
