//! Synthetic corpora with controlled inter-field correlations.
//!
//! The prefix corpus mirrors the shape of a structured medical-intake
//! dataset: a finite disease vocabulary, per-disease symptom links, and a
//! correlation knob `rho` tying (age band, gender) -> disease -> symptoms.
//! The semantic corpus mirrors a multi-domain consultation dataset:
//! per-category topic vocabularies plus shared filler words. Both are
//! deterministic given the caller's generator.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ChiefComplaint, FieldRecord, Gender};
use crate::semantic_cache::{cosine, embed};

const DISEASE_ADJ: [&str; 8] = [
    "chronic", "acute", "mild", "severe", "recurrent", "persistent", "seasonal", "latent",
];
const DISEASE_NOUN: [&str; 10] = [
    "migraine",
    "asthma",
    "arthritis",
    "anemia",
    "eczema",
    "gastritis",
    "insomnia",
    "hypertension",
    "neuralgia",
    "bronchitis",
];
const SYMPTOM_ADJ: [&str; 8] = [
    "sharp",
    "dull",
    "burning",
    "throbbing",
    "intermittent",
    "constant",
    "sudden",
    "lingering",
];
const SYMPTOM_NOUN: [&str; 10] = [
    "chest pain",
    "headache",
    "back pain",
    "joint ache",
    "stomach cramp",
    "dizziness",
    "fatigue",
    "nausea",
    "night sweats",
    "skin rash",
];
const DURATION_PHRASES: [&str; 16] = [
    "two days",
    "one week",
    "three days",
    "two weeks",
    "one month",
    "several hours",
    "six weeks",
    "ten days",
    "three months",
    "half a year",
    "one year",
    "five days",
    "four weeks",
    "two months",
    "a few days",
    "nine days",
];

/// Parameters of the structured-form corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefixCorpusSpec {
    pub n_records: usize,
    pub n_diseases: usize,
    pub symptoms_per_disease: usize,
    pub n_duration_phrases: usize,
    /// Correlation strength in [0, 1]: 1 makes disease a function of
    /// (age band, gender) and symptoms a function of disease; 0 makes all
    /// fields independent.
    pub correlation: f64,
}

impl Default for PrefixCorpusSpec {
    fn default() -> Self {
        PrefixCorpusSpec {
            n_records: 2_000,
            n_diseases: 40,
            symptoms_per_disease: 3,
            n_duration_phrases: 12,
            correlation: 0.8,
        }
    }
}

pub fn disease_vocabulary(n: usize) -> Vec<String> {
    assert!(n <= DISEASE_ADJ.len() * DISEASE_NOUN.len());
    (0..n)
        .map(|i| format!("{} {}", DISEASE_ADJ[i / 10], DISEASE_NOUN[i % 10]))
        .collect()
}

pub fn symptom_vocabulary() -> Vec<String> {
    let mut v = Vec::with_capacity(SYMPTOM_ADJ.len() * SYMPTOM_NOUN.len());
    for adj in SYMPTOM_ADJ {
        for noun in SYMPTOM_NOUN {
            v.push(format!("{adj} {noun}"));
        }
    }
    v
}

pub fn duration_vocabulary(n: usize) -> Vec<String> {
    assert!(n <= DURATION_PHRASES.len());
    DURATION_PHRASES[..n].iter().map(|s| s.to_string()).collect()
}

/// Decade band of an age, 0..=12.
pub fn age_band(age: u8) -> usize {
    (age / 10) as usize
}

fn sample_weighted(weights: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        x -= w;
        if x <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Deterministic link functions behind the correlation knob.
fn linked_disease(band: usize, gender: Gender, n_diseases: usize) -> usize {
    (band * 2 + gender as usize) % n_diseases
}

fn linked_symptom(disease: usize, spd: usize, pool: usize) -> usize {
    (disease * spd) % pool
}

pub fn generate_prefix_corpus(spec: &PrefixCorpusSpec, rng: &mut ChaCha12Rng) -> Vec<FieldRecord> {
    assert!((0.0..=1.0).contains(&spec.correlation));
    let diseases = disease_vocabulary(spec.n_diseases);
    let symptoms = symptom_vocabulary();
    let durations = duration_vocabulary(spec.n_duration_phrases);
    // Middle-aged bands carry most of the mass.
    let band_weights: Vec<f64> = (0..12).map(|b| (7 - (b as i64 - 5).abs()).max(1) as f64).collect();

    let mut records = Vec::with_capacity(spec.n_records);
    for _ in 0..spec.n_records {
        let band = sample_weighted(&band_weights, rng);
        let age = (band * 10 + rng.random_range(0..10)) as u16;
        let gender = if rng.random_bool(0.5) {
            Gender::Male
        } else {
            Gender::Female
        };
        let correlated = |rng: &mut ChaCha12Rng| rng.random::<f64>() < spec.correlation;
        let disease_idx = if correlated(rng) {
            linked_disease(band, gender, spec.n_diseases)
        } else {
            rng.random_range(0..spec.n_diseases)
        };
        let symptom_idx = if correlated(rng) {
            linked_symptom(disease_idx, spec.symptoms_per_disease, symptoms.len())
        } else {
            rng.random_range(0..symptoms.len())
        };
        let duration_idx = if correlated(rng) {
            disease_idx % durations.len()
        } else {
            rng.random_range(0..durations.len())
        };
        let complaint_idx = if correlated(rng) {
            disease_idx % ChiefComplaint::ALL.len()
        } else {
            rng.random_range(0..ChiefComplaint::ALL.len())
        };
        records.push(
            FieldRecord::new(
                age,
                gender,
                diseases[disease_idx].clone(),
                symptoms[symptom_idx].clone(),
                durations[duration_idx].clone(),
                ChiefComplaint::ALL[complaint_idx],
            )
            .expect("generated records are valid"),
        );
    }
    records
}

pub const CATEGORY_NAMES: [&str; 13] = [
    "family",
    "labor",
    "traffic",
    "debt",
    "criminal",
    "contract",
    "property",
    "infringement",
    "company",
    "medical",
    "resettlement",
    "administrative",
    "construction",
];

const TOPIC_WORDS: [[&str; 8]; 13] = [
    ["divorce", "custody", "alimony", "spouse", "adoption", "guardianship", "prenuptial", "remarriage"],
    ["employer", "wages", "overtime", "dismissal", "resignation", "workplace", "severance", "payroll"],
    ["collision", "driver", "vehicle", "highway", "speeding", "insurance", "pedestrian", "roadside"],
    ["loan", "repayment", "creditor", "debtor", "interest", "default", "bankruptcy", "collateral"],
    ["defendant", "sentencing", "bail", "felony", "prosecution", "acquittal", "parole", "detention"],
    ["breach", "clause", "agreement", "signatory", "termination", "negotiation", "liability", "warranty"],
    ["landlord", "tenant", "eviction", "deed", "ownership", "boundary", "mortgage", "easement"],
    ["copyright", "trademark", "patent", "plagiarism", "royalty", "piracy", "counterfeit", "attribution"],
    ["shareholder", "director", "merger", "equity", "incorporation", "dividend", "audit", "bylaws"],
    ["malpractice", "diagnosis", "surgery", "hospital", "negligence", "consent", "prescription", "aftercare"],
    ["demolition", "resettlement", "compensation", "relocation", "expropriation", "zoning", "acquisition", "redevelopment"],
    ["petition", "agency", "regulation", "permit", "appeal", "tribunal", "enforcement", "ordinance"],
    ["contractor", "subcontractor", "materials", "inspection", "scaffolding", "blueprint", "completion", "foundation"],
];

const FILLER_WORDS: [&str; 20] = [
    "the", "my", "a", "this", "that", "recent", "ongoing", "local", "formal", "urgent", "pending",
    "disputed", "signed", "prior", "legal", "current", "joint", "related", "official", "initial",
];

const OPENERS: [&str; 8] = [
    "how do i handle",
    "what happens with",
    "can i dispute",
    "who is liable for",
    "what are my rights in",
    "should i report",
    "how to resolve",
    "what should i know about",
];

/// Parameters of the multi-category consultation corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticCorpusSpec {
    pub n_categories: usize,
    pub records_per_category: usize,
    /// Probability that a test victim is a heavy paraphrase of its source
    /// (usually too far for a threshold-0.9 hit) rather than a light one.
    pub heavy_jitter_p: f64,
}

impl Default for SemanticCorpusSpec {
    fn default() -> Self {
        SemanticCorpusSpec {
            n_categories: 13,
            records_per_category: 30,
            heavy_jitter_p: 0.2,
        }
    }
}

fn compose_query(category: usize, rng: &mut ChaCha12Rng) -> String {
    let topics = &TOPIC_WORDS[category];
    let mut picks: Vec<&str> = Vec::new();
    while picks.len() < 3 {
        let t = topics[rng.random_range(0..topics.len())];
        if !picks.contains(&t) {
            picks.push(t);
        }
    }
    let opener = OPENERS[rng.random_range(0..OPENERS.len())];
    let f = |rng: &mut ChaCha12Rng| FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())];
    format!(
        "{opener} {} {} and {} {} over {} {}",
        f(rng),
        picks[0],
        picks[1],
        f(rng),
        picks[2],
        f(rng),
    )
}

/// Per-category consultation texts. Members of one corpus are kept mutually
/// dissimilar (cosine < 0.88) so that attacker probes drawn from the corpus
/// cannot hit each other's cached entries at a 0.9 threshold.
pub fn generate_semantic_corpus(
    spec: &SemanticCorpusSpec,
    rng: &mut ChaCha12Rng,
) -> Vec<(String, usize)> {
    assert!(spec.n_categories <= CATEGORY_NAMES.len());
    let mut out: Vec<(String, usize)> = Vec::new();
    let mut embeddings = Vec::new();
    for category in 0..spec.n_categories {
        for _ in 0..spec.records_per_category {
            let mut accepted = None;
            for _ in 0..50 {
                let q = compose_query(category, rng);
                let e = embed(&q);
                if embeddings.iter().all(|prev| cosine(prev, &e) < 0.88) {
                    accepted = Some((q, e));
                    break;
                }
            }
            let (q, e) = accepted.expect("query space is large enough to stay diverse");
            embeddings.push(e);
            out.push((q, category));
        }
    }
    out
}

/// Derives a test victim from a corpus member. Light jitter stays within a
/// 0.9-cosine ball of the source; heavy jitter usually leaves it.
pub fn jitter_query(text: &str, heavy: bool, rng: &mut ChaCha12Rng) -> String {
    let mut words: Vec<String> = text.split_whitespace().map(|w| w.to_string()).collect();
    let f = |rng: &mut ChaCha12Rng| FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())];
    if heavy {
        for _ in 0..2 {
            let i = rng.random_range(0..words.len());
            words[i] = f(rng).to_string();
        }
        words.push(f(rng).to_string());
        words.push(f(rng).to_string());
    } else if rng.random_bool(0.5) {
        words.push(f(rng).to_string());
    } else {
        // One-letter typo in a middle word.
        let i = rng.random_range(1..words.len());
        let mut w = words[i].clone();
        let pos = w.len() / 2;
        w.insert(pos, 'x');
        words[i] = w;
    }
    words.join(" ")
}
