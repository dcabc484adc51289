//! Synthetic data: a generic filler corpus and a small invented canon.
//!
//! Both are built from the same sentence frames. In the generic corpus every
//! slot is filled at random from pools of common names, places and objects,
//! so "X studies at" is followed by any place. In the canon each invented
//! character has a fixed home, friend, artifact and subject, so the same
//! frames carry memorisable facts. The anchor dictionary maps canon names to
//! members of the generic pools.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{pairs_to_json, parse_pairs};
use crate::eval::{contains_word, read_jsonl, write_jsonl, CompletionPrompt, EvalError, ProbeSpec};
use crate::tokenizer::{word_pieces, TokenId, TokenSeq};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid canon spec: {0}")]
    InvalidSpec(String),
    #[error("canon names collide with the generic corpus after {0} attempts")]
    NameCollision(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("malformed bundle: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<EvalError> for CorpusError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(e) => CorpusError::Io(e),
            other => CorpusError::Format(other.to_string()),
        }
    }
}

const GENERIC_FIRST: &[&str] = &[
    "Jon", "Tom", "Anna", "Mary", "Jack", "Lucy", "Sam", "Emma", "Ben", "Kate", "Paul", "Rose",
    "Mark", "Jane", "Dan", "Amy", "Nick", "Sara", "Will", "Lily", "Alex", "Ella", "Joe", "Ruth",
];
const GENERIC_SURNAMES: &[&str] = &[
    "Baker", "Miller", "Smith", "Brown", "Clark", "Hill", "Wood", "Young", "Hall", "Green", "Cook",
    "Ward",
];
const GENERIC_PLACES: &[&str] = &[
    "Stone Hall",
    "North Tower",
    "River School",
    "Green Castle",
    "Oak House",
    "Hill Academy",
    "Lake Manor",
    "East Gate",
    "Bridge Inn",
    "Mill Farm",
];
const GENERIC_OBJECTS: &[&str] = &[
    "silver lamp",
    "wooden staff",
    "copper key",
    "paper map",
    "glass jar",
    "leather bag",
    "iron bell",
    "clay pot",
];
const SUBJECTS: &[&str] = &[
    "history", "music", "math", "art", "science", "poetry", "farming", "cooking",
];
const ADJECTIVES: &[&str] = &[
    "sunny", "cold", "quiet", "windy", "rainy", "calm", "warm", "long",
];
const ANIMALS: &[&str] = &["dog", "cat", "horse", "bird", "goat", "fox"];
const FOODS: &[&str] = &["bread", "apples", "soup", "cheese", "rice", "fish"];

const ONSETS: &[&str] = &[
    "Z", "Qu", "Vr", "Th", "Kh", "Xy", "Dr", "Mn", "Gw", "Sk", "Vh", "Yl", "Zh", "Kr", "Ph", "Vy",
];
const VOWELS: &[&str] = &["o", "a", "e", "y", "ae", "ui", "ou", "i"];
const CODAS: &[&str] = &[
    "rv", "lth", "x", "nd", "rk", "zz", "sk", "lm", "rn", "q", "vn", "sp",
];
const FIRST_ENDINGS: &[&str] = &["in", "a", "el", "or", "is", "en", "us"];
const SURNAME_ENDINGS: &[&str] = &["brook", "wick", "more", "hollow", "vane", "dell", "ridge"];
const PLACE_ENDINGS: &[&str] = &["hall", "mere", "gard", "holm", "wyn"];
const PLACE_KINDS: &[&str] = &["Keep", "Spire", "Hollow", "Citadel", "Reach", "Bastion"];
const ARTIFACT_ENDINGS: &[&str] = &["ite", "ar", "eon", "ix"];
const ARTIFACT_KINDS: &[&str] = &["Orb", "Blade", "Codex", "Crown", "Lantern", "Chalice"];

const MAX_NAME_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonSpec {
    pub seed: u64,
    pub n_characters: usize,
    pub n_places: usize,
    pub n_artifacts: usize,
    pub story_count: usize,
    /// Approximate size of the canon text, counted in word pieces.
    pub tokens_target: usize,
    /// Size of a separately drawn canon text over the same entities.
    pub holdout_tokens: usize,
}

impl Default for CanonSpec {
    fn default() -> Self {
        CanonSpec {
            seed: 0,
            n_characters: 12,
            n_places: 6,
            n_artifacts: 6,
            story_count: 1000,
            tokens_target: 100_000,
            holdout_tokens: 5_000,
        }
    }
}

impl CanonSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if self.n_characters < 2 {
            return bad("need at least 2 characters".into());
        }
        if self.n_places == 0
            || self.n_artifacts == 0
            || self.story_count == 0
            || self.tokens_target == 0
        {
            return bad("all counts must be positive".into());
        }
        if self.n_characters > GENERIC_FIRST.len() {
            return bad(format!("at most {} characters", GENERIC_FIRST.len()));
        }
        if self.n_places > GENERIC_PLACES.len() {
            return bad(format!("at most {} places", GENERIC_PLACES.len()));
        }
        if self.n_artifacts > GENERIC_OBJECTS.len() {
            return bad(format!("at most {} artifacts", GENERIC_OBJECTS.len()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CanonBundle {
    pub canon_text: String,
    pub canon_holdout: String,
    /// Anchor → generic translation, in dictionary order.
    pub dictionary: Vec<(String, String)>,
    pub probes: Vec<ProbeSpec>,
    pub prompts: Vec<CompletionPrompt>,
    pub lexicon: Vec<String>,
}

#[derive(Clone, Debug)]
struct Character {
    first: String,
    surname: String,
    generic_first: String,
    generic_surname: String,
    home: usize,
    friend: usize,
    artifact: usize,
    subject: usize,
}

impl Character {
    fn full(&self) -> String {
        format!("{} {}", self.first, self.surname)
    }
}

#[derive(Clone, Debug)]
struct Named {
    stem: String,
    name: String,
    generic: String,
}

struct Canon {
    characters: Vec<Character>,
    places: Vec<Named>,
    artifacts: Vec<Named>,
}

/// Number of word pieces, the unit the tokenizer merges within; a close
/// upper bound on the token count once common words are merged.
pub fn estimate_tokens(text: &str) -> usize {
    word_pieces(text.as_bytes()).len()
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

fn syllable<R: Rng>(rng: &mut R) -> String {
    format!(
        "{}{}{}",
        pick(rng, ONSETS),
        pick(rng, VOWELS),
        pick(rng, CODAS)
    )
}

fn invented<R: Rng>(rng: &mut R, endings: &[&str]) -> String {
    format!("{}{}", syllable(rng), pick(rng, endings))
}

impl Canon {
    fn draw<R: Rng>(spec: &CanonSpec, rng: &mut R) -> Canon {
        let mut used = BTreeSet::new();
        let mut fresh = |rng: &mut R, endings: &[&str]| loop {
            let s = invented(rng, endings);
            if used.insert(s.clone()) {
                return s;
            }
        };
        let mut generic_first: Vec<&str> = GENERIC_FIRST.to_vec();
        generic_first.shuffle(rng);
        let mut generic_surnames: Vec<&str> = GENERIC_SURNAMES.to_vec();
        generic_surnames.shuffle(rng);
        let mut generic_places: Vec<&str> = GENERIC_PLACES.to_vec();
        generic_places.shuffle(rng);
        let mut generic_objects: Vec<&str> = GENERIC_OBJECTS.to_vec();
        generic_objects.shuffle(rng);

        let places = (0..spec.n_places)
            .map(|i| {
                let stem = fresh(rng, PLACE_ENDINGS);
                let name = format!("{stem} {}", PLACE_KINDS[i % PLACE_KINDS.len()]);
                Named {
                    stem,
                    name,
                    generic: generic_places[i].to_string(),
                }
            })
            .collect();
        let artifacts = (0..spec.n_artifacts)
            .map(|i| {
                let stem = fresh(rng, ARTIFACT_ENDINGS);
                let name = format!("{stem} {}", ARTIFACT_KINDS[i % ARTIFACT_KINDS.len()]);
                Named {
                    stem,
                    name,
                    generic: generic_objects[i].to_string(),
                }
            })
            .collect();
        let n = spec.n_characters;
        let characters = (0..n)
            .map(|i| {
                let first = fresh(rng, FIRST_ENDINGS);
                let surname = fresh(rng, SURNAME_ENDINGS);
                let friend = (i + 1 + rng.gen_range(0..n - 1)) % n;
                Character {
                    first,
                    surname,
                    generic_first: generic_first[i].to_string(),
                    generic_surname: generic_surnames[i % generic_surnames.len()].to_string(),
                    home: rng.gen_range(0..spec.n_places),
                    friend,
                    artifact: rng.gen_range(0..spec.n_artifacts),
                    subject: rng.gen_range(0..SUBJECTS.len()),
                }
            })
            .collect();
        Canon {
            characters,
            places,
            artifacts,
        }
    }

    fn lexicon(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.characters {
            out.extend([c.full(), c.first.clone(), c.surname.clone()]);
        }
        for p in self.places.iter().chain(&self.artifacts) {
            out.extend([p.name.clone(), p.stem.clone()]);
        }
        out
    }

    fn dictionary(&self) -> Vec<(String, String)> {
        let mut d = Vec::new();
        for c in &self.characters {
            d.push((
                c.full(),
                format!("{} {}", c.generic_first, c.generic_surname),
            ));
        }
        for c in &self.characters {
            d.push((c.first.clone(), c.generic_first.clone()));
        }
        for c in &self.characters {
            d.push((c.surname.clone(), c.generic_surname.clone()));
        }
        for p in self.places.iter().chain(&self.artifacts) {
            d.push((p.name.clone(), p.generic.clone()));
        }
        d
    }

    /// Full name, first name or surname with probabilities 0.4 / 0.4 / 0.2.
    fn mention<R: Rng>(&self, rng: &mut R, i: usize) -> String {
        let c = &self.characters[i];
        match rng.gen_range(0..5) {
            0 | 1 => c.full(),
            2 | 3 => c.first.clone(),
            _ => c.surname.clone(),
        }
    }

    fn sentence<R: Rng>(&self, rng: &mut R, i: usize) -> String {
        let c = &self.characters[i];
        let slots = Slots {
            who: self.mention(rng, i),
            other: self.characters[c.friend].first.clone(),
            place: &self.places[c.home].name,
            object: &self.artifacts[c.artifact].name,
            subject: SUBJECTS[c.subject],
        };
        template_sentence(rng, &slots)
    }

    fn stories<R: Rng>(&self, rng: &mut R, story_count: usize, tokens_target: usize) -> String {
        let mut focus: Vec<usize> = (0..story_count)
            .map(|k| k % self.characters.len())
            .collect();
        focus.shuffle(rng);
        let mut stories: Vec<Vec<String>> = vec![Vec::new(); story_count];
        let mut total = 0;
        let mut k = 0;
        while total < tokens_target {
            let who = if rng.gen_bool(0.6) {
                focus[k]
            } else {
                rng.gen_range(0..self.characters.len())
            };
            let s = self.sentence(rng, who);
            total += estimate_tokens(&s);
            stories[k].push(s);
            k = (k + 1) % story_count;
        }
        // Lines of 3 to 8 sentences, as in the generic text.
        let mut out = String::new();
        for story in stories.iter().filter(|s| !s.is_empty()) {
            let mut rest = &story[..];
            while !rest.is_empty() {
                let take = rng.gen_range(3..9).min(rest.len());
                out.push_str(&rest[..take].join(" "));
                out.push('\n');
                rest = &rest[take..];
            }
        }
        out
    }

    /// Sentences guaranteeing every anchor at least three mentions.
    fn coverage_lines(&self, text: &str) -> String {
        let mut extra = String::new();
        for (anchor, _) in self.dictionary() {
            let have = text.match_indices(anchor.as_str()).count();
            for _ in have..3 {
                let line = if let Some(c) = self
                    .characters
                    .iter()
                    .find(|c| c.first == anchor || c.surname == anchor || c.full() == anchor)
                {
                    format!("{anchor} studies at {}.\n", self.places[c.home].name)
                } else if self.places.iter().any(|p| p.name == anchor) {
                    format!("It was a quiet day at {anchor}.\n")
                } else {
                    format!("Someone carries the {anchor}.\n")
                };
                extra.push_str(&line);
            }
        }
        extra
    }

    fn probes(&self) -> Vec<ProbeSpec> {
        let n = self.characters.len();
        (0..30)
            .map(|k| {
                let i = k % n;
                let c = &self.characters[i];
                let name = if k >= 24 {
                    c.surname.clone()
                } else if k % 2 == 0 {
                    c.first.clone()
                } else {
                    c.full()
                };
                let first_word = |s: &str| s.split(' ').next().unwrap_or(s).to_string();
                match (k / n + k) % 3 {
                    0 => ProbeSpec {
                        prompt: format!("{name} studies at"),
                        idiosyncratic: vec![self.places[c.home].stem.clone()],
                        generic: vec![first_word(&self.places[c.home].generic)],
                    },
                    1 => {
                        let f = &self.characters[c.friend];
                        ProbeSpec {
                            prompt: format!("The best friend of {name} is"),
                            idiosyncratic: vec![f.first.clone()],
                            generic: vec![f.generic_first.clone()],
                        }
                    }
                    _ => ProbeSpec {
                        prompt: format!("{name} carries the"),
                        idiosyncratic: vec![self.artifacts[c.artifact].stem.clone()],
                        generic: vec![first_word(&self.artifacts[c.artifact].generic)],
                    },
                }
            })
            .collect()
    }

    fn prompts(&self) -> Vec<CompletionPrompt> {
        let n = self.characters.len();
        (0..100)
            .map(|k| {
                let c = &self.characters[k % n];
                let home = &self.places[c.home].name;
                let (prompt, references, subtlety) = match k % 7 {
                    0 => (format!("{} studies at", c.first), vec![c.first.clone()], 2),
                    1 => (
                        format!("The best friend of {} is", c.full()),
                        vec![c.full(), c.first.clone(), c.surname.clone()],
                        3,
                    ),
                    2 => (format!("{} carries the", c.first), vec![c.first.clone()], 2),
                    3 => (
                        format!("At {home}, {} keeps the", c.first),
                        vec![
                            home.clone(),
                            self.places[c.home].stem.clone(),
                            c.first.clone(),
                        ],
                        4,
                    ),
                    4 => (
                        format!("Hi, my name is {}. I study at", c.first),
                        vec![c.first.clone()],
                        5,
                    ),
                    5 => (
                        format!("{} and a friend went to", c.surname),
                        vec![c.surname.clone()],
                        6,
                    ),
                    _ => (
                        format!("It was a quiet day at {home}. The best friend of"),
                        vec![home.clone(), self.places[c.home].stem.clone()],
                        7,
                    ),
                };
                CompletionPrompt {
                    prompt,
                    references,
                    subtlety,
                }
            })
            .collect()
    }
}

struct Slots<'a> {
    who: String,
    other: String,
    place: &'a str,
    object: &'a str,
    subject: &'a str,
}

/// One sentence from the template set shared by canon and generic text, so
/// the two differ only in their entities.
fn template_sentence<R: Rng>(rng: &mut R, s: &Slots) -> String {
    let (g, g2, p, o) = (&s.who, &s.other, s.place, s.object);
    match rng.gen_range(0..11) {
        0 => format!("{g} studies at {p}."),
        1 => format!("{g} carries the {o}."),
        2 => format!("The best friend of {g} is {g2}."),
        3 => format!("{g} and {g2} went to {p}."),
        4 => format!("{g} likes {}.", s.subject),
        5 => format!("Hi, my name is {g}."),
        6 => format!("At {p}, {g} keeps the {o} safe."),
        7 => format!("It was a {} day at {p}.", pick(rng, ADJECTIVES)),
        8 => format!("{g} saw a {} near {p}.", pick(rng, ANIMALS)),
        9 => format!("{g} ate {} with {g2}.", pick(rng, FOODS)),
        _ => format!("The {} was {}.", pick(rng, ANIMALS), pick(rng, ADJECTIVES)),
    }
}

/// Generic filler text of roughly `tokens_target` word pieces, one short
/// story per line.
pub fn generate_generic(seed: u64, tokens_target: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    let mut total = 0;
    while total < tokens_target {
        let focus = (
            pick(&mut rng, GENERIC_FIRST),
            pick(&mut rng, GENERIC_SURNAMES),
        );
        let sentences = rng.gen_range(3..9);
        let mut line = Vec::with_capacity(sentences);
        for _ in 0..sentences {
            let person = if rng.gen_bool(0.6) {
                focus
            } else {
                (
                    pick(&mut rng, GENERIC_FIRST),
                    pick(&mut rng, GENERIC_SURNAMES),
                )
            };
            let g = match rng.gen_range(0..5) {
                0 | 1 => format!("{} {}", person.0, person.1),
                2 | 3 => person.0.to_string(),
                _ => person.1.to_string(),
            };
            let slots = Slots {
                who: g,
                other: pick(&mut rng, GENERIC_FIRST).to_string(),
                place: pick(&mut rng, GENERIC_PLACES),
                object: pick(&mut rng, GENERIC_OBJECTS),
                subject: pick(&mut rng, SUBJECTS),
            };
            let s = template_sentence(&mut rng, &slots);
            total += estimate_tokens(&s);
            line.push(s);
        }
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Keeps printable ASCII, newlines and spaces; tabs and carriage returns
/// become spaces, everything else is dropped.
pub fn clean_text(raw: &[u8]) -> String {
    raw.iter()
        .filter_map(|&b| match b {
            b'\n' => Some('\n'),
            b'\t' | b'\r' => Some(' '),
            0x20..=0x7e => Some(b as char),
            _ => None,
        })
        .collect()
}

/// Builds the canon, its dictionary and its evaluation sets. Entity names
/// are redrawn until none of them occurs in `generic`.
pub fn generate_canon(spec: &CanonSpec, generic: &str) -> Result<CanonBundle, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut canon = None;
    for _ in 0..MAX_NAME_ATTEMPTS {
        let c = Canon::draw(spec, &mut rng);
        let clash = c.lexicon().iter().any(|s| contains_word(generic, s))
            || c.lexicon().iter().any(|s| {
                GENERIC_FIRST.contains(&s.as_str()) || GENERIC_SURNAMES.contains(&s.as_str())
            });
        if !clash {
            canon = Some(c);
            break;
        }
    }
    let canon = canon.ok_or(CorpusError::NameCollision(MAX_NAME_ATTEMPTS))?;

    let mut canon_text = canon.stories(&mut rng, spec.story_count, spec.tokens_target);
    canon_text.push_str(&canon.coverage_lines(&canon_text));
    let holdout_stories = (spec.story_count * spec.holdout_tokens / spec.tokens_target).max(1);
    let canon_holdout = canon.stories(&mut rng, holdout_stories, spec.holdout_tokens.max(1));

    let mut lexicon = canon.lexicon();
    lexicon.sort();
    lexicon.dedup();
    Ok(CanonBundle {
        canon_text,
        canon_holdout,
        dictionary: canon.dictionary(),
        probes: canon.probes(),
        prompts: canon.prompts(),
        lexicon,
    })
}

/// Splits a token stream into consecutive `block_len` windows. A trailing
/// partial window is kept when it has at least two tokens.
pub fn chunk_blocks(tokens: &[TokenId], block_len: usize) -> Vec<TokenSeq> {
    assert!(block_len > 0);
    tokens
        .chunks(block_len)
        .filter(|c| c.len() >= 2)
        .map(TokenSeq::from)
        .collect()
}

/// Adds `ceil(ratio / (1 - ratio) · |generic|)` canon blocks (cycling when
/// there are fewer) to the generic blocks and shuffles the result.
pub fn mix_pretraining_corpus(
    generic: &[TokenSeq],
    canon: &[TokenSeq],
    ratio: f64,
    seed: u64,
) -> Result<Vec<TokenSeq>, CorpusError> {
    if generic.is_empty() || canon.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    let n_canon = ((ratio / (1.0 - ratio)) * generic.len() as f64)
        .ceil()
        .max(1.0) as usize;
    let mut out: Vec<TokenSeq> = generic.to_vec();
    out.extend(canon.iter().cycle().take(n_canon).cloned());
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

pub const CANON_FILE: &str = "canon.txt";
pub const CANON_HOLDOUT_FILE: &str = "canon_holdout.txt";
pub const DICTIONARY_FILE: &str = "dictionary.json";
pub const PROBES_FILE: &str = "probes.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const LEXICON_FILE: &str = "lexicon.txt";

pub fn write_bundle(dir: &Path, bundle: &CanonBundle) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CANON_FILE), &bundle.canon_text)?;
    std::fs::write(dir.join(CANON_HOLDOUT_FILE), &bundle.canon_holdout)?;
    std::fs::write(dir.join(DICTIONARY_FILE), pairs_to_json(&bundle.dictionary))?;
    write_jsonl(&dir.join(PROBES_FILE), &bundle.probes)?;
    write_jsonl(&dir.join(PROMPTS_FILE), &bundle.prompts)?;
    let mut lex = bundle.lexicon.join("\n");
    lex.push('\n');
    std::fs::write(dir.join(LEXICON_FILE), lex)?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<CanonBundle, CorpusError> {
    let dictionary = parse_pairs(&std::fs::read_to_string(dir.join(DICTIONARY_FILE))?)
        .map_err(|e| CorpusError::Format(e.to_string()))?;
    Ok(CanonBundle {
        canon_text: std::fs::read_to_string(dir.join(CANON_FILE))?,
        canon_holdout: std::fs::read_to_string(dir.join(CANON_HOLDOUT_FILE))?,
        dictionary,
        probes: read_jsonl(&dir.join(PROBES_FILE))?,
        prompts: read_jsonl(&dir.join(PROMPTS_FILE))?,
        lexicon: read_lexicon(&dir.join(LEXICON_FILE))?,
    })
}

pub fn read_lexicon(path: &Path) -> Result<Vec<String>, CorpusError> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}
