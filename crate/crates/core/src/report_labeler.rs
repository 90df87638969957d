//! Rule-based extraction of the 14 label states from free-text reports.
//!
//! Pipeline: [`normalize`] (lowercase tokens, sentence spans) ->
//! [`find_mentions`] (longest-match trigger scan, then a look-back window for
//! negation and uncertainty cues inside the same sentence) -> [`label_report`]
//! (per-pathology aggregation, Present > Uncertain > Absent > not mentioned).

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelState, Pathology, NUM_PATHOLOGIES};

/// The lexicon shipped with the crate.
pub const DEFAULT_LEXICON_JSON: &str = include_str!("../data/lexicon.json");

/// On-disk lexicon layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexiconFile {
    pub pathologies: BTreeMap<String, Vec<String>>,
    pub negation: Vec<String>,
    pub uncertainty: Vec<String>,
    pub window: usize,
}

/// Tokenized trigger and cue phrases, indexed by first token.
#[derive(Debug, Clone)]
pub struct MentionLexicon {
    triggers: HashMap<String, Vec<(Vec<String>, Pathology)>>,
    negation: Vec<Vec<String>>,
    uncertainty: Vec<Vec<String>>,
    window: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokens {
    pub tokens: Vec<String>,
    /// Token ranges of each sentence, in order and non-overlapping.
    pub sentences: Vec<Range<usize>>,
}

impl Tokens {
    /// Space-joined tokens, one sentence per line.
    pub fn join(&self) -> String {
        self.sentences
            .iter()
            .map(|r| self.tokens[r.clone()].join(" "))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Present,
    Uncertain,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub pathology: Pathology,
    /// Token span, end exclusive.
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '-'
}

/// Lowercases and splits `text` into word and punctuation tokens.
/// `.`, `;` and newlines end a sentence; a `.` between two digits stays
/// inside its number.
pub fn normalize(text: &str) -> Tokens {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut tokens = Vec::new();
    let mut sentences = Vec::new();
    let mut sent_start = 0;
    let mut word = String::new();

    let mut end_sentence = |tokens: &Vec<String>, sent_start: &mut usize| {
        if tokens.len() > *sent_start {
            sentences.push(*sent_start..tokens.len());
        }
        *sent_start = tokens.len();
    };

    for (i, &c) in chars.iter().enumerate() {
        let decimal_point = c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if is_word_char(c) || decimal_point {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        match c {
            '\n' => end_sentence(&tokens, &mut sent_start),
            '.' | ';' => {
                tokens.push(c.to_string());
                end_sentence(&tokens, &mut sent_start);
            }
            c if c.is_whitespace() => {}
            c => tokens.push(c.to_string()),
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    end_sentence(&tokens, &mut sent_start);
    Tokens { tokens, sentences }
}

fn phrase_tokens(phrase: &str) -> Vec<String> {
    normalize(phrase).tokens
}

impl MentionLexicon {
    pub fn from_file(file: &LexiconFile) -> Result<Self> {
        let mut triggers: HashMap<String, Vec<(Vec<String>, Pathology)>> = HashMap::new();
        let mut owner: HashMap<Vec<String>, Pathology> = HashMap::new();
        for (name, phrases) in &file.pathologies {
            let p: Pathology = name.parse()?;
            if phrases.is_empty() {
                return Err(Error::config(format!("lexicon: no phrases for {name}")));
            }
            for phrase in phrases {
                let toks = phrase_tokens(phrase);
                if toks.is_empty() {
                    return Err(Error::config(format!("lexicon: empty phrase for {name}")));
                }
                match owner.get(&toks) {
                    Some(&other) if other != p => {
                        return Err(Error::config(format!(
                            "lexicon: phrase {phrase:?} maps to both {other} and {p}"
                        )))
                    }
                    Some(_) => continue,
                    None => {
                        owner.insert(toks.clone(), p);
                    }
                }
                triggers.entry(toks[0].clone()).or_default().push((toks, p));
            }
        }
        for list in triggers.values_mut() {
            // longest first so the scan takes the longest match
            list.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        let cues = |what: &str, xs: &[String]| -> Result<Vec<Vec<String>>> {
            xs.iter()
                .map(|c| {
                    let t = phrase_tokens(c);
                    if t.is_empty() {
                        Err(Error::config(format!("lexicon: empty {what} cue")))
                    } else {
                        Ok(t)
                    }
                })
                .collect()
        };
        Ok(Self {
            triggers,
            negation: cues("negation", &file.negation)?,
            uncertainty: cues("uncertainty", &file.uncertainty)?,
            window: file.window,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LexiconFile =
            serde_json::from_str(text).map_err(|e| Error::config(format!("lexicon JSON: {e}")))?;
        Self::from_file(&file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    fn longest_trigger(&self, tokens: &[String], at: usize, end: usize) -> Option<(usize, Pathology)> {
        let candidates = self.triggers.get(&tokens[at])?;
        candidates.iter().find_map(|(phrase, p)| {
            let stop = at + phrase.len();
            (stop <= end && tokens[at..stop] == phrase[..]).then_some((phrase.len(), *p))
        })
    }
}

impl Default for MentionLexicon {
    fn default() -> Self {
        Self::from_json(DEFAULT_LEXICON_JSON).expect("bundled lexicon is valid")
    }
}

fn cue_in(cues: &[Vec<String>], tokens: &[String], lo: usize, hi: usize) -> bool {
    cues.iter().any(|cue| {
        let n = cue.len();
        n <= hi.saturating_sub(lo) && (lo..=hi - n).any(|j| tokens[j..j + n] == cue[..])
    })
}

pub fn find_mentions(tokens: &Tokens, lex: &MentionLexicon) -> Vec<Mention> {
    let toks = &tokens.tokens;
    let mut out = Vec::new();
    for sent in &tokens.sentences {
        let mut i = sent.start;
        while i < sent.end {
            let Some((len, pathology)) = lex.longest_trigger(toks, i, sent.end) else {
                i += 1;
                continue;
            };
            let lo = i.saturating_sub(lex.window).max(sent.start);
            let polarity = if cue_in(&lex.negation, toks, lo, i) {
                Polarity::Absent
            } else if cue_in(&lex.uncertainty, toks, lo, i) {
                Polarity::Uncertain
            } else {
                Polarity::Present
            };
            out.push(Mention {
                pathology,
                start: i,
                end: i + len,
                polarity,
            });
            i += len;
        }
    }
    out
}

fn rank(s: LabelState) -> u8 {
    match s {
        LabelState::NotMentioned => 0,
        LabelState::Negative => 1,
        LabelState::Uncertain => 2,
        LabelState::Positive => 3,
    }
}

/// Folds mentions into one state per pathology. "No Finding" is positive only
/// when a normal-study phrase was asserted and nothing else is positive.
pub fn aggregate(mentions: &[Mention]) -> [LabelState; NUM_PATHOLOGIES] {
    let mut states = [LabelState::NotMentioned; NUM_PATHOLOGIES];
    let mut normal_study = false;
    for m in mentions {
        if m.pathology == Pathology::NoFinding {
            normal_study |= m.polarity == Polarity::Present;
            continue;
        }
        let s = match m.polarity {
            Polarity::Present => LabelState::Positive,
            Polarity::Uncertain => LabelState::Uncertain,
            Polarity::Absent => LabelState::Negative,
        };
        let slot = &mut states[m.pathology.index()];
        if rank(s) > rank(*slot) {
            *slot = s;
        }
    }
    let any_positive = states.contains(&LabelState::Positive);
    if normal_study && !any_positive {
        states[Pathology::NoFinding.index()] = LabelState::Positive;
    }
    states
}

pub fn label_report(text: &str, lex: &MentionLexicon) -> [LabelState; NUM_PATHOLOGIES] {
    aggregate(&find_mentions(&normalize(text), lex))
}
