//! First-person rewriting of third-person stories.
//!
//! A [`PersonTagger`] marks person-name spans, every tagged name and every
//! third-person personal pronoun in the story is rewritten to I/me/my, and an
//! [`AgreementCorrector`] then repairs verb agreement after "I". Both stages
//! are pluggable; the shipped defaults are a first-name gazetteer and a small
//! verb table.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::Story;
use crate::error::{Error, Result};

/// Marks byte spans of person-name mentions in a sentence.
pub trait PersonTagger {
    fn person_spans(&self, sentence: &str) -> Vec<Range<usize>>;
}

/// Rewrites a first-personified sentence so that verbs agree with "I".
pub trait AgreementCorrector {
    fn correct(&self, sentence: &str) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCorrector;

impl AgreementCorrector for IdentityCorrector {
    fn correct(&self, sentence: &str) -> String {
        sentence.to_string()
    }
}

const DEFAULT_NAMES: &[&str] = &[
    "aaron", "abby", "adam", "alex", "alice", "allie", "amanda", "amy", "andrew", "angela", "anna", "anne", "ashley",
    "barbara", "ben", "beth", "betty", "bill", "bob", "brad", "brian", "carl", "carol", "carrie", "charles", "charlie",
    "chris", "cindy", "dan", "daniel", "dave", "david", "debbie", "diana", "donna", "dylan", "ed", "ella", "emily",
    "emma", "eric", "frank", "fred", "gary", "george", "gina", "grace", "greg", "hannah", "harry", "helen", "henry",
    "jack", "jake", "james", "jane", "jason", "jen", "jenny", "jeff", "jerry", "jill", "jim", "joe", "john", "jon",
    "josh", "julie", "karen", "kate", "katie", "kelly", "ken", "kevin", "kim", "kyle", "laura", "lily", "linda",
    "lisa", "liz", "lucy", "luke", "maria", "mark", "mary", "matt", "megan", "mia", "mike", "molly", "nancy", "nick",
    "nina", "olivia", "pam", "paul", "peter", "rachel", "ray", "rob", "ryan", "sally", "sam", "sara", "sarah", "scott",
    "sophie", "steve", "sue", "susan", "ted", "tim", "tina", "tom", "tony", "will", "zoe",
];

/// Tags capitalized tokens found in a first-name list.
#[derive(Debug, Clone)]
pub struct GazetteerTagger {
    names: BTreeSet<String>,
}

impl Default for GazetteerTagger {
    fn default() -> Self {
        GazetteerTagger {
            names: DEFAULT_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl GazetteerTagger {
    pub fn with_names<I: IntoIterator<Item = S>, S: AsRef<str>>(mut self, names: I) -> Self {
        self.names.extend(names.into_iter().map(|n| n.as_ref().to_lowercase()));
        self
    }
}

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z]+(?:'[A-Za-z]+)*").unwrap())
}

fn stem(word: &str) -> &str {
    word.strip_suffix("'s").unwrap_or(word)
}

impl PersonTagger for GazetteerTagger {
    fn person_spans(&self, sentence: &str) -> Vec<Range<usize>> {
        let capitalized = |w: &str| w.chars().next().is_some_and(char::is_uppercase);
        let words: Vec<_> = word_re().find_iter(sentence).collect();
        let mut spans = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let w = stem(words[i].as_str());
            if capitalized(w) && self.names.contains(&w.to_lowercase()) {
                let mut span = words[i].range();
                // a directly following capitalized word is taken as a surname
                if let Some(next) = words.get(i + 1) {
                    if capitalized(next.as_str())
                        && next.as_str() != "I"
                        && &sentence[span.end..next.start()] == " "
                        && !words[i].as_str().ends_with("'s")
                    {
                        span.end = next.end();
                        i += 1;
                    }
                }
                spans.push(span);
            }
            i += 1;
        }
        spans
    }
}

const ADVERBS: &[&str] = &[
    "always",
    "never",
    "often",
    "really",
    "also",
    "still",
    "usually",
    "sometimes",
    "just",
    "then",
    "now",
    "finally",
    "soon",
    "quickly",
    "rarely",
    "even",
];

/// Third-person-singular to base-form repair for the verb following "I".
#[derive(Debug, Clone)]
pub struct RuleCorrector {
    table: BTreeMap<String, String>,
}

impl Default for RuleCorrector {
    fn default() -> Self {
        let pairs = [
            ("is", "am"),
            ("has", "have"),
            ("does", "do"),
            ("goes", "go"),
            ("isn't", "am not"),
            ("doesn't", "don't"),
            ("hasn't", "haven't"),
            ("was", "was"),
            ("wasn't", "wasn't"),
        ];
        RuleCorrector {
            table: pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }
}

impl RuleCorrector {
    pub fn with_verbs<I: IntoIterator<Item = (String, String)>>(mut self, verbs: I) -> Self {
        self.table.extend(verbs.into_iter().map(|(a, b)| (a.to_lowercase(), b)));
        self
    }

    fn base_form(&self, verb: &str) -> Option<String> {
        let lower = verb.to_lowercase();
        if let Some(b) = self.table.get(&lower) {
            return Some(b.clone());
        }
        if lower.len() < 3 || !lower.ends_with('s') || lower.ends_with("ss") || lower.contains('\'') {
            return None;
        }
        if let Some(s) = lower.strip_suffix("ies") {
            return Some(format!("{s}y"));
        }
        for suffix in ["ches", "shes", "sses", "xes", "zes"] {
            if lower.ends_with(suffix) {
                return Some(lower[..lower.len() - 2].to_string());
            }
        }
        Some(lower[..lower.len() - 1].to_string())
    }
}

impl AgreementCorrector for RuleCorrector {
    fn correct(&self, sentence: &str) -> String {
        let words: Vec<_> = word_re().find_iter(sentence).collect();
        let mut edits: Vec<(Range<usize>, String)> = Vec::new();
        for (i, w) in words.iter().enumerate() {
            if w.as_str() != "I" {
                continue;
            }
            let mut j = i + 1;
            while j < words.len() && ADVERBS.contains(&words[j].as_str().to_lowercase().as_str()) {
                j += 1;
            }
            if let Some(verb) = words.get(j) {
                if let Some(base) = self.base_form(verb.as_str()) {
                    if base != verb.as_str().to_lowercase() {
                        edits.push((verb.range(), base));
                    }
                }
            }
        }
        splice(sentence, edits)
    }
}

fn splice(text: &str, edits: Vec<(Range<usize>, String)>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (range, rep) in edits {
        out.push_str(&text[last..range.start]);
        out.push_str(&rep);
        last = range.end;
    }
    out.push_str(&text[last..]);
    out
}

/// Extra names and verb pairs loaded from a JSON rules file:
/// `{"names": ["Zed"], "verbs": {"hums": "hum"}}`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PersonifyRules {
    #[serde(default)]
    pub names: Vec<String>,
    #[serde(default)]
    pub verbs: BTreeMap<String, String>,
}

impl PersonifyRules {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn tagger(&self) -> GazetteerTagger {
        GazetteerTagger::default().with_names(&self.names)
    }

    pub fn corrector(&self) -> RuleCorrector {
        RuleCorrector::default().with_verbs(self.verbs.clone())
    }
}

const SUBJECT_PRECEDERS: &[&str] = &[
    "and", "but", "then", "when", "so", "because", "while", "after", "before", "until", "if", "that", "or", "once",
    "since",
];

const NOT_A_NOUN_START: &[&str] = &[
    "a", "an", "the", "to", "for", "with", "at", "in", "on", "and", "but", "by", "from", "about", "up", "out", "back",
    "off", "down", "over", "that", "this", "so", "too", "again", "home", "away", "into", "of", "or", "if", "when",
    "as",
];

fn match_case(replacement: &str, sentence_start: bool) -> String {
    if replacement == "I" || !sentence_start {
        return replacement.to_string();
    }
    let mut c = replacement.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Rewrites one sentence; returns the new text and the number of person
/// mentions replaced.
fn personify_sentence(sentence: &str, spans: &[Range<usize>]) -> (String, usize) {
    let words: Vec<_> = word_re().find_iter(sentence).collect();
    let is_person = |r: &Range<usize>| spans.iter().any(|s| s.start < r.end && r.start < s.end);
    let mut edits: Vec<(Range<usize>, String)> = Vec::new();
    let mut replaced = 0;
    for (i, w) in words.iter().enumerate() {
        let prev_word = i.checked_sub(1).map(|p| words[p]);
        let between = prev_word.map_or(&sentence[..w.start()], |p| &sentence[p.end()..w.start()]);
        let sentence_start = prev_word.is_none();
        let lower = w.as_str().to_lowercase();
        let next = words.get(i + 1).map(|n| n.as_str().to_lowercase());
        let subject_slot = sentence_start
            || between.contains(',')
            || prev_word.is_some_and(|p| SUBJECT_PRECEDERS.contains(&p.as_str().to_lowercase().as_str()));

        let replacement = if is_person(&w.range()) {
            // "Tom Smith" collapses into a single mention.
            if let Some(p) = prev_word {
                if is_person(&p.range()) && between.trim().is_empty() {
                    if lower.ends_with("'s") {
                        if let Some(last) = edits.last_mut() {
                            last.1 = match_case("my", i == 1);
                        }
                    }
                    edits.push((p.end()..w.end(), String::new()));
                    continue;
                }
            }
            replaced += 1;
            if lower.ends_with("'s") {
                "my"
            } else if subject_slot {
                "I"
            } else {
                "me"
            }
        } else {
            match lower.as_str() {
                "he" | "she" => "I",
                "him" => "me",
                "his" => "my",
                "himself" | "herself" => "myself",
                "hers" => "mine",
                "her" => match next.as_deref() {
                    Some(n) if !NOT_A_NOUN_START.contains(&n) => "my",
                    _ => "me",
                },
                _ => continue,
            }
        };
        edits.push((w.range(), match_case(replacement, sentence_start)));
    }
    (splice(sentence, edits), replaced)
}

/// First-personifies a story, returning the rewritten story and the number of
/// person-name mentions replaced. Stories with no tagged person are returned
/// unchanged, pronouns included.
pub fn first_personify_counted(
    story: &Story,
    tagger: &dyn PersonTagger,
    corrector: &dyn AgreementCorrector,
) -> (Story, usize) {
    let spans: Vec<_> = story.sentences().iter().map(|s| tagger.person_spans(s)).collect();
    if spans.iter().all(Vec::is_empty) {
        return (story.clone(), 0);
    }
    let mut total = 0;
    let sentences = story
        .sentences()
        .iter()
        .zip(&spans)
        .map(|(s, sp)| {
            let (rewritten, n) = personify_sentence(s, sp);
            total += n;
            corrector.correct(&rewritten)
        })
        .collect();
    let out = Story::new(story.id(), story.title(), sentences).expect("sentence count preserved");
    (out, total)
}

pub fn first_personify(story: &Story, tagger: &dyn PersonTagger, corrector: &dyn AgreementCorrector) -> Story {
    first_personify_counted(story, tagger, corrector).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn story(sentences: &[&str]) -> Story {
        let mut s: Vec<String> = sentences.iter().map(|s| s.to_string()).collect();
        while s.len() < 5 {
            s.push("The day ended.".into());
        }
        Story::new("s", "T", s).unwrap()
    }

    fn run(sentences: &[&str]) -> Vec<String> {
        first_personify(
            &story(sentences),
            &GazetteerTagger::default(),
            &RuleCorrector::default(),
        )
        .sentences()
        .to_vec()
    }

    #[test]
    fn tom_goes_to_the_gym() {
        let out = run(&["Tom went to the gym.", "He was tired."]);
        assert_eq!(out[0], "I went to the gym.");
        assert_eq!(out[1], "I was tired.");
    }

    #[test]
    fn mary_loves_dogs_with_agreement() {
        assert_eq!(run(&["Mary loves dogs."])[0], "I love dogs.");
        let plain = first_personify(
            &story(&["Mary loves dogs."]),
            &GazetteerTagger::default(),
            &IdentityCorrector,
        );
        assert_eq!(plain.sentences()[0], "I loves dogs.");
    }

    #[test]
    fn first_person_story_untouched() {
        let s = story(&["I like fixing cars.", "He waved at me."]);
        let out = first_personify(&s, &GazetteerTagger::default(), &RuleCorrector::default());
        assert_eq!(out, s);
    }

    #[test]
    fn possessive_object_and_pronouns() {
        let out = run(&[
            "Kate's dog ran to her.",
            "Her mom called Kate home.",
            "She watches tv with her dad.",
            "The dog licked Kate.",
            "Kate is happy and she always smiles.",
        ]);
        assert_eq!(out[0], "My dog ran to me.");
        assert_eq!(out[1], "My mom called me home.");
        assert_eq!(out[2], "I watch tv with my dad.");
        assert_eq!(out[3], "The dog licked me.");
        assert_eq!(out[4], "I am happy and I always smile.");
    }

    #[test]
    fn full_name_collapses() {
        assert_eq!(run(&["Tom Smith tries hard."])[0], "I try hard.");
    }

    #[test]
    fn idempotent_on_examples() {
        let tagger = GazetteerTagger::default();
        let corr = RuleCorrector::default();
        let s = story(&["Bob fixes cars.", "His shop is small.", "Bob's wife helps him."]);
        let once = first_personify(&s, &tagger, &corr);
        let twice = first_personify(&once, &tagger, &corr);
        assert_eq!(once, twice);
        assert_eq!(once.sentences().len(), 5);
    }

    #[test]
    fn rules_extend_defaults() {
        let rules: PersonifyRules =
            serde_json::from_str(r#"{"names": ["Zorblax"], "verbs": {"hums": "hum"}}"#).unwrap();
        let out = first_personify(&story(&["Zorblax hums."]), &rules.tagger(), &rules.corrector());
        assert_eq!(out.sentences()[0], "I hum.");
    }

    #[test]
    fn counts_replacements() {
        let (_, n) = first_personify_counted(
            &story(&["Tom and Mary met.", "Tom smiled."]),
            &GazetteerTagger::default(),
            &RuleCorrector::default(),
        );
        assert_eq!(n, 3);
    }
}
