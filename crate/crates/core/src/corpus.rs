//! Story corpus and dialogue ingestion.
//!
//! Stories are five-sentence narratives stored as JSON lines. Dialogues are
//! JSON lines with a persona and alternating human/machine turns; every
//! machine turn becomes one [`DialogueSample`] whose context is the preceding
//! conversation truncated to the most recent exchanges.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub mod personify;

pub use personify::{
    first_personify, first_personify_counted, AgreementCorrector, GazetteerTagger, IdentityCorrector, PersonTagger,
    PersonifyRules, RuleCorrector,
};

/// Number of sentences in every story.
pub const STORY_SENTENCES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StoryRecord", into = "StoryRecord")]
pub struct Story {
    id: String,
    title: String,
    sentences: Vec<String>,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct StoryRecord {
    id: String,
    title: String,
    sentences: Vec<String>,
}

impl TryFrom<StoryRecord> for Story {
    type Error = Error;

    fn try_from(r: StoryRecord) -> Result<Self> {
        Story::new(r.id, r.title, r.sentences)
    }
}

impl From<Story> for StoryRecord {
    fn from(s: Story) -> Self {
        StoryRecord {
            id: s.id,
            title: s.title,
            sentences: s.sentences,
        }
    }
}

impl Story {
    pub fn new(id: impl Into<String>, title: impl Into<String>, sentences: Vec<String>) -> Result<Self> {
        let id = id.into();
        if sentences.len() != STORY_SENTENCES {
            return Err(Error::SentenceCount {
                id,
                found: sentences.len(),
            });
        }
        let text = sentences.join(" ");
        Ok(Story {
            id,
            title: title.into(),
            sentences,
            text,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    /// Sentences joined by a single space.
    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Ordered story collection with an id → position map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    stories: Vec<Story>,
    positions: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(stories: Vec<Story>) -> Result<Self> {
        let mut positions = HashMap::with_capacity(stories.len());
        for (i, s) in stories.iter().enumerate() {
            if positions.insert(s.id.clone(), i).is_some() {
                return Err(Error::DuplicateStory(s.id.clone()));
            }
        }
        Ok(Corpus { stories, positions })
    }

    pub fn len(&self) -> usize {
        self.stories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stories.is_empty()
    }

    pub fn stories(&self) -> &[Story] {
        &self.stories
    }

    pub fn get(&self, position: usize) -> Option<&Story> {
        self.stories.get(position)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn lookup(&self, id: &str) -> Option<&Story> {
        self.position(id).map(|p| &self.stories[p])
    }

    /// SHA-256 over the ordered story contents, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.stories {
            h.update(s.id.as_bytes());
            h.update([0x1f]);
            h.update(s.title.as_bytes());
            for sent in &s.sentences {
                h.update([0x1f]);
                h.update(sent.as_bytes());
            }
            h.update([0x1e]);
        }
        hex::encode(h.finalize())
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Reads a JSON-lines story file, preserving file order.
pub fn load_stories(path: impl AsRef<Path>) -> Result<Corpus> {
    let mut stories = Vec::new();
    for (line, text) in read_lines(path.as_ref())? {
        let record: StoryRecord = serde_json::from_str(&text).map_err(|e| Error::MalformedRecord {
            line,
            message: e.to_string(),
        })?;
        stories.push(Story::try_from(record)?);
    }
    Corpus::new(stories)
}

pub fn write_stories(path: impl AsRef<Path>, stories: &[Story]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for s in stories {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Machine,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::Human => "human:",
            Speaker::Machine => "machine:",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn human(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::Human,
            text: text.into(),
        }
    }

    pub fn machine(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::Machine,
            text: text.into(),
        }
    }

    /// `"human: <text>"` / `"machine: <text>"`.
    pub fn tagged(&self) -> String {
        format!("{} {}", self.speaker.tag(), self.text)
    }
}

/// One dialogue as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub id: String,
    pub persona: Vec<String>,
    pub turns: Vec<Turn>,
}

/// A training/evaluation example: respond to `context` as the persona owner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub dialogue_id: String,
    /// Index of the target turn within the dialogue.
    pub turn_index: usize,
    pub persona: Vec<String>,
    pub context: Vec<Turn>,
    pub target: String,
}

pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<DialogueRecord>> {
    read_lines(path.as_ref())?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| Error::MalformedRecord {
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_dialogues(path: impl AsRef<Path>, records: &[DialogueRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Slices dialogue records into samples, one per machine turn.
///
/// The context keeps the most recent `max_turns` exchanges, counting the
/// open exchange whose machine half is the target, so it always starts with
/// a human turn and holds at most `2 * max_turns - 1` turns.
pub fn samples_from_records(records: &[DialogueRecord], max_turns: usize) -> Result<Vec<DialogueSample>> {
    if max_turns == 0 {
        return Err(Error::Config("max_turns must be positive".into()));
    }
    let mut samples = Vec::new();
    for rec in records {
        if rec.persona.is_empty() {
            return Err(Error::Empty("persona"));
        }
        for (i, turn) in rec.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Human } else { Speaker::Machine };
            if turn.speaker != expected {
                return Err(Error::NonAlternating {
                    id: rec.id.clone(),
                    turn: i,
                });
            }
            if expected == Speaker::Machine {
                let keep = (2 * max_turns - 1).min(i);
                samples.push(DialogueSample {
                    dialogue_id: rec.id.clone(),
                    turn_index: i,
                    persona: rec.persona.clone(),
                    context: rec.turns[i - keep..i].to_vec(),
                    target: turn.text.clone(),
                });
            }
        }
    }
    Ok(samples)
}

pub fn build_samples(dialogue_file: impl AsRef<Path>, max_turns: usize) -> Result<Vec<DialogueSample>> {
    samples_from_records(&load_dialogues(dialogue_file)?, max_turns)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    Persona,
    PersonaDialogue,
    Generated,
    OnePersona,
}

impl std::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "persona" => Ok(QueryMode::Persona),
            "persona_dialogue" | "persona+dialogue" => Ok(QueryMode::PersonaDialogue),
            "generated" => Ok(QueryMode::Generated),
            "one_persona" => Ok(QueryMode::OnePersona),
            other => Err(Error::Config(format!("unknown query mode `{other}`"))),
        }
    }
}

/// Builds the retrieval query text for a sample.
///
/// Context turns are joined untagged; speaker tags belong to the generator
/// input, not the retriever query.
pub fn make_query<R: Rng + ?Sized>(
    sample: &DialogueSample,
    mode: QueryMode,
    rng: &mut R,
    draft: Option<&str>,
) -> Result<String> {
    Ok(match mode {
        QueryMode::Persona => sample.persona.join(" "),
        QueryMode::PersonaDialogue => sample
            .persona
            .iter()
            .map(String::as_str)
            .chain(sample.context.iter().map(|t| t.text.as_str()))
            .collect::<Vec<_>>()
            .join(" "),
        QueryMode::OnePersona => {
            let i = rng.gen_range(0..sample.persona.len());
            sample.persona[i].clone()
        }
        QueryMode::Generated => draft.ok_or(Error::MissingDraft)?.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sents(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix} sentence {i}.")).collect()
    }

    fn write_tmp(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_valid_stories_in_order() {
        let a = serde_json::json!({"id": "a", "title": "A", "sentences": sents("a", 5)});
        let b = serde_json::json!({"id": "b", "title": "B", "sentences": sents("b", 5)});
        let f = write_tmp(&[a.to_string(), b.to_string()]);
        let c = load_stories(f.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.position("b"), Some(1));
        assert_eq!(c.get(0).unwrap().text(), sents("a", 5).join(" "));
    }

    #[test]
    fn rejects_wrong_sentence_count_by_id() {
        let bad = serde_json::json!({"id": "short", "title": "S", "sentences": sents("s", 4)});
        let f = write_tmp(&[bad.to_string()]);
        match load_stories(f.path()) {
            Err(e) => assert!(e.to_string().contains("short"), "{e}"),
            Ok(_) => panic!("accepted a 4-sentence story"),
        }
    }

    #[test]
    fn rejects_malformed_line_with_number() {
        let good = serde_json::json!({"id": "a", "title": "A", "sentences": sents("a", 5)});
        let f = write_tmp(&[good.to_string(), "{not json".into()]);
        assert!(matches!(
            load_stories(f.path()),
            Err(Error::MalformedRecord { line: 2, .. })
        ));
    }

    #[test]
    fn mechanic_story_fixture() {
        let mechanic = serde_json::json!({
            "id": "mechanic", "title": "Mechanic",
            "sentences": [
                "I am a mechanic and love to work on cars.",
                "I work in a shop three days a week.",
                "In my spare time I fix cars for people in my garage.",
                "I do great work at a fast pace for a small fee.",
                "I get two incomes doing what I love."
            ]
        });
        let f = write_tmp(&[mechanic.to_string()]);
        let c = load_stories(f.path()).unwrap();
        assert!(c
            .lookup("mechanic")
            .unwrap()
            .text()
            .starts_with("I am a mechanic and love to work on cars."));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = Story::new("x", "X", sents("x", 5)).unwrap();
        assert!(matches!(Corpus::new(vec![s.clone(), s]), Err(Error::DuplicateStory(_))));
    }

    fn dialogue(id: &str, exchanges: usize) -> DialogueRecord {
        let mut turns = Vec::new();
        for i in 0..exchanges {
            turns.push(Turn::human(format!("h{i}")));
            turns.push(Turn::machine(format!("m{i}")));
        }
        DialogueRecord {
            id: id.into(),
            persona: vec!["s1".into(), "s2".into()],
            turns,
        }
    }

    #[test]
    fn one_sample_per_machine_turn() {
        let s = samples_from_records(&[dialogue("d", 3)], 3).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].context, vec![Turn::human("h0")]);
        assert_eq!(s[2].target, "m2");
    }

    #[test]
    fn context_truncated_to_recent_exchanges() {
        // target is the 7th machine turn: 13 preceding turns
        let s = samples_from_records(&[dialogue("d", 7)], 3).unwrap();
        let last = s.last().unwrap();
        assert_eq!(last.context.len(), 5);
        assert_eq!(last.context[0], Turn::human("h4"));
        assert_eq!(last.context[4], Turn::human("h6"));
        for sample in &s {
            assert!(sample.context.len() <= 6);
            assert_eq!(sample.context[0].speaker, Speaker::Human);
        }
    }

    #[test]
    fn non_alternating_rejected_with_id() {
        let mut d = dialogue("broken", 2);
        d.turns.swap(1, 2);
        match samples_from_records(&[d], 3) {
            Err(Error::NonAlternating { id, turn: 1 }) => assert_eq!(id, "broken"),
            other => panic!("{other:?}"),
        }
    }

    fn sample() -> DialogueSample {
        DialogueSample {
            dialogue_id: "d".into(),
            turn_index: 1,
            persona: vec!["s1".into(), "s2".into()],
            context: vec![Turn::human("t1")],
            target: "r".into(),
        }
    }

    #[test]
    fn query_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample();
        assert_eq!(make_query(&s, QueryMode::Persona, &mut rng, None).unwrap(), "s1 s2");
        assert_eq!(
            make_query(&s, QueryMode::PersonaDialogue, &mut rng, None).unwrap(),
            "s1 s2 t1"
        );
        assert_eq!(
            make_query(&s, QueryMode::Generated, &mut rng, Some("draft")).unwrap(),
            "draft"
        );
        assert!(matches!(
            make_query(&s, QueryMode::Generated, &mut rng, None),
            Err(Error::MissingDraft)
        ));
        let mut five = s.clone();
        five.persona = (1..=5).map(|i| format!("p{i}")).collect();
        for _ in 0..20 {
            let q = make_query(&five, QueryMode::OnePersona, &mut rng, None).unwrap();
            assert!(five.persona.contains(&q));
        }
    }

    #[test]
    fn query_mode_parses() {
        assert_eq!(
            "persona+dialogue".parse::<QueryMode>().unwrap(),
            QueryMode::PersonaDialogue
        );
        assert!("nope".parse::<QueryMode>().is_err());
    }
}
