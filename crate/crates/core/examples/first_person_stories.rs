//! Rewrites third-person stories into the first person, with the default
//! name list and verb table and with user-supplied rules.

use lapdog::corpus::personify::{first_personify_counted, GazetteerTagger, PersonifyRules, RuleCorrector};
use lapdog::corpus::Story;

fn story(id: &str, sentences: [&str; 5]) -> lapdog::Result<Story> {
    Story::new(id, id, sentences.iter().map(|s| s.to_string()).collect())
}

fn main() -> lapdog::Result<()> {
    let stories = [
        story(
            "gym",
            [
                "Tom went to the gym.",
                "He lifted weights.",
                "His arms hurt.",
                "A friend helped him.",
                "Tom goes again today.",
            ],
        )?,
        story(
            "garden",
            [
                "Kate's garden was dry.",
                "She watered it daily.",
                "Her tomatoes grew.",
                "Kate is proud.",
                "She shares them with friends.",
            ],
        )?,
        story(
            "mine",
            [
                "I baked bread.",
                "The oven was hot.",
                "He smelled it.",
                "We ate it.",
                "It was good.",
            ],
        )?,
    ];
    let (tagger, corrector) = (GazetteerTagger::default(), RuleCorrector::default());
    for s in &stories {
        let (out, replaced) = first_personify_counted(s, &tagger, &corrector);
        println!("[{}] {replaced} name mention(s) replaced", s.id());
        for (before, after) in s.sentences().iter().zip(out.sentences()) {
            println!("  {before:<32} -> {after}");
        }
    }

    let rules: PersonifyRules = serde_json::from_str(r#"{"names": ["Zorblax"], "verbs": {"hums": "hum"}}"#)?;
    let alien = story(
        "alien",
        [
            "Zorblax hums a song.",
            "He waits.",
            "Nobody comes.",
            "Zorblax leaves.",
            "The end.",
        ],
    )?;
    let (out, _) = first_personify_counted(&alien, &rules.tagger(), &rules.corrector());
    println!("with rules: {}", out.text());
    Ok(())
}
