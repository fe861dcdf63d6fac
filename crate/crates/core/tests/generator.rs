//! Fusion-in-Decoder properties of the seq2seq generator.

mod common;

use common::{tiny_models, tiny_world};
use lapdog::checkpoint::{load_generator, save_generator};
use lapdog::corpus::Turn;
use lapdog::generator::{assemble_fid, FiDInput, SegmentTemplate};
use lapdog::textmetrics::normalize;
use ndarray::{concatenate, Axis};

#[test]
fn segments_are_encoded_independently() {
    let world = tiny_world();
    let (gen, _) = tiny_models(&world);
    let input = world.fid_input(3);
    let joint = gen.encoder_states(&input).unwrap();
    let parts: Vec<_> = input
        .segments
        .iter()
        .map(|s| {
            gen.encoder_states(&FiDInput {
                segments: vec![s.clone()],
            })
            .unwrap()
        })
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    assert_eq!(joint, concatenate(Axis(0), &views).unwrap());
}

#[test]
fn likelihood_does_not_depend_on_segment_order() {
    let world = tiny_world();
    let (gen, _) = tiny_models(&world);
    let input = world.fid_input(3);
    let mut reversed = input.clone();
    reversed.segments.reverse();
    let (a, b) = (
        gen.nll(&input, world.target()).unwrap(),
        gen.nll(&reversed, world.target()).unwrap(),
    );
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn nll_is_sum_of_step_log_probabilities() {
    let world = tiny_world();
    let (gen, _) = tiny_models(&world);
    let input = world.fid_input(2);
    let (dist, labels) = gen.step_distributions(&input, world.target()).unwrap();
    assert_eq!(dist.nrows(), labels.len());
    for row in dist.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
    let from_dist: f64 = labels.iter().enumerate().map(|(t, &y)| -dist[[t, y]].ln()).sum();
    assert!((gen.nll(&input, world.target()).unwrap() - from_dist).abs() < 1e-9);
    assert!(gen.nll(&input, "").is_err());
}

#[test]
fn greedy_decoding_is_deterministic_and_bounded() {
    let world = tiny_world();
    let (gen, _) = tiny_models(&world);
    let input = world.fid_input(2);
    let a = gen.generate(&input, 7).unwrap();
    assert_eq!(a, gen.generate(&input, 7).unwrap());
    assert!(normalize(&a).len() <= 7);
    assert!(gen.generate(&FiDInput { segments: vec![] }, 5).is_err());
}

#[test]
fn template_keeps_story_persona_and_newest_turn() {
    let world = tiny_world();
    let story = world.corpus.get(0).unwrap();
    let context: Vec<Turn> = (0..9)
        .map(|i| {
            if i % 2 == 0 {
                Turn::human(format!("question {i} ?"))
            } else {
                Turn::machine(format!("answer {i} ."))
            }
        })
        .collect();
    let wide = SegmentTemplate::default().segment(Some(story), &world.persona, &context);
    assert!(wide.starts_with(&format!("story: {}", story.text())));
    assert!(wide.contains("persona: i like cars . i have a dog . context: human: question 0 ?"));

    let budget = normalize(&SegmentTemplate::default().segment(Some(story), &world.persona, &context[8..])).len() + 2;
    let narrow = SegmentTemplate::with_max_tokens(budget).segment(Some(story), &world.persona, &context);
    assert!(normalize(&narrow).len() <= budget);
    assert!(narrow.contains(story.text()) && narrow.contains("i have a dog ."));
    assert!(narrow.ends_with("human: question 8 ?"));
    assert!(!narrow.contains("question 0"));

    let none = assemble_fid(&[], &world.persona, &context, &SegmentTemplate::default());
    assert_eq!(none.segments.len(), 1);
    assert!(!none.segments[0].contains("story:"));
}

#[test]
fn checkpoint_roundtrip_preserves_outputs() {
    let world = tiny_world();
    let (gen, _) = tiny_models(&world);
    let dir = tempfile::tempdir().unwrap();
    save_generator(dir.path(), &gen, 1, 42).unwrap();
    let (loaded, manifest) = load_generator(dir.path()).unwrap();
    assert_eq!((manifest.stage, manifest.steps), (1, 42));
    let input = world.fid_input(2);
    assert_eq!(
        gen.nll(&input, world.target()).unwrap().to_bits(),
        loaded.nll(&input, world.target()).unwrap().to_bits()
    );
}
