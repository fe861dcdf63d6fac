#![allow(dead_code)]

pub mod oracles;

use std::sync::Arc;

use lapdog::autograd::ParamSet;
use lapdog::corpus::{Corpus, Story, Turn};
use lapdog::generator::{assemble_fid, FiDInput, ModelConfig, Seq2SeqModel};
use lapdog::retriever::{EncoderConfig, TextEncoder};
use lapdog::vocab::Vocab;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct TinyWorld {
    pub corpus: Corpus,
    pub vocab: Arc<Vocab>,
    pub persona: Vec<String>,
    pub context: Vec<Turn>,
}

const STORY_LINES: [[&str; 5]; 4] = [
    [
        "i fixed a car .",
        "it was red .",
        "my hands got dirty .",
        "i washed them .",
        "then i slept .",
    ],
    [
        "i baked bread .",
        "the oven was hot .",
        "i burned a loaf .",
        "my dog ate it .",
        "we laughed .",
    ],
    [
        "i ran a race .",
        "the track was wet .",
        "i slipped once .",
        "i still finished .",
        "i felt proud .",
    ],
    [
        "i planted seeds .",
        "rain came early .",
        "the garden grew .",
        "i picked beans .",
        "dinner was good .",
    ],
];

pub fn tiny_world() -> TinyWorld {
    let stories = STORY_LINES
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Story::new(
                format!("s{i}"),
                format!("story {i}"),
                s.iter().map(|x| x.to_string()).collect(),
            )
            .unwrap()
        })
        .collect();
    let corpus = Corpus::new(stories).unwrap();
    let persona = vec!["i like cars .".to_string(), "i have a dog .".to_string()];
    let context = vec![Turn::human("hello , what do you do ?")];
    let mut texts: Vec<String> = corpus.stories().iter().map(|s| s.text().to_string()).collect();
    texts.extend(persona.iter().cloned());
    texts.push("story : persona : context : human : machine : hello , what do you do ? i fix cars for fun".into());
    TinyWorld {
        corpus,
        vocab: Arc::new(Vocab::build(texts)),
        persona,
        context,
    }
}

impl TinyWorld {
    pub fn stories(&self, n: usize) -> Vec<&Story> {
        self.corpus.stories().iter().take(n).collect()
    }

    pub fn fid_input(&self, n: usize) -> FiDInput {
        assemble_fid(&self.stories(n), &self.persona, &self.context, &Default::default())
    }

    pub fn query(&self) -> &'static str {
        "i like cars . i have a dog ."
    }

    pub fn target(&self) -> &'static str {
        "i fix cars for fun ."
    }
}

pub fn tiny_models(world: &TinyWorld) -> (Seq2SeqModel, TextEncoder) {
    (
        Seq2SeqModel::new(ModelConfig::tiny(), world.vocab.clone(), 101),
        TextEncoder::new(EncoderConfig::tiny(), world.vocab.clone(), 202),
    )
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Relative error floor so gradients that vanish do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences on a random `fraction`
/// of the scalars in the model's parameter set.
pub fn check_model<M>(
    analytic: &[Array2<f64>],
    fraction: f64,
    h: f64,
    seed: u64,
    model: &mut M,
    params: impl Fn(&mut M) -> &mut ParamSet,
    loss: impl Fn(&M) -> f64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = params(model).numel();
    let mut report = GradReport {
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for k in 0..numel {
        if rng.gen::<f64>() >= fraction {
            continue;
        }
        let (id, r, c) = params(model).scalar_location(k);
        let orig = params(model).get(id)[[r, c]];
        params(model).get_mut(id)[[r, c]] = orig + h;
        let up = loss(model);
        params(model).get_mut(id)[[r, c]] = orig - h;
        let down = loss(model);
        params(model).get_mut(id)[[r, c]] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[id][[r, c]];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        if rel > report.worst {
            report.worst = rel;
            report.worst_at = format!("{}[{r},{c}] analytic {a:e} numeric {numeric:e}", params(model).name(id));
        }
    }
    report
}

/// Finite-difference check of the generator NLL on 1% of its parameters.
pub fn nll_gradcheck() -> GradReport {
    use lapdog::autograd::Graph;
    use lapdog::nn::Forward;
    let world = tiny_world();
    let (mut gen, _) = tiny_models(&world);
    let input = world.fid_input(2);
    let target = world.target();

    let mut g = Graph::new();
    let loss = gen.nll_var(&mut g, &mut Forward::inference(), &input, target).unwrap();
    let analytic = g.backward(loss).dense_for(gen.params());
    check_model(
        &analytic,
        0.01,
        1e-4,
        11,
        &mut gen,
        |m| m.params_mut(),
        |m| m.nll(&input, target).unwrap(),
    )
}

/// Finite-difference check of the joint loss over augmented candidates,
/// for the generator and the retriever parameters.
pub fn joint_gradcheck() -> (GradReport, GradReport) {
    use lapdog::autograd::Graph;
    use lapdog::nn::Forward;
    use lapdog::retriever::{build_index, candidate_augment, retrieve, score_candidates_var};
    use lapdog::trainer::{guidance_distribution, retriever_loss};

    let world = tiny_world();
    let (mut gen, mut enc) = tiny_models(&world);
    let (query, target) = (world.query(), world.target());
    let index = build_index(&enc, &world.corpus).unwrap();
    let top = retrieve(&index, &enc.embed(query).unwrap(), 2).unwrap();
    let cands = candidate_augment(&top, &world.corpus, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let stories = cands.stories(&world.corpus);
    let input = assemble_fid(&stories, &world.persona, &world.context, &gen.template());
    let guidance = guidance_distribution(&[2.1, 0.4], 0.85).unwrap();

    let joint = |gen: &Seq2SeqModel, enc: &TextEncoder| {
        let mut g = Graph::new();
        let mut fwd = Forward::inference();
        let s = score_candidates_var(&mut g, &mut fwd, enc, query, &stories).unwrap();
        let lr = retriever_loss(&mut g, s, &guidance, 0.8);
        let lg = gen.nll_var(&mut g, &mut fwd, &input, target).unwrap();
        let l = g.add(lr, lg);
        let grads = g.backward(l);
        (
            g.scalar(l),
            grads.dense_for(gen.params()),
            grads.dense_for(enc.params()),
        )
    };
    let (_, gen_grads, enc_grads) = joint(&gen, &enc);

    let enc_snapshot = enc.clone();
    let g = check_model(
        &gen_grads,
        0.01,
        1e-4,
        12,
        &mut gen,
        |m| m.params_mut(),
        |m| joint(m, &enc_snapshot).0,
    );
    let gen_snapshot = gen.clone();
    let r = check_model(
        &enc_grads,
        0.01,
        1e-4,
        13,
        &mut enc,
        |m| m.params_mut(),
        |m| joint(&gen_snapshot, m).0,
    );
    (g, r)
}

/// Bit patterns of every scalar in a parameter set.
pub fn param_bits(ps: &ParamSet) -> Vec<u64> {
    ps.tensors()
        .iter()
        .flat_map(|t| t.iter().map(|x| x.to_bits()))
        .collect()
}

/// A scaled-down synthetic experiment for plumbing tests: small models, one
/// dialogue per persona and a short stage 1.
pub fn small_experiment() -> lapdog::synthetic::ExperimentConfig {
    use lapdog::synthetic::{ExperimentConfig, SyntheticConfig};
    let mut cfg = ExperimentConfig {
        data: SyntheticConfig {
            dialogues_per_persona: 1,
            copy_dialogues: 64,
            ..SyntheticConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.train.batch_size = 2;
    cfg.train.stage1_epochs = 1;
    cfg.train.index_refresh_steps = 5;
    cfg.train.max_target_len = 8;
    cfg.model = ModelConfig {
        d_model: 16,
        d_ff: 32,
        encoder_layers: 1,
        decoder_layers: 1,
        max_target_len: 8,
        ..cfg.model
    };
    cfg.retriever = EncoderConfig {
        d_model: 16,
        d_ff: 32,
        ..cfg.retriever
    };
    cfg
}
