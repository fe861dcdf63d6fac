//! Trains both stages on the synthetic persona task and prints the report.

use std::time::Instant;

use lapdog::synthetic::{run_stage1, run_stage2, ExperimentConfig, SyntheticTask};

fn main() -> lapdog::Result<()> {
    let cfg = ExperimentConfig::default();
    let task = SyntheticTask::build(&cfg.data)?;
    println!(
        "corpus {} stories, {} stage-1 samples, {} stage-2 samples, {} held-out",
        task.corpus.len(),
        task.stage1.len(),
        task.stage2.len(),
        task.heldout.len()
    );
    let t = Instant::now();
    let stage1 = run_stage1(&task, &cfg)?;
    let l = &stage1.losses;
    println!(
        "stage 1: {} steps, loss {:.3} -> {:.3} ({:.1?})",
        l.len(),
        l[0],
        l[l.len() - 1],
        t.elapsed()
    );
    let t = Instant::now();
    let r = run_stage2(&task, &stage1, &cfg.train)?;
    println!("stage 2: {} steps ({:.1?})", r.steps.len(), t.elapsed());
    for s in r.steps.iter().step_by(5) {
        println!(
            "  step {:3} L_R {:.4} L_G {:.4}",
            s.step, s.retriever_loss, s.generator_loss
        );
    }
    println!(
        "oracle probability (train personas): {:.4} -> {:.4}",
        r.oracle_prob_before, r.oracle_prob_after
    );
    println!(
        "oracle probability (held-out): {:.4} -> {:.4}",
        r.heldout_oracle_prob_before, r.heldout_oracle_prob_after
    );
    println!(
        "held-out F1: baseline {:.4}, with retrieval {:.4}",
        r.baseline_f1, r.final_f1
    );
    println!("unique stories retrieved on held-out: {}", r.unique_retrievals);
    Ok(())
}
