//! Runs both training stages on an in-memory synthetic corpus and prints
//! gaze and classification metrics.
//!
//! `cargo run --release -p gazecot --example pipeline -- <scenario> <n> <seed> <variant> [steps1 steps2 batch]`

use std::time::Instant;

use gazecot::dataset::{sample_from_session, supervision_record};
use gazecot::eval::{dataset_gaze_topk, evaluate_state, EvalMode};
use gazecot::model::{ModelConfig, ModelState, Sample};
use gazecot::session::Split;
use gazecot::supervision::SupervisionParams;
use gazecot::synth::{assign_splits, generate_sessions, Scenario};
use gazecot::train::{train_stage1, train_stage2, TrainConfig, Variant};

fn main() -> gazecot::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let kind = arg(0, "separable").parse()?;
    let n: usize = arg(1, "400").parse().unwrap();
    let seed: u64 = arg(2, "0").parse().unwrap();
    let variant: Variant = arg(3, "original").parse()?;
    let steps1: usize = arg(4, "600").parse().unwrap();
    let steps2: usize = arg(5, "600").parse().unwrap();
    let batch: usize = arg(6, "8").parse().unwrap();

    let mut sc = Scenario::new(kind, n, seed);
    let env = |k: &str| std::env::var(k).ok().map(|v| v.parse::<f64>().unwrap());
    if let Some(v) = env("SC_STEP") {
        sc.brightness_step = v;
    }
    if let Some(v) = env("SC_NOISE") {
        sc.pixel_noise = v;
    }
    if let Some(v) = env("SC_PEAK") {
        sc.peak_brightness = v;
    }
    if let Some(v) = env("SC_JITTER") {
        sc.peak_jitter = v;
    }
    let lr1 = env("LR1");
    let lr2 = env("LR2");
    let mut config = ModelConfig::default();
    if let Some(v) = env("LAYERS") {
        config.n_layers = v as usize;
    }
    if let Some(v) = env("RANK") {
        config.adapter_rank = v as usize;
        config.adapter_alpha = 2.0 * v;
    }
    let params = SupervisionParams::with_grid(config.grid_side)?;
    let sessions = generate_sessions(&sc)?;
    let ids: Vec<String> = sessions.iter().map(|s| s.id.clone()).collect();
    let splits = assign_splits(&ids);
    let mut train = Vec::new();
    let mut test: Vec<Sample> = Vec::new();
    for (s, split) in sessions.iter().zip(splits) {
        let rec = supervision_record(s, &params)?;
        let sample = sample_from_session(s, Some(&rec))?;
        match split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
            Split::Val => {}
        }
    }

    let state = ModelState::init(&config, seed)?;
    let t = Instant::now();
    let cfg1 = TrainConfig {
        stage: 1,
        steps: steps1,
        batch_size: batch,
        seed,
        variant,
        lr: lr1,
        ..TrainConfig::default()
    };
    let log_dir = std::env::var("LOG_DIR").ok().map(std::path::PathBuf::from);
    let out1 = train_stage1(&train, &cfg1, state, log_dir.as_deref())?;
    let top1_train = dataset_gaze_topk(&out1.checkpoint.state, &train, 1)?;
    let top1_test = dataset_gaze_topk(&out1.checkpoint.state, &test, 1)?;
    println!(
        "stage1 {:.1}s loss {:.3} -> {:.3}  top1 train {:?} test {:?}",
        t.elapsed().as_secs_f64(),
        out1.metrics.first().map_or(0.0, |m| m.l_combined),
        out1.metrics.last().map_or(0.0, |m| m.l_combined),
        top1_train,
        top1_test
    );
    let every = env("EVAL_EVERY").map_or(0, |v| v as usize);
    let cfg2 = TrainConfig {
        stage: 2,
        steps: steps2,
        batch_size: batch,
        seed,
        variant,
        lr: lr2,
        checkpoint_every: every,
        ..TrainConfig::default()
    };
    let tmp = std::env::temp_dir().join(format!("pipeline_{}_{seed}_{variant}", std::process::id()));
    let out2 = train_stage2(
        &train,
        &cfg2,
        Some(&out1.checkpoint),
        (every > 0).then_some(tmp.as_path()),
    )?;
    if every > 0 {
        let mut k = every;
        while k < steps2 {
            let ck = gazecot::checkpoint::Checkpoint::load(tmp.join(format!("stage2_step{k}.gzck")))?;
            let rep = evaluate_state(&ck.state, &test, EvalMode::ClassifierHead)?;
            println!("  step {k} test AUROC {:.4}", rep.macro_auroc.unwrap_or(0.0));
            k += every;
        }
        let _ = std::fs::remove_dir_all(&tmp);
    }
    let rep = evaluate_state(&out2.checkpoint.state, &test, EvalMode::ClassifierHead)?;
    println!("stage2 final test AUROC {:.4}", rep.macro_auroc.unwrap_or(0.0));
    Ok(())
}
