// Temporary calibration harness. Not part of the deliverable.
use std::time::Instant;

use statesoup_core::data::{gen_niah, Example, Vocab};
use statesoup_core::eval::{evaluate, DecodeConfig, EvalMode, EvalOptions};
use statesoup_core::model::{Model, ModelConfig};
use statesoup_core::soup::SoupConfig;
use statesoup_core::train::{train, TrainConfig, TrainMode};

fn arg(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn arg_f(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let vocab = Vocab::synthetic();
    let n_train = arg("N_TRAIN", 8000);
    let pairs = arg("PAIRS", 32);
    let segs = arg("SEGS", 4);
    let d_model = arg("D_MODEL", 64);
    let d_inner = arg("D_INNER", 128);
    let d_state = arg("D_STATE", 64);
    let n_layers = arg("LAYERS", 2);
    let n_heads = arg("HEADS", 4);
    let batch = arg("BATCH", 8);
    let accum = arg("ACCUM", 2);
    let epochs = arg("EPOCHS", 1);
    let lr = arg_f("LR", 3e-4);
    let mode = std::env::var("MODE").unwrap_or_else(|_| "soup_full".into());

    let mcfg = ModelConfig {
        vocab_size: vocab.size(),
        n_layers,
        d_model,
        d_inner,
        d_state,
        n_heads,
        eps: 1e-5,
        seed: 42,
    };
    println!("config: {mcfg:?}");
    println!("train: n={n_train} pairs={pairs} segs={segs} batch={batch} accum={accum} lr={lr} mode={mode}");

    let mix = arg("MIX", 0) == 1;
    let t0 = Instant::now();
    let data: Vec<Example> = (0..n_train as u64)
        .map(|s| {
            let p = if mix {
                // difficulty mixture, same segment count
                [segs.max(4), 8, 16, 32][(s % 4) as usize].max(segs)
            } else {
                pairs
            };
            gen_niah(p, segs, s, &vocab).unwrap()
        })
        .collect();
    let test: Vec<Example> = (0..200u64)
        .map(|s| gen_niah(pairs, segs, 10_000_000 + s, &vocab).unwrap())
        .collect();
    println!("datagen: {:.1}s", t0.elapsed().as_secs_f64());

    let mut model = Model::<f32>::init(mcfg).unwrap();
    let opts = EvalOptions {
        mode: EvalMode::Soup(SoupConfig::average()),
        test_segments: None,
        decode: DecodeConfig::default(),
    };
    let t0 = Instant::now();
    let rep = evaluate(&model, &test, &vocab, &opts, "niah", segs).unwrap();
    println!(
        "untrained: EM {:.1} F1 {:.1} ({:.1}s)",
        rep.em,
        rep.f1,
        t0.elapsed().as_secs_f64()
    );

    let mut tc = TrainConfig::new(match mode.as_str() {
        "decoder_only" => TrainMode::SoupDecoderOnly,
        "concat" => TrainMode::Concat,
        _ => TrainMode::SoupFull,
    });
    tc.batch_size = batch;
    tc.grad_accum_steps = accum;
    tc.epochs = epochs;
    tc.lr_max = lr;
    tc.seed = 1;
    let t0 = Instant::now();
    let out = train(&mut model, &data, &tc, &vocab, None).unwrap();
    let train_s = t0.elapsed().as_secs_f64();
    let tail: Vec<String> = out.log[out.log.len().saturating_sub(5)..]
        .iter()
        .map(|l| format!("{:.3}", l.loss))
        .collect();
    println!(
        "trained {} steps in {:.1}s ({:.1} ms/step), tail losses {:?}",
        out.log.len(),
        train_s,
        1e3 * train_s / out.log.len() as f64,
        tail
    );

    let t0 = Instant::now();
    let rep = evaluate(&model, &test, &vocab, &opts, "niah", segs).unwrap();
    println!(
        "trained:   EM {:.1} F1 {:.1} ({:.1}s eval)",
        rep.em,
        rep.f1,
        t0.elapsed().as_secs_f64()
    );
}
