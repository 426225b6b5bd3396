use std::time::Instant;

use backdoor_forge::attack::*;
use backdoor_forge::defense::*;
use backdoor_forge::detector::*;
use backdoor_forge::eval::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("rma");
    let decay: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.99);
    let chunks: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6);
    let ratio: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);

    let t0 = Instant::now();
    let spec = SceneSpec { seed: 7, ..SceneSpec::default() };
    let test_spec = SceneSpec { seed: 7 ^ 0x7e57da7a5e7, ..spec };
    let train = gen_dataset(500, &spec).unwrap();
    let test = gen_dataset(150, &test_spec).unwrap();
    let det = TinyDetector::new(4);
    let trig = TriggerSpec::default();
    let triggered = build_triggered_test(&test, &trig, 7).unwrap();
    let ref_map = 0.9210;

    let (pmode, emode) = if mode == "rma" {
        (PoisonMode::Rma, EvalMode::Rma { target_class: 0 })
    } else {
        (PoisonMode::Oda, EvalMode::Oda)
    };
    let (ds, _) = poison(&train, &PoisonConfig { ratio, mode: pmode, rma_target_class: 0 }, &trig, 7).unwrap();

    let mut params = DetectorParams::init(4, 7);
    let chunk_ep = 20;
    for chunk in 0..chunks {
        let h = TrainHparams {
            epochs: chunk_ep,
            batch_size: 16,
            learning_rate: 0.05 * decay.powi((chunk * chunk_ep) as i32),
            lr_decay: decay,
            momentum: 0.9,
            augment: true,
            poison_emphasis: 6.0,
            seed: 7 ^ 0x7ea10001 ^ chunk as u64,
        };
        let (p2, _) = train_detector(&det, &params, &ds, &h).unwrap();
        params = p2;
        let rep = evaluate(&det, &params, &test, &triggered, ref_map, emode, 0.25, 0.5).unwrap();
        println!(
            "[{:.0}s] {mode} decay={decay} poison={ratio} epoch {:3}: ASR {:.3} TDR {:?} mAP {:.3} (ratio {:.3})",
            t0.elapsed().as_secs_f64(),
            (chunk + 1) * chunk_ep,
            rep.asr,
            rep.tdr.map(|t| (t * 1000.0).round() / 1000.0),
            rep.map50_clean,
            rep.map50_clean / ref_map
        );
    }
    let _ = ft_baseline; // keep defense linked for later probes
}
