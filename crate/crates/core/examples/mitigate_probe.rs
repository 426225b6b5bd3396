use std::path::Path;
use std::time::Instant;

use backdoor_forge::advgen::{AdvObjective, PerturbationSpec};
use backdoor_forge::attack::*;
use backdoor_forge::defense::*;
use backdoor_forge::detector::*;
use backdoor_forge::eval::*;
use backdoor_forge::margin::SurrogateConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("rma");
    let method = args.get(2).map(|s| s.as_str()).unwrap_or("sbm");
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let lambda: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let steps: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(15);
    let def_on: bool = args.get(7).map(|s| s == "def").unwrap_or(true);
    let seed: u64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(1);
    let freeze: bool = args.get(9).map(|s| s != "nofreeze").unwrap_or(true);
    let eps_num: f64 = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(8.0);

    let t0 = Instant::now();
    let spec = SceneSpec { seed: 7, ..SceneSpec::default() };
    let test_spec = SceneSpec { seed: 7 ^ 0x7e57da7a5e7, ..spec };
    let train = gen_dataset(500, &spec).unwrap();
    let test = gen_dataset(150, &test_spec).unwrap();
    let det = TinyDetector::new(4);
    let trig = TriggerSpec::default();
    let triggered = build_triggered_test(&test, &trig, 7).unwrap();

    let (pmode, emode) = if mode == "rma" {
        (PoisonMode::Rma, EvalMode::Rma { target_class: 0 })
    } else {
        (PoisonMode::Oda, EvalMode::Oda)
    };

    // cache the backdoored checkpoint per mode
    std::fs::create_dir_all("/tmp/probe_state2").unwrap();
    let ckpt = format!("/tmp/probe_state2/{mode}.bfck");
    let theta_bd = if Path::new(&ckpt).exists() {
        load_checkpoint(Path::new(&ckpt)).unwrap().0
    } else {
        let (ds, _) = poison(&train, &PoisonConfig { ratio: 0.05, mode: pmode, rma_target_class: 0 }, &trig, 7).unwrap();
        let h = TrainHparams { epochs: 50, batch_size: 16, learning_rate: 0.05, lr_decay: 0.99, momentum: 0.9, augment: true, poison_emphasis: 6.0, seed: 7 ^ 0x7ea10001 };
        let (p, _) = train_detector(&det, &DetectorParams::init(4, 7), &ds, &h).unwrap();
        save_checkpoint(Path::new(&ckpt), &p, &CheckpointHeader::new(4, 0.25)).unwrap();
        p
    };
    let pre_map = clean_map(&det, &theta_bd, &test, 0.25, 0.5).unwrap();
    let pre = evaluate(&det, &theta_bd, &test, &triggered, pre_map, emode, 0.25, 0.5).unwrap();
    println!("[{:.0}s] theta_bd: pre ASR {:.3} pre mAP {:.3}", t0.elapsed().as_secs_f64(), pre.asr, pre_map);

    // defender subset (5%)
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x50b5_e700);
    order.shuffle(&mut rng);
    order.truncate(25);
    order.sort_unstable();
    let subset: Vec<_> = order.into_iter().map(|i| train[i].clone()).collect();

    let cfg = DefenseConfig {
        lambda,
        surrogate: SurrogateConfig { tau: 0.25, beta: 1.0, zeta: 1e-8 },
        perturbation: PerturbationSpec {
            epsilon: eps_num / 255.0,
            steps,
            step_size: (eps_num / 4.0) / 255.0,
            objective: if method == "clm" { AdvObjective::Clm } else { AdvObjective::Sbm },
        },
        selection: SelectionStrategy::Fws,
        use_def_loss: def_on,
        freeze_backbone: freeze,
        adv_source: AdvSource::Original,
        fws_iou: 0.60,
        epochs,
        batch_size: 16,
        learning_rate: lr,
        momentum: 0.9,
        nms_iou: 0.5,
        seed: seed ^ 0xdef0_0002,
    };
    let outcome = if method == "ft" {
        ft_baseline(&det, &theta_bd, &subset, &cfg).unwrap()
    } else {
        mitigate(&det, &theta_bd, &subset, &cfg).unwrap()
    };
    let rep = evaluate(&det, &outcome.params, &test, &triggered, pre_map, emode, 0.25, 0.5).unwrap();
    let gate = outcome.epochs.last().and_then(|e| e.gate_mean_g_rma);
    println!(
        "[{:.0}s] {mode} {method} ep={epochs} lr={lr} lam={lambda} K={steps} def={def_on} freeze={freeze} eps={eps_num}/255 seed={seed}: ASR {:.3} TDR {:?} RmAP {:.3} (gate_rma {:?})",
        t0.elapsed().as_secs_f64(), rep.asr,
        rep.tdr.map(|t| (t * 1000.0).round() / 1000.0),
        rep.rmap, gate.map(|g| (g * 100.0).round() / 100.0)
    );
}
