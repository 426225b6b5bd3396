use std::time::Instant;

use backdoor_forge::attack::*;
use backdoor_forge::data::Sample;
use backdoor_forge::defense::*;
use backdoor_forge::detector::*;
use backdoor_forge::eval::*;

fn main() {
    let t0 = Instant::now();
    let spec = SceneSpec { seed: 7, ..SceneSpec::default() };
    let test_spec = SceneSpec { seed: 7 ^ 0x7e57da7a5e7, ..spec };
    let train = gen_dataset(500, &spec).unwrap();
    let test = gen_dataset(150, &test_spec).unwrap();
    println!("[{:.1}s] datasets ready", t0.elapsed().as_secs_f64());

    let det = TinyDetector::new(4);
    let hparams = TrainHparams { epochs: 50, batch_size: 16, learning_rate: 0.05, lr_decay: 0.97, momentum: 0.9, augment: true, poison_emphasis: 6.0, seed: 7 ^ 0x7ea10001 };
    let init = DetectorParams::init(4, 7);
    let (clean_params, log) = train_detector(&det, &init, &train, &hparams).unwrap();
    let last = log.epochs.last().unwrap();
    println!("[{:.1}s] clean training done: loc {:.4} cls {:.4}", t0.elapsed().as_secs_f64(), last.l_loc, last.l_cls);
    let ref_map = clean_map(&det, &clean_params, &test, 0.25, 0.5).unwrap();
    println!("clean reference mAP@0.5 = {ref_map:.4}");

    let trig = TriggerSpec::default();
    let triggered = build_triggered_test(&test, &trig, 7).unwrap();

    // no-backdoor control: ASR of the clean model on the triggered set
    let rma_mode = EvalMode::Rma { target_class: 0 };
    let clean_on_trig = evaluate(&det, &clean_params, &test, &triggered, ref_map, rma_mode, 0.25, 0.5).unwrap();
    println!("clean model on triggered set: rma-ASR {:.4} TDR {:?}", clean_on_trig.asr, clean_on_trig.tdr);
    let clean_oda = evaluate(&det, &clean_params, &test, &triggered, ref_map, EvalMode::Oda, 0.25, 0.5).unwrap();
    println!("clean model: oda-ASR {:.4} (miss floor)", clean_oda.asr);

    // RMA backdoor
    let (rma_ds, _) = poison(&train, &PoisonConfig { ratio: 0.05, mode: PoisonMode::Rma, rma_target_class: 0 }, &trig, 7).unwrap();
    let (rma_params, _) = train_detector(&det, &init, &rma_ds, &hparams).unwrap();
    let rma_rep = evaluate(&det, &rma_params, &test, &triggered, ref_map, rma_mode, 0.25, 0.5).unwrap();
    println!("[{:.1}s] RMA backdoor: ASR {:.4} TDR {:?} clean-mAP {:.4} (ratio vs ref {:.3})",
        t0.elapsed().as_secs_f64(), rma_rep.asr, rma_rep.tdr, rma_rep.map50_clean, rma_rep.map50_clean / ref_map);

    // ODA backdoor
    let (oda_ds, _) = poison(&train, &PoisonConfig { ratio: 0.05, mode: PoisonMode::Oda, rma_target_class: 0 }, &trig, 7).unwrap();
    let (oda_params, _) = train_detector(&det, &init, &oda_ds, &hparams).unwrap();
    let oda_rep = evaluate(&det, &oda_params, &test, &triggered, ref_map, EvalMode::Oda, 0.25, 0.5).unwrap();
    println!("[{:.1}s] ODA backdoor: ASR {:.4} clean-mAP {:.4} (ratio vs ref {:.3})",
        t0.elapsed().as_secs_f64(), oda_rep.asr, oda_rep.map50_clean, oda_rep.map50_clean / ref_map);

    // save for the mitigation probe
    std::fs::create_dir_all("/tmp/probe_state").unwrap();
    save_checkpoint(std::path::Path::new("/tmp/probe_state/clean.bfck"), &clean_params, &CheckpointHeader::new(4, 0.25)).unwrap();
    save_checkpoint(std::path::Path::new("/tmp/probe_state/rma.bfck"), &rma_params, &CheckpointHeader::new(4, 0.25)).unwrap();
    save_checkpoint(std::path::Path::new("/tmp/probe_state/oda.bfck"), &oda_params, &CheckpointHeader::new(4, 0.25)).unwrap();
    let _ = &train; let _: &[Sample] = &test;
    println!("[{:.1}s] done", t0.elapsed().as_secs_f64());
}
