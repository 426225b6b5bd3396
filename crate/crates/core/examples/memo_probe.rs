use backdoor_forge::attack::*;
use backdoor_forge::detector::*;
use backdoor_forge::eval::*;

fn main() {
    let spec = SceneSpec { seed: 7, ..SceneSpec::default() };
    let test_spec = SceneSpec { seed: 7 ^ 0x7e57da7a5e7, ..spec };
    let train = gen_dataset(500, &spec).unwrap();
    let test = gen_dataset(150, &test_spec).unwrap();
    let det = TinyDetector::new(4);
    let trig = TriggerSpec::default();
    let (ds, _) = poison(&train, &PoisonConfig { ratio: 0.05, mode: PoisonMode::Rma, rma_target_class: 0 }, &trig, 7).unwrap();
    let h = TrainHparams { epochs: 60, batch_size: 16, learning_rate: 0.05, lr_decay: 0.99, momentum: 0.9, augment: true, poison_emphasis: 6.0, seed: 7 ^ 0x7ea10001 };
    let (params, _) = train_detector(&det, &DetectorParams::init(4, 7), &ds, &h).unwrap();

    println!("== poisoned TRAIN samples: matched-cell scores (label says class 0)");
    let mut shown = 0;
    for s in ds.iter().filter(|s| s.poisoned) {
        let a = assign_by_cell_center(&s.gt);
        let preds = det.forward(&params, &s.image).unwrap();
        for (obj_idx, &label) in s.gt.labels.iter().enumerate() {
            if label != 0 { continue; }
            let set = target_matched_set(&a, obj_idx + 1);
            for &j in &set {
                let sc: Vec<f64> = preds.scores[j].iter().map(|v| (v * 100.0).round() / 100.0).collect();
                println!("  train cell {j}: {sc:?}");
            }
        }
        shown += 1;
        if shown >= 4 { break; }
    }

    println!("== triggered TEST victims: matched-cell scores (original label shown)");
    let triggered = build_triggered_test(&test, &trig, 7).unwrap();
    let mut shown = 0;
    for t in &triggered {
        if t.original_label == 0 { continue; }
        let gt = GroundTruthSet { boxes: vec![t.object_box], labels: vec![t.original_label] };
        let a = assign_by_cell_center(&gt);
        let preds = det.forward(&params, &t.image).unwrap();
        let set = target_matched_set(&a, 1);
        for &j in &set {
            let sc: Vec<f64> = preds.scores[j].iter().map(|v| (v * 100.0).round() / 100.0).collect();
            println!("  test cell {j} (orig {}): {sc:?}", t.original_label);
        }
        shown += 1;
        if shown >= 4 { break; }
    }
}
