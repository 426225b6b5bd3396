use backdoor_forge::boxes::Box2D;
use backdoor_forge::data::Sample;
use backdoor_forge::detector::*;
use backdoor_forge::image::Image;

fn main() {
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, [0.15, 0.15, 0.15]);
    for y in 20..40 {
        for x in 24..44 {
            img.set(0, y, x, 0.95);
            img.set(1, y, x, 0.1);
            img.set(2, y, x, 0.1);
        }
    }
    img.quantize_u8();
    let sample = Sample::clean(
        img,
        GroundTruthSet {
            boxes: vec![Box2D::new(24.0, 20.0, 44.0, 40.0)],
            labels: vec![0],
        },
    );
    let det = TinyDetector::new(4);
    for (lr, decay) in [(0.15, 0.99), (0.2, 0.985), (0.3, 0.98), (0.4, 0.975), (0.5, 0.97)] {
        let mut results = Vec::new();
        for seed in [0u64, 5, 9, 13, 21] {
            let params = DetectorParams::init(4, seed);
            let h = TrainHparams {
                epochs: 200,
                batch_size: 1,
                learning_rate: lr,
                lr_decay: decay,
                momentum: 0.9,
                augment: false,
                poison_emphasis: 1.0,
                seed: 5,
            };
            let Ok((trained, _)) = train_detector(&det, &params, &[sample.clone()], &h) else {
                results.push(f64::NAN);
                continue;
            };
            let preds = det.forward(&trained, &sample.image).unwrap();
            let a = assign_by_cell_center(&sample.gt);
            results.push(detection_loss(&preds, &sample.gt, &a).total());
        }
        println!("lr={lr} decay={decay}: all={results:.4?}");
    }
}
