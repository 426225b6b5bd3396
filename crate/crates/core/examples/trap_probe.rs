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
    let gt = GroundTruthSet {
        boxes: vec![Box2D::new(24.0, 20.0, 44.0, 40.0)],
        labels: vec![0],
    };
    let sample = Sample::clean(img.clone(), gt.clone());
    let det = TinyDetector::new(4);
    let params = DetectorParams::init(4, 9);
    let h = TrainHparams {
        epochs: 200, batch_size: 1, learning_rate: 0.15, lr_decay: 0.985, momentum: 0.9, augment: true, poison_emphasis: 6.0, seed: 5,
    };
    let (trained, log) = train_detector(&det, &params, &[sample.clone()], &h).unwrap();
    for e in log.epochs.iter().step_by(25) {
        println!("epoch {:3}: loc {:.4} cls {:.4}", e.epoch, e.l_loc, e.l_cls);
    }
    let preds = det.forward(&trained, &img).unwrap();
    let a = assign_by_cell_center(&gt);
    for (j, &pi) in a.pi.iter().enumerate() {
        if pi > 0 {
            let b = preds.boxes[j];
            println!("cell {j} (gy={} gx={}): box ({:.1},{:.1},{:.1},{:.1}) iou {:.3} scores {:?}",
                j / 8, j % 8, b.x1, b.y1, b.x2, b.y2,
                backdoor_forge::boxes::iou(b, gt.boxes[0]),
                preds.scores[j].iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>());
        }
    }
}
