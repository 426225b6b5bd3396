use std::time::Instant;
use backdoor_forge::detector::*;
use backdoor_forge::image::Image;

fn main() {
    let det = TinyDetector::new(4);
    let params = DetectorParams::init(4, 7);
    let mut img = Image::zeros(IMAGE_SIZE, IMAGE_SIZE);
    for (i, v) in img.as_mut_slice().iter_mut().enumerate() {
        *v = (i % 255) as f64 / 255.0;
    }
    let gt = GroundTruthSet {
        boxes: vec![crate_box(20.0, 20.0, 40.0, 40.0)],
        labels: vec![1],
    };
    let a = assign_by_cell_center(&gt);
    let t0 = Instant::now();
    let n = 300;
    let mut acc = 0.0;
    for _ in 0..n {
        let (preds, trace) = det.forward_traced(&params, &img).unwrap();
        let (loss, hg) = detection_loss_grad(&preds, &gt, &a);
        let back = det.backward(&params, &trace, &hg, true);
        acc += loss.total() + back.d_input.as_slice()[0];
    }
    println!("fwd+bwd: {:.2} ms/iter (acc {acc:.3})", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}

fn crate_box(a: f64, b: f64, c: f64, d: f64) -> backdoor_forge::boxes::Box2D {
    backdoor_forge::boxes::Box2D::new(a, b, c, d)
}
