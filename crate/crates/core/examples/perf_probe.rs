use std::time::Instant;

use evtrack_core::grid::Volume;
use evtrack_core::learn::{loss, LossConfig};
use evtrack_core::event::BBoxN;
use evtrack_core::model::{Fwd, Model, ModelConfig, ModelParams};

fn main() {
    let cfg = ModelConfig::desk();
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let template = Volume::<f64>::from_vec(1, 48, 48, (0..48*48).map(|i| ((i % 11) as f64 - 5.0) / 5.0).collect());
    let search = Volume::<f64>::from_vec(1, 96, 96, (0..96*96).map(|i| ((i % 13) as f64 - 6.0) / 6.0).collect());
    let gt = BBoxN::new(0.5, 0.5, 0.25, 0.25);

    // eval-mode forward
    let model = Model::bind(&params, false).unwrap();
    let t0 = Instant::now();
    let n = 20;
    for _ in 0..n {
        let mut fwd = Fwd::eval();
        let out = evtrack_core::tensor::no_grad(|| model.forward_pair(&template, &search, &mut fwd)).unwrap();
        std::hint::black_box(out.bbox.values());
    }
    println!("eval forward: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // train-mode forward+backward (rebind per sample like the trainer)
    let t0 = Instant::now();
    for i in 0..n {
        let model = Model::bind(&params, true).unwrap();
        let mut fwd = Fwd::train(i as u64);
        let out = model.forward_pair(&template, &search, &mut fwd).unwrap();
        let terms = loss(&out.bbox, &gt, &LossConfig::default()).unwrap();
        terms.total.backward().unwrap();
        std::hint::black_box(model.grad_flat());
    }
    println!("train fwd+bwd: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
    println!("weights: {}", params.weight_len());
}
