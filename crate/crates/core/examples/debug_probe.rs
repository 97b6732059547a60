use evtrack_core::event::Representation;
use evtrack_core::learn::{sample_pair, train, TrainConfig};
use evtrack_core::model::{Fwd, Model, ModelConfig};
use evtrack_core::sim::{make_dataset, materialize, DatasetConfig, ScenarioTag, Split, SplitCounts};
use evtrack_core::eval::iou;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let dcfg = DatasetConfig::default();
    let data = make_dataset(ScenarioTag::Plain, SplitCounts { train: 8, val: 0, test: 4 }, 42, &dcfg).unwrap();
    let repr = Representation::default();
    let train_seqs: Vec<_> = data.iter().filter(|g| g.split == Split::Train).map(|g| materialize(g, repr)).collect();
    let test_seqs: Vec<_> = data.iter().filter(|g| g.split == Split::Test).map(|g| materialize(g, repr)).collect();

    let mcfg = ModelConfig::desk();
    let tcfg = TrainConfig { seed: 7, epochs: 6, pairs_per_epoch: 256, ..TrainConfig::desk() };
    let result = train(&mcfg, &tcfg, &train_seqs, |_, _| Ok(())).unwrap();
    let model = Model::bind(&result.params, false).unwrap();

    // centered-pair protocol on TEST sequences, no jitter: how good is the net itself?
    let pair_cfg = TrainConfig { jitter_shift_px: 0.0, jitter_scale: (1.0, 1.0), ..tcfg.clone() };
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let mut mean_iou_eval = 0.0;
    let mut mean_iou_train = 0.0;
    let n = 20;
    for _ in 0..n {
        let p = sample_pair(&test_seqs, &mcfg, &pair_cfg, &mut rng).unwrap();
        let mut fwd = Fwd::eval();
        let out = evtrack_core::tensor::no_grad(|| model.forward_pair(&p.template, &p.search, &mut fwd)).unwrap();
        let pred = out.bbox.values();
        mean_iou_eval += iou(&pred, &p.gt_crop) / n as f64;
        // train-mode BN (per-sample stats), dropout seed fixed -> rate 0 via cfg? keep dropout; rough check
        let model_t = Model::bind(&result.params, false).unwrap();
        let mut fwd_t = Fwd::train(0);
        let out_t = evtrack_core::tensor::no_grad(|| model_t.forward_pair(&p.template, &p.search, &mut fwd_t)).unwrap();
        let pred_t = out_t.bbox.values();
        mean_iou_train += iou(&pred_t, &p.gt_crop) / n as f64;
        if mean_iou_eval == 0.0 || true {
        }
        println!("gt ({:.3},{:.3},{:.3},{:.3})  eval ({:.3},{:.3},{:.3},{:.3})  trainBN ({:.3},{:.3},{:.3},{:.3})",
            p.gt_crop.cx, p.gt_crop.cy, p.gt_crop.w, p.gt_crop.h,
            pred.cx, pred.cy, pred.w, pred.h,
            pred_t.cx, pred_t.cy, pred_t.w, pred_t.h);
    }
    println!("centered-pair IoU: eval-BN {:.3}, train-BN {:.3}", mean_iou_eval, mean_iou_train);
}
