use std::time::Instant;

use evtrack_core::eval::{run_ope, EvalReport, ModelTracker};
use evtrack_core::event::Representation;
use evtrack_core::learn::{train, TrainConfig};
use evtrack_core::model::{Model, ModelConfig};
use evtrack_core::sim::{make_dataset, materialize, DatasetConfig, ScenarioTag, Split, SplitCounts};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let pairs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(384);

    let t0 = Instant::now();
    let dcfg = DatasetConfig::default();
    let data = make_dataset(
        ScenarioTag::Plain,
        SplitCounts { train: 32, val: 0, test: 10 },
        42,
        &dcfg,
    )
    .unwrap();
    let repr = Representation::default();
    let train_seqs: Vec<_> = data.iter().filter(|g| g.split == Split::Train).map(|g| materialize(g, repr)).collect();
    let test_seqs: Vec<_> = data.iter().filter(|g| g.split == Split::Test).map(|g| materialize(g, repr)).collect();
    println!("dataset: {:.1}s ({} train, {} test), events/seq ~{}", t0.elapsed().as_secs_f64(), train_seqs.len(), test_seqs.len(), data[0].sequence.stream.len());

    let mcfg = ModelConfig::desk();
    let tcfg = TrainConfig { seed, epochs, pairs_per_epoch: pairs, ..TrainConfig::desk() };
    let t0 = Instant::now();
    let result = train(&mcfg, &tcfg, &train_seqs, |e, _| { eprint!("\repoch {e} done"); Ok(()) }).unwrap();
    eprintln!();
    println!("train: {:.1}s, first-epoch mean loss {:.4}, last-epoch mean loss {:.4}",
        t0.elapsed().as_secs_f64(),
        result.log.iter().take(tcfg.steps_per_epoch()).map(|r| r.loss).sum::<f64>() / tcfg.steps_per_epoch() as f64,
        result.log.iter().rev().take(tcfg.steps_per_epoch()).map(|r| r.loss).sum::<f64>() / tcfg.steps_per_epoch() as f64,
    );

    let model = Model::bind(&result.params, false).unwrap();
    let t0 = Instant::now();
    let results = run_ope(&test_seqs, |_| Ok(Box::new(ModelTracker::new(&model)))).unwrap();
    let report = EvalReport::assemble(&results);
    println!("eval: {:.1}s  AUC {:.4}  P@20 {:.4}  NP@0.2 {:.4}  OP50 {:.4}",
        t0.elapsed().as_secs_f64(), report.auc, report.precision_at_20px, report.norm_precision_at_02, report.op50);
    for s in &report.sequences {
        println!("  {}: auc {:.3}", s.name, s.auc);
    }
}
