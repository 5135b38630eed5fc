//! Train a DAP classifier on synthetic shapes, checkpoint it and reload it.

use dapconv::checkpoint::{load_checkpoint, save_checkpoint};
use dapconv::data::{make_split, synthetic_classification, ShapeClass};
use dapconv::models::{Head, ModelConfig};
use dapconv::train::{evaluate, fit, TrainConfig};

fn main() -> dapconv::Result<()> {
    let ds = synthetic_classification(&ShapeClass::ALL, 12, 256, 1)?;
    let (train, test) = make_split(&ds, 0.75, 1)?;
    let cfg = ModelConfig {
        widths: vec![16, 16, 32],
        k: 10,
        head_hidden: vec![32],
        ..ModelConfig::mini_dgcnn(Head::Classify(ds.num_classes()))
    }
    .with_dap();
    let mut model = dapconv::models::build_model(&cfg, 1)?;
    println!("{}", model.describe_layers());

    let out = fit(
        &mut model,
        &train,
        Some(&test),
        &TrainConfig {
            epochs: 20,
            eval_every: 5,
            learning_rate: 5e-3,
            ..TrainConfig::default()
        },
    )?;
    for r in &out.history {
        println!(
            "epoch {:>2} {:<5} OA {:.3} mAcc {:.3} loss {:.4}",
            r.epoch, r.split, r.oa, r.macc, r.loss
        );
    }

    let path = std::env::temp_dir().join("dapconv_classifier.ckpt");
    save_checkpoint(&out.checkpoint, &path)?;
    let reloaded = load_checkpoint(&path)?.model()?;
    println!(
        "reloaded test OA {:.3} ({})",
        evaluate(&reloaded, &test)?.oa,
        path.display()
    );
    Ok(())
}
