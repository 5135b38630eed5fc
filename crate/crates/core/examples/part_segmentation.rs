//! Per-point part labels with a DAP segmenter, scored by mean shape IoU.

use dapconv::data::{synthetic_parts, PartClass};
use dapconv::models::{build_model, Head, ModelConfig};
use dapconv::train::{evaluate, fit, predict, TrainConfig};

fn main() -> dapconv::Result<()> {
    let ds = synthetic_parts(3, 192, 1)?;
    let cfg = ModelConfig {
        widths: vec![32, 32, 64],
        k: 12,
        head_hidden: vec![64],
        ..ModelConfig::mini_dgcnn(Head::Segment(ds.num_parts()))
    }
    .with_dap();
    let mut model = build_model(&cfg, 1)?;
    let train = TrainConfig {
        epochs: 150,
        eval_every: 10,
        learning_rate: 5e-3,
        stop_at: Some(0.9),
        ..TrainConfig::default()
    };
    let out = fit(&mut model, &ds, None, &train)?;
    for r in &out.history {
        println!(
            "epoch {:>3} point OA {:.3} mIoU {:.3}",
            r.epoch,
            r.oa,
            r.miou.unwrap_or(f64::NAN)
        );
    }

    let m = evaluate(&model, &ds)?;
    for (class, iou) in PartClass::ALL.iter().zip(&m.per_class_miou) {
        println!(
            "{:<8} mIoU {}",
            class.name(),
            iou.map_or("-".to_string(), |v| format!("{v:.3}"))
        );
    }
    let cloud = &ds.clouds[0];
    let pred = predict(&model, cloud)?;
    let labels = cloud.part_labels.as_ref().unwrap();
    println!(
        "first shape, first 12 points: pred {:?} truth {:?}",
        &pred[..12],
        &labels[..12]
    );
    Ok(())
}
