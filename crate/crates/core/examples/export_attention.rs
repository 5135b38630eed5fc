//! Where each point looks: offset points and attention points of one layer.

use dapconv::data::{generate_shape, ShapeClass};
use dapconv::models::{
    attention_text, build_model, export_attention, AttentionRecord, Head, ModelConfig,
};
use dapconv::train::{fit, TrainConfig};

fn main() -> dapconv::Result<()> {
    let ds = dapconv::data::synthetic_classification(&ShapeClass::ALL[..4], 6, 192, 1)?;
    let cfg = ModelConfig {
        widths: vec![16, 32],
        k: 10,
        head_hidden: vec![32],
        ..ModelConfig::mini_dgcnn(Head::Classify(4))
    }
    .with_dap();
    let mut model = build_model(&cfg, 1)?;
    let cloud = generate_shape(ShapeClass::Torus, 192, 9)?;

    let before = export_attention(&model, &cloud, 0)?;
    let report = |when: &str, recs: &[AttentionRecord]| {
        let moved = recs.iter().filter(|r| r.q_index != r.point_index).count();
        let reach = recs
            .iter()
            .map(|r| {
                let d = r.offset_point.unwrap();
                ((d[0] - r.position[0]).powi(2)
                    + (d[1] - r.position[1]).powi(2)
                    + (d[2] - r.position[2]).powi(2))
                .sqrt()
            })
            .sum::<f64>()
            / recs.len() as f64;
        println!(
            "{when}: mean offset length {reach:.4}, {moved} of {} points attend elsewhere",
            recs.len()
        );
    };
    report("at init", &before);

    fit(
        &mut model,
        &ds,
        None,
        &TrainConfig {
            epochs: 10,
            eval_every: 10,
            learning_rate: 5e-3,
            ..TrainConfig::default()
        },
    )?;
    let after = export_attention(&model, &cloud, 0)?;
    report("after training", &after);
    let text = attention_text(&after);
    for line in text.lines().take(4) {
        println!("{line}");
    }
    let path = std::env::temp_dir().join("dapconv_attention.csv");
    std::fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}
