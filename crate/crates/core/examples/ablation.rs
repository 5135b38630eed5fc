//! A small ablation over neighborhood sizes, written as CSV.

use dapconv::cli::{ablation_csv, ablation_summary, run_ablation, AblationPlan, Grid};
use dapconv::data::{synthetic_classification, ShapeClass};
use dapconv::models::{Head, ModelConfig};
use dapconv::train::TrainConfig;

fn main() -> dapconv::Result<()> {
    let ds = synthetic_classification(&ShapeClass::ALL[..4], 10, 128, 1)?;
    let model = ModelConfig {
        widths: vec![16, 32],
        head_hidden: vec![32],
        ..ModelConfig::mini_dgcnn(Head::Classify(4))
    };
    let train = TrainConfig {
        epochs: 10,
        learning_rate: 5e-3,
        ..TrainConfig::default()
    };
    let plan = AblationPlan {
        grids: vec![Grid::K],
        seeds: vec![1, 2],
        ks: vec![5, 10, 20],
        ..AblationPlan::default()
    };
    let rows = run_ablation(&ds, &model, &train, 0.8, &plan, |row, _| {
        println!(
            "{} {} seed {}: OA {:.3}",
            row.grid, row.cell, row.seed, row.oa
        );
        Ok(())
    })?;
    print!("\n{}\n{}", ablation_csv(&rows), ablation_summary(&rows));
    Ok(())
}
