//! One DAP-Conv block: offset points, attention points and the fused output.

use dapconv::dap::{Cloud, DapConfig, DapConv, DapInputs, Space};
use dapconv::data::{generate_shape, ShapeClass};
use dapconv::knn::KnnIndex;
use dapconv::param::{Init, Params};
use dapconv::tensor::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dapconv::Result<()> {
    let cloud = generate_shape(ShapeClass::Cone, 256, 3)?;
    let x = cloud.positions_tensor();
    let flat = cloud.flat_positions();
    let index = KnnIndex::build(&flat)?;
    let graph = index.batch(&flat, 10)?;

    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = DapConfig {
        dap_count: 2,
        ..DapConfig::new(Space::Euclidean, 3, 16, 10)
    };
    let block = DapConv::new(&mut params, &mut Init { rng: &mut rng }, "dap", cfg)?;
    // push the offset heads away from zero so the attention points move
    for mlp in &block.offset_heads {
        for layer in &mlp.layers {
            let w: Vec<f64> = (0..params.get(layer.weight).len())
                .map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.6)
                .collect();
            params.set(layer.weight, w)?;
        }
    }

    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let inputs = DapInputs {
        cloud: Cloud {
            positions: &x,
            index: &index,
        },
        features: &x,
        graph: &graph,
        random_seed: 0,
    };
    let (out, state) = block.forward(&bound, &inputs)?;
    println!("output {:?}, {} parameters", out.shape(), params.count());
    for i in 0..3 {
        let d = state.queries[0].row(i);
        println!(
            "point {i} at {:?}: offset point ({:+.3}, {:+.3}, {:+.3}), attention points {:?}",
            cloud.positions[i],
            d[0],
            d[1],
            d[2],
            state.q_idx.row(i)
        );
    }
    Ok(())
}
