//! Exact k-nearest neighbors in 3D and in feature space.

use dapconv::data::{generate_shape, ShapeClass};
use dapconv::knn::{FeatureSet, KnnIndex};

fn main() -> dapconv::Result<()> {
    let cloud = generate_shape(ShapeClass::Torus, 1024, 7)?;
    let index = KnnIndex::build(&cloud.flat_positions())?;

    let hit = index.query([0.5, 0.0, 0.0], 5)?;
    println!("5 nearest to (0.5, 0, 0): {:?}", hit.indices);

    // a point's own index comes first, then ties in index order
    let graph = index.batch(&cloud.flat_positions(), 8)?;
    println!("neighborhood of point 0: {:?}", graph.row(0));

    // features: 6 columns per point, searched with the same tie rules
    let features: Vec<f64> = cloud
        .positions
        .iter()
        .flat_map(|p| [p[0], p[1], p[2], p[0] * p[1], p[1] * p[2], p[2] * p[0]])
        .collect();
    let set = FeatureSet::new(&features, 6)?;
    let fgraph = set.batch(&features, 8)?;
    println!("feature-space neighborhood of point 0: {:?}", fgraph.row(0));
    Ok(())
}
