//! The anchor rotary descriptor of an object depends on its anchor set,
//! not on the order the anchors are listed in.

use rigidsim::datagen::shapes::fibonacci_sphere;
use rigidsim::geometry::farthest_point_sample;
use rigidsim::interaction::{arope_descriptor, RopeSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let points = fibonacci_sphere(64, 0.2);
    let idx = farthest_point_sample(&points, 8)?;
    let anchors: Vec<_> = idx.iter().map(|&i| points[i]).collect();
    let spec = RopeSpec::new(18, 0.05, 20.0)?;
    let a = arope_descriptor(&spec, &anchors);
    let reversed: Vec<_> = anchors.iter().rev().copied().collect();
    let b = arope_descriptor(&spec, &reversed);
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("anchors {idx:?}");
    println!("descriptor width {}, reordering changes it by {diff:.1e}", a.len());
    Ok(())
}
