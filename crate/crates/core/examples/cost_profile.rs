//! Attention pair counts of the object-level design against a
//! vertex-level transformer, with measured step times.

use rigidsim::model::{Model, ModelConfig};
use rigidsim::profile::{decoder_pairs, format_table, profile_row, vertex_pairs};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("217 objects with 16 registers: {} decoder pairs per layer", decoder_pairs(217, 16));
    println!("the same scene at 64 points per object, vertex level: {} pairs", vertex_pairs(217 * 64));

    let model = Model::<f32>::new(ModelConfig::tiny(), 0)?;
    let rows = [4, 8, 16]
        .into_iter()
        .map(|m| profile_row(&model, m, 64, 2))
        .collect::<Result<Vec<_>, _>>()?;
    print!("{}", format_table(&rows));
    Ok(())
}
