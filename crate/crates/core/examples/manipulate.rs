//! Train a small factorial flow on synthetic data and move phone class 0
//! samples to class 3.
//!
//! `cargo run --release -p factorial-flow --example manipulate`

use factorial_flow::factorize::{class_means, encode_batch, manipulate_batch};
use factorial_flow::{train, FlowConfig, FlowModel, LatentPartition, PriorSpec, SyntheticSpec, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> factorial_flow::Result<()> {
    let spec = SyntheticSpec::desk_scale(7)?;
    let data = spec.generate(100, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = FlowModel::for_training(FlowConfig::new(16, 6, 32), &mut rng)?;
    let partition = LatentPartition::equal(["phone", "speaker"], 16)?;
    let mut prior = PriorSpec::factorial(partition, &[5, 5], &mut rng)?;
    let config = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    train(&mut model, &mut prior, &data, &config, None, |p| {
        println!("{}", p.log_line());
        Ok(())
    })?;

    let means = class_means(&model, &prior, &data, "phone")?;
    let rows: Vec<usize> = (0..data.len()).filter(|&i| data.labels(0)[i] == 0).collect();
    let x = data.select(&rows);
    let moved = manipulate_batch(&model, &means, x.features(), 0, 3)?;
    let before = encode_batch(&model, x.features())?;
    let after = encode_batch(&model, moved.view())?;
    let drift = (&after.slice(ndarray::s![.., 8..]) - &before.slice(ndarray::s![.., 8..]))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    println!("moved {} samples; largest change in the speaker code: {drift:.2e}", rows.len());
    Ok(())
}
