//! Perturbs a batch of value features with DSU and reports how the channel statistics move.

use sasv::dsu::{batch_stats, dsu_perturb, instance_stats, DsuConfig};
use sasv::{Matrix, Rng};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = Rng::new(5);
    let batch: Vec<Matrix> = (0..6)
        .map(|b| Matrix::from_fn(20, 4, |_, c| b as f64 * 0.5 + (1.0 + c as f64) * rng.normal()))
        .collect();

    let stats = batch_stats(&batch)?;
    println!("spread of channel means across the batch {:.3?}", stats.sigma_mu);
    println!("spread of channel stds across the batch  {:.3?}", stats.sigma_sigma);

    let cfg = DsuConfig { p: 1.0, ..DsuConfig::default() };
    let out = dsu_perturb(&batch, &cfg, &mut rng)?;
    for (b, (x, y)) in batch.iter().zip(&out).enumerate() {
        let (mu, sd) = instance_stats(x)?;
        let (mu2, sd2) = instance_stats(y)?;
        println!("instance {b}: mean {:+.2} -> {:+.2}, std {:.2} -> {:.2} (channel 0)", mu[0], mu2[0], sd[0], sd2[0]);
    }

    let off = dsu_perturb(&batch, &DsuConfig { p: 0.0, ..cfg }, &mut rng)?;
    println!("p = 0 leaves the batch untouched: {}", off == batch);
    Ok(())
}
