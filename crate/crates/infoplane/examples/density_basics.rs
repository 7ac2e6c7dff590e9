//! The discretized logistic mixture: bin probabilities, coupled pixel
//! likelihoods, bits per dimension, and ancestral sampling.
//!
//! Run with: cargo run --release --example density_basics

use infoplane::density::{
    coupled_pixel_log_pmf, image_log_likelihood, mixture_log_pmf, sample_pixel, MixtureParams,
    PixelSpace,
};
use ndarray::{array, Array2, Array3};
use rand::SeedableRng;

fn main() -> infoplane::Result<()> {
    let space = PixelSpace::default(); // 256 intensity levels

    // a single logistic centred at 128 with scale 10
    println!("bin probabilities around the mode (mu = 128, s = 10):");
    for x in [126u32, 127, 128, 129, 130] {
        println!("  p(x = {x}) = {:.6}", space.bin_probability(x, 128.0, 10.0)?);
    }
    let total: f64 = (0..256).map(|x| space.bin_probability(x, 128.0, 10.0).unwrap()).sum();
    println!("  sum over all 256 bins = {total:.12}");

    // a three-component mixture with channel coupling
    let params = MixtureParams::new(
        array![0.8, 0.0, -0.4],
        array![[40.0, 128.0, 210.0], [60.0, 120.0, 200.0], [50.0, 140.0, 190.0]],
        array![[2.3, 1.6, 2.0], [2.0, 1.8, 2.2], [2.1, 1.7, 1.9]],
        Array2::from_elem((3, 3), 25.0),
    )?;
    println!("\nmixture weights: {:?}", params.weights().to_vec());
    for ch in 0..3 {
        let lp = mixture_log_pmf(space, 128, &params, ch)?;
        println!("  channel {ch}: log p(128) = {lp:.4} nats");
    }
    let joint = coupled_pixel_log_pmf(space, [128, 130, 126], &params)?;
    println!("  coupled log p(rgb = 128,130,126) = {joint:.4} nats");

    // whole-image likelihood under a per-pixel parameter map
    let image = Array3::<u8>::from_elem((3, 4, 4), 128);
    let map = vec![params.clone(); 16];
    let ll = image_log_likelihood(space, image.view(), &map)?;
    println!(
        "\n4x4 image: total = {:.2} nats over {} dims = {:.3} bits/dim",
        ll.total_nats,
        ll.num_dims,
        ll.bits_per_dim()
    );

    // sampling follows the same distribution the likelihood scores
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let mut mean = [0.0f64; 3];
    let n = 20_000;
    for _ in 0..n {
        let px = sample_pixel(space, &params, &mut rng);
        for ch in 0..3 {
            mean[ch] += px[ch] as f64 / n as f64;
        }
    }
    println!("\nempirical channel means over {n} samples: {mean:.1?}");
    Ok(())
}
