//! Compares reverse-mode gradients against central differences for a small
//! conv -> pool -> linear -> cross-entropy chain.

use haszsl::autodiff::{grad_check, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> haszsl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let image = random(&[2, 6, 6])?;
    let kernel = random(&[3, 2, 3, 3])?;
    let head = random(&[3, 4])?;
    let target = [0.0, 0.0, 1.0, 0.0];

    let err = grad_check(
        |t, k| {
            let x = t.constant(image.clone());
            let w = t.constant(head.clone());
            let h = t.conv3x3(x, k)?;
            let h = t.relu(h);
            let pooled = t.avg_pool_spatial(h)?;
            let pooled = t.reshape(pooled, &[1, 3])?;
            let logits = t.matmul(pooled, w)?;
            let logits = t.reshape(logits, &[4])?;
            t.cross_entropy(logits, &target)
        },
        &kernel,
        1e-6,
    )?;
    println!("kernel gradient, worst relative error: {err:.3e}");

    let err = grad_check(
        |t, m| {
            let p = t.spatial_softmax(m)?;
            t.entropy(p, 1e-12)
        },
        &random(&[3, 4, 4])?,
        1e-6,
    )?;
    println!("attention entropy, worst relative error: {err:.3e}");
    Ok(())
}
