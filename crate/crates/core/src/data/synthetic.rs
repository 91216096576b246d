use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::tensor::Tensor;

/// `count` samples of one filled, coloured circle on a black background,
/// with the circle as the mask. Ids are `circle<k>`.
pub fn synthetic_circles(count: usize, side: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f64;
    (0..count)
        .map(|k| {
            let radius = rng.random_range(0.15 * s..0.3 * s);
            let cy = rng.random_range(radius..s - radius);
            let cx = rng.random_range(radius..s - radius);
            let colour: [f32; 3] = [
                rng.random_range(0.5..1.0),
                rng.random_range(0.3..0.9),
                rng.random_range(0.2..0.8),
            ];
            let plane = side * side;
            let mut image = vec![0.0f32; 3 * plane];
            let mut mask = vec![0.0f32; plane];
            for r in 0..side {
                for c in 0..side {
                    let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= radius * radius {
                        let i = r * side + c;
                        mask[i] = 1.0;
                        for (ch, v) in colour.iter().enumerate() {
                            image[ch * plane + i] = *v;
                        }
                    }
                }
            }
            Sample::new(
                format!("circle{k}"),
                Tensor::new(vec![3, side, side], image).expect("extent"),
                Tensor::new(vec![1, side, side], mask).expect("extent"),
            )
            .expect("valid sample")
        })
        .collect()
}
