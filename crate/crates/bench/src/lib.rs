//! Shared fixtures for the benchmarks.

use mitodet::geometry::{BBox, Detection, Frame};
use mitodet::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` random global detections of 20-60 px boxes in a `extent` square.
pub fn random_detections(n: usize, extent: f64, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s = rng.random_range(20.0..60.0);
            let b = BBox::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent), s, s).unwrap();
            Detection::new(b, rng.random_range(0.0..1.0), Frame::Global).unwrap().with_id(i)
        })
        .collect()
}

pub fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * w * h).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::from_planar(w, h, data).unwrap()
}
