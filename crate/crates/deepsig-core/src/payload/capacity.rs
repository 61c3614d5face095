//! Information-theoretic capacity of the watermark channel.

/// Binary entropy in bits; H_b(0) and H_b(1) are defined as 0.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

/// Bits per pixel deliverable through a binary symmetric channel with
/// crossover probability `p`, for `m` embedded bits in an H x W image:
/// C = (m / (H*W)) * (1 - H_b(p)).
pub fn capacity_bsc(m: usize, h: usize, w: usize, p: f64) -> f64 {
    assert!(h > 0 && w > 0, "image must be non-empty");
    assert!((0.0..=0.5).contains(&p), "crossover must be in [0, 0.5]");
    (m as f64 / (h * w) as f64) * (1.0 - binary_entropy(p))
}
