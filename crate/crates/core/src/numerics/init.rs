use super::{Rng, Tensor};

/// I.i.d. uniform on `±sqrt(6 / (rows + cols))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    assert!(rows >= 1 && cols >= 1, "glorot_uniform needs positive dims");
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.uniform_range(-limit, limit);
    }
    t
}

pub fn zeros_row(n: usize) -> Tensor {
    Tensor::zeros(1, n)
}

pub fn ones_row(n: usize) -> Tensor {
    Tensor::ones(1, n)
}
