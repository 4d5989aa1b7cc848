//! Synthetic datasets.

use mollify_core::numerics::{Matrix, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            targets: self.targets.select_rows(indices),
        }
    }

    /// Shuffled split; the first part holds `1 − valid_fraction` of the rows.
    pub fn split(&self, valid_fraction: f64, rng: &mut RngStream) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        let n_valid = ((self.len() as f64 * valid_fraction).round() as usize).clamp(1, self.len() - 1);
        let (valid, train) = order.split_at(n_valid);
        (self.select(train), self.select(valid))
    }
}

pub fn parity_label(bits: &[f64]) -> f64 {
    (bits.iter().filter(|&&b| b > 0.5).count() % 2) as f64
}

/// Uniform random bit vectors labelled with their XOR.
pub fn gen_parity(n_bits: usize, n_examples: usize, rng: &mut RngStream) -> Dataset {
    assert!(n_bits >= 1, "parity needs at least one bit");
    let mut inputs = Matrix::zeros(n_examples, n_bits);
    let mut targets = Matrix::zeros(n_examples, 1);
    for r in 0..n_examples {
        let word = rng.next_u64();
        let row = inputs.row_mut(r);
        for (j, v) in row.iter_mut().enumerate() {
            *v = ((word >> j) & 1) as f64;
        }
        targets.set(r, 0, parity_label(inputs.row(r)));
    }
    Dataset { inputs, targets }
}

pub fn toy_regression_target(x: f64, noise: f64) -> f64 {
    (3.0 * x).sin() + 0.1 * noise
}

/// `y = sin(3x) + 0.1ξ` with `x ~ U[−2, 2]`.
pub fn gen_toy_regression(n: usize, rng: &mut RngStream) -> Dataset {
    let mut inputs = Matrix::zeros(n, 1);
    let mut targets = Matrix::zeros(n, 1);
    for r in 0..n {
        let x = rng.uniform(-2.0, 2.0);
        inputs.set(r, 0, x);
        targets.set(r, 0, toy_regression_target(x, rng.normal()));
    }
    Dataset { inputs, targets }
}

/// Sequences stored time-major: `inputs[t]` is `batch × classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub inputs: Vec<Matrix>,
    pub targets: Vec<Matrix>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn select(&self, indices: &[usize]) -> SequenceDataset {
        SequenceDataset {
            inputs: self.inputs.iter().map(|m| m.select_rows(indices)).collect(),
            targets: self.targets.iter().map(|m| m.select_rows(indices)).collect(),
        }
    }

    pub fn split(&self, valid_fraction: f64, rng: &mut RngStream) -> (SequenceDataset, SequenceDataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        let n_valid = ((self.len() as f64 * valid_fraction).round() as usize).clamp(1, self.len() - 1);
        let (valid, train) = order.split_at(n_valid);
        (self.select(train), self.select(valid))
    }
}

/// Delayed copy: symbols from `1..=vocab` arrive one per step and the target
/// at step `t` is the input at `t − delay` (class 0 before that).
pub fn gen_seq_copy(n: usize, len: usize, vocab: usize, delay: usize, rng: &mut RngStream) -> SequenceDataset {
    let classes = vocab + 1;
    let mut symbols = vec![vec![0usize; len]; n];
    for seq in &mut symbols {
        for s in seq.iter_mut() {
            *s = 1 + rng.below(vocab);
        }
    }
    let one_hot = |pick: &dyn Fn(&[usize]) -> usize| {
        let mut m = Matrix::zeros(n, classes);
        for (r, seq) in symbols.iter().enumerate() {
            m.set(r, pick(seq), 1.0);
        }
        m
    };
    let inputs = (0..len).map(|t| one_hot(&|s: &[usize]| s[t])).collect();
    let targets = (0..len)
        .map(|t| one_hot(&|s: &[usize]| if t >= delay { s[t - delay] } else { 0 }))
        .collect();
    SequenceDataset { inputs, targets }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_examples() {
        assert_eq!(parity_label(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(parity_label(&[1.0, 0.0, 1.0]), 0.0);
        assert_eq!(parity_label(&[1.0, 1.0, 1.0]), 1.0);
    }

    #[test]
    fn parity_labels_match_xor() {
        let data = gen_parity(9, 300, &mut RngStream::new(4));
        for r in 0..data.len() {
            let xor = data.inputs.row(r).iter().fold(0u8, |acc, &b| acc ^ b as u8);
            assert_eq!(data.targets.get(r, 0), xor as f64);
            assert!(data.inputs.row(r).iter().all(|&b| b == 0.0 || b == 1.0));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_parity(8, 50, &mut RngStream::new(1)), gen_parity(8, 50, &mut RngStream::new(1)));
        assert_eq!(gen_toy_regression(50, &mut RngStream::new(2)), gen_toy_regression(50, &mut RngStream::new(2)));
        assert_ne!(gen_parity(8, 50, &mut RngStream::new(1)), gen_parity(8, 50, &mut RngStream::new(2)));
    }

    #[test]
    fn toy_regression_examples() {
        assert_eq!(toy_regression_target(0.0, 0.0), 0.0);
        assert!((toy_regression_target(std::f64::consts::PI / 6.0, 0.0) - 1.0).abs() < 1e-15);
        let data = gen_toy_regression(200, &mut RngStream::new(3));
        assert!(data.inputs.as_slice().iter().all(|x| (-2.0..2.0).contains(x)));
        assert!(data.targets.is_finite());
    }

    #[test]
    fn split_is_a_partition() {
        let data = gen_parity(8, 100, &mut RngStream::new(5));
        let (train, valid) = data.split(0.1, &mut RngStream::new(6));
        assert_eq!((train.len(), valid.len()), (90, 10));
    }

    #[test]
    fn seq_copy_targets_lag_inputs() {
        let data = gen_seq_copy(7, 10, 3, 2, &mut RngStream::new(8));
        assert_eq!(data.steps(), 10);
        for r in 0..7 {
            for t in 0..10 {
                let want = if t >= 2 { data.inputs[t - 2].row(r).to_vec() } else {
                    let mut v = vec![0.0; 4];
                    v[0] = 1.0;
                    v
                };
                assert_eq!(data.targets[t].row(r), want.as_slice());
            }
            assert_eq!(data.inputs[0].get(r, 0), 0.0);
        }
    }
}
