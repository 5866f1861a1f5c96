//! Small dense networks with hand-written backpropagation.

mod adam;
mod loss;
mod mlp;
mod multihead;

pub use adam::AdamState;
pub use loss::{
    cross_entropy, entropy_regularized_value, expectile_loss, log_prob, log_softmax, softmax,
    squared_error,
};
pub use mlp::{Activation, Mlp, MlpSpec, Trace};
pub use multihead::{MultiHeadGrad, MultiHeadPolicyNet, MultiHeadTrace};

/// One-hot state block followed by the time feature `t / T`.
pub fn encode_state(s: usize, t: usize, n_states: usize, horizon: usize) -> Vec<f64> {
    let mut x = vec![0.0; n_states + 1];
    x[s] = 1.0;
    x[n_states] = t as f64 / horizon as f64;
    x
}

pub fn encoding_dim(n_states: usize) -> usize {
    n_states + 1
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_layout() {
        let x = encode_state(2, 3, 4, 6);
        assert_eq!(x, vec![0.0, 0.0, 1.0, 0.0, 0.5]);
        assert_eq!(x.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(encode_state(0, 6, 4, 6)[4], 1.0);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
