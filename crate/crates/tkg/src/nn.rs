//! Small network building blocks on top of the tape: Glorot-initialized
//! linear layers, two-layer perceptrons, and Elman recurrence cells.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{NodeId, ParamId, ParamStore, Tape};

/// Fan-balanced uniform initialization, U(-a, a) with a = sqrt(6/(in+out)).
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

/// Block-diagonal Glorot: only the `blocks` diagonal blocks are filled,
/// with fans taken per block; everything else stays zero.
pub fn glorot_block_diag(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    blocks: usize,
) -> Array2<f64> {
    assert!(rows % blocks == 0 && cols % blocks == 0);
    let (bo, bi) = (rows / blocks, cols / blocks);
    let a = (6.0 / (bo + bi) as f64).sqrt();
    let mut m = Array2::zeros((rows, cols));
    for k in 0..blocks {
        for i in 0..bo {
            for j in 0..bi {
                m[(bo * k + i, bi * k + j)] = rng.gen_range(-a..a);
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// `y = W x + b`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), glorot(rng, d_out, d_in));
        let b = store.add(&format!("{name}.b"), Array2::zeros((d_out, 1)));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamStore, x: NodeId) -> NodeId {
        let wx = tape.matvec(params, self.w, x);
        let b = tape.param_vec(params, self.b);
        tape.add(wx, b)
    }
}

/// Two-layer perceptron with a rectified-linear hidden layer and optional
/// dropout on the hidden activations.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d_in, d_hidden),
            l2: Linear::new(store, rng, &format!("{name}.l2"), d_hidden, d_out),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: NodeId,
        dropout: Option<&mut Dropout>,
    ) -> NodeId {
        let h = self.l1.apply(tape, params, x);
        let mut h = tape.relu(h);
        if let Some(d) = dropout {
            h = d.apply(tape, h);
        }
        self.l2.apply(tape, params, h)
    }
}

/// Single-layer Elman cell: `h' = tanh(W_ih x + W_hh h + b)`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RnnCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

impl RnnCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
    ) -> Self {
        Self {
            w_ih: store.add(&format!("{name}.w_ih"), glorot(rng, d_hidden, d_in)),
            w_hh: store.add(&format!("{name}.w_hh"), glorot(rng, d_hidden, d_hidden)),
            b: store.add(&format!("{name}.b"), Array2::zeros((d_hidden, 1))),
        }
    }

    pub fn step(&self, tape: &mut Tape, params: &ParamStore, x: NodeId, h: NodeId) -> NodeId {
        let ix = tape.matvec(params, self.w_ih, x);
        let hh = tape.matvec(params, self.w_hh, h);
        let s = tape.add(ix, hh);
        let b = tape.param_vec(params, self.b);
        let s = tape.add(s, b);
        tape.tanh(s)
    }
}

/// Inverted-scale dropout; a no-op when disabled. Masks are drawn from the
/// trainer's RNG so runs with a fixed seed reproduce exactly.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).len();
        let mask = Array1::from_shape_fn(n, |_| {
            if self.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.mul_mask(x, mask)
    }
}
