use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const OUTPUT_DIM: usize = 2;

/// Two-layer binary classifier: `tanh` hidden layer, softmax over two outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    /// hidden x input
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// 2 x hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Layer sizes of a [`Network`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Shape {
    pub fn param_count(&self) -> usize {
        self.hidden_dim * self.input_dim + self.hidden_dim + OUTPUT_DIM * self.hidden_dim + OUTPUT_DIM
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = self.hidden_dim * self.input_dim;
        let b1 = w1 + self.hidden_dim;
        let w2 = b1 + OUTPUT_DIM * self.hidden_dim;
        [w1, b1, w2, w2 + OUTPUT_DIM]
    }
}

/// Borrowed view of a flat `(w1, b1, w2, b2)` parameter vector.
pub(crate) struct ParamsView<'a> {
    pub w1: ArrayView2<'a, f64>,
    pub b1: ArrayView1<'a, f64>,
    pub w2: ArrayView2<'a, f64>,
    pub b2: ArrayView1<'a, f64>,
}

impl<'a> ParamsView<'a> {
    pub fn new(shape: Shape, flat: &'a [f64]) -> Self {
        let [o1, o2, o3, o4] = shape.offsets();
        assert_eq!(flat.len(), o4, "flat parameter length");
        let h = shape.hidden_dim;
        ParamsView {
            w1: ArrayView2::from_shape((h, shape.input_dim), &flat[..o1]).expect("w1 shape"),
            b1: ArrayView1::from(&flat[o1..o2]),
            w2: ArrayView2::from_shape((OUTPUT_DIM, h), &flat[o2..o3]).expect("w2 shape"),
            b2: ArrayView1::from(&flat[o3..o4]),
        }
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_network(input_dim: usize, hidden_dim: usize, seed: u64) -> Network {
    assert!(input_dim >= 1 && hidden_dim >= 1, "layer sizes must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut glorot = |rows: usize, cols: usize| {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..=limit))
    };
    let w1 = glorot(hidden_dim, input_dim);
    let w2 = glorot(OUTPUT_DIM, hidden_dim);
    Network {
        w1,
        b1: Array1::zeros(hidden_dim),
        w2,
        b2: Array1::zeros(OUTPUT_DIM),
    }
}

/// Numerically stable two-way softmax.
#[inline]
pub(crate) fn softmax2(z0: f64, z1: f64) -> [f64; 2] {
    let m = z0.max(z1);
    let e0 = (z0 - m).exp();
    let e1 = (z1 - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

impl Network {
    /// Rebuilds a network from layer sizes and a flat parameter vector.
    pub fn from_flat(shape: Shape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.param_count() {
            return Err(Error::Dimension {
                expected: shape.param_count(),
                got: flat.len(),
            });
        }
        let v = ParamsView::new(shape, flat);
        Ok(Network {
            w1: v.w1.to_owned(),
            b1: v.b1.to_owned(),
            w2: v.w2.to_owned(),
            b2: v.b2.to_owned(),
        })
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Network {
            w1: Array2::zeros((hidden_dim, input_dim)),
            b1: Array1::zeros(hidden_dim),
            w2: Array2::zeros((OUTPUT_DIM, hidden_dim)),
            b2: Array1::zeros(OUTPUT_DIM),
        }
    }

    pub fn shape(&self) -> Shape {
        Shape {
            input_dim: self.w1.ncols(),
            hidden_dim: self.w1.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    /// Parameters flattened row-major in the order `w1, b1, w2, b2`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.shape().param_count());
        flat.extend(self.w1.iter());
        flat.extend(self.b1.iter());
        flat.extend(self.w2.iter());
        flat.extend(self.b2.iter());
        flat
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }

    /// Class scores `(p, 1 - p)` for a single input.
    pub fn forward(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let x = ArrayView1::from(x);
        let hidden = (self.w1.dot(&x) + &self.b1).mapv(f64::tanh);
        let z = self.w2.dot(&hidden) + &self.b2;
        Ok(softmax2(z[0], z[1]))
    }

    /// Class scores for every row of `inputs`, one `[p, 1 - p]` row each.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: inputs.ncols(),
            });
        }
        let mut hidden = inputs.dot(&self.w1.t());
        hidden += &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let mut z = hidden.dot(&self.w2.t());
        z += &self.b2;
        for mut row in z.axis_iter_mut(Axis(0)) {
            let p = softmax2(row[0], row[1]);
            row[0] = p[0];
            row[1] = p[1];
        }
        Ok(z)
    }

    /// Index of the larger output for each row (ties go to output 0).
    pub fn predict_batch(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        let p = self.forward_batch(inputs)?;
        Ok(p.axis_iter(Axis(0)).map(|r| usize::from(r[1] > r[0])).collect())
    }
}
