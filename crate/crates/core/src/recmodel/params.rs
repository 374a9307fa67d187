use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Weights of a single-layer GRU with an affine readout.
///
/// Gate matrices act on scaled inputs (`w_*`, `n_x × n_u`) and on the state
/// (`u_*`, `n_x × n_x`). The readout is `y = C x + D u + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_update: DMatrix<f64>,
    pub u_update: DMatrix<f64>,
    pub b_update: DVector<f64>,
    pub w_reset: DMatrix<f64>,
    pub u_reset: DMatrix<f64>,
    pub b_reset: DVector<f64>,
    pub w_cand: DMatrix<f64>,
    pub u_cand: DMatrix<f64>,
    pub b_cand: DVector<f64>,
    pub c_out: DMatrix<f64>,
    pub d_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

/// Names used in serialized models, in flattening order.
pub const PARAM_NAMES: [&str; 12] = [
    "w_update", "u_update", "b_update", "w_reset", "u_reset", "b_reset", "w_cand", "u_cand",
    "b_cand", "c_out", "d_out", "b_out",
];

impl GruParams {
    pub fn zeros(hidden: usize, inputs: usize, outputs: usize) -> Self {
        Self {
            w_update: DMatrix::zeros(hidden, inputs),
            u_update: DMatrix::zeros(hidden, hidden),
            b_update: DVector::zeros(hidden),
            w_reset: DMatrix::zeros(hidden, inputs),
            u_reset: DMatrix::zeros(hidden, hidden),
            b_reset: DVector::zeros(hidden),
            w_cand: DMatrix::zeros(hidden, inputs),
            u_cand: DMatrix::zeros(hidden, hidden),
            b_cand: DVector::zeros(hidden),
            c_out: DMatrix::zeros(outputs, hidden),
            d_out: DMatrix::zeros(outputs, inputs),
            b_out: DVector::zeros(outputs),
        }
    }

    /// Uniform in `[-1/√n_x, 1/√n_x]`, update-gate bias at −1.
    pub fn random<R: Rng>(hidden: usize, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(hidden, inputs, outputs);
        for slot in p.slices_mut() {
            for v in slot.iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        p.b_update.fill(-1.0);
        p
    }

    pub fn hidden_size(&self) -> usize {
        self.u_update.nrows()
    }

    pub fn input_size(&self) -> usize {
        self.w_update.ncols()
    }

    pub fn output_size(&self) -> usize {
        self.c_out.nrows()
    }

    pub fn slices(&self) -> [&[f64]; 12] {
        [
            self.w_update.as_slice(),
            self.u_update.as_slice(),
            self.b_update.as_slice(),
            self.w_reset.as_slice(),
            self.u_reset.as_slice(),
            self.b_reset.as_slice(),
            self.w_cand.as_slice(),
            self.u_cand.as_slice(),
            self.b_cand.as_slice(),
            self.c_out.as_slice(),
            self.d_out.as_slice(),
            self.b_out.as_slice(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 12] {
        [
            self.w_update.as_mut_slice(),
            self.u_update.as_mut_slice(),
            self.b_update.as_mut_slice(),
            self.w_reset.as_mut_slice(),
            self.u_reset.as_mut_slice(),
            self.b_reset.as_mut_slice(),
            self.w_cand.as_mut_slice(),
            self.u_cand.as_mut_slice(),
            self.b_cand.as_mut_slice(),
            self.c_out.as_mut_slice(),
            self.d_out.as_mut_slice(),
            self.b_out.as_mut_slice(),
        ]
    }

    /// Dimensions `(rows, cols)` of each parameter block, in flattening order.
    pub fn shapes(&self) -> [(usize, usize); 12] {
        let (h, i, o) = (self.hidden_size(), self.input_size(), self.output_size());
        [
            (h, i),
            (h, h),
            (h, 1),
            (h, i),
            (h, h),
            (h, 1),
            (h, i),
            (h, h),
            (h, 1),
            (o, h),
            (o, i),
            (o, 1),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().iter().flat_map(|s| s.iter().copied()).collect()
    }

    /// Overwrites all parameters from a flat vector produced by [`to_flat`](Self::to_flat).
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for slot in self.slices_mut() {
            let n = slot.len();
            slot.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        debug_assert_eq!(offset, flat.len());
    }

    pub fn add_scaled(&mut self, other: &GruParams, alpha: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        for slot in self.slices_mut() {
            slot.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}
