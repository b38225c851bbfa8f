//! GRU cell in row-vector convention: `x` is `1×d_in`, `h` is `1×d_h`.
//!
//! ```text
//! z  = σ(x·W_z + h·U_z + b_z)
//! r  = σ(x·W_r + h·U_r + b_r)
//! h~ = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h~
//! ```

use rand::Rng;

use super::{Array, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Array,
    pub u_z: Array,
    pub b_z: Array,
    pub w_r: Array,
    pub u_r: Array,
    pub b_r: Array,
    pub w_h: Array,
    pub u_h: Array,
    pub b_h: Array,
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

pub const GRU_TENSOR_NAMES: [&str; 9] = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"];

fn uniform(rows: usize, cols: usize, k: f64, rng: &mut impl Rng) -> Array {
    let data = (0..rows * cols).map(|_| rng.random_range(-k..k)).collect();
    Array::new(vec![rows, cols], data).expect("sized")
}

impl GruParams {
    /// Weights uniform in `(-1/sqrt(d_h), 1/sqrt(d_h))`, biases zero.
    pub fn init(d_in: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let k = 1.0 / (d_h as f64).sqrt();
        GruParams {
            w_z: uniform(d_in, d_h, k, rng),
            u_z: uniform(d_h, d_h, k, rng),
            b_z: Array::zeros(vec![1, d_h]),
            w_r: uniform(d_in, d_h, k, rng),
            u_r: uniform(d_h, d_h, k, rng),
            b_r: Array::zeros(vec![1, d_h]),
            w_h: uniform(d_in, d_h, k, rng),
            u_h: uniform(d_h, d_h, k, rng),
            b_h: Array::zeros(vec![1, d_h]),
        }
    }

    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        let w = || Array::zeros(vec![d_in, d_h]);
        let u = || Array::zeros(vec![d_h, d_h]);
        let b = || Array::zeros(vec![1, d_h]);
        GruParams {
            w_z: w(),
            u_z: u(),
            b_z: b(),
            w_r: w(),
            u_r: u(),
            b_r: b(),
            w_h: w(),
            u_h: u(),
            b_h: b(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_z.shape()[0]
    }

    /// Tensors in [`GRU_TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&Array; 9] {
        [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h, &self.u_h, &self.b_h,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array; 9] {
        [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, d_h) = (self.input_dim(), self.hidden_dim());
        for (name, t) in GRU_TENSOR_NAMES.iter().zip(self.tensors()) {
            let want = match name.as_bytes()[0] {
                b'w' => [d_in, d_h],
                b'u' => [d_h, d_h],
                _ => [1, d_h],
            };
            if t.shape() != want {
                return Err(Error::shape(
                    "gru",
                    format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> GruVars {
        GruVars {
            w_z: g.param(self.w_z.clone()),
            u_z: g.param(self.u_z.clone()),
            b_z: g.param(self.b_z.clone()),
            w_r: g.param(self.w_r.clone()),
            u_r: g.param(self.u_r.clone()),
            b_r: g.param(self.b_r.clone()),
            w_h: g.param(self.w_h.clone()),
            u_h: g.param(self.u_h.clone()),
            b_h: g.param(self.b_h.clone()),
        }
    }
}

impl GruVars {
    pub fn vars(&self) -> [Var; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h,
        ]
    }
}

/// One recurrence step.
pub fn gru_cell(g: &mut Graph, x: Var, h_prev: Var, p: &GruVars) -> Result<Var> {
    let xz = g.matmul(x, p.w_z)?;
    let xz = g.add(xz, p.b_z)?;
    let xr = g.matmul(x, p.w_r)?;
    let xr = g.add(xr, p.b_r)?;
    let xh = g.matmul(x, p.w_h)?;
    let xh = g.add(xh, p.b_h)?;
    gru_step(g, xz, xr, xh, h_prev, p)
}

/// Recurrence step given the input projections `x·W + b` of each gate, so a
/// sequence can project all of its inputs with one product per gate.
pub fn gru_step(g: &mut Graph, xz: Var, xr: Var, xh: Var, h_prev: Var, p: &GruVars) -> Result<Var> {
    let hz = g.matmul(h_prev, p.u_z)?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z);

    let hr = g.matmul(h_prev, p.u_r)?;
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r);

    let rh = g.mul(r, h_prev)?;
    let hh = g.matmul(rh, p.u_h)?;
    let cand = g.add(xh, hh)?;
    let cand = g.tanh(cand);

    // (1 - z) ⊙ h + z ⊙ h~  ==  h + z ⊙ (h~ - h)
    let diff = g.sub(cand, h_prev)?;
    let step = g.mul(z, diff)?;
    g.add(h_prev, step)
}

/// Runs the cell over the rows of `inputs` (`T×d_in`) from a zero state and
/// returns the stacked states (`T×d_h`). With `reverse`, steps run from the
/// last row to the first and row `t` of the output is still the state after
/// consuming input row `t`.
pub fn gru_sequence(g: &mut Graph, inputs: Var, p: &GruVars, reverse: bool) -> Result<Var> {
    let shape = g.shape(inputs).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("gru_sequence", format!("inputs {shape:?}")));
    }
    let steps = shape[0];
    let d_h = g.shape(p.u_z)[0];

    let project = |g: &mut Graph, w: Var, b: Var| -> Result<Var> {
        let xw = g.matmul(inputs, w)?;
        let bb = g.broadcast_to(b, &[steps, d_h])?;
        g.add(xw, bb)
    };
    let xz = project(g, p.w_z, p.b_z)?;
    let xr = project(g, p.w_r, p.b_r)?;
    let xh = project(g, p.w_h, p.b_h)?;

    let mut h = g.constant(Array::zeros(vec![1, d_h]));
    let mut states = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let zt = g.slice_rows(xz, t, 1)?;
        let rt = g.slice_rows(xr, t, 1)?;
        let ht = g.slice_rows(xh, t, 1)?;
        h = gru_step(g, zt, rt, ht, h, p)?;
        states[t] = h;
    }
    g.concat(&states, 0)
}
