use ndarray::{Array1, Array2};

use super::{add_dot_t, add_outer, dot_t, matvec, sigmoid, ParamSet, TensorRef};

/// One GRU cell:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + U_n (r ⊙ h) + b_n)
/// h' = z ⊙ h + (1 - z) ⊙ n
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub w_z: Array2<f64>,
    pub w_r: Array2<f64>,
    pub w_n: Array2<f64>,
    pub u_z: Array2<f64>,
    pub u_r: Array2<f64>,
    pub u_n: Array2<f64>,
    pub b_z: Array1<f64>,
    pub b_r: Array1<f64>,
    pub b_n: Array1<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GruStep {
    pub x: Array1<f64>,
    pub h_prev: Array1<f64>,
    pub z: Array1<f64>,
    pub r: Array1<f64>,
    pub n: Array1<f64>,
    pub h: Array1<f64>,
}

impl GruCellParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let w = || Array2::zeros((hidden, input_dim));
        let u = || Array2::zeros((hidden, hidden));
        let b = || Array1::zeros(hidden);
        Self {
            w_z: w(),
            w_r: w(),
            w_n: w(),
            u_z: u(),
            u_r: u(),
            u_n: u(),
            b_z: b(),
            b_r: b(),
            b_n: b(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.nrows()
    }

    pub fn forward(&self, x: &Array1<f64>, h: &Array1<f64>) -> GruStep {
        let z = (matvec(&self.w_z, x) + matvec(&self.u_z, h) + &self.b_z).mapv_into(sigmoid);
        let r = (matvec(&self.w_r, x) + matvec(&self.u_r, h) + &self.b_r).mapv_into(sigmoid);
        let rh = &r * h;
        let n = (matvec(&self.w_n, x) + matvec(&self.u_n, &rh) + &self.b_n).mapv_into(f64::tanh);
        let h_new = &z * h + &(1.0 - &z) * &n;
        GruStep {
            x: x.clone(),
            h_prev: h.clone(),
            z,
            r,
            n,
            h: h_new,
        }
    }

    /// Accumulates parameter gradients into `grads` and returns
    /// `(dL/dx, dL/dh_prev)`. The input gradient is skipped when not needed.
    pub fn backward(
        &self,
        step: &GruStep,
        dh_new: &Array1<f64>,
        grads: &mut GruCellParams,
        need_dx: bool,
    ) -> (Option<Array1<f64>>, Array1<f64>) {
        let GruStep { x, h_prev, z, r, n, .. } = step;

        let dz = dh_new * &(h_prev - n);
        let dn = dh_new * &(1.0 - z);
        let mut dh = dh_new * z;

        let da_n = &dn * &n.mapv(|v| 1.0 - v * v);
        let rh = r * h_prev;
        add_outer(&mut grads.w_n, &da_n, x);
        add_outer(&mut grads.u_n, &da_n, &rh);
        grads.b_n += &da_n;
        let d_rh = dot_t(&self.u_n, &da_n);
        let dr = &d_rh * h_prev;
        dh += &(&d_rh * r);

        let da_r = &dr * &r.mapv(|v| v * (1.0 - v));
        add_outer(&mut grads.w_r, &da_r, x);
        add_outer(&mut grads.u_r, &da_r, h_prev);
        grads.b_r += &da_r;
        add_dot_t(&mut dh, &self.u_r, &da_r);

        let da_z = &dz * &z.mapv(|v| v * (1.0 - v));
        add_outer(&mut grads.w_z, &da_z, x);
        add_outer(&mut grads.u_z, &da_z, h_prev);
        grads.b_z += &da_z;
        add_dot_t(&mut dh, &self.u_z, &da_z);

        let dx = need_dx.then(|| {
            let mut dx = dot_t(&self.w_z, &da_z);
            add_dot_t(&mut dx, &self.w_r, &da_r);
            add_dot_t(&mut dx, &self.w_n, &da_n);
            dx
        });
        (dx, dh)
    }
}

impl ParamSet for GruCellParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        for (name, m) in [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_n", &self.w_n),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_n", &self.u_n),
        ] {
            out.push(TensorRef::matrix(format!("{prefix}.{name}"), m));
        }
        for (name, b) in [("b_z", &self.b_z), ("b_r", &self.b_r), ("b_n", &self.b_n)] {
            out.push(TensorRef::vector(format!("{prefix}.{name}"), b));
        }
    }

    fn slices_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for m in [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_n,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_n,
        ] {
            out.push(m.as_slice_mut().expect("standard layout"));
        }
        for b in [&mut self.b_z, &mut self.b_r, &mut self.b_n] {
            out.push(b.as_slice_mut().expect("standard layout"));
        }
    }
}
