use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis, Zip};

use super::LstmLayer;
use crate::Scalar;

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    pub inputs: Vec<Array2<T>>,
    /// Activated gates per step, batch x 4H in i, f, o, g order.
    pub gates: Vec<Array2<T>>,
    pub cells: Vec<Array2<T>>,
    pub tanh_cells: Vec<Array2<T>>,
    pub hiddens: Vec<Array2<T>>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn forward<T: Scalar>(layer: &LstmLayer<T>, inputs: Vec<Array2<T>>) -> LayerCache<T> {
    let batch = inputs[0].nrows();
    let h = layer.hidden_dim();
    let steps = inputs.len();
    let mut cache = LayerCache {
        gates: Vec::with_capacity(steps),
        cells: Vec::with_capacity(steps),
        tanh_cells: Vec::with_capacity(steps),
        hiddens: Vec::with_capacity(steps),
        inputs,
    };
    let mut h_prev = Array2::<T>::zeros((batch, h));
    let mut c_prev = Array2::<T>::zeros((batch, h));
    for t in 0..steps {
        let mut z = Array2::from_shape_fn((batch, 4 * h), |(_, r)| layer.bias[r]);
        general_mat_mul(T::one(), &cache.inputs[t], &layer.w_ih.t(), T::one(), &mut z);
        general_mat_mul(T::one(), &h_prev, &layer.w_hh.t(), T::one(), &mut z);
        z.slice_mut(s![.., ..3 * h]).mapv_inplace(sigmoid);
        z.slice_mut(s![.., 3 * h..]).mapv_inplace(|v| v.tanh());

        let mut c = Array2::zeros((batch, h));
        Zip::from(&mut c)
            .and(&c_prev)
            .and(z.slice(s![.., ..h]))
            .and(z.slice(s![.., h..2 * h]))
            .and(z.slice(s![.., 3 * h..]))
            .for_each(|c, &cp, &i, &f, &g| *c = f * cp + i * g);
        let tc = c.mapv(|v| v.tanh());
        let hid = &z.slice(s![.., 2 * h..3 * h]) * &tc;

        cache.gates.push(z);
        cache.tanh_cells.push(tc);
        cache.cells.push(c.clone());
        cache.hiddens.push(hid.clone());
        h_prev = hid;
        c_prev = c;
    }
    cache
}

/// Accumulates parameter gradients into `grad` and returns the gradient
/// with respect to each step's input.
pub(crate) fn backward<T: Scalar>(
    layer: &LstmLayer<T>,
    cache: &LayerCache<T>,
    dh_ext: &[Option<Array2<T>>],
    grad: &mut LstmLayer<T>,
) -> Vec<Array2<T>> {
    let steps = cache.hiddens.len();
    let batch = cache.hiddens[0].nrows();
    let h = layer.hidden_dim();
    let one = T::one();
    let mut dh_next = Array2::<T>::zeros((batch, h));
    let mut dc_next = Array2::<T>::zeros((batch, h));
    let mut dxs = vec![Array2::zeros((0, 0)); steps];
    let zeros = Array2::<T>::zeros((batch, h));
    for t in (0..steps).rev() {
        let mut dh = dh_next;
        if let Some(ext) = &dh_ext[t] {
            dh += ext;
        }
        let gates = &cache.gates[t];
        let (gi, gf, go, gg) = (
            gates.slice(s![.., ..h]),
            gates.slice(s![.., h..2 * h]),
            gates.slice(s![.., 2 * h..3 * h]),
            gates.slice(s![.., 3 * h..]),
        );
        let c_prev = if t > 0 { &cache.cells[t - 1] } else { &zeros };
        let h_prev = if t > 0 { &cache.hiddens[t - 1] } else { &zeros };

        let mut dc = dc_next;
        Zip::from(&mut dc)
            .and(&dh)
            .and(go)
            .and(&cache.tanh_cells[t])
            .for_each(|dc, &dh, &o, &tc| *dc += dh * o * (one - tc * tc));

        let mut dz = Array2::<T>::zeros((batch, 4 * h));
        {
            let (mut dzi, rest) = dz.view_mut().split_at(Axis(1), h);
            let (mut dzf, rest) = rest.split_at(Axis(1), h);
            let (mut dzo, mut dzg) = rest.split_at(Axis(1), h);
            Zip::from(&mut dzi)
                .and(&dc)
                .and(gi)
                .and(gg)
                .for_each(|d, &dc, &i, &g| *d = dc * g * i * (one - i));
            Zip::from(&mut dzf)
                .and(&dc)
                .and(gf)
                .and(c_prev)
                .for_each(|d, &dc, &f, &cp| *d = dc * cp * f * (one - f));
            Zip::from(&mut dzo)
                .and(&dh)
                .and(go)
                .and(&cache.tanh_cells[t])
                .for_each(|d, &dh, &o, &tc| *d = dh * tc * o * (one - o));
            Zip::from(&mut dzg)
                .and(&dc)
                .and(gi)
                .and(gg)
                .for_each(|d, &dc, &i, &g| *d = dc * i * (one - g * g));
        }

        general_mat_mul(one, &dz.t(), &cache.inputs[t], one, &mut grad.w_ih);
        general_mat_mul(one, &dz.t(), h_prev, one, &mut grad.w_hh);
        grad.bias += &dz.sum_axis(Axis(0));

        dxs[t] = dz.dot(&layer.w_ih);
        dh_next = dz.dot(&layer.w_hh);
        dc_next = &dc * &gf;
    }
    dxs
}
