//! GRU cells and linear heads with hand-written backward passes, plus Adam.
//!
//! All trainable tensors of a network live in one flat `f64` buffer described
//! by a [`ParamLayout`]. Cells and heads hold [`TensorId`]s into that layout, so
//! a forward pass borrows the value buffer and a backward pass accumulates into
//! any gradient buffer of the same length. This is what lets batch workers own
//! private gradient buffers that are merged afterwards.
//!
//! GRU convention (fixed everywhere in this crate):
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)
//! r  = sigmoid(W_r x + U_r h + b_r)
//! h~ = tanh(W_h x + U_h (r * h) + b_h)
//! h' = (1 - z) * h + z * h~
//! ```

use std::ops::Range;

use crate::linalg::{axpy, dot, Vector};
use crate::ssm::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    /// Uniform on `(-k, k)`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub init: Init,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, named tensor shapes over one flat buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> TensorId {
        let name = name.into();
        assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate tensor name {name}"
        );
        let id = TensorId(self.specs.len());
        self.specs.push(TensorSpec {
            name,
            rows,
            cols,
            offset: self.len,
            init,
        });
        self.len += rows * cols;
        id
    }

    pub fn spec(&self, id: TensorId) -> &TensorSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.specs.iter().position(|s| s.name == name).map(TensorId)
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn slice<'a>(&self, buf: &'a [f64], id: TensorId) -> &'a [f64] {
        &buf[self.specs[id.0].range()]
    }

    #[inline]
    pub fn slice_mut<'a>(&self, buf: &'a mut [f64], id: TensorId) -> &'a mut [f64] {
        &mut buf[self.specs[id.0].range()]
    }
}

/// Parameter values plus a gradient accumulator of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTape {
    layout: ParamLayout,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

impl ParamTape {
    /// All-zero values and gradients.
    pub fn zeros(layout: ParamLayout) -> Self {
        let n = layout.len();
        Self {
            layout,
            values: vec![0.0; n],
            grads: vec![0.0; n],
        }
    }

    /// Values drawn according to each tensor's [`Init`].
    pub fn initialized(layout: ParamLayout, rng: &mut RngStream) -> Self {
        let mut tape = Self::zeros(layout);
        for spec in tape.layout.specs.clone() {
            if let Init::Uniform(k) = spec.init {
                for v in &mut tape.values[spec.range()] {
                    *v = rng.uniform_range(-k, k);
                }
            }
        }
        tape
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        self.layout.slice(&self.values, id)
    }

    pub fn value_mut(&mut self, id: TensorId) -> &mut [f64] {
        self.layout.slice_mut(&mut self.values, id)
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        self.layout.slice(&self.grads, id)
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// `||values||^2`
    pub fn norm_sq(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn grad_norm(&self) -> f64 {
        dot(&self.grads, &self.grads).sqrt()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dot products of `row` with four vectors at once. Each result is
/// bit-identical to [`dot`]; the independent chains only add throughput.
#[inline(always)]
fn dot4(row: &[f64], x0: &[f64], x1: &[f64], x2: &[f64], x3: &[f64]) -> [f64; 4] {
    let n = row.len();
    let (x0, x1, x2, x3) = (&x0[..n], &x1[..n], &x2[..n], &x3[..n]);
    let mut acc = [[0.0f64; 4]; 4];
    let chunks = row
        .chunks_exact(4)
        .zip(x0.chunks_exact(4))
        .zip(x1.chunks_exact(4))
        .zip(x2.chunks_exact(4))
        .zip(x3.chunks_exact(4));
    for ((((r, a), b), c), d) in chunks {
        for k in 0..4 {
            acc[0][k] += r[k] * a[k];
            acc[1][k] += r[k] * b[k];
            acc[2][k] += r[k] * c[k];
            acc[3][k] += r[k] * d[k];
        }
    }
    let head = n - n % 4;
    let xs = [x0, x1, x2, x3];
    let mut out = [0.0; 4];
    for g in 0..4 {
        let mut tail = 0.0;
        for j in head..n {
            tail += row[j] * xs[g][j];
        }
        out[g] = (acc[g][0] + acc[g][1]) + (acc[g][2] + acc[g][3]) + tail;
    }
    out
}

/// Calls `emit(b, dot(row, xs[b]))` for every batch member.
#[inline(always)]
fn dots(row: &[f64], xs: &[&[f64]], mut emit: impl FnMut(usize, f64)) {
    let mut b = 0;
    while b + 4 <= xs.len() {
        let d = dot4(row, xs[b], xs[b + 1], xs[b + 2], xs[b + 3]);
        for (g, v) in d.into_iter().enumerate() {
            emit(b + g, v);
        }
        b += 4;
    }
    while b < xs.len() {
        emit(b, dot(row, xs[b]));
        b += 1;
    }
}

/// `outs[b] = A xs[b] + bias` for row-major `A`; each row of `A` is read
/// once for the whole batch.
#[inline]
fn affine_batch(a: &[f64], xs: &[&[f64]], bias: &[f64], outs: &mut [Vec<f64>]) {
    let cols = xs[0].len();
    for i in 0..bias.len() {
        let row = &a[i * cols..(i + 1) * cols];
        dots(row, xs, |b, v| outs[b][i] = bias[i] + v);
    }
}

/// `outs[b] += A xs[b]`
#[inline]
fn add_mat_vec_batch(a: &[f64], xs: &[&[f64]], outs: &mut [Vec<f64>]) {
    let cols = xs[0].len();
    let rows = outs[0].len();
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        dots(row, xs, |b, v| outs[b][i] += v);
    }
}

/// `outs[b] += A^T vs[b]`
#[inline]
fn add_mat_t_vec_batch(a: &[f64], vs: &[&[f64]], outs: &mut [Vec<f64>]) {
    let cols = outs[0].len();
    let rows = vs[0].len();
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        for (v, o) in vs.iter().zip(outs.iter_mut()) {
            if v[i] != 0.0 {
                axpy(v[i], row, o);
            }
        }
    }
}

/// `G += sum_b us[b] xs[b]^T`, batch members accumulated in order with a
/// single pass over each row of `G`.
#[inline]
fn add_outer_batch(g: &mut [f64], us: &[&[f64]], xs: &[&[f64]]) {
    let cols = xs[0].len();
    let rows = us[0].len();
    for i in 0..rows {
        let row = &mut g[i * cols..(i + 1) * cols];
        let mut b = 0;
        while b + 4 <= us.len() {
            let (u0, u1, u2, u3) = (us[b][i], us[b + 1][i], us[b + 2][i], us[b + 3][i]);
            let (x0, x1, x2, x3) = (&xs[b][..cols], &xs[b + 1][..cols], &xs[b + 2][..cols], &xs[b + 3][..cols]);
            for ((((g, a), b1), c), d) in row.iter_mut().zip(x0).zip(x1).zip(x2).zip(x3) {
                *g = (((*g + u0 * a) + u1 * b1) + u2 * c) + u3 * d;
            }
            b += 4;
        }
        while b < us.len() {
            axpy(us[b][i], xs[b], row);
            b += 1;
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn refs(vs: &[Vec<f64>]) -> Vec<&[f64]> {
    vs.iter().map(|v| v.as_slice()).collect()
}

/// Tensor handles of one GRU cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: TensorId,
    pub w_r: TensorId,
    pub w_h: TensorId,
    pub u_z: TensorId,
    pub u_r: TensorId,
    pub u_h: TensorId,
    pub b_z: TensorId,
    pub b_r: TensorId,
    pub b_h: TensorId,
}

/// Activations of one GRU step kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub candidate: Vec<f64>,
    pub reset_hidden: Vec<f64>,
    pub h_new: Vec<f64>,
}

impl GruCellParams {
    /// Registers the nine tensors as `<prefix>.w_z` etc. Weights use
    /// uniform `(-1/sqrt(hidden), 1/sqrt(hidden))`, biases start at zero.
    pub fn register(layout: &mut ParamLayout, prefix: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let k = Init::Uniform(1.0 / (hidden_dim as f64).sqrt());
        let mut w = |name: &str, cols: usize, init: Init| {
            layout.add(format!("{prefix}.{name}"), hidden_dim, cols, init)
        };
        Self {
            input_dim,
            hidden_dim,
            w_z: w("w_z", input_dim, k),
            w_r: w("w_r", input_dim, k),
            w_h: w("w_h", input_dim, k),
            u_z: w("u_z", hidden_dim, k),
            u_r: w("u_r", hidden_dim, k),
            u_h: w("u_h", hidden_dim, k),
            b_z: w("b_z", 1, Init::Zero),
            b_r: w("b_r", 1, Init::Zero),
            b_h: w("b_h", 1, Init::Zero),
        }
    }

    pub fn tensors(&self) -> [TensorId; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r,
            self.b_h,
        ]
    }

    /// One recurrent step.
    pub fn forward(&self, layout: &ParamLayout, values: &[f64], x: &[f64], h_prev: &[f64]) -> GruCache {
        self.forward_batch(layout, values, &[x], &[h_prev]).pop().expect("batch of one")
    }

    /// One recurrent step for several independent sequences at once. Each
    /// member's result equals a separate [`forward`](Self::forward) call.
    pub fn forward_batch(
        &self,
        layout: &ParamLayout,
        values: &[f64],
        xs: &[&[f64]],
        h_prevs: &[&[f64]],
    ) -> Vec<GruCache> {
        assert_eq!(xs.len(), h_prevs.len(), "batch size mismatch");
        for (x, h) in xs.iter().zip(h_prevs) {
            assert_eq!(x.len(), self.input_dim, "GRU input dimension mismatch");
            assert_eq!(h.len(), self.hidden_dim, "GRU hidden dimension mismatch");
        }
        let p = |id| layout.slice(values, id);
        let (hd, nb) = (self.hidden_dim, xs.len());

        let mut z = vec![vec![0.0; hd]; nb];
        affine_batch(p(self.w_z), xs, p(self.b_z), &mut z);
        add_mat_vec_batch(p(self.u_z), h_prevs, &mut z);
        z.iter_mut().flatten().for_each(|v| *v = sigmoid(*v));

        let mut r = vec![vec![0.0; hd]; nb];
        affine_batch(p(self.w_r), xs, p(self.b_r), &mut r);
        add_mat_vec_batch(p(self.u_r), h_prevs, &mut r);
        r.iter_mut().flatten().for_each(|v| *v = sigmoid(*v));

        let reset_hidden: Vec<Vec<f64>> = r
            .iter()
            .zip(h_prevs)
            .map(|(rb, hb)| rb.iter().zip(hb.iter()).map(|(a, b)| a * b).collect())
            .collect();
        let mut candidate = vec![vec![0.0; hd]; nb];
        affine_batch(p(self.w_h), xs, p(self.b_h), &mut candidate);
        add_mat_vec_batch(p(self.u_h), &refs(&reset_hidden), &mut candidate);
        candidate.iter_mut().flatten().for_each(|v| *v = v.tanh());

        let mut out = Vec::with_capacity(nb);
        for ((((x, h_prev), z), r), (candidate, reset_hidden)) in xs
            .iter()
            .zip(h_prevs)
            .zip(z)
            .zip(r)
            .zip(candidate.into_iter().zip(reset_hidden))
        {
            let h_new = (0..hd)
                .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * candidate[i])
                .collect();
            out.push(GruCache {
                x: x.to_vec(),
                h_prev: h_prev.to_vec(),
                z,
                r,
                candidate,
                reset_hidden,
                h_new,
            });
        }
        out
    }

    /// Exact gradients of one step. Parameter gradients are added into
    /// `grads`; returns `(dL/dx, dL/dh_prev)`.
    pub fn backward(
        &self,
        layout: &ParamLayout,
        values: &[f64],
        grads: &mut [f64],
        cache: &GruCache,
        dh_new: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        self.backward_batch(layout, values, grads, &[cache], &[dh_new])
            .pop()
            .expect("batch of one")
    }

    /// Batched [`backward`](Self::backward); parameter gradients of all
    /// members are summed in batch order.
    pub fn backward_batch(
        &self,
        layout: &ParamLayout,
        values: &[f64],
        grads: &mut [f64],
        caches: &[&GruCache],
        dh_news: &[&[f64]],
    ) -> Vec<(Vec<f64>, Vec<f64>)> {
        assert_eq!(caches.len(), dh_news.len(), "batch size mismatch");
        let (hd, nb) = (self.hidden_dim, caches.len());
        let p = |id| layout.slice(values, id);

        let mut dh_prev = Vec::with_capacity(nb);
        let mut da_h = Vec::with_capacity(nb);
        let mut da_z = Vec::with_capacity(nb);
        for (c, dh) in caches.iter().zip(dh_news) {
            dh_prev.push((0..hd).map(|i| dh[i] * (1.0 - c.z[i])).collect::<Vec<f64>>());
            da_h.push(
                (0..hd)
                    .map(|i| dh[i] * c.z[i] * (1.0 - c.candidate[i] * c.candidate[i]))
                    .collect::<Vec<f64>>(),
            );
            da_z.push(
                (0..hd)
                    .map(|i| dh[i] * (c.candidate[i] - c.h_prev[i]) * c.z[i] * (1.0 - c.z[i]))
                    .collect::<Vec<f64>>(),
            );
        }

        let mut d_reset_hidden = vec![vec![0.0; hd]; nb];
        add_mat_t_vec_batch(p(self.u_h), &refs(&da_h), &mut d_reset_hidden);
        let mut da_r = Vec::with_capacity(nb);
        for b in 0..nb {
            let c = caches[b];
            let drh = &d_reset_hidden[b];
            da_r.push(
                (0..hd)
                    .map(|i| drh[i] * c.h_prev[i] * c.r[i] * (1.0 - c.r[i]))
                    .collect::<Vec<f64>>(),
            );
            for i in 0..hd {
                dh_prev[b][i] += drh[i] * c.r[i];
            }
        }

        let (da_h, da_z, da_r) = (refs(&da_h), refs(&da_z), refs(&da_r));
        let mut dx = vec![vec![0.0; self.input_dim]; nb];
        add_mat_t_vec_batch(p(self.w_h), &da_h, &mut dx);
        add_mat_t_vec_batch(p(self.w_z), &da_z, &mut dx);
        add_mat_t_vec_batch(p(self.w_r), &da_r, &mut dx);
        add_mat_t_vec_batch(p(self.u_z), &da_z, &mut dh_prev);
        add_mat_t_vec_batch(p(self.u_r), &da_r, &mut dh_prev);

        let xs: Vec<&[f64]> = caches.iter().map(|c| c.x.as_slice()).collect();
        let hs: Vec<&[f64]> = caches.iter().map(|c| c.h_prev.as_slice()).collect();
        let rhs: Vec<&[f64]> = caches.iter().map(|c| c.reset_hidden.as_slice()).collect();
        add_outer_batch(layout.slice_mut(grads, self.w_h), &da_h, &xs);
        add_outer_batch(layout.slice_mut(grads, self.w_z), &da_z, &xs);
        add_outer_batch(layout.slice_mut(grads, self.w_r), &da_r, &xs);
        add_outer_batch(layout.slice_mut(grads, self.u_h), &da_h, &rhs);
        add_outer_batch(layout.slice_mut(grads, self.u_z), &da_z, &hs);
        add_outer_batch(layout.slice_mut(grads, self.u_r), &da_r, &hs);
        for b in 0..nb {
            add_into(layout.slice_mut(grads, self.b_h), da_h[b]);
            add_into(layout.slice_mut(grads, self.b_z), da_z[b]);
            add_into(layout.slice_mut(grads, self.b_r), da_r[b]);
        }

        dx.into_iter().zip(dh_prev).collect()
    }
}

/// Tensor handles of an affine map `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHeadParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: TensorId,
    pub b: TensorId,
}

impl LinearHeadParams {
    /// `k` is the half-width of the uniform weight init.
    pub fn register(layout: &mut ParamLayout, prefix: &str, in_dim: usize, out_dim: usize, k: f64) -> Self {
        Self {
            in_dim,
            out_dim,
            w: layout.add(format!("{prefix}.w"), out_dim, in_dim, Init::Uniform(k)),
            b: layout.add(format!("{prefix}.b"), out_dim, 1, Init::Zero),
        }
    }

    pub fn forward(&self, layout: &ParamLayout, values: &[f64], x: &[f64]) -> Vector {
        assert_eq!(x.len(), self.in_dim, "linear head input dimension mismatch");
        let mut y = vec![vec![0.0; self.out_dim]];
        affine_batch(layout.slice(values, self.w), &[x], layout.slice(values, self.b), &mut y);
        Vector::from_vec(y.pop().expect("batch of one"))
    }

    /// Adds `dy x^T` and `dy` into the gradients; returns `W^T dy`.
    pub fn backward(
        &self,
        layout: &ParamLayout,
        values: &[f64],
        grads: &mut [f64],
        x: &[f64],
        dy: &[f64],
    ) -> Vec<f64> {
        let mut dx = vec![vec![0.0; self.in_dim]];
        add_mat_t_vec_batch(layout.slice(values, self.w), &[dy], &mut dx);
        add_outer_batch(layout.slice_mut(grads, self.w), &[dy], &[x]);
        add_into(layout.slice_mut(grads, self.b), dy);
        dx.pop().expect("batch of one")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every scalar of a [`ParamTape`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    /// Per-tensor learning-rate multiplier, indexed like the layout.
    pub lr_scale: Vec<f64>,
}

impl OptimizerState {
    pub fn new(layout: &ParamLayout, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: vec![0.0; layout.len()],
            second_moment: vec![0.0; layout.len()],
            lr_scale: vec![1.0; layout.specs().len()],
        }
    }

    /// Sets the learning-rate multiplier of every tensor whose name matches.
    pub fn set_lr_scale(&mut self, layout: &ParamLayout, matches: impl Fn(&str) -> bool, scale: f64) {
        for (i, spec) in layout.specs().iter().enumerate() {
            if matches(&spec.name) {
                self.lr_scale[i] = scale;
            }
        }
    }

    /// One bias-corrected Adam update.
    ///
    /// The l2 penalty `weight_decay * ||theta||^2` enters as its exact
    /// gradient `2 * weight_decay * theta` before the moment update. Gradients
    /// are zeroed afterwards.
    pub fn adam_step(&mut self, tape: &mut ParamTape, weight_decay: f64) {
        assert_eq!(tape.values.len(), self.first_moment.len(), "optimizer/tape mismatch");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (t, spec) in tape.layout.specs.iter().enumerate() {
            let rate = lr * self.lr_scale[t];
            for i in spec.range() {
                let g = tape.grads[i] + 2.0 * weight_decay * tape.values[i];
                let m = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
                let v = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
                self.first_moment[i] = m;
                self.second_moment[i] = v;
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                tape.values[i] -= rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        tape.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cell(input: usize, hidden: usize, seed: u64) -> (GruCellParams, ParamTape) {
        let mut layout = ParamLayout::new();
        let cell = GruCellParams::register(&mut layout, "gru", input, hidden);
        let mut tape = ParamTape::zeros(layout);
        let mut rng = RngStream::new(seed);
        for v in tape.values.iter_mut() {
            *v = rng.uniform_range(-0.8, 0.8);
        }
        (cell, tape)
    }

    #[test]
    fn zero_params_zero_state() {
        let mut layout = ParamLayout::new();
        let cell = GruCellParams::register(&mut layout, "g", 3, 4);
        let tape = ParamTape::zeros(layout);
        let c = cell.forward(tape.layout(), &tape.values, &[1.0, -2.0, 3.0], &[0.0; 4]);
        assert_eq!(c.h_new, vec![0.0; 4]);
        assert!(c.z.iter().all(|z| *z == 0.5));
        assert!(c.candidate.iter().all(|h| *h == 0.0));
    }

    #[test]
    fn saturated_update_gate_takes_candidate() {
        let mut layout = ParamLayout::new();
        let cell = GruCellParams::register(&mut layout, "g", 1, 1);
        let mut tape = ParamTape::zeros(layout);
        // z = sigmoid(800) == 1 in f64; candidate = tanh(atanh(0.5)) = 0.5
        tape.value_mut(cell.b_z)[0] = 800.0;
        tape.value_mut(cell.b_h)[0] = 0.5f64.atanh();
        let c = cell.forward(tape.layout(), &tape.values, &[0.7], &[-0.3]);
        assert_eq!(c.z[0], 1.0);
        assert!((c.h_new[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gate_ranges() {
        let (cell, tape) = random_cell(3, 5, 11);
        let c = cell.forward(tape.layout(), &tape.values, &[4.0, -9.0, 2.0], &[0.9, -0.9, 0.1, 0.0, 0.5]);
        assert!(c.z.iter().chain(&c.r).all(|v| *v > 0.0 && *v < 1.0));
        assert!(c.candidate.iter().all(|v| *v > -1.0 && *v < 1.0));
    }

    #[test]
    fn zero_upstream_gradient() {
        let (cell, tape) = random_cell(3, 4, 2);
        let c = cell.forward(tape.layout(), &tape.values, &[0.1, 0.2, 0.3], &[0.4, -0.1, 0.0, 0.2]);
        let mut grads = vec![0.0; tape.values.len()];
        let (dx, dh) = cell.backward(tape.layout(), &tape.values, &mut grads, &c, &[0.0; 4]);
        assert!(dx.iter().chain(&dh).chain(&grads).all(|v| *v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let (cell, tape) = random_cell(3, 4, 4);
        let c = cell.forward(tape.layout(), &tape.values, &[0.1, 0.2, 0.3], &[0.4, -0.1, 0.0, 0.2]);
        let up = [0.3, -1.1, 0.25, 2.0];
        let up2: Vec<f64> = up.iter().map(|v| 2.0 * v).collect();
        let mut g1 = vec![0.0; tape.values.len()];
        let mut g2 = vec![0.0; tape.values.len()];
        let (dx1, dh1) = cell.backward(tape.layout(), &tape.values, &mut g1, &c, &up);
        let (dx2, dh2) = cell.backward(tape.layout(), &tape.values, &mut g2, &c, &up2);
        for (a, b) in dx1.iter().chain(&dh1).chain(&g1).zip(dx2.iter().chain(&dh2).chain(&g2)) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let (cell, mut tape) = random_cell(3, 4, 7);
        let x = [0.5, -1.0, 0.25];
        let h = [0.1, -0.4, 0.7, 0.0];
        let weights = [0.7, -1.3, 0.4, 1.1];
        let loss = |tape: &ParamTape, x: &[f64], h: &[f64]| -> f64 {
            let c = cell.forward(tape.layout(), &tape.values, x, h);
            dot(&c.h_new, &weights)
        };
        let c = cell.forward(tape.layout(), &tape.values, &x, &h);
        let mut grads = vec![0.0; tape.values.len()];
        let (dx, dh) = cell.backward(tape.layout(), &tape.values, &mut grads, &c, &weights);

        let step = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        for i in 0..tape.values.len() {
            let orig = tape.values[i];
            tape.values[i] = orig + step;
            let lp = loss(&tape, &x, &h);
            tape.values[i] = orig - step;
            let lm = loss(&tape, &x, &h);
            tape.values[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            assert!(rel(fd, grads[i]) < 1e-5, "param {i}: fd {fd} analytic {}", grads[i]);
        }
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += step;
            xm[k] -= step;
            let fd = (loss(&tape, &xp, &h) - loss(&tape, &xm, &h)) / (2.0 * step);
            assert!(rel(fd, dx[k]) < 1e-5);
        }
        for k in 0..4 {
            let mut hp = h;
            let mut hm = h;
            hp[k] += step;
            hm[k] -= step;
            let fd = (loss(&tape, &x, &hp) - loss(&tape, &x, &hm)) / (2.0 * step);
            assert!(rel(fd, dh[k]) < 1e-5);
        }
    }

    #[test]
    fn linear_head_identity_and_gradients() {
        let mut layout = ParamLayout::new();
        let head = LinearHeadParams::register(&mut layout, "head", 3, 3, 0.5);
        let mut tape = ParamTape::zeros(layout);
        for i in 0..3 {
            tape.value_mut(head.w)[i * 3 + i] = 1.0;
        }
        let x = [1.5, -2.0, 0.25];
        assert_eq!(head.forward(tape.layout(), &tape.values, &x).as_slice(), &x);

        let mut rng = RngStream::new(1);
        tape.values.iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
        let up = [0.3, -0.7, 1.9];
        let mut grads = vec![0.0; tape.values.len()];
        let dx = head.backward(tape.layout(), &tape.values, &mut grads, &x, &up);
        assert_eq!(tape.layout().slice(&grads, head.b), &up);

        let loss = |t: &ParamTape, x: &[f64]| dot(head.forward(t.layout(), &t.values, x).as_slice(), &up);
        let step = 1e-6;
        for i in 0..tape.values.len() {
            let orig = tape.values[i];
            tape.values[i] = orig + step;
            let lp = loss(&tape, &x);
            tape.values[i] = orig - step;
            let lm = loss(&tape, &x);
            tape.values[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            assert!((fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-8) < 1e-6);
        }
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += step;
            xm[k] -= step;
            let fd = (loss(&tape, &xp) - loss(&tape, &xm)) / (2.0 * step);
            assert!((fd - dx[k]).abs() / fd.abs().max(1e-8) < 1e-6);
        }
    }

    fn scalar_tape(value: f64) -> ParamTape {
        let mut layout = ParamLayout::new();
        layout.add("theta", 1, 1, Init::Zero);
        let mut tape = ParamTape::zeros(layout);
        tape.values[0] = value;
        tape
    }

    #[test]
    fn adam_zero_gradient_no_decay_is_noop() {
        let mut tape = scalar_tape(3.0);
        let mut opt = OptimizerState::new(tape.layout(), AdamConfig::default());
        opt.adam_step(&mut tape, 0.0);
        assert_eq!(tape.values[0], 3.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut tape = scalar_tape(1.0);
        let mut opt = OptimizerState::new(
            tape.layout(),
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        tape.grads[0] = 1.0;
        opt.adam_step(&mut tape, 0.0);
        // m_hat = 1, v_hat = 1, step = 0.1 / (1 + 1e-8)
        assert!((tape.values[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(tape.grads[0], 0.0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_decay_pulls_toward_zero() {
        let mut tape = scalar_tape(10.0);
        let mut opt = OptimizerState::new(tape.layout(), AdamConfig::default());
        opt.adam_step(&mut tape, 1e-4);
        assert!(tape.values[0] < 10.0);
    }

    #[test]
    fn lr_scale_freezes_tensors() {
        let mut layout = ParamLayout::new();
        layout.add("a.w", 1, 1, Init::Zero);
        layout.add("b.w", 1, 1, Init::Zero);
        let mut tape = ParamTape::zeros(layout);
        let mut opt = OptimizerState::new(tape.layout(), AdamConfig::default());
        opt.set_lr_scale(tape.layout(), |n| n.starts_with("a."), 0.0);
        tape.grads = vec![1.0, 1.0];
        opt.adam_step(&mut tape, 0.0);
        assert_eq!(tape.values[0], 0.0);
        assert!(tape.values[1] < 0.0);
    }
}
