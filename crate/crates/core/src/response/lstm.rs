//! Bidirectional LSTM response model.
//!
//! Two non-peephole LSTM layers read the per-day inputs (`log1p` impressions
//! of every brand and position plus the day's price indices): one runs
//! forward in time and summarizes the past, the other runs backward and
//! summarizes the future. A fully connected `tanh` layer over the user
//! features shifts every brand's output logit additively.
//!
//! Weights are stored input-major (`in × 4H`) so both sparse input products
//! and their gradients walk contiguous memory. Gate order is `i, f, g, o`.

use serde::{Deserialize, Serialize};

use super::init::{orthogonal, truncated_normal, InitSpec};
use super::{
    check_example, encode_days, logistic, Dropout, Example, ModelShape, ResponseModel, SparseInput,
    Trainable, PROB_EPS,
};
use crate::error::ModelError;
use crate::types::{ImpressionSource, PriceSeries, UserFeatures};

/// Hidden sizes of the recurrent model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentShape {
    /// LSTM hidden size `H` per direction.
    pub hidden: usize,
    /// Width of the user-feature layer.
    pub feature_hidden: usize,
}

impl Default for RecurrentShape {
    fn default() -> Self {
        RecurrentShape {
            hidden: 32,
            feature_hidden: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    input: usize,
    hidden: usize,
    feat_hidden: usize,
    features: usize,
    brands: usize,
    dir_len: usize,
    wd: usize,
    bd: usize,
    v_past: usize,
    v_future: usize,
    q: usize,
    c: usize,
    len: usize,
}

impl Layout {
    fn new(shape: &ModelShape, rs: &RecurrentShape) -> Self {
        let b = shape.brands as usize;
        let input = shape.positions as usize * b + b;
        let h = rs.hidden;
        let u = rs.feature_hidden;
        let r = shape.features as usize;
        let dir_len = input * 4 * h + h * 4 * h + 4 * h;
        let wd = 2 * dir_len;
        let bd = wd + r * u;
        let v_past = bd + u;
        let v_future = v_past + b * h;
        let q = v_future + b * h;
        let c = q + b * u;
        Layout {
            input,
            hidden: h,
            feat_hidden: u,
            features: r,
            brands: b,
            dir_len,
            wd,
            bd,
            v_past,
            v_future,
            q,
            c,
            len: c + b,
        }
    }

    /// `(wx, wh, bias)` offsets for direction 0 (past) or 1 (future).
    fn direction(&self, dir: usize) -> (usize, usize, usize) {
        let base = dir * self.dir_len;
        let g = 4 * self.hidden;
        let wx = base;
        let wh = wx + self.input * g;
        let b = wh + self.hidden * g;
        (wx, wh, b)
    }
}

/// Per-step activations kept for backpropagation.
#[derive(Debug, Clone, Default)]
struct Trace {
    /// post-activation gates `[i f g o]`, 4H per step
    gates: Vec<f64>,
    /// cell state, H per step
    cell: Vec<f64>,
    /// hidden output, H per step
    out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiRecurrentModel {
    shape: ModelShape,
    rshape: RecurrentShape,
    layout: Layout,
    params: Vec<f64>,
}

impl BiRecurrentModel {
    /// Fresh parameters: orthogonal recurrent blocks (one per gate, gain from
    /// `init`), truncated-normal input and head weights, zero biases.
    pub fn new(shape: ModelShape, rshape: RecurrentShape, init: InitSpec) -> Self {
        let layout = Layout::new(&shape, &rshape);
        let mut params = vec![0.0; layout.len];
        let mut rng = init.rng();
        let h = layout.hidden;
        let g = 4 * h;
        for dir in 0..2 {
            let (wx, wh, _) = layout.direction(dir);
            truncated_normal(&mut rng, init.stddev, &mut params[wx..wh]);
            for gate in 0..4 {
                let q = orthogonal(&mut rng, h, init.orthogonal_gain);
                for j in 0..h {
                    for r in 0..h {
                        params[wh + j * g + gate * h + r] = q[r * h + j];
                    }
                }
            }
        }
        truncated_normal(&mut rng, init.stddev, &mut params[layout.wd..layout.bd]);
        truncated_normal(&mut rng, init.stddev, &mut params[layout.v_past..layout.c]);
        BiRecurrentModel {
            shape,
            rshape,
            layout,
            params,
        }
    }

    pub fn from_params(
        shape: ModelShape,
        rshape: RecurrentShape,
        params: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let layout = Layout::new(&shape, &rshape);
        if params.len() != layout.len {
            return Err(ModelError::ShapeMismatch(format!(
                "recurrent model needs {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        Ok(BiRecurrentModel {
            shape,
            rshape,
            layout,
            params,
        })
    }

    pub fn recurrent_shape(&self) -> RecurrentShape {
        self.rshape
    }

    /// Square `H×H` recurrent block of one gate in one direction, row-major
    /// with rows indexed by the incoming hidden unit.
    pub fn recurrent_block(&self, dir: usize, gate: usize) -> Vec<f64> {
        let h = self.layout.hidden;
        let (_, wh, _) = self.layout.direction(dir);
        let mut m = vec![0.0; h * h];
        for j in 0..h {
            for r in 0..h {
                m[j * h + r] = self.params[wh + j * 4 * h + gate * h + r];
            }
        }
        m
    }

    /// Runs one direction over `steps` (indices into `inputs`, in processing
    /// order), recording the activations.
    fn run(&self, dir: usize, inputs: &[SparseInput], steps: &[usize]) -> Trace {
        let l = &self.layout;
        let h = l.hidden;
        let g = 4 * h;
        let (wx, wh, bias) = l.direction(dir);
        let p = &self.params;
        let mut tr = Trace {
            gates: Vec::with_capacity(steps.len() * g),
            cell: Vec::with_capacity(steps.len() * h),
            out: Vec::with_capacity(steps.len() * h),
        };
        let mut a = vec![0.0; g];
        for (s, &t) in steps.iter().enumerate() {
            a.copy_from_slice(&p[bias..bias + g]);
            for &(j, v) in &inputs[t] {
                let row = &p[wx + j * g..wx + (j + 1) * g];
                a.iter_mut().zip(row).for_each(|(acc, w)| *acc += v * w);
            }
            if s > 0 {
                let prev = &tr.out[(s - 1) * h..s * h];
                for (j, &hv) in prev.iter().enumerate() {
                    if hv != 0.0 {
                        let row = &p[wh + j * g..wh + (j + 1) * g];
                        a.iter_mut().zip(row).for_each(|(acc, w)| *acc += hv * w);
                    }
                }
            }
            for v in &mut a[..2 * h] {
                *v = logistic(*v);
            }
            for v in &mut a[2 * h..3 * h] {
                *v = v.tanh();
            }
            for v in &mut a[3 * h..] {
                *v = logistic(*v);
            }
            for r in 0..h {
                let c_prev = if s > 0 { tr.cell[(s - 1) * h + r] } else { 0.0 };
                let c = a[h + r] * c_prev + a[r] * a[2 * h + r];
                tr.cell.push(c);
                tr.out.push(a[3 * h + r] * c.tanh());
            }
            tr.gates.extend_from_slice(&a);
        }
        tr
    }

    /// Backpropagates `d_out` (∂L/∂h per step, processing order) through one
    /// direction, accumulating weight gradients into `grad`.
    fn backprop(
        &self,
        dir: usize,
        inputs: &[SparseInput],
        steps: &[usize],
        tr: &Trace,
        d_out: &[f64],
        grad: &mut [f64],
    ) {
        let l = &self.layout;
        let h = l.hidden;
        let g = 4 * h;
        let (wx, wh, bias) = l.direction(dir);
        let p = &self.params;
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut da = vec![0.0; g];
        for s in (0..steps.len()).rev() {
            let gates = &tr.gates[s * g..(s + 1) * g];
            for r in 0..h {
                let (i, f, gg, o) = (gates[r], gates[h + r], gates[2 * h + r], gates[3 * h + r]);
                let c = tr.cell[s * h + r];
                let tc = c.tanh();
                let c_prev = if s > 0 { tr.cell[(s - 1) * h + r] } else { 0.0 };
                let dh = d_out[s * h + r] + dh_next[r];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[r];
                da[r] = dc * gg * i * (1.0 - i);
                da[h + r] = dc * c_prev * f * (1.0 - f);
                da[2 * h + r] = dc * i * (1.0 - gg * gg);
                da[3 * h + r] = d_o * o * (1.0 - o);
                dc_next[r] = dc * f;
            }
            for (gb, d) in grad[bias..bias + g].iter_mut().zip(&da) {
                *gb += d;
            }
            for &(j, v) in &inputs[steps[s]] {
                let row = &mut grad[wx + j * g..wx + (j + 1) * g];
                row.iter_mut().zip(&da).for_each(|(gw, d)| *gw += v * d);
            }
            if s > 0 {
                let prev = &tr.out[(s - 1) * h..s * h];
                for (j, &hv) in prev.iter().enumerate() {
                    let row = &mut grad[wh + j * g..wh + (j + 1) * g];
                    row.iter_mut().zip(&da).for_each(|(gw, d)| *gw += hv * d);
                    let wrow = &p[wh + j * g..wh + (j + 1) * g];
                    dh_next[j] = wrow.iter().zip(&da).map(|(w, d)| w * d).sum();
                }
            }
        }
    }

    fn user_layer(&self, features: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        (0..l.feat_hidden)
            .map(|u| {
                let w = &self.params[l.wd + u * l.features..l.wd + (u + 1) * l.features];
                let pre =
                    self.params[l.bd + u] + w.iter().zip(features).map(|(a, b)| a * b).sum::<f64>();
                pre.tanh()
            })
            .collect()
    }

    fn head_logit(&self, brand: usize, past: &[f64], future: &[f64], user: &[f64]) -> f64 {
        let l = &self.layout;
        let h = l.hidden;
        let p = &self.params;
        let vp = &p[l.v_past + brand * h..l.v_past + (brand + 1) * h];
        let vf = &p[l.v_future + brand * h..l.v_future + (brand + 1) * h];
        let q = &p[l.q + brand * l.feat_hidden..l.q + (brand + 1) * l.feat_hidden];
        p[l.c + brand] + dot(vp, past) + dot(vf, future) + dot(q, user)
    }

    fn encode(&self, x: &dyn ImpressionSource, prices: &PriceSeries) -> Vec<SparseInput> {
        encode_days(x, prices, self.shape.days as usize)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ResponseModel for BiRecurrentModel {
    fn shape(&self) -> ModelShape {
        self.shape
    }

    fn predict(
        &self,
        x: &dyn ImpressionSource,
        prices: &PriceSeries,
        features: &UserFeatures,
        brand: u32,
        day: u32,
    ) -> Result<f64, ModelError> {
        self.shape.check(x.dims(), prices, features, brand, day)?;
        let h = self.layout.hidden;
        let t_len = self.shape.days as usize;
        let d = day as usize;
        let inputs = self.encode(x, prices);
        let past_steps: Vec<usize> = (0..=d).collect();
        let future_steps: Vec<usize> = (d..t_len).rev().collect();
        let past = self.run(0, &inputs, &past_steps);
        let future = self.run(1, &inputs, &future_steps);
        let user = self.user_layer(features.as_slice());
        let hp = &past.out[d * h..(d + 1) * h];
        let s = future_steps.len() - 1;
        let hf = &future.out[s * h..(s + 1) * h];
        let z = self.head_logit(brand as usize, hp, hf, &user);
        Ok(logistic(z).clamp(PROB_EPS, 1.0 - PROB_EPS))
    }
}

impl Trainable for BiRecurrentModel {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate_gradient(
        &self,
        ex: &Example<'_>,
        prices: &PriceSeries,
        grad: &mut [f64],
        dropout: Option<&mut Dropout>,
    ) -> f64 {
        check_example(&self.shape, ex);
        let l = self.layout;
        let (h, u, nb) = (l.hidden, l.feat_hidden, l.brands);
        let t_len = self.shape.days as usize;
        let inputs = self.encode(ex.tensor, prices);
        let past_steps: Vec<usize> = (0..t_len).collect();
        let future_steps: Vec<usize> = (0..t_len).rev().collect();
        let past = self.run(0, &inputs, &past_steps);
        let future = self.run(1, &inputs, &future_steps);
        let user = self.user_layer(ex.features.as_slice());

        // dropout on the hidden outputs feeding the head; masks drawn day by day
        let mut mask_past = vec![1.0; t_len * h];
        let mut mask_future = vec![1.0; t_len * h];
        if let Some(dr) = dropout {
            for t in 0..t_len {
                for r in 0..h {
                    mask_past[t * h + r] = dr.draw();
                    mask_future[t * h + r] = dr.draw();
                }
            }
        }

        let mut d_past = vec![0.0; t_len * h];
        let mut d_future = vec![0.0; t_len * h];
        let mut d_user = vec![0.0; u];
        let mut hp = vec![0.0; h];
        let mut hf = vec![0.0; h];
        let mut ll = 0.0;
        for t in 0..t_len {
            let sf = t_len - 1 - t;
            for r in 0..h {
                hp[r] = past.out[t * h + r] * mask_past[t * h + r];
                hf[r] = future.out[sf * h + r] * mask_future[t * h + r];
            }
            for b in 0..nb {
                let p = logistic(self.head_logit(b, &hp, &hf, &user));
                let y = ex.labels[t * nb + b] != 0;
                ll += super::bernoulli_log_likelihood(p, y);
                let dz = if y { 1.0 - p } else { -p };
                grad[l.c + b] += dz;
                for r in 0..h {
                    grad[l.v_past + b * h + r] += dz * hp[r];
                    grad[l.v_future + b * h + r] += dz * hf[r];
                    d_past[t * h + r] +=
                        dz * self.params[l.v_past + b * h + r] * mask_past[t * h + r];
                    d_future[sf * h + r] +=
                        dz * self.params[l.v_future + b * h + r] * mask_future[t * h + r];
                }
                for k in 0..u {
                    grad[l.q + b * u + k] += dz * user[k];
                    d_user[k] += dz * self.params[l.q + b * u + k];
                }
            }
        }

        for k in 0..u {
            let da = d_user[k] * (1.0 - user[k] * user[k]);
            grad[l.bd + k] += da;
            for (r, &dv) in ex.features.as_slice().iter().enumerate() {
                grad[l.wd + k * l.features + r] += da * dv;
            }
        }

        self.backprop(0, &inputs, &past_steps, &past, &d_past, grad);
        self.backprop(1, &inputs, &future_steps, &future, &d_future, grad);
        ll
    }

    fn predict_all(&self, ex: &Example<'_>, prices: &PriceSeries) -> Vec<f64> {
        check_example(&self.shape, ex);
        let h = self.layout.hidden;
        let t_len = self.shape.days as usize;
        let inputs = self.encode(ex.tensor, prices);
        let past_steps: Vec<usize> = (0..t_len).collect();
        let future_steps: Vec<usize> = (0..t_len).rev().collect();
        let past = self.run(0, &inputs, &past_steps);
        let future = self.run(1, &inputs, &future_steps);
        let user = self.user_layer(ex.features.as_slice());
        let mut out = Vec::with_capacity(t_len * self.layout.brands);
        for t in 0..t_len {
            let sf = t_len - 1 - t;
            let hp = &past.out[t * h..(t + 1) * h];
            let hf = &future.out[sf * h..(sf + 1) * h];
            for b in 0..self.layout.brands {
                out.push(
                    logistic(self.head_logit(b, hp, hf, &user)).clamp(PROB_EPS, 1.0 - PROB_EPS),
                );
            }
        }
        out
    }
}
