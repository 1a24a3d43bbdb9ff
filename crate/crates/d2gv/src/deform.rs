//! Time-conditioned deformation of the canonical Gaussian set.
//!
//! Each primitive carries a latent state `s(t)` driven by a small MLP,
//! `ds/dt = MLP(enc(mu), enc(t))`, integrated from `s(0) = 0` with a
//! fixed-step solver (RK4 by default, Euler as a variant). An affine head
//! decodes the state into center and color offsets, and a separate head gates
//! the color with a per-timestamp opacity in (0, 1):
//!
//! ```text
//! mu' = mu + d_mu,    c' = o_t (c + d_c)
//! ```
//!
//! Covariances are never deformed; log-scales and rotation pass through
//! bitwise. Backpropagation goes through the unrolled integrator exactly
//! (discretize-then-optimize), including the path from the spatial encoding
//! back to the canonical centers.
//!
//! In the default (state-free) formulation the MLP input does not contain
//! `s`, so the ODE is an exact integral and the RK4 stages collapse to a
//! Simpson rule over distinct stage times; the heavy first-layer products
//! factor into a per-primitive spatial part and a per-stage temporal part,
//! which the forward pass exploits. The state-conditioned variant keeps the
//! full four-stage recursion.

use rayon::prelude::*;

use crate::gaussian::Gaussian2D;
use crate::raster::GradientBuffer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeformError {
    #[error("velocity needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Rk4,
}

/// Architecture and integrator switches; serialized with the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub spatial_bands: usize,
    pub temporal_bands: usize,
    pub integrator: Integrator,
    pub steps_per_unit: usize,
    /// feed the current latent state back into the dynamics MLP
    pub state_conditioned: bool,
    /// skip integration: the state is the MLP output at t (per-timestamp
    /// offsets baseline)
    pub direct_offsets: bool,
    /// decode color offsets d_c (disable to ablate)
    pub color_offsets: bool,
    /// apply the sigmoid opacity gate (disable to ablate; implies c' = c + d_c)
    pub opacity_gate: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden_width: 156,
            spatial_bands: 10,
            temporal_bands: 6,
            integrator: Integrator::Rk4,
            steps_per_unit: 4,
            state_conditioned: false,
            direct_offsets: false,
            color_offsets: true,
            opacity_gate: true,
        }
    }
}

impl NetConfig {
    pub fn spatial_enc_len(&self) -> usize {
        2 * (2 * self.spatial_bands + 1)
    }

    pub fn temporal_enc_len(&self) -> usize {
        2 * self.temporal_bands + 1
    }

    pub fn enc_len(&self) -> usize {
        self.spatial_enc_len() + self.temporal_enc_len()
    }

    pub fn dynamics_in_len(&self) -> usize {
        self.enc_len() + if self.state_conditioned { self.latent_dim } else { 0 }
    }
}

/// Per-primitive latent deformation state; `s(0) = 0` by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState(pub Vec<f64>);

/// `[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^{B-1} pi v), cos(2^{B-1} pi v)]`
/// per component, components concatenated; length `k (2 bands + 1)`.
pub fn positional_encoding(v: &[f64], bands: usize) -> Vec<f64> {
    assert!(bands >= 1);
    let mut out = Vec::with_capacity(v.len() * (2 * bands + 1));
    for &x in v {
        out.push(x);
        let mut freq = std::f64::consts::PI;
        for _ in 0..bands {
            let (s, c) = (freq * x).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
    out
}

/// Backpropagate through [`positional_encoding`] for one component:
/// given d/d(entries of that component's block), return d/dv.
fn encoding_backward_component(v: f64, bands: usize, d_enc: &[f64]) -> f64 {
    let mut dv = d_enc[0];
    let mut freq = std::f64::consts::PI;
    for b in 0..bands {
        let (s, c) = (freq * v).sin_cos();
        dv += d_enc[1 + 2 * b] * freq * c;
        dv -= d_enc[2 + 2 * b] * freq * s;
        freq *= 2.0;
    }
    dv
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Initial opacity-gate bias: sigmoid(b) ~ 0.95, so a fresh net barely
/// attenuates the coarse-fit colors.
const GATE_BIAS_INIT: f32 = 2.944_439;

/// Deformation network weights. Layouts are row-major `[out][in]`; the
/// dynamics input is `[spatial enc | temporal enc | latent (optional)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationNet {
    pub cfg: NetConfig,
    /// image dims used to normalize centers to [0, 1] before encoding
    pub norm: [f32; 2],
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub dec_w: Vec<f32>,
    pub dec_b: Vec<f32>,
    pub gate_w: Vec<f32>,
    pub gate_b: Vec<f32>,
}

impl DeformationNet {
    /// Xavier-uniform dynamics, zero decode head (no deformation at start),
    /// zero gate weights with a bias putting the gate near 1.
    pub fn init(cfg: NetConfig, norm: [f32; 2], rng: &mut impl rand::Rng) -> Self {
        let h = cfg.hidden_width;
        let din = cfg.dynamics_in_len();
        let ds = cfg.latent_dim;
        let lim1 = (6.0 / (din + h) as f64).sqrt() as f32;
        let lim2 = (6.0 / (h + ds) as f64).sqrt() as f32;
        let mut uniform = |lim: f32, n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.gen_range(-lim..lim)).collect()
        };
        Self {
            cfg,
            norm,
            w1: uniform(lim1, h * din),
            b1: vec![0.0; h],
            w2: uniform(lim2, ds * h),
            b2: vec![0.0; ds],
            dec_w: vec![0.0; 5 * ds],
            dec_b: vec![0.0; 5],
            gate_w: vec![0.0; cfg.enc_len()],
            gate_b: vec![GATE_BIAS_INIT],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len()
            + self.b1.len()
            + self.w2.len()
            + self.b2.len()
            + self.dec_w.len()
            + self.dec_b.len()
            + self.gate_w.len()
            + self.gate_b.len()
    }

    fn encode_mu(&self, mu: [f32; 2]) -> Vec<f64> {
        positional_encoding(
            &[
                mu[0] as f64 / self.norm[0] as f64,
                mu[1] as f64 / self.norm[1] as f64,
            ],
            self.cfg.spatial_bands,
        )
    }

    fn encode_t(&self, t: f64) -> Vec<f64> {
        positional_encoding(&[t], self.cfg.temporal_bands)
    }

    /// `W1_spatial . enc_mu`: the time-independent part of the first layer.
    fn spatial_preact(&self, enc_mu: &[f64]) -> Vec<f64> {
        let h = self.cfg.hidden_width;
        let din = self.cfg.dynamics_in_len();
        let se = self.cfg.spatial_enc_len();
        (0..h)
            .map(|r| {
                let row = &self.w1[r * din..r * din + se];
                row.iter().zip(enc_mu).map(|(&w, &x)| w as f64 * x).sum()
            })
            .collect()
    }

    /// `W1_temporal . enc_t + b1`: the per-stage part of the first layer.
    fn temporal_preact(&self, enc_t: &[f64]) -> Vec<f64> {
        let h = self.cfg.hidden_width;
        let din = self.cfg.dynamics_in_len();
        let se = self.cfg.spatial_enc_len();
        let te = self.cfg.temporal_enc_len();
        (0..h)
            .map(|r| {
                let row = &self.w1[r * din + se..r * din + se + te];
                let dot: f64 = row.iter().zip(enc_t).map(|(&w, &x)| w as f64 * x).sum();
                dot + self.b1[r] as f64
            })
            .collect()
    }

    /// Quadrature stages `(tau, weight)` for the state-free integral of the
    /// dynamics from 0 to t, plus the accumulated weight multiplying `b2`.
    /// RK4 with a state-free right-hand side reduces exactly to Simpson.
    fn stages(&self, t: f64) -> (Vec<(f64, f64)>, f64) {
        if self.cfg.direct_offsets {
            return (vec![(t, 1.0)], 1.0);
        }
        if t == 0.0 {
            return (Vec::new(), 0.0);
        }
        let n = (self.cfg.steps_per_unit as f64 * t).ceil().max(1.0) as usize;
        let h = t / n as f64;
        let mut stages: Vec<(f64, f64)> = Vec::new();
        match self.cfg.integrator {
            Integrator::Euler => {
                for k in 0..n {
                    stages.push((k as f64 * h, h));
                }
            }
            Integrator::Rk4 => {
                stages.push((0.0, h / 6.0));
                for k in 0..n {
                    stages.push((k as f64 * h + h / 2.0, 4.0 * h / 6.0));
                    let endpoint_w = if k + 1 == n { h / 6.0 } else { 2.0 * h / 6.0 };
                    stages.push(((k + 1) as f64 * h, endpoint_w));
                }
            }
        }
        (stages, t)
    }

    /// Integrate the latent state from `s(0) = 0` to `s(t)`.
    pub fn integrate_state(&self, mu: [f32; 2], t: f64) -> LatentState {
        let enc_mu = self.encode_mu(mu);
        if self.cfg.state_conditioned && !self.cfg.direct_offsets {
            let (s, _) = self.integrate_stateful(&enc_mu, t);
            return LatentState(s);
        }
        let spatial = self.spatial_preact(&enc_mu);
        let (stages, t_coeff) = self.stages(t);
        let h = self.cfg.hidden_width;
        let mut hsum = vec![0.0f64; h];
        for &(tau, coef) in &stages {
            let temporal = self.temporal_preact(&self.encode_t(tau));
            for i in 0..h {
                hsum[i] += coef * (spatial[i] + temporal[i]).tanh();
            }
        }
        let ds = self.cfg.latent_dim;
        let mut s = vec![0.0f64; ds];
        for (r, out) in s.iter_mut().enumerate() {
            let row = &self.w2[r * h..(r + 1) * h];
            let dot: f64 = row.iter().zip(&hsum).map(|(&w, &x)| w as f64 * x).sum();
            *out = dot + t_coeff * self.b2[r] as f64;
        }
        LatentState(s)
    }

    /// Dynamics MLP evaluation for the state-conditioned variant.
    fn dynamics_eval(&self, enc_mu: &[f64], enc_t: &[f64], state: &[f64]) -> Vec<f64> {
        let h = self.cfg.hidden_width;
        let din = self.cfg.dynamics_in_len();
        let se = self.cfg.spatial_enc_len();
        let te = self.cfg.temporal_enc_len();
        let mut hidden = vec![0.0f64; h];
        for (r, out) in hidden.iter_mut().enumerate() {
            let row = &self.w1[r * din..(r + 1) * din];
            let mut acc = self.b1[r] as f64;
            for (i, &e) in enc_mu.iter().enumerate() {
                acc += row[i] as f64 * e;
            }
            for (i, &e) in enc_t.iter().enumerate() {
                acc += row[se + i] as f64 * e;
            }
            for (i, &e) in state.iter().enumerate() {
                acc += row[se + te + i] as f64 * e;
            }
            *out = acc.tanh();
        }
        let ds = self.cfg.latent_dim;
        (0..ds)
            .map(|r| {
                let row = &self.w2[r * h..(r + 1) * h];
                let dot: f64 = row.iter().zip(&hidden).map(|(&w, &x)| w as f64 * x).sum();
                dot + self.b2[r] as f64
            })
            .collect()
    }

    /// Fixed-step integration with the state in the MLP input; returns the
    /// final state and the per-step checkpoints `s_0..s_{N-1}` for backward.
    fn integrate_stateful(&self, enc_mu: &[f64], t: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let ds = self.cfg.latent_dim;
        let mut s = vec![0.0f64; ds];
        let mut checkpoints = Vec::new();
        if t == 0.0 {
            return (s, checkpoints);
        }
        let n = (self.cfg.steps_per_unit as f64 * t).ceil().max(1.0) as usize;
        let h = t / n as f64;
        for k in 0..n {
            checkpoints.push(s.clone());
            let tk = k as f64 * h;
            s = self.rk_step(enc_mu, &s, tk, h);
        }
        (s, checkpoints)
    }

    fn rk_step(&self, enc_mu: &[f64], s: &[f64], tk: f64, h: f64) -> Vec<f64> {
        let add = |a: &[f64], b: &[f64], scale: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(&x, &y)| x + scale * y).collect()
        };
        match self.cfg.integrator {
            Integrator::Euler => {
                let k1 = self.dynamics_eval(enc_mu, &self.encode_t(tk), s);
                add(s, &k1, h)
            }
            Integrator::Rk4 => {
                let e0 = self.encode_t(tk);
                let em = self.encode_t(tk + h / 2.0);
                let e1 = self.encode_t(tk + h);
                let k1 = self.dynamics_eval(enc_mu, &e0, s);
                let k2 = self.dynamics_eval(enc_mu, &em, &add(s, &k1, h / 2.0));
                let k3 = self.dynamics_eval(enc_mu, &em, &add(s, &k2, h / 2.0));
                let k4 = self.dynamics_eval(enc_mu, &e1, &add(s, &k3, h));
                s.iter()
                    .enumerate()
                    .map(|(i, &x)| x + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                    .collect()
            }
        }
    }

    /// Decode the deformed set at timestamp `t` in [0, 1]. Covariances pass
    /// through untouched.
    pub fn deform(&self, canonical: &[Gaussian2D], t: f64) -> Vec<Gaussian2D> {
        self.deform_cached(canonical, t).0
    }

    pub(crate) fn deform_cached(
        &self,
        canonical: &[Gaussian2D],
        t: f64,
    ) -> (Vec<Gaussian2D>, DeformCache) {
        let (stages, t_coeff) = self.stages(t);
        let stage_temporal: Vec<Vec<f64>> = stages
            .iter()
            .map(|&(tau, _)| self.temporal_preact(&self.encode_t(tau)))
            .collect();
        let stage_enc_t: Vec<Vec<f64>> =
            stages.iter().map(|&(tau, _)| self.encode_t(tau)).collect();
        let gate_enc_t = self.encode_t(t);
        let h = self.cfg.hidden_width;
        let ds = self.cfg.latent_dim;
        let stateful = self.cfg.state_conditioned && !self.cfg.direct_offsets;

        let per_prim: Vec<(Gaussian2D, PrimCache)> = canonical
            .par_iter()
            .map(|g| {
                let enc_mu = self.encode_mu(g.mu);
                let (s, hidden_stages, hsum, checkpoints) = if stateful {
                    let (s, cps) = self.integrate_stateful(&enc_mu, t);
                    (s, Vec::new(), Vec::new(), cps)
                } else {
                    let spatial = self.spatial_preact(&enc_mu);
                    let mut hidden_stages = vec![0.0f64; stages.len() * h];
                    let mut hsum = vec![0.0f64; h];
                    for (si, &(_, coef)) in stages.iter().enumerate() {
                        let temporal = &stage_temporal[si];
                        let row = &mut hidden_stages[si * h..(si + 1) * h];
                        for i in 0..h {
                            let v = (spatial[i] + temporal[i]).tanh();
                            row[i] = v;
                            hsum[i] += coef * v;
                        }
                    }
                    let mut s = vec![0.0f64; ds];
                    for (r, out) in s.iter_mut().enumerate() {
                        let row = &self.w2[r * h..(r + 1) * h];
                        let dot: f64 =
                            row.iter().zip(&hsum).map(|(&w, &x)| w as f64 * x).sum();
                        *out = dot + t_coeff * self.b2[r] as f64;
                    }
                    (s, hidden_stages, hsum, Vec::new())
                };

                let mut out5 = [0.0f64; 5];
                for (r, o) in out5.iter_mut().enumerate() {
                    let row = &self.dec_w[r * ds..(r + 1) * ds];
                    let dot: f64 = row.iter().zip(&s).map(|(&w, &x)| w as f64 * x).sum();
                    *o = dot + self.dec_b[r] as f64;
                }
                let d_mu_off = [out5[0], out5[1]];
                let d_c = if self.cfg.color_offsets {
                    [out5[2], out5[3], out5[4]]
                } else {
                    [0.0; 3]
                };
                let o = if self.cfg.opacity_gate {
                    let mut z = self.gate_b[0] as f64;
                    for (i, &e) in enc_mu.iter().enumerate() {
                        z += self.gate_w[i] as f64 * e;
                    }
                    let se = self.cfg.spatial_enc_len();
                    for (i, &e) in gate_enc_t.iter().enumerate() {
                        z += self.gate_w[se + i] as f64 * e;
                    }
                    sigmoid(z)
                } else {
                    1.0
                };
                let deformed = Gaussian2D {
                    mu: [
                        (g.mu[0] as f64 + d_mu_off[0]) as f32,
                        (g.mu[1] as f64 + d_mu_off[1]) as f32,
                    ],
                    log_sx: g.log_sx,
                    log_sy: g.log_sy,
                    theta: g.theta,
                    color: [
                        ((g.color[0] as f64 + d_c[0]) * o) as f32,
                        ((g.color[1] as f64 + d_c[1]) * o) as f32,
                        ((g.color[2] as f64 + d_c[2]) * o) as f32,
                    ],
                };
                (
                    deformed,
                    PrimCache {
                        enc_mu,
                        hidden_stages,
                        hsum,
                        s,
                        checkpoints,
                        d_c,
                        o,
                    },
                )
            })
            .collect();

        let mut deformed = Vec::with_capacity(canonical.len());
        let mut caches = Vec::with_capacity(canonical.len());
        for (g, c) in per_prim {
            deformed.push(g);
            caches.push(c);
        }
        (
            deformed,
            DeformCache {
                t,
                stages,
                t_coeff,
                stage_enc_t,
                gate_enc_t,
                per_prim: caches,
            },
        )
    }

    /// Exact gradients of the unrolled computation. `upstream` holds the
    /// rasterizer's partials w.r.t. the deformed parameters at time `t`;
    /// returns network gradients and partials w.r.t. the canonical set
    /// (center gradients include both the pass-through path and the path
    /// through the spatial encoding).
    pub fn deform_backward(
        &self,
        canonical: &[Gaussian2D],
        t: f64,
        upstream: &GradientBuffer,
    ) -> (NetGradients, GradientBuffer) {
        let (_, cache) = self.deform_cached(canonical, t);
        self.backward_with_cache(canonical, &cache, upstream)
    }

    pub(crate) fn backward_with_cache(
        &self,
        canonical: &[Gaussian2D],
        cache: &DeformCache,
        upstream: &GradientBuffer,
    ) -> (NetGradients, GradientBuffer) {
        assert_eq!(canonical.len(), upstream.len());
        let cfg = &self.cfg;
        let h = cfg.hidden_width;
        let ds = cfg.latent_dim;
        let se = cfg.spatial_enc_len();
        let te = cfg.temporal_enc_len();
        let din = cfg.dynamics_in_len();
        let stateful = cfg.state_conditioned && !cfg.direct_offsets;

        let mut net_grads = NetGradients::zeros(cfg);
        let mut canon = GradientBuffer::zeros(canonical.len());
        // covariance parameters pass straight through
        canon.d_log_sx.copy_from_slice(&upstream.d_log_sx);
        canon.d_log_sy.copy_from_slice(&upstream.d_log_sy);
        canon.d_theta.copy_from_slice(&upstream.d_theta);

        // temporal first-layer gradient accumulates per stage across
        // primitives, then folds into W1 with one outer product per stage
        let mut dpre_per_stage = vec![0.0f64; cache.stages.len() * h];

        for (pi, (g, pc)) in canonical.iter().zip(&cache.per_prim).enumerate() {
            let d_mu_up = upstream.d_mu[pi];
            let d_color_up = upstream.d_color[pi];

            // color chain: c' = o (c + d_c)
            let cc = [
                g.color[0] as f64 + pc.d_c[0],
                g.color[1] as f64 + pc.d_c[1],
                g.color[2] as f64 + pc.d_c[2],
            ];
            let d_o: f64 = (0..3).map(|k| d_color_up[k] * cc[k]).sum();
            let d_cc: [f64; 3] = [
                d_color_up[0] * pc.o,
                d_color_up[1] * pc.o,
                d_color_up[2] * pc.o,
            ];
            canon.d_color[pi] = d_cc;

            // decode head
            let mut d_out5 = [d_mu_up[0], d_mu_up[1], 0.0, 0.0, 0.0];
            if cfg.color_offsets {
                d_out5[2] = d_cc[0];
                d_out5[3] = d_cc[1];
                d_out5[4] = d_cc[2];
            }
            let mut d_s = vec![0.0f64; ds];
            for (r, &dr) in d_out5.iter().enumerate() {
                if dr == 0.0 {
                    continue;
                }
                net_grads.dec_b[r] += dr;
                let row = &self.dec_w[r * ds..(r + 1) * ds];
                for i in 0..ds {
                    net_grads.dec_w[r * ds + i] += dr * pc.s[i];
                    d_s[i] += dr * row[i] as f64;
                }
            }

            let mut d_enc_mu = vec![0.0f64; se];

            if stateful {
                self.backward_stateful(cache, pc, &d_s, &mut net_grads, &mut d_enc_mu);
            } else {
                // s = W2 hsum + t_coeff b2
                let mut d_hsum = vec![0.0f64; h];
                for (r, &dr) in d_s.iter().enumerate() {
                    if dr == 0.0 {
                        continue;
                    }
                    net_grads.b2[r] += cache.t_coeff * dr;
                    let row = &self.w2[r * h..(r + 1) * h];
                    for i in 0..h {
                        net_grads.w2[r * h + i] += dr * pc.hsum[i];
                        d_hsum[i] += dr * row[i] as f64;
                    }
                }
                // stages: hsum = sum coef tanh(spatial + temporal)
                let mut dpre_sum = vec![0.0f64; h];
                for (si, &(_, coef)) in cache.stages.iter().enumerate() {
                    let hid = &pc.hidden_stages[si * h..(si + 1) * h];
                    let acc = &mut dpre_per_stage[si * h..(si + 1) * h];
                    for i in 0..h {
                        let dpre = coef * d_hsum[i] * (1.0 - hid[i] * hid[i]);
                        dpre_sum[i] += dpre;
                        acc[i] += dpre;
                    }
                }
                // spatial part of W1 and the encoding path to mu
                for i in 0..h {
                    let dp = dpre_sum[i];
                    if dp == 0.0 {
                        continue;
                    }
                    net_grads.b1[i] += dp;
                    let wrow = &self.w1[i * din..i * din + se];
                    for j in 0..se {
                        net_grads.w1[i * din + j] += dp * pc.enc_mu[j];
                        d_enc_mu[j] += dp * wrow[j] as f64;
                    }
                }
            }

            // opacity gate
            if cfg.opacity_gate {
                let dz = d_o * pc.o * (1.0 - pc.o);
                net_grads.gate_b[0] += dz;
                for j in 0..se {
                    net_grads.gate_w[j] += dz * pc.enc_mu[j];
                    d_enc_mu[j] += dz * self.gate_w[j] as f64;
                }
                for j in 0..te {
                    net_grads.gate_w[se + j] += dz * cache.gate_enc_t[j];
                }
            }

            // center: pass-through plus encoding path
            let enc_block = 2 * cfg.spatial_bands + 1;
            let vx = g.mu[0] as f64 / self.norm[0] as f64;
            let vy = g.mu[1] as f64 / self.norm[1] as f64;
            let dvx = encoding_backward_component(vx, cfg.spatial_bands, &d_enc_mu[..enc_block]);
            let dvy = encoding_backward_component(vy, cfg.spatial_bands, &d_enc_mu[enc_block..]);
            canon.d_mu[pi] = [
                d_mu_up[0] + dvx / self.norm[0] as f64,
                d_mu_up[1] + dvy / self.norm[1] as f64,
            ];
        }

        // fold the per-stage temporal gradients into W1
        if !stateful {
            for (si, enc_t) in cache.stage_enc_t.iter().enumerate() {
                let acc = &dpre_per_stage[si * h..(si + 1) * h];
                for i in 0..h {
                    let dp = acc[i];
                    if dp == 0.0 {
                        continue;
                    }
                    for j in 0..te {
                        net_grads.w1[i * din + se + j] += dp * enc_t[j];
                    }
                }
            }
        }

        (net_grads, canon)
    }

    /// Reverse pass through the stateful RK4/Euler unroll for one primitive,
    /// recomputing stage values from the stored step checkpoints.
    fn backward_stateful(
        &self,
        cache: &DeformCache,
        pc: &PrimCache,
        d_s_final: &[f64],
        net_grads: &mut NetGradients,
        d_enc_mu: &mut [f64],
    ) {
        let cfg = &self.cfg;
        let ds = cfg.latent_dim;
        let n = pc.checkpoints.len();
        if n == 0 {
            return;
        }
        let t = cache.t;
        let h = t / n as f64;
        let add = |a: &[f64], b: &[f64], scale: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(&x, &y)| x + scale * y).collect()
        };

        let mut a: Vec<f64> = d_s_final.to_vec();
        for k in (0..n).rev() {
            let s_k = &pc.checkpoints[k];
            let tk = k as f64 * h;
            match cfg.integrator {
                Integrator::Euler => {
                    let enc_t = self.encode_t(tk);
                    let dk: Vec<f64> = a.iter().map(|&v| v * h).collect();
                    let mut d_x = vec![0.0f64; ds];
                    self.dynamics_backward(
                        &pc.enc_mu, &enc_t, s_k, &dk, net_grads, d_enc_mu, &mut d_x,
                    );
                    for i in 0..ds {
                        a[i] += d_x[i];
                    }
                }
                Integrator::Rk4 => {
                    let e0 = self.encode_t(tk);
                    let em = self.encode_t(tk + h / 2.0);
                    let e1 = self.encode_t(tk + h);
                    let k1 = self.dynamics_eval(&pc.enc_mu, &e0, s_k);
                    let x2 = add(s_k, &k1, h / 2.0);
                    let k2 = self.dynamics_eval(&pc.enc_mu, &em, &x2);
                    let x3 = add(s_k, &k2, h / 2.0);
                    let k3 = self.dynamics_eval(&pc.enc_mu, &em, &x3);
                    let x4 = add(s_k, &k3, h);

                    let mut dk1: Vec<f64> = a.iter().map(|&v| v * h / 6.0).collect();
                    let mut dk2: Vec<f64> = a.iter().map(|&v| v * h / 3.0).collect();
                    let mut dk3: Vec<f64> = a.iter().map(|&v| v * h / 3.0).collect();
                    let dk4: Vec<f64> = a.iter().map(|&v| v * h / 6.0).collect();
                    let mut d_sk: Vec<f64> = a.clone();

                    let mut d_x4 = vec![0.0f64; ds];
                    self.dynamics_backward(
                        &pc.enc_mu, &e1, &x4, &dk4, net_grads, d_enc_mu, &mut d_x4,
                    );
                    for i in 0..ds {
                        d_sk[i] += d_x4[i];
                        dk3[i] += h * d_x4[i];
                    }
                    let mut d_x3 = vec![0.0f64; ds];
                    self.dynamics_backward(
                        &pc.enc_mu, &em, &x3, &dk3, net_grads, d_enc_mu, &mut d_x3,
                    );
                    for i in 0..ds {
                        d_sk[i] += d_x3[i];
                        dk2[i] += h / 2.0 * d_x3[i];
                    }
                    let mut d_x2 = vec![0.0f64; ds];
                    self.dynamics_backward(
                        &pc.enc_mu, &em, &x2, &dk2, net_grads, d_enc_mu, &mut d_x2,
                    );
                    for i in 0..ds {
                        d_sk[i] += d_x2[i];
                        dk1[i] += h / 2.0 * d_x2[i];
                    }
                    let mut d_x1 = vec![0.0f64; ds];
                    self.dynamics_backward(
                        &pc.enc_mu, &e0, s_k, &dk1, net_grads, d_enc_mu, &mut d_x1,
                    );
                    for i in 0..ds {
                        d_sk[i] += d_x1[i];
                    }
                    a = d_sk;
                }
            }
        }
    }

    /// Backward through one dynamics MLP evaluation: accumulates weight
    /// gradients, the spatial-encoding gradient, and d/d(state input).
    #[allow(clippy::too_many_arguments)]
    fn dynamics_backward(
        &self,
        enc_mu: &[f64],
        enc_t: &[f64],
        state: &[f64],
        d_out: &[f64],
        net_grads: &mut NetGradients,
        d_enc_mu: &mut [f64],
        d_state: &mut [f64],
    ) {
        let cfg = &self.cfg;
        let h = cfg.hidden_width;
        let din = cfg.dynamics_in_len();
        let se = cfg.spatial_enc_len();
        let te = cfg.temporal_enc_len();
        let ds = cfg.latent_dim;
        // recompute hidden
        let mut hidden = vec![0.0f64; h];
        for (r, out) in hidden.iter_mut().enumerate() {
            let row = &self.w1[r * din..(r + 1) * din];
            let mut acc = self.b1[r] as f64;
            for (i, &e) in enc_mu.iter().enumerate() {
                acc += row[i] as f64 * e;
            }
            for (i, &e) in enc_t.iter().enumerate() {
                acc += row[se + i] as f64 * e;
            }
            for (i, &e) in state.iter().enumerate() {
                acc += row[se + te + i] as f64 * e;
            }
            *out = acc.tanh();
        }
        let mut d_hidden = vec![0.0f64; h];
        for r in 0..ds {
            let dr = d_out[r];
            if dr == 0.0 {
                continue;
            }
            net_grads.b2[r] += dr;
            let row = &self.w2[r * h..(r + 1) * h];
            for i in 0..h {
                net_grads.w2[r * h + i] += dr * hidden[i];
                d_hidden[i] += dr * row[i] as f64;
            }
        }
        for r in 0..h {
            let dpre = d_hidden[r] * (1.0 - hidden[r] * hidden[r]);
            if dpre == 0.0 {
                continue;
            }
            net_grads.b1[r] += dpre;
            let wrow = &self.w1[r * din..(r + 1) * din];
            for (i, &e) in enc_mu.iter().enumerate() {
                net_grads.w1[r * din + i] += dpre * e;
                d_enc_mu[i] += dpre * wrow[i] as f64;
            }
            for (i, &e) in enc_t.iter().enumerate() {
                net_grads.w1[r * din + se + i] += dpre * e;
            }
            for (i, &e) in state.iter().enumerate() {
                net_grads.w1[r * din + se + te + i] += dpre * e;
                d_state[i] += dpre * wrow[se + te + i] as f64;
            }
        }
    }
}

/// Forward activations kept for the exact backward pass.
pub(crate) struct DeformCache {
    t: f64,
    stages: Vec<(f64, f64)>,
    t_coeff: f64,
    stage_enc_t: Vec<Vec<f64>>,
    gate_enc_t: Vec<f64>,
    per_prim: Vec<PrimCache>,
}

struct PrimCache {
    enc_mu: Vec<f64>,
    /// tanh outputs per stage (state-free path)
    hidden_stages: Vec<f64>,
    hsum: Vec<f64>,
    s: Vec<f64>,
    /// per-step state checkpoints (stateful path)
    checkpoints: Vec<Vec<f64>>,
    d_c: [f64; 3],
    o: f64,
}

/// Gradients for every network parameter, in the same layouts as the weights.
#[derive(Clone, Debug)]
pub struct NetGradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
    pub gate_w: Vec<f64>,
    pub gate_b: Vec<f64>,
}

impl NetGradients {
    pub fn zeros(cfg: &NetConfig) -> Self {
        let h = cfg.hidden_width;
        let din = cfg.dynamics_in_len();
        let ds = cfg.latent_dim;
        Self {
            w1: vec![0.0; h * din],
            b1: vec![0.0; h],
            w2: vec![0.0; ds * h],
            b2: vec![0.0; ds],
            dec_w: vec![0.0; 5 * ds],
            dec_b: vec![0.0; 5],
            gate_w: vec![0.0; cfg.enc_len()],
            gate_b: vec![0.0; 1],
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.dec_w,
            &self.dec_b,
            &self.gate_w,
            &self.gate_b,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Finite-difference velocities `(mu_k - mu_{k-1}) / dt` over a uniformly
/// sampled center trajectory; diagnostic only.
pub fn discrete_velocity(positions: &[[f64; 2]], dt: f64) -> Result<Vec<[f64; 2]>, DeformError> {
    if positions.len() < 2 {
        return Err(DeformError::TooFewSamples(positions.len()));
    }
    Ok(positions
        .windows(2)
        .map(|w| [(w[1][0] - w[0][0]) / dt, (w[1][1] - w[0][1]) / dt])
        .collect())
}

/// Worst velocity change along a trajectory, `max_k ||v_k - v_{k-1}||`.
pub fn velocity_jitter(velocities: &[[f64; 2]]) -> f64 {
    velocities
        .windows(2)
        .map(|w| {
            let dx = w[1][0] - w[0][0];
            let dy = w[1][1] - w[0][1];
            (dx * dx + dy * dy).sqrt()
        })
        .fold(0.0, f64::max)
}
