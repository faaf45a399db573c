//! The compressor: a variant LSTM that walks the critic's layers in order,
//! reading each layer's `d_f×d_drop` weight view and emitting one
//! keep-probability per droppable unit.
//!
//! Per step `l` with input view `W`:
//!
//! ```text
//! [v_i; v_f; v_o; v_g] = W_c⁽ˡ⁾ · W · W_i⁽ˡ⁾          (4×d_c, one row per gate)
//! [u_i; u_f; u_o; u_g] = W_h · h_{l−1}
//! i, f, o = σ(v + u),  g = tanh(v_g + u_g)
//! c_l = f⊙c_{l−1} + i⊙g,  h_l = o⊙tanh(c_l)
//! p⁽ˡ⁾ = σ(W_o⁽ˡ⁾ · h_l)
//! ```
//!
//! `W_h` is shared by all steps; `W_c`, `W_i` and `W_o` are per layer.

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Mask;
use crate::tensor::{kernels::sigmoid, Tape, Tensor, Var};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_INIT_BOUND: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Compressor {
    hidden: usize,
    /// `4×d_f` per layer
    pub w_c: Vec<Tensor>,
    /// `d_drop×d_c` per layer
    pub w_i: Vec<Tensor>,
    /// `4d_c×d_c`, shared
    pub w_h: Tensor,
    /// `d_drop×d_c` per layer
    pub w_o: Vec<Tensor>,
}

/// Recurrent state between compressor steps.
#[derive(Clone, Copy, Debug)]
pub struct CompressorState {
    pub h: Var,
    pub c: Var,
    pub step: usize,
}

/// Tape handles for every compressor parameter.
#[derive(Clone, Debug)]
pub struct CompressorVars {
    pub w_c: Vec<Var>,
    pub w_i: Vec<Var>,
    pub w_h: Var,
    pub w_o: Vec<Var>,
}

/// A recorded pass over all layers: per-layer logits `W_o⁽ˡ⁾·h_l`.
pub struct PolicyPass {
    pub logits: Vec<Var>,
    pub vars: CompressorVars,
}

impl PolicyPass {
    pub fn policy(&self, tape: &Tape) -> DropoutPolicy {
        let probs = self
            .logits
            .iter()
            .map(|&v| tape.value(v).data().iter().map(|&a| sigmoid(a)).collect())
            .collect();
        DropoutPolicy { probs }
    }
}

impl Compressor {
    /// `layers` lists `(d_f, d_drop)` for each droppable critic layer.
    pub fn new<R: Rng + ?Sized>(layers: &[(usize, usize)], hidden: usize, init_bound: f64, rng: &mut R) -> Self {
        let mut w_c = Vec::with_capacity(layers.len());
        let mut w_i = Vec::with_capacity(layers.len());
        let mut w_o = Vec::with_capacity(layers.len());
        for &(d_f, d_drop) in layers {
            w_c.push(Tensor::uniform(&[4, d_f], init_bound, rng));
            w_i.push(Tensor::uniform(&[d_drop, hidden], init_bound, rng));
        }
        let w_h = Tensor::uniform(&[4 * hidden, hidden], init_bound, rng);
        for &(_, d_drop) in layers {
            w_o.push(Tensor::uniform(&[d_drop, hidden], init_bound, rng));
        }
        Compressor {
            hidden,
            w_c,
            w_i,
            w_h,
            w_o,
        }
    }

    /// Sized for the given compressor views (`d_f×d_drop` each).
    pub fn for_views<R: Rng + ?Sized>(views: &[Tensor], hidden: usize, init_bound: f64, rng: &mut R) -> Result<Self> {
        let dims = views.iter().map(Tensor::dims2).collect::<Result<Vec<_>>>()?;
        Ok(Self::new(&dims, hidden, init_bound, rng))
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn steps(&self) -> usize {
        self.w_c.len()
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.w_c
            .iter()
            .chain(&self.w_i)
            .chain(std::iter::once(&self.w_h))
            .chain(&self.w_o)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.w_c
            .iter_mut()
            .chain(self.w_i.iter_mut())
            .chain(std::iter::once(&mut self.w_h))
            .chain(self.w_o.iter_mut())
    }

    pub fn record_params(&self, tape: &mut Tape, trainable: bool) -> CompressorVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone().with_requires_grad(trainable));
        CompressorVars {
            w_c: self.w_c.iter().map(&mut leaf).collect(),
            w_i: self.w_i.iter().map(&mut leaf).collect(),
            w_h: leaf(&self.w_h),
            w_o: self.w_o.iter().map(&mut leaf).collect(),
        }
    }

    /// Zero `h_0`, `c_0`.
    pub fn initial_state(&self, tape: &mut Tape) -> CompressorState {
        CompressorState {
            h: tape.constant(Tensor::zeros(&[1, self.hidden])),
            c: tape.constant(Tensor::zeros(&[1, self.hidden])),
            step: 0,
        }
    }

    /// One compressor step on layer `state.step`'s view. Returns the advanced
    /// state and the `1×d_drop` logits whose sigmoid is `p⁽ˡ⁾`.
    pub fn step(
        &self,
        tape: &mut Tape,
        vars: &CompressorVars,
        state: CompressorState,
        view: Var,
    ) -> Result<(CompressorState, Var)> {
        let l = state.step;
        if l >= self.steps() {
            return Err(Error::Contract(format!(
                "compressor has {} steps, asked for step {l}",
                self.steps()
            )));
        }
        let (d_f, d_drop) = tape.value(view).dims2()?;
        if d_f != self.w_c[l].shape()[1] || d_drop != self.w_i[l].shape()[0] {
            return Err(Error::dim(
                "compressor_step",
                tape.shape(view),
                &[self.w_c[l].shape()[1], self.w_i[l].shape()[0]],
            ));
        }
        let d = self.hidden;
        let cw = tape.matmul(vars.w_c[l], view)?;
        let v = tape.matmul(cw, vars.w_i[l])?;
        let u = tape.matmul_nt(state.h, vars.w_h)?;
        let mut gates = [v; 4];
        for (k, gate) in gates.iter_mut().enumerate() {
            let vk = tape.slice_rows(v, k, 1)?;
            let uk = tape.slice_cols(u, k * d, d)?;
            *gate = tape.add(vk, uk)?;
        }
        let i = tape.sigmoid(gates[0])?;
        let f = tape.sigmoid(gates[1])?;
        let o = tape.sigmoid(gates[2])?;
        let g = tape.tanh(gates[3])?;
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        let logits = tape.matmul_nt(h, vars.w_o[l])?;
        Ok((CompressorState { h, c, step: l + 1 }, logits))
    }

    /// Runs every step over the critic's layer views.
    pub fn forward(&self, tape: &mut Tape, views: &[Tensor], trainable: bool) -> Result<PolicyPass> {
        if views.len() != self.steps() {
            return Err(Error::dim("compressor views", &[views.len()], &[self.steps()]));
        }
        let vars = self.record_params(tape, trainable);
        let mut state = self.initial_state(tape);
        let mut logits = Vec::with_capacity(views.len());
        for view in views {
            let input = tape.constant(view.clone());
            let (next, lg) = self.step(tape, &vars, state, input)?;
            state = next;
            logits.push(lg);
        }
        Ok(PolicyPass { logits, vars })
    }

    /// Untracked forward: the current keep-probabilities.
    pub fn policy(&self, views: &[Tensor]) -> Result<DropoutPolicy> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, views, false)?;
        Ok(pass.policy(&tape))
    }

    /// Records `ln μ(z)` of `sample` on the tape, given the pass that
    /// produced the sampling distribution.
    pub fn log_prob(&self, tape: &mut Tape, pass: &PolicyPass, sample: &SampledMasks) -> Result<Var> {
        let mut total: Option<Var> = None;
        for ((&logits, mask), scale) in pass.logits.iter().zip(&sample.masks).zip(&sample.scales) {
            let lp = tape.bernoulli_log_prob(logits, mask.as_f64(), scale.clone())?;
            total = Some(match total {
                Some(t) => tape.add(t, lp)?,
                None => lp,
            });
        }
        total.ok_or_else(|| Error::Contract("compressor has no layers".into()))
    }

    /// Adds the tape gradients of `vars` into the parameter tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &CompressorVars) -> Result<()> {
        let handles: Vec<Var> = vars
            .w_c
            .iter()
            .chain(&vars.w_i)
            .chain(std::iter::once(&vars.w_h))
            .chain(&vars.w_o)
            .copied()
            .collect();
        for (t, v) in self.params_mut().zip(handles) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
    }

    pub fn grads_finite(&self) -> bool {
        self.params()
            .all(|t| t.grad().map_or(true, |g| g.iter().all(|v| v.is_finite())))
    }

    /// `φ ← φ − step·∇φ` over the accumulated gradients, then clears them.
    pub fn apply_grads(&mut self, step: f64) {
        for t in self.params_mut() {
            if let Some(g) = t.grad().map(<[f64]>::to_vec) {
                t.data_mut().iter_mut().zip(&g).for_each(|(w, g)| *w -= step * g);
            }
            t.zero_grad();
        }
    }
}

/// Keep-probabilities `p⁽ˡ⁾` for every droppable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutPolicy {
    pub probs: Vec<Vec<f64>>,
}

/// Masks drawn from a policy together with the distribution they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledMasks {
    pub masks: Vec<Mask>,
    /// Multipliers `γ^{1[p ≤ τ]}` applied to each probability.
    pub scales: Vec<Vec<f64>>,
    /// Effective probabilities `p̂` the masks were drawn from.
    pub effective: Vec<Vec<f64>>,
    /// `Σ ln P(z)` under `p̂`.
    pub log_prob: f64,
}

/// Soft-deletion multiplier for one probability.
pub fn decay_scale(p: f64, gamma: f64, tau: f64) -> f64 {
    if p <= tau {
        gamma
    } else {
        1.0
    }
}

/// `p̂ = p·γ^{1[p ≤ τ]}`
pub fn effective_prob(p: f64, gamma: f64, tau: f64) -> f64 {
    p * decay_scale(p, gamma, tau)
}

/// Draws `z_j ~ Bernoulli(p̂_j)` for every unit, layer by layer, and records
/// the log-probability of the draw under `p̂`.
pub fn sample_masks<R: Rng + ?Sized>(policy: &DropoutPolicy, gamma: f64, tau: f64, rng: &mut R) -> SampledMasks {
    let mut out = SampledMasks {
        masks: Vec::with_capacity(policy.probs.len()),
        scales: Vec::with_capacity(policy.probs.len()),
        effective: Vec::with_capacity(policy.probs.len()),
        log_prob: 0.0,
    };
    for probs in &policy.probs {
        let scales: Vec<f64> = probs.iter().map(|&p| decay_scale(p, gamma, tau)).collect();
        let eff: Vec<f64> = probs.iter().zip(&scales).map(|(p, s)| p * s).collect();
        let bits: Vec<bool> = eff.iter().map(|&q| rng.gen::<f64>() < q).collect();
        out.log_prob += bits
            .iter()
            .zip(&eff)
            .map(|(&z, &q)| if z { q.ln() } else { (-q).ln_1p() })
            .sum::<f64>();
        out.masks.push(Mask::from_bools(bits));
        out.scales.push(scales);
        out.effective.push(eff);
    }
    out
}

/// Deterministic masks `ẑ_j = 1[p_j > τ]`. A layer left empty keeps its
/// highest-probability unit; the indices of such layers are returned.
pub fn final_masks(policy: &DropoutPolicy, tau: f64) -> (Vec<Mask>, Vec<usize>) {
    let mut rescued = Vec::new();
    let masks = policy
        .probs
        .iter()
        .enumerate()
        .map(|(l, probs)| {
            let mut mask = Mask::from_bools(probs.iter().map(|&p| p > tau).collect());
            if mask.kept() == 0 && !probs.is_empty() {
                let best = probs
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &p)| if p > probs[best] { j } else { best });
                warn!("layer {l}: every keep-probability is <= tau={tau}; keeping unit {best}");
                mask.set(best, true);
                rescued.push(l);
            }
            mask
        })
        .collect();
    (masks, rescued)
}
