//! Mode-wise Brownian increments and exact Ornstein-Uhlenbeck transitions.
//!
//! # Stream derivation
//!
//! A [`NoiseStream`] is a ChaCha8 keystream. The 256-bit key is four
//! consecutive SplitMix64 outputs started from `seed` (little-endian). The
//! 64-bit ChaCha stream id is `replica_id << 8 | channel`. Standard normals
//! come in Box-Muller pairs: pair `i` of step `n` reads the two `u64` words at
//! word position `4 · (n · ⌈m/2⌉ + i)` (32-bit words), where `m` is the number
//! of normals per step. Each `u64` maps to a uniform in `(0, 1)` via
//! `((u >> 11) + 0.5) · 2⁻⁵³`, and `(u₁, u₂) ↦ √(−2 ln u₁) (cos 2πu₂, sin 2πu₂)`.
//! The normal for mode `k` at step `n` is therefore a pure function of
//! `(seed, replica_id, channel, n, k)`.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};

use crate::error::Error;
use crate::exec::Executor;
use crate::math::{cos, exp, ln, one_minus_exp_neg, sin, sqrt, PI};
use crate::spectral::{Field, OperatorSpectrum};
use crate::stats::RunningMoments;
use crate::Result;

/// Independent purposes a single replica draws randomness for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Channel {
    /// Space-time white noise driving the fast equation.
    Dynamics = 0,
    /// Gaussian proposals of the pCN sampler.
    Proposal = 1,
    /// Uniforms for Metropolis accept/reject.
    Acceptance = 2,
    /// Random initial data.
    Initial = 3,
}

/// Deterministic, seekable source of Gaussian increments for one replica.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    replica_id: u64,
    channel: Channel,
    mode_count: usize,
    step: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_from_seed(seed: u64) -> [u8; 32] {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

#[inline]
fn to_open_unit(u: u64) -> f64 {
    ((u >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

impl NoiseStream {
    /// Stream for `replica_id` on the dynamics channel with `mode_count`
    /// normals per step.
    pub fn new(seed: u64, replica_id: u64, mode_count: usize) -> Self {
        Self::with_channel(seed, replica_id, Channel::Dynamics, mode_count)
    }

    pub fn with_channel(seed: u64, replica_id: u64, channel: Channel, mode_count: usize) -> Self {
        assert!(replica_id < (1u64 << 56), "replica id exceeds 56 bits");
        let mut rng = ChaCha8Rng::from_seed(key_from_seed(seed));
        rng.set_stream((replica_id << 8) | channel as u64);
        Self {
            seed,
            replica_id,
            channel,
            mode_count: mode_count.max(1),
            step: 0,
            rng,
        }
    }

    /// Sibling stream of the same replica on another channel, rewound.
    pub fn channel(&self, channel: Channel) -> Self {
        Self::with_channel(self.seed, self.replica_id, channel, self.mode_count)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replica_id(&self) -> u64 {
        self.replica_id
    }

    pub fn mode_count(&self) -> usize {
        self.mode_count
    }

    pub fn stream_channel(&self) -> Channel {
        self.channel
    }

    /// Index of the next step to be drawn.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    fn pairs_per_step(&self) -> u64 {
        self.mode_count.div_ceil(2) as u64
    }

    /// Standard normals of step `step` for modes `0..out.len()`.
    pub fn normals_at(&mut self, step: u64, out: &mut [f64]) {
        assert!(out.len() <= self.mode_count, "more normals than modes per step");
        let pos = 4 * step as u128 * self.pairs_per_step() as u128;
        self.rng.set_word_pos(pos);
        let mut i = 0;
        while i < out.len() {
            let u1 = to_open_unit(self.rng.next_u64());
            let u2 = to_open_unit(self.rng.next_u64());
            let r = sqrt(-2.0 * ln(u1));
            let th = 2.0 * PI * u2;
            out[i] = r * cos(th);
            if i + 1 < out.len() {
                out[i + 1] = r * sin(th);
            }
            i += 2;
        }
    }

    /// Normals of the current step; advances the step counter.
    pub fn next_normals(&mut self, out: &mut [f64]) {
        let s = self.step;
        self.normals_at(s, out);
        self.step += 1;
    }

    /// A uniform in `(0, 1)` for step `step` (first word of that step).
    pub fn uniform_at(&mut self, step: u64) -> f64 {
        let pos = 4 * step as u128 * self.pairs_per_step() as u128;
        self.rng.set_word_pos(pos);
        to_open_unit(self.rng.next_u64())
    }

    pub fn next_uniform(&mut self) -> f64 {
        let s = self.step;
        self.step += 1;
        self.uniform_at(s)
    }
}

/// Per-mode coefficients of the exact transition over one step of length `h`
/// for `dv = ε⁻¹(B v + d) dt + ε^{-1/2} dw` with `d` frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct OuPropagator {
    decay: Vec<f64>,
    drift_gain: Vec<f64>,
    noise_sd: Vec<f64>,
}

impl OuPropagator {
    pub fn new(spectrum: &OperatorSpectrum, h: f64, eps: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::invalid("h", "step must be positive"));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("eps", "scale separation must be positive"));
        }
        let tau = h / eps;
        let n = spectrum.n_modes();
        let mut decay = Vec::with_capacity(n);
        let mut drift_gain = Vec::with_capacity(n);
        let mut noise_sd = Vec::with_capacity(n);
        for &a in spectrum.eigenvalues() {
            decay.push(exp(-a * tau));
            drift_gain.push(one_minus_exp_neg(a * tau) / a);
            noise_sd.push(sqrt(one_minus_exp_neg(2.0 * a * tau) / (2.0 * a)));
        }
        Ok(Self {
            decay,
            drift_gain,
            noise_sd,
        })
    }

    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    pub fn drift_gain(&self) -> &[f64] {
        &self.drift_gain
    }

    pub fn noise_sd(&self) -> &[f64] {
        &self.noise_sd
    }

    /// In-place step with explicit standard normals (`None` for the
    /// noise-free diagnostic).
    pub fn step_with(&self, v: &mut [f64], drift: &[f64], normals: Option<&[f64]>) {
        for k in 0..v.len() {
            let mut next = self.decay[k] * v[k] + self.drift_gain[k] * drift[k];
            if let Some(z) = normals {
                next += self.noise_sd[k] * z[k];
            }
            v[k] = next;
        }
    }

    /// In-place step drawing the next normals from `ns`.
    pub fn step(&self, v: &mut [f64], drift: &[f64], ns: &mut NoiseStream, scratch: &mut [f64]) {
        ns.next_normals(scratch);
        self.step_with(v, drift, Some(scratch));
    }
}

/// One exact-in-law step of the linear part plus noise, with frozen drift.
pub fn ou_exact_step(
    spectrum: &OperatorSpectrum,
    v: &Field,
    drift: &Field,
    h: f64,
    eps: f64,
    ns: &mut NoiseStream,
) -> Result<Field> {
    if !spectrum.conforms(v) || !spectrum.conforms(drift) {
        return Err(Error::BasisMismatch("state or drift not on the fast basis"));
    }
    let prop = OuPropagator::new(spectrum, h, eps)?;
    let mut out = v.clone();
    let mut z = vec![0.0; spectrum.n_modes()];
    prop.step(out.coeffs_mut(), drift.coeffs(), ns, &mut z);
    Ok(out)
}

/// Second moment of the stochastic convolution at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvolutionMoment {
    pub t: f64,
    pub mean_sq: f64,
    pub std_error: f64,
    /// `Σ_k (1 − e^{−2α_k t/ε}) / (2α_k)`.
    pub analytic: f64,
}

/// `Σ_k (1 − e^{−2α_k t/ε}) / (2α_k)`.
pub fn convolution_second_moment(spectrum: &OperatorSpectrum, eps: f64, t: f64) -> f64 {
    spectrum
        .eigenvalues()
        .iter()
        .map(|a| one_minus_exp_neg(2.0 * a * t / eps) / (2.0 * a))
        .sum()
}

/// Time profile of `E|w^{ε,B}(t)|²_H` for the pure convolution (`G ≡ 0`),
/// recorded every `record_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn stochastic_convolution_moments<E: Executor>(
    spectrum: &OperatorSpectrum,
    eps: f64,
    horizon: f64,
    dt: f64,
    record_every: usize,
    replicas: usize,
    seed: u64,
    exec: &E,
) -> Result<Vec<ConvolutionMoment>> {
    if !(horizon > 0.0) {
        return Err(Error::invalid("horizon", "must be positive"));
    }
    if replicas < 2 {
        return Err(Error::invalid("replicas", "need at least two replicas"));
    }
    let prop = OuPropagator::new(spectrum, dt, eps)?;
    let n = spectrum.n_modes();
    let steps = libm::ceil(horizon / dt) as usize;
    let every = record_every.max(1);
    let n_rec = steps / every + 1;
    let drift = vec![0.0; n];

    let paths: Vec<Vec<f64>> = exec.map_indexed(replicas, |r| {
        let mut ns = NoiseStream::new(seed, r as u64, n);
        let mut v = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut out = Vec::with_capacity(n_rec);
        out.push(0.0);
        for s in 1..=steps {
            prop.step(&mut v, &drift, &mut ns, &mut z);
            if s % every == 0 {
                out.push(v.iter().map(|c| c * c).sum());
            }
        }
        out
    });

    let mut rows = Vec::with_capacity(n_rec);
    for i in 0..paths[0].len() {
        let mut acc = RunningMoments::new();
        for p in &paths {
            acc.push(p[i]);
        }
        let t = (i * every) as f64 * dt;
        rows.push(ConvolutionMoment {
            t,
            mean_sq: acc.mean(),
            std_error: acc.std_error(),
            analytic: convolution_second_moment(spectrum, eps, t),
        });
    }
    Ok(rows)
}
