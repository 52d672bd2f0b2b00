//! Kernel-wise soft mask mathematics.
//!
//! A real-valued mask `M^r` (one scalar per `(c_out, c_in)` kernel) is pushed
//! through a logistic relaxation and a two-class softmax to a keep
//! probability `q`. The forward pass hardens `q` into a binary mask `M^b`,
//! whose gradient is passed straight through to `q`, so `M^r → σ → q` is the
//! differentiable path that trains. Kernels dropped by `M^b` are not zeroed
//! but rescaled by the min–max normalized (and detached) `M^r`, giving the
//! soft mask `M = M^b + A^s`.
//!
//! Keep-probability orientation: `q` puts `σ` (not `1 − σ`) in the softmax
//! numerator so that `q → [M^r ≥ τ]` as the temperature goes to zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, GradientRule, Real, Tensor, Var};

/// Clamp applied to σ before logs and powers.
pub const SIGMA_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskHyperparams {
    /// Logistic steepness.
    pub k: f64,
    /// Threshold τ.
    pub tau: f64,
    /// Softmax temperature.
    pub temperature: f64,
    /// Initial value of every real-mask entry.
    pub init_value: f64,
    /// Perturb the two-class logits with Gumbel noise before hardening.
    #[serde(default)]
    pub gumbel: bool,
}

impl Default for MaskHyperparams {
    fn default() -> Self {
        MaskHyperparams {
            k: 20.0,
            tau: 0.0,
            temperature: 0.5,
            init_value: 0.01,
            gumbel: false,
        }
    }
}

impl MaskHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("k must be positive, got {}", self.k)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !self.tau.is_finite() || !self.init_value.is_finite() {
            return Err(Error::Config("tau and init_value must be finite".into()));
        }
        Ok(())
    }
}

/// Number of kernel-wise mask scalars for a `(c_out, c_in, kh, kw)` weight.
pub fn kernel_wise_count(weight_shape: &[usize]) -> usize {
    weight_shape[..2].iter().product()
}

/// Number of element-wise mask scalars for the same weight.
pub fn element_wise_count(weight_shape: &[usize]) -> usize {
    weight_shape.iter().product()
}

/// σ, its complement, and the keep probability for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedMask<F> {
    pub sigma: Tensor<F>,
    pub pi0: Tensor<F>,
    pub pi1: Tensor<F>,
    pub q: Tensor<F>,
}

impl<F: Real> RelaxedMask<F> {
    pub fn new(real: &Tensor<F>, hp: &MaskHyperparams) -> Self {
        let sigma = relax_sigmoid(real, hp);
        let q = keep_probability(&sigma, hp.temperature);
        RelaxedMask {
            pi0: sigma.map(|s| F::one() - s),
            pi1: sigma.clone(),
            sigma,
            q,
        }
    }
}

/// Binary mask with one bit per mask entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: impl Into<Vec<usize>>, bits: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::dim("binary_mask", format!("{shape:?} vs {} bits", bits.len())));
        }
        Ok(BinaryMask { shape, bits })
    }

    pub fn all_ones(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        BinaryMask {
            shape,
            bits: vec![true; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn zeros(&self) -> usize {
        self.len() - self.ones()
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::new(
            self.shape.clone(),
            self.bits.iter().map(|&b| if b { F::one() } else { F::zero() }).collect(),
        )
        .expect("shape checked at construction")
    }
}

/// Scaling factors in `[0, 1]`, nonzero only where the binary mask is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTensor<F> {
    values: Tensor<F>,
}

impl<F: Real> ScalingTensor<F> {
    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        ScalingTensor {
            values: Tensor::zeros(shape),
        }
    }
}

/// `M = M^b + A^s`, kept in decomposed form.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask<F> {
    binary: BinaryMask,
    scales: Tensor<F>,
}

impl<F: Real> SoftMask<F> {
    /// Rebuilds a soft mask from its bits and the scale of every zero bit,
    /// in ascending index order.
    pub fn from_parts(binary: BinaryMask, zero_scales: &[F]) -> Result<Self> {
        if zero_scales.len() != binary.zeros() {
            return Err(Error::CountMismatch(format!(
                "{} scaling values for {} zero bits",
                zero_scales.len(),
                binary.zeros()
            )));
        }
        let mut it = zero_scales.iter();
        let data = binary
            .bits()
            .iter()
            .map(|&b| if b { F::zero() } else { *it.next().expect("counted") })
            .collect();
        let scales = Tensor::new(binary.shape().to_vec(), data)?;
        compose_soft_mask(&binary, &ScalingTensor { values: scales })
    }

    pub fn identity(shape: impl Into<Vec<usize>>) -> Self {
        let binary = BinaryMask::all_ones(shape);
        let scales = Tensor::zeros(binary.shape().to_vec());
        SoftMask { binary, scales }
    }

    pub fn binary(&self) -> &BinaryMask {
        &self.binary
    }

    /// Scales of the zero bits in ascending index order.
    pub fn zero_scales(&self) -> Vec<F> {
        self.binary
            .bits()
            .iter()
            .zip(self.scales.data())
            .filter(|(b, _)| !**b)
            .map(|(_, &s)| s)
            .collect()
    }

    /// The dense mask values `M^b + A^s`.
    pub fn values(&self) -> Tensor<F> {
        Tensor::new(
            self.binary.shape().to_vec(),
            self.binary
                .bits()
                .iter()
                .zip(self.scales.data())
                .map(|(&b, &s)| if b { F::one() } else { s })
                .collect(),
        )
        .expect("same shape")
    }

    pub fn shape(&self) -> &[usize] {
        self.binary.shape()
    }

    pub fn cast<G: Real>(&self) -> SoftMask<G> {
        SoftMask {
            binary: self.binary.clone(),
            scales: self.scales.cast(),
        }
    }
}

/// `σ = 1 / (1 + exp(−k(M^r − τ)))`.
pub fn relax_sigmoid<F: Real>(real: &Tensor<F>, hp: &MaskHyperparams) -> Tensor<F> {
    let k = F::from_f64_lossy(hp.k);
    let tau = F::from_f64_lossy(hp.tau);
    real.map(|m| logistic(k * (m - tau)))
}

fn logistic<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn clamp_sigma<F: Real>(s: F) -> F {
    let eps = F::from_f64_lossy(SIGMA_EPS);
    s.max(eps).min(F::one() - eps)
}

/// `q = σ^(1/T) / (σ^(1/T) + (1 − σ)^(1/T))`, evaluated as a logistic of the
/// tempered log-odds. σ is clamped to `[ε, 1 − ε]` first.
pub fn keep_probability<F: Real>(sigma: &Tensor<F>, temperature: f64) -> Tensor<F> {
    keep_probability_perturbed(sigma, temperature, None)
}

/// Keep probability with optional per-entry logit offsets (`g1 − g0` of
/// Gumbel noise). The derivative with respect to σ has the same closed form
/// with or without offsets.
fn keep_probability_perturbed<F: Real>(
    sigma: &Tensor<F>,
    temperature: f64,
    offsets: Option<&[F]>,
) -> Tensor<F> {
    let t = F::from_f64_lossy(temperature);
    let mut out = sigma.clone();
    for (i, q) in out.data_mut().iter_mut().enumerate() {
        let s = clamp_sigma(*q);
        let noise = offsets.map_or(F::zero(), |o| o[i]);
        *q = if temperature == 1.0 && offsets.is_none() {
            s
        } else {
            logistic((s.ln() - (F::one() - s).ln() + noise) / t)
        };
    }
    out
}

/// `dq/dσ = q(1 − q) / (T σ (1 − σ))` with the same clamp as the forward.
pub fn keep_probability_grad<F: Real>(sigma: F, q: F, temperature: f64) -> F {
    let s = clamp_sigma(sigma);
    let t = F::from_f64_lossy(temperature);
    q * (F::one() - q) / (t * s * (F::one() - s))
}

/// Deterministic one-hot of `q`: bit is 1 iff `q ≥ 0.5`.
pub fn harden<F: Real>(q: &Tensor<F>) -> BinaryMask {
    let half = F::from_f64_lossy(0.5);
    BinaryMask {
        shape: q.shape().to_vec(),
        bits: q.data().iter().map(|&v| v >= half).collect(),
    }
}

/// `A^s = invert(M^b) · normal(M^r)` with per-layer min–max normalization.
/// A constant layer normalizes to 0.5 everywhere.
pub fn scaling_tensor<F: Real>(real: &Tensor<F>, binary: &BinaryMask) -> Result<ScalingTensor<F>> {
    if real.shape() != binary.shape() {
        return Err(Error::dim(
            "scaling_tensor",
            format!("real mask {:?} vs binary mask {:?}", real.shape(), binary.shape()),
        ));
    }
    let (lo, hi) = real
        .data()
        .iter()
        .fold((F::infinity(), F::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let half = F::from_f64_lossy(0.5);
    let data = real
        .data()
        .iter()
        .zip(binary.bits())
        .map(|(&m, &b)| {
            if b {
                F::zero()
            } else if span > F::zero() {
                ((m - lo) / span).max(F::zero()).min(F::one())
            } else {
                half
            }
        })
        .collect();
    Ok(ScalingTensor {
        values: Tensor::new(real.shape().to_vec(), data)?,
    })
}

/// `M = M^b + A^s`; the two supports must be disjoint.
pub fn compose_soft_mask<F: Real>(binary: &BinaryMask, scaling: &ScalingTensor<F>) -> Result<SoftMask<F>> {
    if binary.shape() != scaling.values.shape() {
        return Err(Error::dim(
            "compose_soft_mask",
            format!("{:?} vs {:?}", binary.shape(), scaling.values.shape()),
        ));
    }
    for (i, (&b, &a)) in binary.bits().iter().zip(scaling.values.data()).enumerate() {
        if b && a != F::zero() {
            return Err(Error::MaskInvariant(format!(
                "scaling value {a} at kept entry {i}"
            )));
        }
        if !(a >= F::zero() && a <= F::one()) {
            return Err(Error::MaskInvariant(format!("scaling value {a} at entry {i} outside [0, 1]")));
        }
    }
    Ok(SoftMask {
        binary: binary.clone(),
        scales: scaling.values.clone(),
    })
}

/// Soft mask for a trained real mask: threshold the keep probability and
/// fill the dropped entries with normalized scales.
pub fn freeze_soft_mask<F: Real>(real: &Tensor<F>, hp: &MaskHyperparams) -> Result<SoftMask<F>> {
    let q = keep_probability(&relax_sigmoid(real, hp), hp.temperature);
    let binary = harden(&q);
    let scaling = scaling_tensor(real, &binary)?;
    compose_soft_mask(&binary, &scaling)
}

/// Backward of the logistic relaxation: `k·σ·(1 − σ)`.
#[derive(Debug, Clone, Copy)]
pub struct RelaxRule {
    pub k: f64,
}

impl<F: Real> GradientRule<F> for RelaxRule {
    fn name(&self) -> &'static str {
        "relax_sigmoid"
    }

    fn backward(&self, _: &[&Tensor<F>], sigma: &Tensor<F>, grad: &Tensor<F>) -> Vec<Option<Tensor<F>>> {
        let k = F::from_f64_lossy(self.k);
        vec![grad.zip_map(sigma, |g, s| g * k * s * (F::one() - s)).ok()]
    }
}

/// Backward of the keep probability with respect to σ.
#[derive(Debug, Clone, Copy)]
pub struct KeepProbabilityRule {
    pub temperature: f64,
}

impl<F: Real> GradientRule<F> for KeepProbabilityRule {
    fn name(&self) -> &'static str {
        "keep_probability"
    }

    fn backward(&self, inputs: &[&Tensor<F>], q: &Tensor<F>, grad: &Tensor<F>) -> Vec<Option<Tensor<F>>> {
        let sigma = inputs[0];
        let data = grad
            .data()
            .iter()
            .zip(sigma.data())
            .zip(q.data())
            .map(|((&g, &s), &q)| g * keep_probability_grad(s, q, self.temperature))
            .collect();
        vec![Tensor::new(sigma.shape().to_vec(), data).ok()]
    }
}

/// Identity backward for a thresholding forward.
#[derive(Debug, Clone, Copy)]
pub struct StraightThrough;

impl<F: Real> GradientRule<F> for StraightThrough {
    fn name(&self) -> &'static str {
        "straight_through"
    }

    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>) -> Vec<Option<Tensor<F>>> {
        vec![Some(grad.clone())]
    }
}

/// Records σ(M^r) on the tape.
pub fn relax_sigmoid_node<F: Real>(g: &mut Graph<F>, real: Var, hp: &MaskHyperparams) -> Var {
    let sigma = relax_sigmoid(g.value(real), hp);
    g.custom(&[real], sigma, RelaxRule { k: hp.k })
}

/// Records q(σ) on the tape, optionally with Gumbel-perturbed logits.
pub fn keep_probability_node<F: Real>(
    g: &mut Graph<F>,
    sigma: Var,
    hp: &MaskHyperparams,
    rng: Option<&mut dyn rand::RngCore>,
) -> Var {
    let offsets = match (hp.gumbel, rng) {
        (true, Some(rng)) => Some(gumbel_offsets::<F>(rng, g.value(sigma).len())),
        _ => None,
    };
    let q = keep_probability_perturbed(g.value(sigma), hp.temperature, offsets.as_deref());
    g.custom(
        &[sigma],
        q,
        KeepProbabilityRule {
            temperature: hp.temperature,
        },
    )
}

fn gumbel_offsets<F: Real>(rng: &mut dyn rand::RngCore, n: usize) -> Vec<F> {
    let mut gumbel = || {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    };
    (0..n)
        .map(|_| {
            let (g1, g0) = (gumbel(), gumbel());
            F::from_f64_lossy(g1 - g0)
        })
        .collect()
}

/// Records the hardened binary mask of `q` with straight-through backward.
pub fn harden_node<F: Real>(g: &mut Graph<F>, q: Var) -> Var {
    let bits = harden(g.value(q)).to_tensor();
    g.custom(&[q], bits, StraightThrough)
}

/// Records `M^b + A^s` where `A^s` is a constant computed from the detached
/// real mask. Gradient flows to the binary node only.
pub fn compose_node<F: Real>(g: &mut Graph<F>, real: Var, binary: Var) -> Result<Var> {
    let half = F::from_f64_lossy(0.5);
    let bits = BinaryMask::new(
        g.value(binary).shape().to_vec(),
        g.value(binary).data().iter().map(|&v| v >= half).collect(),
    )?;
    let scaling = scaling_tensor(g.value(real), &bits)?;
    let a = g.constant(scaling.values);
    g.add(binary, a)
}

/// Compares autodiff `∂loss/∂M^r` through relax → keep_probability (the
/// differentiable sub-chain) against central finite differences, with
/// `loss = Σ q ⊙ r` for a fixed random `r`. Returns the maximum relative
/// error.
pub fn mask_chain_gradient_check(hp: &MaskHyperparams, shape: &[usize], seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let spread = 2.0 / hp.k;
    let real: Vec<f64> = (0..n).map(|_| hp.tau + rng.random_range(-spread..spread)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let real = Tensor::new(shape.to_vec(), real).expect("shape");
    let weights = Tensor::new(shape.to_vec(), weights).expect("shape");

    let loss_of = |m: &Tensor<f64>| -> f64 {
        let q = keep_probability(&relax_sigmoid(m, hp), hp.temperature);
        q.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::<f64>::new();
    let leaf = g.leaf(real.clone());
    let sigma = relax_sigmoid_node(&mut g, leaf, hp);
    let q = keep_probability_node(&mut g, sigma, hp, None);
    let w = g.constant(weights.clone());
    let prod = g.mul(q, w).expect("same shape");
    let loss = g.sum(prod);
    let grads = g.backward(loss).expect("scalar loss");
    let analytic = grads.wrt(&g, leaf);

    let step = 1e-6 / hp.k.max(1.0);
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut plus = real.clone();
        plus.data_mut()[i] += step;
        let mut minus = real.clone();
        minus.data_mut()[i] -= step;
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}
