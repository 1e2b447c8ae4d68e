//! Training objectives with analytic gradients.
//!
//! Every loss is generic over [`Scalar`] so the same code runs in `f32` for
//! training and `f64` for finite-difference checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{BnLayerMask, BnStatSet, DepthNet, LayerStats, TransformNet};
use crate::nn::{ChannelStats, Mode, NetTrace};
use crate::tensor::{Scalar, Tensor};

/// Loss value plus its named parts.
///
/// `total` equals the sum of `weights[k] * components[k]` over weighted
/// components; components without a weight are informational.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub(crate) fn weighted(parts: &[(&str, f64, f64)]) -> Self {
        let mut b = Self { total: 0.0, components: BTreeMap::new(), weights: BTreeMap::new() };
        for &(name, value, weight) in parts {
            b.components.insert(name.to_string(), value);
            b.weights.insert(name.to_string(), weight);
            if weight != 0.0 {
                b.total += weight * value;
            }
        }
        b
    }

    fn with_info(mut self, name: &str, value: f64) -> Self {
        self.components.insert(name.to_string(), value);
        self
    }

    /// Copies `other`'s components under `prefix_`, as informational entries.
    fn with_nested(mut self, prefix: &str, other: &LossBreakdown) -> Self {
        for (k, &v) in &other.components {
            self.components.insert(format!("{prefix}_{k}"), v);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    pub fn recomputed_total(&self) -> f64 {
        self.weights.iter().filter(|(_, &w)| w != 0.0).map(|(k, &w)| w * self.components[k]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.values().all(|v| v.is_finite())
    }
}

/// Pixels with positive target depth.
pub fn valid_mask<F: Scalar>(target: &Tensor<F>) -> Vec<bool> {
    target.data().iter().map(|&d| d > F::zero()).collect()
}

#[inline]
fn sgn<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

pub(crate) struct DepthLossEval<F> {
    pub depth: F,
    pub grad: F,
    pub normal: F,
    pub dpred: Option<Tensor<F>>,
}

impl<F: Scalar> DepthLossEval<F> {
    pub fn total(&self) -> F {
        self.depth + self.grad + self.normal
    }

    pub fn breakdown(&self) -> LossBreakdown {
        let v = |x: F| x.to_f64().unwrap_or(f64::NAN);
        LossBreakdown::weighted(&[("depth", v(self.depth), 1.0), ("grad", v(self.grad), 1.0), ("normal", v(self.normal), 1.0)])
    }
}

fn check_depth_pair<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>, valid: &[bool]) -> Result<()> {
    if pred.shape() != target.shape() || pred.channels() != 1 {
        return Err(Error::Shape(format!("depth loss needs matching N x 1 x H x W maps, got {:?} and {:?}", pred.shape(), target.shape())));
    }
    if valid.len() != target.data().len() {
        return Err(Error::Shape(format!("valid mask has {} entries for {} pixels", valid.len(), target.data().len())));
    }
    let plane = target.plane();
    for n in 0..target.batch() {
        let m = &valid[n * plane..(n + 1) * plane];
        if !m.iter().any(|&v| v) {
            return Err(Error::InvalidInput(format!("sample {n} has no valid pixels")));
        }
        if target.sample(n).iter().zip(m).any(|(&t, &v)| v && !(t > F::zero())) {
            return Err(Error::InvalidInput(format!("sample {n} has a non-positive target on a valid pixel")));
        }
    }
    Ok(())
}

/// Composite depth / gradient / normal loss with optional gradient w.r.t.
/// `pred`. Means run over all valid pixels (resp. valid neighbour triples)
/// in the batch.
pub(crate) fn depth_loss_eval<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>, valid: &[bool], need_grad: bool) -> Result<DepthLossEval<F>> {
    check_depth_pair(pred, target, valid)?;
    let [_, _, h, w] = pred.shape();
    let p = pred.data();
    let t = target.data();
    let half = F::from_f64(0.5);
    let f = |a: F| (a + half).ln();
    let e: Vec<F> = p.iter().zip(t).map(|(&a, &b)| (a - b).abs()).collect();

    let n_valid = valid.iter().filter(|&&v| v).count();
    // A triple is a pixel plus its right and lower neighbours, all valid.
    let triples: Vec<usize> = (0..p.len())
        .filter(|&i| {
            let (y, x) = ((i / w) % h, i % w);
            x + 1 < w && y + 1 < h && valid[i] && valid[i + 1] && valid[i + w]
        })
        .collect();

    let inv_v = F::one() / F::from_f64(n_valid as f64);
    let inv_g = if triples.is_empty() { F::zero() } else { F::one() / F::from_f64(triples.len() as f64) };

    let mut depth = F::zero();
    for (i, &ei) in e.iter().enumerate() {
        if valid[i] {
            depth += f(ei);
        }
    }
    depth = depth * inv_v;

    let mut de = if need_grad { vec![F::zero(); p.len()] } else { Vec::new() };
    let mut dp = if need_grad { vec![F::zero(); p.len()] } else { Vec::new() };
    if need_grad {
        for i in 0..p.len() {
            if valid[i] {
                de[i] += inv_v / (e[i] + half);
            }
        }
    }

    let mut grad = F::zero();
    let mut normal = F::zero();
    for &i in &triples {
        let gx = e[i + 1] - e[i];
        let gy = e[i + w] - e[i];
        grad += f(gx.abs()) + f(gy.abs());

        let (a, b) = (p[i + 1] - p[i], p[i + w] - p[i]);
        let (c, d) = (t[i + 1] - t[i], t[i + w] - t[i]);
        let np = (a * a + b * b + F::one()).sqrt();
        let nt = (c * c + d * d + F::one()).sqrt();
        let cos = (a * c + b * d + F::one()) / (np * nt);
        normal += F::one() - cos;

        if need_grad {
            let dgx = sgn(gx) / (gx.abs() + half) * inv_g;
            let dgy = sgn(gy) / (gy.abs() + half) * inv_g;
            de[i + 1] += dgx;
            de[i + w] += dgy;
            de[i] -= dgx + dgy;
            let da = -(c / (np * nt) - cos * a / (np * np)) * inv_g;
            let db = -(d / (np * nt) - cos * b / (np * np)) * inv_g;
            dp[i + 1] += da;
            dp[i + w] += db;
            dp[i] -= da + db;
        }
    }
    grad = grad * inv_g;
    normal = normal * inv_g;

    let dpred = need_grad.then(|| {
        for i in 0..p.len() {
            dp[i] += de[i] * sgn(p[i] - t[i]);
        }
        Tensor::from_vec(pred.shape(), dp).expect("same shape")
    });
    Ok(DepthLossEval { depth, grad, normal, dpred })
}

/// `L_depth + L_grad + L_normal` over valid pixels.
pub fn depth_loss<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>, valid: &[bool]) -> Result<LossBreakdown> {
    Ok(depth_loss_eval(pred, target, valid, false)?.breakdown())
}

/// [`depth_loss`] plus its gradient w.r.t. `pred`.
pub fn depth_loss_with_grad<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>, valid: &[bool]) -> Result<(LossBreakdown, Tensor<F>)> {
    let ev = depth_loss_eval(pred, target, valid, true)?;
    let b = ev.breakdown();
    Ok((b, ev.dpred.expect("requested")))
}

/// Data-aware distillation: `λ·H(teacher, student) + (1−λ)·H(gt, student)`.
/// Returns the gradient w.r.t. the student prediction. A term whose weight
/// is zero is not evaluated.
pub fn kd_plain_loss<F: Scalar>(
    teacher_pred: &Tensor<F>,
    student_pred: &Tensor<F>,
    ground_truth: &Tensor<F>,
    lambda: f64,
) -> Result<(LossBreakdown, Tensor<F>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let mut grad = Tensor::zeros(student_pred.shape());
    let mut term = |target: &Tensor<F>, weight: f64| -> Result<f64> {
        if weight == 0.0 {
            return Ok(0.0);
        }
        let ev = depth_loss_eval(student_pred, target, &valid_mask(target), true)?;
        let wf = F::from_f64(weight);
        for (g, &d) in grad.data_mut().iter_mut().zip(ev.dpred.as_ref().expect("requested").data()) {
            *g += wf * d;
        }
        Ok(ev.total().to_f64().unwrap_or(f64::NAN))
    };
    let kd = term(teacher_pred, lambda)?;
    let sup = term(ground_truth, 1.0 - lambda)?;
    Ok((LossBreakdown::weighted(&[("teacher", kd, lambda), ("ground_truth", sup, 1.0 - lambda)]), grad))
}

fn check_aligned<F>(a: &BnStatSet<F>, b: &BnStatSet<F>) -> Result<()> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::InvalidInput(format!("stat sets have {} and {} layers", a.layers.len(), b.layers.len())));
    }
    for (l, (x, y)) in a.layers.iter().zip(&b.layers).enumerate() {
        if x.channel_count() != y.channel_count() || x.var.len() != x.mean.len() || y.var.len() != y.mean.len() {
            return Err(Error::InvalidInput(format!("layer {l}: channel counts {} and {} differ", x.channel_count(), y.channel_count())));
        }
    }
    Ok(())
}

pub(crate) struct BnAlignment<F> {
    pub mean_term: F,
    pub var_term: F,
    /// Gradient w.r.t. the batch-wise statistics, per layer.
    pub grads: Vec<LayerStats<F>>,
}

fn norm_and_grad<F: Scalar>(a: &[F], b: &[F]) -> (F, Vec<F>) {
    let diff: Vec<F> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let n = diff.iter().map(|&d| d * d).sum::<F>().sqrt();
    // Subgradient 0 at the minimum.
    let g = if n > F::zero() { diff.iter().map(|&d| d / n).collect() } else { vec![F::zero(); diff.len()] };
    (n, g)
}

pub(crate) fn bn_alignment_eval<F: Scalar>(batch: &BnStatSet<F>, running: &BnStatSet<F>) -> Result<BnAlignment<F>> {
    check_aligned(batch, running)?;
    let mut mean_term = F::zero();
    let mut var_term = F::zero();
    let mut grads = Vec::with_capacity(batch.layers.len());
    for (b, r) in batch.layers.iter().zip(&running.layers) {
        let (nm, gm) = norm_and_grad(&b.mean, &r.mean);
        let (nv, gv) = norm_and_grad(&b.var, &r.var);
        mean_term += nm;
        var_term += nv;
        grads.push(LayerStats { mean: gm, var: gv });
    }
    Ok(BnAlignment { mean_term, var_term, grads })
}

/// `Σ_l ‖μ_l − μ̄_l‖₂ + Σ_l ‖σ²_l − σ̄²_l‖₂` (norms not squared).
pub fn bn_alignment_loss<F: Scalar>(batch_stats: &BnStatSet<F>, running: &BnStatSet<F>) -> Result<F> {
    let ev = bn_alignment_eval(batch_stats, running)?;
    Ok(ev.mean_term + ev.var_term)
}

fn check_same_shape<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn reconstruction_loss<F: Scalar>(original: &Tensor<F>, transformed: &Tensor<F>) -> Result<F> {
    check_same_shape(original, transformed)?;
    let n = F::from_f64(original.data().len() as f64);
    Ok(original.data().iter().zip(transformed.data()).map(|(&a, &b)| (a - b).abs()).sum::<F>() / n)
}

fn reconstruction_grad<F: Scalar>(original: &Tensor<F>, transformed: &Tensor<F>, scale: F) -> Tensor<F> {
    let k = scale / F::from_f64(original.data().len() as f64);
    let data = original.data().iter().zip(transformed.data()).map(|(&a, &b)| k * sgn(b - a)).collect();
    Tensor::from_vec(original.shape(), data).expect("same shape")
}

fn to_f64<F: Scalar>(v: F) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn layer_to_channel<F: Clone>(l: &LayerStats<F>) -> ChannelStats<F> {
    ChannelStats { mean: l.mean.clone(), var: l.var.clone() }
}

/// Gradient of `α·ℓ_BN + β·ℓ_rec` w.r.t. the teacher's input image, given an
/// eval-mode teacher trace on `images` and the reference images for `ℓ_rec`.
fn bn_rec_input_grad<F: Scalar>(
    teacher: &DepthNet<F>,
    trace: &NetTrace<F>,
    images: &Tensor<F>,
    reference: &Tensor<F>,
    alpha: f64,
    beta: f64,
    mask: &[bool],
) -> Result<(LossBreakdown, Option<Tensor<F>>)> {
    let running = crate::nets::running_stats(teacher)?.select(mask);
    let batch = crate::nets::stats_from_trace(trace).select(mask);
    let align = bn_alignment_eval(&batch, &running)?;
    let rec = reconstruction_loss(reference, images)?;
    let bn = to_f64(align.mean_term + align.var_term);
    let breakdown = LossBreakdown::weighted(&[("bn", bn, alpha), ("rec", to_f64(rec), beta)])
        .with_info("bn_mean", to_f64(align.mean_term))
        .with_info("bn_var", to_f64(align.var_term));
    if alpha == 0.0 && beta == 0.0 {
        return Ok((breakdown, None));
    }
    let mut dimg = if alpha != 0.0 {
        // Scatter selected-layer gradients back to all layers.
        let a = F::from_f64(alpha);
        let mut it = align.grads.iter();
        let all: Vec<ChannelStats<F>> = crate::nets::stats_from_trace(trace)
            .layers
            .iter()
            .zip(mask)
            .map(|(l, &keep)| match keep {
                true => {
                    let g = it.next().expect("aligned");
                    ChannelStats { mean: g.mean.iter().map(|&v| v * a).collect(), var: g.var.iter().map(|&v| v * a).collect() }
                }
                false => layer_to_channel(&LayerStats { mean: vec![F::zero(); l.mean.len()], var: vec![F::zero(); l.var.len()] }),
            })
            .collect();
        let inject = trace.stat_input_grads(&all);
        teacher.backward(trace, None, Some(&inject), None, true).expect("requested")
    } else {
        Tensor::zeros(images.shape())
    };
    if beta != 0.0 {
        dimg.add_assign(&reconstruction_grad(reference, images, F::from_f64(beta)));
    }
    Ok((breakdown, Some(dimg)))
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::Config(format!("alpha and beta must be finite and non-negative, got {alpha}, {beta}")));
    }
    Ok(())
}

/// Objective value and gradient w.r.t. the transformation network.
#[derive(Debug, Clone)]
pub struct GeneratorLoss<F> {
    pub breakdown: LossBreakdown,
    pub grads: Vec<F>,
}

/// `α·ℓ_BN(G(x̂)) + β·ℓ_rec(x̂, G(x̂))` with the teacher frozen in eval mode.
pub fn generator_objective<F: Scalar>(g: &TransformNet<F>, teacher: &DepthNet<F>, mixed: &Tensor<F>, alpha: f64, beta: f64) -> Result<GeneratorLoss<F>> {
    generator_objective_masked(g, teacher, mixed, alpha, beta, BnLayerMask::All)
}

pub fn generator_objective_masked<F: Scalar>(
    g: &TransformNet<F>,
    teacher: &DepthNet<F>,
    mixed: &Tensor<F>,
    alpha: f64,
    beta: f64,
    layers: BnLayerMask,
) -> Result<GeneratorLoss<F>> {
    check_weights(alpha, beta)?;
    if teacher.bn_layer_count() == 0 {
        return Err(Error::InvalidInput("generator objective needs a teacher with batch-norm layers".into()));
    }
    if mixed.batch() < 2 {
        return Err(Error::InvalidInput("generator objective needs a batch of at least 2".into()));
    }
    let g_trace = g.trace(mixed)?;
    let t_trace = teacher.trace(&g_trace.output, Mode::Eval)?;
    generator_step_from_traces(g, &g_trace, teacher, &t_trace, mixed, alpha, beta, &teacher.bn_mask(layers))
}

/// Generator objective from already-computed traces of `G(mixed)` and of the
/// eval-mode teacher on that output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn generator_step_from_traces<F: Scalar>(
    g: &TransformNet<F>,
    g_trace: &NetTrace<F>,
    teacher: &DepthNet<F>,
    t_trace: &NetTrace<F>,
    mixed: &Tensor<F>,
    alpha: f64,
    beta: f64,
    mask: &[bool],
) -> Result<GeneratorLoss<F>> {
    let (breakdown, dimg) = bn_rec_input_grad(teacher, t_trace, &g_trace.output, mixed, alpha, beta, mask)?;
    let mut grads = vec![F::zero(); g.param_count()];
    if let Some(d) = dimg {
        g.backward(g_trace, &d, Some(&mut grads), false);
    }
    Ok(GeneratorLoss { breakdown, grads })
}

/// Objective value and gradient w.r.t. directly optimized pixels.
#[derive(Debug, Clone)]
pub struct PixelLoss<F> {
    pub breakdown: LossBreakdown,
    pub grad: Tensor<F>,
}

/// Diagnostic variant of the generator objective in which the images
/// themselves are the parameters: `α·ℓ_BN(x) + β·ℓ_rec(reference, x)`.
pub fn pixel_objective<F: Scalar>(teacher: &DepthNet<F>, pixels: &Tensor<F>, reference: &Tensor<F>, alpha: f64, beta: f64) -> Result<PixelLoss<F>> {
    check_weights(alpha, beta)?;
    check_same_shape(pixels, reference)?;
    if pixels.batch() < 2 {
        return Err(Error::InvalidInput("pixel objective needs a batch of at least 2".into()));
    }
    let trace = teacher.trace(pixels, Mode::Eval)?;
    let mask = teacher.bn_mask(BnLayerMask::All);
    let (breakdown, grad) = bn_rec_input_grad(teacher, &trace, pixels, reference, alpha, beta, &mask)?;
    Ok(PixelLoss { breakdown, grad: grad.unwrap_or_else(|| Tensor::zeros(pixels.shape())) })
}

/// Relative weights of the raw and transformed-mixed branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchWeights {
    pub raw: f64,
    pub transformed: f64,
}

impl Default for BranchWeights {
    fn default() -> Self {
        Self { raw: 1.0, transformed: 1.0 }
    }
}

/// Objective value and gradient w.r.t. the student.
#[derive(Debug, Clone)]
pub struct DistillationLoss<F> {
    pub breakdown: LossBreakdown,
    pub student_grads: Vec<F>,
}

/// One distillation branch: train-mode student on `input` against the fixed
/// `target`. Adds `weight * ∂loss/∂θ` into `grads` and returns the unweighted
/// breakdown and the student trace (for running-stat updates).
pub(crate) fn distill_branch<F: Scalar>(
    student: &DepthNet<F>,
    input: &Tensor<F>,
    target: &Tensor<F>,
    weight: f64,
    grads: &mut [F],
) -> Result<(LossBreakdown, NetTrace<F>)> {
    let trace = student.trace(input, Mode::Train)?;
    let mask = vec![true; target.data().len()];
    let mut ev = depth_loss_eval(&trace.output, target, &mask, weight != 0.0)?;
    if let Some(mut d) = ev.dpred.take() {
        let w = F::from_f64(weight);
        d.data_mut().iter_mut().for_each(|v| *v *= w);
        student.backward(&trace, Some(&d), None, Some(grads), false);
    }
    Ok((ev.breakdown(), trace))
}

/// `w₁·L(N_t(x′), N_s(x′)) + w₂·L(N_t(G(x̂′)), N_s(G(x̂′)))`.
///
/// Teacher and G are constants here: only the student receives gradients.
/// With `mixed = None` the second branch is dropped; with `g = None` the
/// mixed batch feeds both networks directly.
pub fn distillation_objective<F: Scalar>(
    teacher: &DepthNet<F>,
    student: &DepthNet<F>,
    g: Option<&TransformNet<F>>,
    raw: &Tensor<F>,
    mixed: Option<&Tensor<F>>,
    weights: BranchWeights,
) -> Result<DistillationLoss<F>> {
    let mut grads = vec![F::zero(); student.param_count()];
    let target1 = crate::nets::forward_depth(teacher, raw)?;
    let (b1, _) = distill_branch(student, raw, &target1, weights.raw, &mut grads)?;
    let mut parts = vec![("branch1", b1.total, weights.raw)];
    let mut b2 = None;
    if let Some(m) = mixed {
        if m.shape() != raw.shape() {
            return Err(Error::Shape(format!("branch inputs differ: {:?} vs {:?}", raw.shape(), m.shape())));
        }
        let x2 = match g {
            Some(g) => crate::nets::forward_transform(g, m)?,
            None => m.clone(),
        };
        let target2 = crate::nets::forward_depth(teacher, &x2)?;
        let (b, _) = distill_branch(student, &x2, &target2, weights.transformed, &mut grads)?;
        parts.push(("branch2", b.total, weights.transformed));
        b2 = Some(b);
    }
    let mut breakdown = LossBreakdown::weighted(&parts).with_nested("branch1", &b1);
    if let Some(b) = &b2 {
        breakdown = breakdown.with_nested("branch2", b);
    }
    Ok(DistillationLoss { breakdown, student_grads: grads })
}
