//! Discretized logistic mixture likelihood over integer pixel intensities,
//! with RGB channel coupling, analytic gradients, and ancestral sampling.
//!
//! A channel intensity x ∈ {0, …, L−1} is modelled by binning a logistic
//! distribution at ±0.5 around each integer: p(x) = σ((x+0.5−μ)/s) −
//! σ((x−0.5−μ)/s). The lowest bin extends to −∞ and the highest to +∞, so
//! the pmf sums to one exactly. Channels share one mixture indicator per
//! pixel; the green mean is shifted by c_gr·scaled(x_r) and the blue mean
//! by c_br·scaled(x_r) + c_bg·scaled(x_g), where scaled(·) maps the
//! observed intensity to [−1, 1].
//!
//! Everything here is pure f64 over parameter values and safe to evaluate
//! concurrently.

use ndarray::{Array1, Array2, ArrayView3};
use rand::Rng;

use crate::error::{Error, Result};

/// Numerical floor for log-scales; prevents collapse to point masses
/// during likelihood training.
pub const DEFAULT_LOG_SCALE_FLOOR: f64 = -7.0;

const RED: usize = 0;
const GREEN: usize = 1;
const BLUE: usize = 2;

/// Coupling rows of [`MixtureParams::coupling`].
pub const COUPLE_GREEN_ON_RED: usize = 0;
pub const COUPLE_BLUE_ON_RED: usize = 1;
pub const COUPLE_BLUE_ON_GREEN: usize = 2;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    // ln(1 + e^z), branch-free of overflow
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// The discrete intensity space: L integer levels per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelSpace {
    levels: u32,
}

impl Default for PixelSpace {
    fn default() -> Self {
        PixelSpace { levels: 256 }
    }
}

impl PixelSpace {
    pub fn new(levels: u32) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidParameter(format!(
                "pixel space needs at least 2 levels, got {levels}"
            )));
        }
        Ok(PixelSpace { levels })
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn max_value(&self) -> u32 {
        self.levels - 1
    }

    /// Half the intensity range; the affine factor between network-scale
    /// values in [−1, 1] and intensity units.
    pub fn half_range(&self) -> f64 {
        (self.levels - 1) as f64 / 2.0
    }

    /// Map an observed intensity to [−1, 1].
    pub fn scaled(&self, x: u32) -> f64 {
        x as f64 / self.half_range() - 1.0
    }

    /// Probability of the ±0.5 bin around integer `x` under a logistic with
    /// location `mu` and scale `s`, with open-ended edge bins.
    pub fn bin_probability(&self, x: u32, mu: f64, s: f64) -> Result<f64> {
        self.check(x, s)?;
        Ok(self.log_bin_probability_unchecked(x, mu, s).exp())
    }

    /// `ln` of [`Self::bin_probability`], evaluated in a cancellation-free
    /// form that stays finite for extreme locations and scales.
    pub fn log_bin_probability(&self, x: u32, mu: f64, s: f64) -> Result<f64> {
        self.check(x, s)?;
        Ok(self.log_bin_probability_unchecked(x, mu, s))
    }

    fn check(&self, x: u32, s: f64) -> Result<()> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "logistic scale must be positive and finite, got {s}"
            )));
        }
        if x >= self.levels {
            return Err(Error::InvalidParameter(format!(
                "intensity {x} out of range for {} levels",
                self.levels
            )));
        }
        Ok(())
    }

    fn log_bin_probability_unchecked(&self, x: u32, mu: f64, s: f64) -> f64 {
        let a = (x as f64 + 0.5 - mu) / s;
        let b = (x as f64 - 0.5 - mu) / s;
        if x == 0 {
            // p = sigma(a)
            -softplus(-a)
        } else if x == self.max_value() {
            // p = 1 - sigma(b)
            -softplus(b)
        } else {
            // p = sigma(a) - sigma(b)
            //   = e^{-b} (1 - e^{-(a-b)}) / ((1+e^{-a})(1+e^{-b}))
            let delta = a - b; // = 1/s > 0
            -b + (-(-delta).exp_m1()).ln() - softplus(-a) - softplus(-b)
        }
    }

    /// (log p, ∂log p/∂μ, ∂log p/∂s).
    fn log_bin_probability_grad(&self, x: u32, mu: f64, s: f64) -> (f64, f64, f64) {
        let a = (x as f64 + 0.5 - mu) / s;
        let b = (x as f64 - 0.5 - mu) / s;
        let logp = self.log_bin_probability_unchecked(x, mu, s);
        if x == 0 {
            // log sigma(a): d/da = sigma(-a)
            let sa = sigmoid(-a);
            (logp, -sa / s, -a * sa / s)
        } else if x == self.max_value() {
            // log sigma(-b): d/db = -sigma(b)
            let sb = sigmoid(b);
            (logp, sb / s, b * sb / s)
        } else {
            let u = sigmoid(a);
            let v = sigmoid(b);
            let dmu = (u + v - 1.0) / s;
            // d/ds = c·(u+v−1)/s − h·R/s with c = (x−μ)/s, h = 0.5/s and
            // R = (σ'(a)+σ'(b))/p; in the far tails R → coth(Δ/2).
            let c = (x as f64 - mu) / s;
            let h = 0.5 / s;
            let delta = a - b;
            // R is capped at its supremum coth(delta/2), reached in the far
            // tails; the direct ratio overflows there as p underflows while
            // the responsibility weighting that multiplies this gradient
            // vanishes even faster.
            let q = (-delta).exp();
            let r_cap = if q < 1.0 { (1.0 + q) / (1.0 - q) } else { f64::INFINITY };
            let r = if b > 30.0 || a < -30.0 {
                r_cap
            } else {
                let p = logp.exp();
                ((u * (1.0 - u) + v * (1.0 - v)) / p).min(r_cap)
            };
            (logp, dmu, c * dmu - h * r / s)
        }
    }
}

/// Per-pixel mixture parameters: K unnormalized component weights, per
/// channel K means and K log-scales (intensity units), and per component
/// the three coupling coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    mixture_logits: Array1<f64>,
    /// (3, K): rows are red, green, blue.
    means: Array2<f64>,
    /// (3, K), clamped below at the configured floor.
    log_scales: Array2<f64>,
    /// (3, K): rows are green-on-red, blue-on-red, blue-on-green.
    coupling: Array2<f64>,
    log_scale_floor: f64,
}

impl MixtureParams {
    pub fn new(
        mixture_logits: Array1<f64>,
        means: Array2<f64>,
        log_scales: Array2<f64>,
        coupling: Array2<f64>,
    ) -> Result<Self> {
        Self::with_floor(mixture_logits, means, log_scales, coupling, DEFAULT_LOG_SCALE_FLOOR)
    }

    pub fn with_floor(
        mixture_logits: Array1<f64>,
        means: Array2<f64>,
        log_scales: Array2<f64>,
        coupling: Array2<f64>,
        log_scale_floor: f64,
    ) -> Result<Self> {
        let k = mixture_logits.len();
        if k == 0 {
            return Err(Error::InvalidParameter("mixture needs K >= 1 components".into()));
        }
        for (name, arr) in [("means", &means), ("log_scales", &log_scales), ("coupling", &coupling)] {
            if arr.dim() != (3, k) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must have shape (3, {k}), got {:?}",
                    arr.dim()
                )));
            }
        }
        let all_finite = mixture_logits.iter().all(|v| v.is_finite())
            && means.iter().all(|v| v.is_finite())
            && log_scales.iter().all(|v| v.is_finite())
            && coupling.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidParameter("non-finite mixture parameter".into()));
        }
        let log_scales = log_scales.mapv(|v| v.max(log_scale_floor));
        Ok(MixtureParams { mixture_logits, means, log_scales, coupling, log_scale_floor })
    }

    pub fn num_components(&self) -> usize {
        self.mixture_logits.len()
    }

    pub fn log_scale_floor(&self) -> f64 {
        self.log_scale_floor
    }

    pub fn mixture_logits(&self) -> &Array1<f64> {
        &self.mixture_logits
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn log_scales(&self) -> &Array2<f64> {
        &self.log_scales
    }

    pub fn coupling(&self) -> &Array2<f64> {
        &self.coupling
    }

    /// Mutable access for perturbation-style tests; values written here
    /// bypass the constructor's floor clamp.
    pub fn mixture_logits_mut(&mut self) -> &mut Array1<f64> {
        &mut self.mixture_logits
    }

    pub fn means_mut(&mut self) -> &mut Array2<f64> {
        &mut self.means
    }

    pub fn log_scales_mut(&mut self) -> &mut Array2<f64> {
        &mut self.log_scales
    }

    pub fn coupling_mut(&mut self) -> &mut Array2<f64> {
        &mut self.coupling
    }

    /// Normalized component weights (softmax of the logits).
    pub fn weights(&self) -> Array1<f64> {
        let max = self.mixture_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w = self.mixture_logits.mapv(|l| (l - max).exp());
        let z = w.sum();
        w /= z;
        w
    }

    fn log_weights(&self) -> Array1<f64> {
        let max = self.mixture_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = self.mixture_logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = z.ln() + max;
        self.mixture_logits.mapv(|l| l - log_z)
    }
}

/// Gradients of a log-pmf with respect to every field of [`MixtureParams`],
/// in matching shapes. Log-scale entries at the clamp floor get zero.
#[derive(Debug, Clone)]
pub struct MixtureParamsGrad {
    pub mixture_logits: Array1<f64>,
    pub means: Array2<f64>,
    pub log_scales: Array2<f64>,
    pub coupling: Array2<f64>,
}

impl MixtureParamsGrad {
    fn zeros(k: usize) -> Self {
        MixtureParamsGrad {
            mixture_logits: Array1::zeros(k),
            means: Array2::zeros((3, k)),
            log_scales: Array2::zeros((3, k)),
            coupling: Array2::zeros((3, k)),
        }
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let z: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    z.ln() + max
}

/// log Σ_k π_k · bin_probability(x, μ_k, s_k) for one channel, ignoring
/// coupling. Always ≤ 0.
pub fn mixture_log_pmf(
    space: PixelSpace,
    x: u32,
    params: &MixtureParams,
    channel: usize,
) -> Result<f64> {
    if channel >= 3 {
        return Err(Error::InvalidParameter(format!("channel index {channel} out of range")));
    }
    space.check(x, 1.0)?;
    let log_w = params.log_weights();
    let k = params.num_components();
    let mut terms = Vec::with_capacity(k);
    for ki in 0..k {
        let mu = params.means[(channel, ki)];
        let s = params.log_scales[(channel, ki)].exp();
        terms.push(log_w[ki] + space.log_bin_probability_unchecked(x, mu, s));
    }
    Ok(logsumexp(&terms))
}

/// [`mixture_log_pmf`] together with gradients w.r.t. the channel's mixture
/// logits, means, and log-scales.
pub fn mixture_log_pmf_grad(
    space: PixelSpace,
    x: u32,
    params: &MixtureParams,
    channel: usize,
) -> Result<(f64, MixtureParamsGrad)> {
    if channel >= 3 {
        return Err(Error::InvalidParameter(format!("channel index {channel} out of range")));
    }
    space.check(x, 1.0)?;
    let k = params.num_components();
    let log_w = params.log_weights();
    let weights = params.weights();
    let mut terms = Vec::with_capacity(k);
    let mut dmu = Vec::with_capacity(k);
    let mut dlogs = Vec::with_capacity(k);
    for ki in 0..k {
        let mu = params.means[(channel, ki)];
        let log_s = params.log_scales[(channel, ki)];
        let s = log_s.exp();
        let (lp, gmu, gs) = space.log_bin_probability_grad(x, mu, s);
        terms.push(log_w[ki] + lp);
        dmu.push(gmu);
        // chain through s = exp(log s); zero below the clamp floor
        let at_floor = log_s <= params.log_scale_floor;
        dlogs.push(if at_floor { 0.0 } else { gs * s });
    }
    let logp = logsumexp(&terms);
    let mut grad = MixtureParamsGrad::zeros(k);
    for ki in 0..k {
        let resp = (terms[ki] - logp).exp();
        grad.mixture_logits[ki] = resp - weights[ki];
        grad.means[(channel, ki)] = resp * dmu[ki];
        grad.log_scales[(channel, ki)] = resp * dlogs[ki];
    }
    Ok((logp, grad))
}

/// Σ_x exp(mixture_log_pmf) over the full intensity range of one channel;
/// equals one (to rounding) for any valid parameters.
pub fn bin_probability_sum(space: PixelSpace, params: &MixtureParams, channel: usize) -> Result<f64> {
    let mut total = 0.0;
    for x in 0..space.levels() {
        total += mixture_log_pmf(space, x, params, channel)?.exp();
    }
    Ok(total)
}

/// Joint log-pmf of one RGB pixel with a shared mixture indicator and
/// sequential mean coupling R→G→B.
pub fn coupled_pixel_log_pmf(space: PixelSpace, rgb: [u32; 3], params: &MixtureParams) -> Result<f64> {
    Ok(coupled_pixel_log_pmf_impl(space, rgb, params, false)?.0)
}

/// [`coupled_pixel_log_pmf`] with gradients for every parameter.
pub fn coupled_pixel_log_pmf_grad(
    space: PixelSpace,
    rgb: [u32; 3],
    params: &MixtureParams,
) -> Result<(f64, MixtureParamsGrad)> {
    let (logp, grad) = coupled_pixel_log_pmf_impl(space, rgb, params, true)?;
    Ok((logp, grad.expect("grad requested")))
}

fn coupled_pixel_log_pmf_impl(
    space: PixelSpace,
    rgb: [u32; 3],
    params: &MixtureParams,
    want_grad: bool,
) -> Result<(f64, Option<MixtureParamsGrad>)> {
    for &x in &rgb {
        space.check(x, 1.0)?;
    }
    let k = params.num_components();
    let log_w = params.log_weights();
    let t_r = space.scaled(rgb[RED]);
    let t_g = space.scaled(rgb[GREEN]);

    let mut terms = Vec::with_capacity(k);
    // per-component channel gradients: (dμ, ds·s) for r,g,b
    let mut per_k: Vec<[(f64, f64); 3]> = Vec::with_capacity(k);
    for ki in 0..k {
        let mut total = log_w[ki];
        let mut chans = [(0.0, 0.0); 3];
        for ch in 0..3 {
            let mu = match ch {
                RED => params.means[(RED, ki)],
                GREEN => params.means[(GREEN, ki)] + params.coupling[(COUPLE_GREEN_ON_RED, ki)] * t_r,
                _ => {
                    params.means[(BLUE, ki)]
                        + params.coupling[(COUPLE_BLUE_ON_RED, ki)] * t_r
                        + params.coupling[(COUPLE_BLUE_ON_GREEN, ki)] * t_g
                }
            };
            let log_s = params.log_scales[(ch, ki)];
            let s = log_s.exp();
            if want_grad {
                let (lp, gmu, gs) = space.log_bin_probability_grad(rgb[ch], mu, s);
                total += lp;
                let at_floor = log_s <= params.log_scale_floor;
                chans[ch] = (gmu, if at_floor { 0.0 } else { gs * s });
            } else {
                total += space.log_bin_probability_unchecked(rgb[ch], mu, s);
            }
        }
        terms.push(total);
        per_k.push(chans);
    }
    let logp = logsumexp(&terms);
    if !want_grad {
        return Ok((logp, None));
    }
    let weights = params.weights();
    let mut grad = MixtureParamsGrad::zeros(k);
    for ki in 0..k {
        let resp = (terms[ki] - logp).exp();
        grad.mixture_logits[ki] = resp - weights[ki];
        for ch in 0..3 {
            let (gmu, glogs) = per_k[ki][ch];
            grad.means[(ch, ki)] = resp * gmu;
            grad.log_scales[(ch, ki)] = resp * glogs;
        }
        grad.coupling[(COUPLE_GREEN_ON_RED, ki)] = resp * per_k[ki][GREEN].0 * t_r;
        grad.coupling[(COUPLE_BLUE_ON_RED, ki)] = resp * per_k[ki][BLUE].0 * t_r;
        grad.coupling[(COUPLE_BLUE_ON_GREEN, ki)] = resp * per_k[ki][BLUE].0 * t_g;
    }
    Ok((logp, Some(grad)))
}

/// Total image log-likelihood and dimension count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikelihood {
    pub total_nats: f64,
    pub num_dims: usize,
}

impl LogLikelihood {
    pub fn bits_per_dim(&self) -> f64 {
        -self.total_nats / (self.num_dims as f64 * std::f64::consts::LN_2)
    }
}

/// Sum of coupled per-pixel log-pmfs over a raster-ordered parameter map.
/// `image` is (3, H, W); `params` has one entry per pixel in raster order.
pub fn image_log_likelihood(
    space: PixelSpace,
    image: ArrayView3<'_, u8>,
    params: &[MixtureParams],
) -> Result<LogLikelihood> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    if params.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "parameter map has {} entries for {} pixels",
            params.len(),
            h * w
        )));
    }
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let rgb = [image[(0, i, j)] as u32, image[(1, i, j)] as u32, image[(2, i, j)] as u32];
            total += coupled_pixel_log_pmf(space, rgb, &params[i * w + j])?;
        }
    }
    Ok(LogLikelihood { total_nats: total, num_dims: h * w * 3 })
}

/// Draw one RGB pixel: pick a component, then sample each channel by
/// logistic inverse-CDF, applying the coupling with already-discretized
/// earlier channels, rounding to the nearest bin and clamping to range.
pub fn sample_pixel<R: Rng + ?Sized>(
    space: PixelSpace,
    params: &MixtureParams,
    rng: &mut R,
) -> [u8; 3] {
    let weights = params.weights();
    let mut pick = rng.random_range(0.0..1.0);
    let mut ki = weights.len() - 1;
    for (i, &w) in weights.iter().enumerate() {
        if pick < w {
            ki = i;
            break;
        }
        pick -= w;
    }

    let draw = |mu: f64, s: f64, rng: &mut R| -> u32 {
        // inverse CDF of the logistic; clamp u away from {0,1}
        let u: f64 = rng.random_range(1e-12..(1.0 - 1e-12));
        let v = mu + s * (u.ln() - (1.0 - u).ln());
        let max = space.max_value() as f64;
        v.round().clamp(0.0, max) as u32
    };

    let s = |ch: usize| params.log_scales[(ch, ki)].exp();
    let x_r = draw(params.means[(RED, ki)], s(RED), rng);
    let mu_g = params.means[(GREEN, ki)] + params.coupling[(COUPLE_GREEN_ON_RED, ki)] * space.scaled(x_r);
    let x_g = draw(mu_g, s(GREEN), rng);
    let mu_b = params.means[(BLUE, ki)]
        + params.coupling[(COUPLE_BLUE_ON_RED, ki)] * space.scaled(x_r)
        + params.coupling[(COUPLE_BLUE_ON_GREEN, ki)] * space.scaled(x_g);
    let x_b = draw(mu_b, s(BLUE), rng);
    [x_r as u8, x_g as u8, x_b as u8]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space256() -> PixelSpace {
        PixelSpace::default()
    }

    fn single_component(mu: f64, log_s: f64) -> MixtureParams {
        MixtureParams::new(
            array![0.0],
            Array2::from_elem((3, 1), mu),
            Array2::from_elem((3, 1), log_s),
            Array2::zeros((3, 1)),
        )
        .unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, k: usize) -> MixtureParams {
        let logits = Array1::from_iter((0..k).map(|_| rng.random_range(-2.0..2.0)));
        let means = Array2::from_shape_fn((3, k), |_| rng.random_range(-20.0..276.0));
        let log_scales = Array2::from_shape_fn((3, k), |_| rng.random_range(-3.0..4.5));
        let coupling = Array2::from_shape_fn((3, k), |_| rng.random_range(-30.0..30.0));
        MixtureParams::new(logits, means, log_scales, coupling).unwrap()
    }

    #[test]
    fn bin_probability_center_value() {
        // sigma(0.05) - sigma(-0.05), hand-evaluated
        let p = space256().bin_probability(128, 128.0, 10.0).unwrap();
        assert!((p - 0.024994792968420665).abs() < 1e-12, "got {p}");
    }

    #[test]
    fn bin_probability_edge_bins() {
        // x = 0 absorbs the lower tail: p = sigma(0.5)
        let p = space256().bin_probability(0, 0.0, 1.0).unwrap();
        assert!((p - 0.6224593312018546).abs() < 1e-12, "got {p}");
        // symmetric upper edge
        let q = space256().bin_probability(255, 255.0, 1.0).unwrap();
        assert!((q - 0.6224593312018546).abs() < 1e-12, "got {q}");
    }

    #[test]
    fn bin_probability_rejects_bad_scale() {
        assert!(space256().bin_probability(10, 0.0, 0.0).is_err());
        assert!(space256().bin_probability(10, 0.0, -1.0).is_err());
        assert!(space256().bin_probability(10, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn bin_probability_normalizes() {
        let space = space256();
        for &(mu, s) in &[(128.0, 10.0), (0.3, 0.07), (300.0, 5.0), (-40.0, 2.5), (127.5, 1e-3), (64.0, 1e4)] {
            let total: f64 = (0..256).map(|x| space.bin_probability(x, mu, s).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-12, "mu={mu} s={s}: total {total}");
        }
    }

    #[test]
    fn bin_probability_cumulative_monotone() {
        let space = space256();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mu = rng.random_range(-50.0..306.0);
            let s = rng.random_range(-7.0f64..5.0).exp();
            let mut acc = 0.0;
            for x in 0..256 {
                let p = space.bin_probability(x, mu, s).unwrap();
                assert!(p >= 0.0);
                let next = acc + p;
                assert!(next >= acc);
                acc = next;
            }
            assert!((acc - 1.0).abs() < 1e-9, "mu={mu} s={s}: cumulative {acc}");
        }
    }

    #[test]
    fn log_bin_probability_matches_direct_sigmoid_difference() {
        let space = space256();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 500 {
            let x = rng.random_range(1..255u32);
            let mu = rng.random_range(0.0..255.0);
            let s = rng.random_range(0.5..50.0);
            let a = (x as f64 + 0.5 - mu) / s;
            let b = (x as f64 - 0.5 - mu) / s;
            // the direct difference is only a trustworthy reference where
            // sigma is far from saturation
            if a.abs() > 8.0 || b.abs() > 8.0 {
                continue;
            }
            let direct = (sigmoid(a) - sigmoid(b)).ln();
            let stable = space.log_bin_probability(x, mu, s).unwrap();
            assert!((direct - stable).abs() < 1e-9, "x={x} mu={mu} s={s}: {direct} vs {stable}");
            checked += 1;
        }
    }

    #[test]
    fn mixture_log_pmf_single_component_collapse() {
        let space = space256();
        let params = single_component(128.0, 10.0f64.ln());
        let lp = mixture_log_pmf(space, 128, &params, 0).unwrap();
        assert!((lp - 0.024994792968420665f64.ln()).abs() < 1e-12, "got {lp}");
        assert!(lp <= 0.0);
    }

    #[test]
    fn mixture_log_pmf_duplicate_components_idempotent() {
        let space = space256();
        let single = single_component(100.0, 1.5);
        let double = MixtureParams::new(
            array![0.7, 0.7],
            Array2::from_elem((3, 2), 100.0),
            Array2::from_elem((3, 2), 1.5),
            Array2::zeros((3, 2)),
        )
        .unwrap();
        for x in [0u32, 17, 100, 255] {
            let a = mixture_log_pmf(space, x, &single, 1).unwrap();
            let b = mixture_log_pmf(space, x, &double, 1).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_component_tail_behaviour() {
        // With s = 1e4 the density is flat over the range, so every interior
        // bin gets ~0.25/s of mass while the edge bins absorb the tails;
        // the interior log-pmf is ln(0.25/s), not ln(1/256). The near-uniform
        // per-bin mass 1/256 occurs at s = 64 where sigma'(0)/s = 1/256.
        let space = space256();
        let lp = space.log_bin_probability(128, 100.0, 1e4).unwrap();
        assert!((lp - (-10.596636693301216)).abs() < 1e-9, "got {lp}");
        let near_uniform = space.log_bin_probability(128, 128.0, 64.0).unwrap();
        assert!((near_uniform - (1.0f64 / 256.0).ln()).abs() < 1e-4, "got {near_uniform}");
    }

    #[test]
    fn mixture_normalizes_per_channel() {
        let space = space256();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let k = 1 + rng.random_range(0..5);
            let params = random_params(&mut rng, k);
            for ch in 0..3 {
                let total: f64 = (0..256)
                    .map(|x| mixture_log_pmf(space, x, &params, ch).unwrap().exp())
                    .sum();
                assert!((total - 1.0).abs() < 1e-6, "total {total}");
            }
        }
    }

    #[test]
    fn log_scale_floor_produces_finite_values() {
        let space = space256();
        let params = single_component(127.3, DEFAULT_LOG_SCALE_FLOOR - 3.0);
        assert!((params.log_scales()[(0, 0)] - DEFAULT_LOG_SCALE_FLOOR).abs() < 1e-15);
        for x in 0..256u32 {
            let lp = mixture_log_pmf(space, x, &params, 0).unwrap();
            assert!(lp.is_finite(), "x={x}: {lp}");
        }
    }

    #[test]
    fn mixture_gradients_match_finite_differences() {
        let space = space256();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let step = 1e-4;
        for trial in 0..100 {
            let k = 1 + rng.random_range(0..4);
            let params = random_params(&mut rng, k);
            let x = rng.random_range(0..256u32);
            let ch = rng.random_range(0..3usize);
            let (_, grad) = mixture_log_pmf_grad(space, x, &params, ch).unwrap();

            let eval = |p: &MixtureParams| mixture_log_pmf(space, x, p, ch).unwrap();
            // logits
            for ki in 0..k {
                let mut hi = params.clone();
                hi.mixture_logits[ki] += step;
                let mut lo = params.clone();
                lo.mixture_logits[ki] -= step;
                let num = (eval(&hi) - eval(&lo)) / (2.0 * step);
                let a = grad.mixture_logits[ki];
                let denom = a.abs().max(num.abs()).max(1e-4);
                assert!((a - num).abs() / denom < 1e-4, "trial {trial} logit {ki}: {a} vs {num}");
            }
            for ki in 0..k {
                for (field, analytic) in [("mean", grad.means[(ch, ki)]), ("log_scale", grad.log_scales[(ch, ki)])] {
                    let perturb = |delta: f64| {
                        let mut p = params.clone();
                        match field {
                            "mean" => p.means[(ch, ki)] += delta,
                            _ => p.log_scales[(ch, ki)] += delta,
                        }
                        eval(&p)
                    };
                    let num = (perturb(step) - perturb(-step)) / (2.0 * step);
                    let denom = analytic.abs().max(num.abs()).max(1e-4);
                    assert!(
                        (analytic - num).abs() / denom < 1e-4,
                        "trial {trial} comp {ki} {field}: {analytic} vs {num}"
                    );
                }
            }
        }
    }

    #[test]
    fn coupled_decoupled_case_matches_channel_sum() {
        let space = space256();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let mut params = random_params(&mut rng, 3);
            params.coupling.fill(0.0);
            // independent indicators only coincide with the shared-indicator
            // mixture when K = 1 or components are identical; use K=1 per draw
            let k1 = MixtureParams::new(
                array![0.0],
                params.means.slice(ndarray::s![.., ..1]).to_owned(),
                params.log_scales.slice(ndarray::s![.., ..1]).to_owned(),
                Array2::zeros((3, 1)),
            )
            .unwrap();
            let rgb = [rng.random_range(0..256), rng.random_range(0..256), rng.random_range(0..256)];
            let joint = coupled_pixel_log_pmf(space, rgb, &k1).unwrap();
            let sum: f64 = (0..3)
                .map(|ch| mixture_log_pmf(space, rgb[ch], &k1, ch).unwrap())
                .sum();
            assert!((joint - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn coupling_shifts_effective_green_mean() {
        let space = space256();
        let base = single_component(128.0, 2.0);
        let mut coupled = base.clone();
        coupled.coupling[(COUPLE_GREEN_ON_RED, 0)] = 0.5;
        let x_r = 200u32;
        // same likelihood as an uncoupled params whose green mean is shifted
        let mut shifted = base.clone();
        shifted.means[(GREEN, 0)] += 0.5 * space.scaled(x_r);
        for x_g in [0u32, 50, 128, 255] {
            let a = coupled_pixel_log_pmf(space, [x_r, x_g, 10], &coupled).unwrap();
            let b = coupled_pixel_log_pmf(space, [x_r, x_g, 10], &shifted).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coupled_normalizes_at_reduced_levels() {
        let space = PixelSpace::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let k = 1 + rng.random_range(0..4);
            let logits = Array1::from_iter((0..k).map(|_| rng.random_range(-1.5..1.5)));
            let means = Array2::from_shape_fn((3, k), |_| rng.random_range(-2.0..9.0));
            let log_scales = Array2::from_shape_fn((3, k), |_| rng.random_range(-2.0..2.0));
            let coupling = Array2::from_shape_fn((3, k), |_| rng.random_range(-3.0..3.0));
            let params = MixtureParams::new(logits, means, log_scales, coupling).unwrap();
            let mut total = 0.0;
            for r in 0..8 {
                for g in 0..8 {
                    for b in 0..8 {
                        total += coupled_pixel_log_pmf(space, [r, g, b], &params).unwrap().exp();
                    }
                }
            }
            assert!((total - 1.0).abs() < 1e-10, "total {total}");
        }
    }

    #[test]
    fn coupled_gradients_match_finite_differences() {
        let space = space256();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let step = 1e-4;
        for trial in 0..60 {
            let k = 1 + rng.random_range(0..3);
            let params = random_params(&mut rng, k);
            let rgb = [rng.random_range(0..256), rng.random_range(0..256), rng.random_range(0..256)];
            let (_, grad) = coupled_pixel_log_pmf_grad(space, rgb, &params).unwrap();
            let eval = |p: &MixtureParams| coupled_pixel_log_pmf(space, rgb, p).unwrap();
            for ki in 0..k {
                let mut checks: Vec<(String, f64, Box<dyn Fn(&mut MixtureParams, f64)>)> = vec![(
                    format!("logit{ki}"),
                    grad.mixture_logits[ki],
                    Box::new(move |p, d| p.mixture_logits[ki] += d),
                )];
                for ch in 0..3 {
                    checks.push((
                        format!("mean{ch},{ki}"),
                        grad.means[(ch, ki)],
                        Box::new(move |p, d| p.means[(ch, ki)] += d),
                    ));
                    checks.push((
                        format!("log_scale{ch},{ki}"),
                        grad.log_scales[(ch, ki)],
                        Box::new(move |p, d| p.log_scales[(ch, ki)] += d),
                    ));
                    checks.push((
                        format!("coupling{ch},{ki}"),
                        grad.coupling[(ch, ki)],
                        Box::new(move |p, d| p.coupling[(ch, ki)] += d),
                    ));
                }
                for (name, analytic, apply) in checks {
                    let mut hi = params.clone();
                    apply(&mut hi, step);
                    let mut lo = params.clone();
                    apply(&mut lo, -step);
                    let num = (eval(&hi) - eval(&lo)) / (2.0 * step);
                    let denom = analytic.abs().max(num.abs()).max(1e-4);
                    assert!(
                        (analytic - num).abs() / denom < 1e-4,
                        "trial {trial} {name}: {analytic} vs {num}"
                    );
                }
            }
        }
    }

    #[test]
    fn image_log_likelihood_uniform_model() {
        // a mixture spread to near-uniform per bin gives every pixel-channel
        // ~ln(1/256); a 2x2 image then totals ~12·ln(1/256)
        let space = space256();
        let params = single_component(127.5, 64.0f64.ln());
        let image = ndarray::Array3::<u8>::from_elem((3, 2, 2), 128);
        let map: Vec<MixtureParams> = vec![params; 4];
        let ll = image_log_likelihood(space, image.view(), &map).unwrap();
        assert_eq!(ll.num_dims, 12);
        assert!((ll.total_nats - 12.0 * (1.0f64 / 256.0).ln()).abs() < 0.02, "{}", ll.total_nats);
        assert!(ll.bits_per_dim() > 0.0);
        assert!((ll.bits_per_dim() - 8.0).abs() < 0.01);
    }

    #[test]
    fn image_log_likelihood_shape_errors() {
        let space = space256();
        let image = ndarray::Array3::<u8>::zeros((3, 2, 2));
        let map = vec![single_component(0.0, 0.0); 3];
        assert!(image_log_likelihood(space, image.view(), &map).is_err());
    }

    #[test]
    fn sample_pixel_degenerate_scale_rounds_to_nearest() {
        let space = space256();
        let params = single_component(100.2, -20.0); // clamps to the floor, still ~point mass
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..100 {
            assert_eq!(sample_pixel(space, &params, &mut rng), [100, 100, 100]);
        }
    }

    #[test]
    fn sample_histogram_matches_pmf() {
        let space = PixelSpace::new(8).unwrap();
        let params = MixtureParams::new(
            array![0.4, -0.3],
            array![[2.0, 5.5], [3.0, 1.0], [4.0, 6.0]],
            array![[0.3, -0.4], [0.0, 0.2], [-0.2, 0.1]],
            Array2::zeros((3, 2)),
        )
        .unwrap();
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut counts = [[0usize; 8]; 3];
        for _ in 0..n {
            let px = sample_pixel(space, &params, &mut rng);
            for ch in 0..3 {
                counts[ch][px[ch] as usize] += 1;
            }
        }
        for ch in 0..3 {
            for x in 0..8u32 {
                let p = mixture_log_pmf(space, x, &params, ch).unwrap().exp();
                let se = (p * (1.0 - p) / n as f64).sqrt();
                let observed = counts[ch][x as usize] as f64 / n as f64;
                assert!(
                    (observed - p).abs() <= 3.0 * se + 1e-4,
                    "ch {ch} x {x}: observed {observed} expected {p} (se {se})"
                );
            }
        }
    }

    #[test]
    fn zero_coupling_samples_channels_independently() {
        // chi-square independence test between red and green at 4 coarse bins
        let space = PixelSpace::new(8).unwrap();
        let params = MixtureParams::new(
            array![0.0],
            array![[3.5], [3.5], [3.5]],
            array![[0.5], [0.5], [0.5]],
            Array2::zeros((3, 1)),
        )
        .unwrap();
        let n = 40_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut table = [[0f64; 4]; 4];
        for _ in 0..n {
            let px = sample_pixel(space, &params, &mut rng);
            table[(px[0] / 2) as usize][(px[1] / 2) as usize] += 1.0;
        }
        let row: Vec<f64> = (0..4).map(|i| table[i].iter().sum()).collect();
        let col: Vec<f64> = (0..4).map(|j| (0..4).map(|i| table[i][j]).sum()).collect();
        let mut chi2 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let expected = row[i] * col[j] / n as f64;
                chi2 += (table[i][j] - expected).powi(2) / expected;
            }
        }
        // chi-square with 9 dof: 0.999 quantile ~ 27.9
        assert!(chi2 < 27.9, "chi2 {chi2}");
    }
}
