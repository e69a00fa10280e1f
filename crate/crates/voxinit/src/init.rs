//! Data-independent weight-initialization schemes: Xavier and Kaiming in
//! uniform/normal flavors, truncated normal, and the UNETR default.
//!
//! All sampling happens in f64 on a ChaCha8 stream seeded from the spec,
//! then narrows to the target float width, so runs are reproducible
//! bit-for-bit at a fixed width.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, VoxError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Scheme {
    XavierUniform,
    XavierNormal,
    KaimingUniform,
    KaimingNormal,
    TruncNormal,
    UnetrDefault,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::XavierUniform,
        Scheme::XavierNormal,
        Scheme::KaimingUniform,
        Scheme::KaimingNormal,
        Scheme::TruncNormal,
        Scheme::UnetrDefault,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::XavierUniform => "xavier-uniform",
            Scheme::XavierNormal => "xavier-normal",
            Scheme::KaimingUniform => "kaiming-uniform",
            Scheme::KaimingNormal => "kaiming-normal",
            Scheme::TruncNormal => "trunc-normal",
            Scheme::UnetrDefault => "unetr-default",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = VoxError;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                VoxError::usage(format!(
                    "unknown init scheme '{s}' (expected one of: {})",
                    Scheme::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LayerKind {
    Conv,
    Linear,
}

/// Everything needed to initialize one weight tensor.
#[derive(Clone, Debug)]
pub struct InitSpec {
    pub scheme: Scheme,
    /// Optional scaling factor G (ignored by trunc-normal and unetr-default).
    pub gain: f64,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Receptive-field extents; required for unetr-default on conv layers.
    pub kernel_sizes: Option<[usize; 3]>,
    pub trunc_sigma: f64,
    /// Use the range limit exactly as printed in the source description
    /// (6·sqrt(2/(c_in+c_out))) instead of the standard sqrt(6/(c_in+c_out)).
    pub paper_literal_xavier: bool,
    pub seed: u64,
}

impl InitSpec {
    pub fn new(scheme: Scheme, fan_in: usize, fan_out: usize) -> Self {
        InitSpec {
            scheme,
            gain: 1.0,
            fan_in,
            fan_out,
            kernel_sizes: None,
            trunc_sigma: 0.02,
            paper_literal_xavier: false,
            seed: 0,
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_kernel(mut self, k: [usize; 3]) -> Self {
        self.kernel_sizes = Some(k);
        self
    }

    pub fn with_trunc_sigma(mut self, sigma: f64) -> Self {
        self.trunc_sigma = sigma;
        self
    }

    pub fn with_paper_literal(mut self, on: bool) -> Self {
        self.paper_literal_xavier = on;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.fan_in == 0 || self.fan_out == 0 {
            return Err(VoxError::config(format!(
                "init fans must be >= 1, got c_in={} c_out={}",
                self.fan_in, self.fan_out
            )));
        }
        if !self.gain.is_finite() || self.gain < 0.0 {
            return Err(VoxError::config(format!(
                "init gain must be finite and non-negative, got {}",
                self.gain
            )));
        }
        if !(self.trunc_sigma > 0.0) {
            return Err(VoxError::config(format!(
                "trunc_sigma must be positive, got {}",
                self.trunc_sigma
            )));
        }
        Ok(())
    }

    /// The scheme's distribution scale: a uniform half-width or a normal
    /// standard deviation.
    pub fn scale(&self, kind: LayerKind) -> Result<SchemeScale> {
        self.validate()?;
        let sum_fan = (self.fan_in + self.fan_out) as f64;
        let c_in = self.fan_in as f64;
        Ok(match self.scheme {
            Scheme::XavierUniform => {
                let a = if self.paper_literal_xavier {
                    6.0 * (2.0 / sum_fan).sqrt()
                } else {
                    (6.0 / sum_fan).sqrt()
                };
                SchemeScale::UniformBound(self.gain * a)
            }
            Scheme::XavierNormal => SchemeScale::NormalSigma(self.gain * (2.0 / sum_fan).sqrt()),
            Scheme::KaimingUniform => SchemeScale::UniformBound(self.gain * (3.0 / c_in).sqrt()),
            Scheme::KaimingNormal => SchemeScale::NormalSigma(self.gain / c_in.sqrt()),
            Scheme::TruncNormal => SchemeScale::NormalSigma(self.trunc_sigma),
            Scheme::UnetrDefault => {
                let sigma = match kind {
                    LayerKind::Conv => {
                        let k = self.kernel_sizes.ok_or_else(|| {
                            VoxError::config(
                                "unetr-default on a conv layer needs kernel_sizes".to_string(),
                            )
                        })?;
                        1.0 / (c_in * (k[0] * k[1] * k[2]) as f64)
                    }
                    LayerKind::Linear => 1.0 / c_in,
                };
                SchemeScale::UniformBound(sigma.sqrt())
            }
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum SchemeScale {
    UniformBound(f64),
    NormalSigma(f64),
}

impl SchemeScale {
    pub fn value(self) -> f64 {
        match self {
            SchemeScale::UniformBound(v) | SchemeScale::NormalSigma(v) => v,
        }
    }
}

/// Receptive-field fans for a conv weight (out_ch, in_ch, k, k, k):
/// c_in = in_ch·∏k, c_out = out_ch·∏k.
pub fn conv_fans(in_ch: usize, out_ch: usize, k: [usize; 3]) -> (usize, usize) {
    let kv = k[0] * k[1] * k[2];
    (in_ch * kv, out_ch * kv)
}

/// Draw from U(−bound, bound), open at both ends even after narrowing.
fn draw_uniform<T: Scalar>(rng: &mut ChaCha8Rng, bound: f64) -> T {
    if bound == 0.0 {
        return T::zero();
    }
    loop {
        let v: f64 = rng.gen_range(-bound..bound);
        if v <= -bound || v >= bound {
            continue; // half-open range can emit the lower bound
        }
        let t = T::from_f64(v);
        let tb = T::from_f64(bound);
        if t > -tb && t < tb {
            return t;
        }
        // narrowing rounded onto the bound: nudge strictly inside
        return t * T::from_f64(1.0 - 1e-6);
    }
}

fn fill<T: Scalar>(shape: &[usize], mut f: impl FnMut() -> T) -> Tensor<T> {
    Tensor::from_fn(shape, |_| f())
}

pub fn xavier_uniform<T: Scalar>(spec: &InitSpec, shape: &[usize]) -> Result<Tensor<T>> {
    let bound = match spec.scale(LayerKind::Linear)? {
        SchemeScale::UniformBound(b) => b,
        _ => unreachable!(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(fill(shape, || draw_uniform(&mut rng, bound)))
}

pub fn xavier_normal<T: Scalar>(spec: &InitSpec, shape: &[usize]) -> Result<Tensor<T>> {
    spec.validate()?;
    let sigma = spec.gain * (2.0 / (spec.fan_in + spec.fan_out) as f64).sqrt();
    sample_normal(spec.seed, sigma, shape)
}

pub fn kaiming_uniform<T: Scalar>(spec: &InitSpec, shape: &[usize]) -> Result<Tensor<T>> {
    spec.validate()?;
    let bound = spec.gain * (3.0 / spec.fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(fill(shape, || draw_uniform(&mut rng, bound)))
}

pub fn kaiming_normal<T: Scalar>(spec: &InitSpec, shape: &[usize]) -> Result<Tensor<T>> {
    spec.validate()?;
    let sigma = spec.gain / (spec.fan_in as f64).sqrt();
    sample_normal(spec.seed, sigma, shape)
}

fn sample_normal<T: Scalar>(seed: u64, sigma: f64, shape: &[usize]) -> Result<Tensor<T>> {
    if sigma == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let dist = Normal::new(0.0f64, sigma)
        .map_err(|e| VoxError::config(format!("invalid normal sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(fill(shape, || T::from_f64(dist.sample(&mut rng))))
}

/// N(0, trunc_sigma²), resampled until inside [−2σ, 2σ].
pub fn trunc_normal<T: Scalar>(spec: &InitSpec, shape: &[usize]) -> Result<Tensor<T>> {
    spec.validate()?;
    let sigma = spec.trunc_sigma;
    let cutoff = 2.0 * sigma;
    let dist = Normal::new(0.0f64, sigma)
        .map_err(|e| VoxError::config(format!("invalid trunc_sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(fill(shape, || loop {
        let v = dist.sample(&mut rng);
        if v.abs() <= cutoff {
            return T::from_f64(v);
        }
    }))
}

/// U(−√σ, √σ) with σ = 1/(C·∏ksize) for conv layers and 1/C for linear
/// layers, where C is the layer's input channel count.
pub fn unetr_default<T: Scalar>(
    spec: &InitSpec,
    shape: &[usize],
    kind: LayerKind,
) -> Result<Tensor<T>> {
    let bound = match spec.scale(kind)? {
        SchemeScale::UniformBound(b) => b,
        _ => unreachable!(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(fill(shape, || draw_uniform(&mut rng, bound)))
}

/// Scheme dispatcher; `kind` only affects unetr-default.
pub fn sample<T: Scalar>(spec: &InitSpec, shape: &[usize], kind: LayerKind) -> Result<Tensor<T>> {
    match spec.scheme {
        Scheme::XavierUniform => xavier_uniform(spec, shape),
        Scheme::XavierNormal => xavier_normal(spec, shape),
        Scheme::KaimingUniform => kaiming_uniform(spec, shape),
        Scheme::KaimingNormal => kaiming_normal(spec, shape),
        Scheme::TruncNormal => trunc_normal(spec, shape),
        Scheme::UnetrDefault => unetr_default(spec, shape, kind),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(data: &[f64]) -> (f64, f64, f64, f64) {
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mx = data.iter().cloned().fold(f64::MIN, f64::max);
        let mn = data.iter().cloned().fold(f64::MAX, f64::min);
        (mean, var.sqrt(), mn, mx)
    }

    #[test]
    fn xavier_uniform_bounds() {
        let printed = InitSpec::new(Scheme::XavierUniform, 6, 6).with_paper_literal(true);
        let a = printed.scale(LayerKind::Linear).unwrap().value();
        assert!((a - 6.0f64.sqrt()).abs() < 1e-12, "{a}");
        assert!((a - 2.4495).abs() < 1e-4);

        let standard = InitSpec::new(Scheme::XavierUniform, 6, 6);
        let a = standard.scale(LayerKind::Linear).unwrap().value();
        assert!((a - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((a - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn xavier_uniform_sampling_statistics() {
        let spec = InitSpec::new(Scheme::XavierUniform, 6, 6).with_seed(11);
        let a = spec.scale(LayerKind::Linear).unwrap().value();
        let t: Tensor<f64> = xavier_uniform(&spec, &[100_000]).unwrap();
        let (_, std, mn, mx) = stats(t.data());
        assert!(mn > -a && mx < a, "range [{mn}, {mx}] vs bound {a}");
        let want = a / 3.0f64.sqrt();
        assert!((std - want).abs() < 0.02 * want, "std {std} vs {want}");
    }

    #[test]
    fn xavier_normal_sigma_and_zero_gain() {
        let spec = InitSpec::new(Scheme::XavierNormal, 64, 64);
        assert!((spec.scale(LayerKind::Linear).unwrap().value() - 0.125).abs() < 1e-12);

        let zero = InitSpec::new(Scheme::XavierNormal, 64, 64).with_gain(0.0);
        let t: Tensor<f64> = xavier_normal(&zero, &[64]).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));

        let t: Tensor<f64> = xavier_normal(&spec.clone().with_seed(5), &[100_000]).unwrap();
        let (mean, std, _, _) = stats(t.data());
        assert!((std - 0.125).abs() < 0.02 * 0.125);
        assert!(mean.abs() < 0.01 * 0.125);
    }

    #[test]
    fn kaiming_bounds_and_statistics() {
        let spec = InitSpec::new(Scheme::KaimingUniform, 27, 8);
        let b = spec.scale(LayerKind::Linear).unwrap().value();
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
        let tiny = InitSpec::new(Scheme::KaimingUniform, 3, 8);
        assert!((tiny.scale(LayerKind::Linear).unwrap().value() - 1.0).abs() < 1e-12);

        let t: Tensor<f64> = kaiming_uniform(&spec.clone().with_seed(3), &[100_000]).unwrap();
        let (_, std, mn, mx) = stats(t.data());
        assert!(mn > -b && mx < b);
        let want = b / 3.0f64.sqrt();
        assert!((std - want).abs() < 0.02 * want);
    }

    #[test]
    fn kaiming_normal_sigma() {
        let spec = InitSpec::new(Scheme::KaimingNormal, 16, 4);
        assert!((spec.scale(LayerKind::Linear).unwrap().value() - 0.25).abs() < 1e-12);
        let gained = spec.clone().with_gain(2.0f64.sqrt());
        let sigma = gained.scale(LayerKind::Linear).unwrap().value();
        assert!((sigma - 0.35355).abs() < 1e-5);

        let t: Tensor<f64> = kaiming_normal(&spec.with_seed(9), &[100_000]).unwrap();
        let (mean, std, _, _) = stats(t.data());
        assert!((std - 0.25).abs() < 0.02 * 0.25);
        assert!(mean.abs() < 0.01 * 0.25);
    }

    #[test]
    fn unetr_default_bounds() {
        let conv = InitSpec::new(Scheme::UnetrDefault, 1, 8).with_kernel([3, 3, 3]);
        let b = conv.scale(LayerKind::Conv).unwrap().value();
        assert!((b - (1.0 / 27.0f64).sqrt()).abs() < 1e-12);
        assert!((b - 0.19245).abs() < 1e-5);

        let linear = InitSpec::new(Scheme::UnetrDefault, 64, 64);
        assert!((linear.scale(LayerKind::Linear).unwrap().value() - 0.125).abs() < 1e-12);

        let missing = InitSpec::new(Scheme::UnetrDefault, 4, 8);
        assert!(missing.scale(LayerKind::Conv).is_err());

        let t: Tensor<f64> =
            unetr_default(&conv.with_seed(21), &[100_000], LayerKind::Conv).unwrap();
        let (_, _, mn, mx) = stats(t.data());
        assert!(mn > -0.19246 && mx < 0.19246);
    }

    #[test]
    fn trunc_normal_truncates_and_matches_moments() {
        let spec = InitSpec::new(Scheme::TruncNormal, 1, 1)
            .with_trunc_sigma(0.02)
            .with_seed(17);
        let t: Tensor<f64> = trunc_normal(&spec, &[1_000_000]).unwrap();
        let (_, std, mn, mx) = stats(t.data());
        assert!(mn >= -0.04 && mx <= 0.04, "range [{mn}, {mx}]");
        // std of a normal truncated at ±2σ
        let want = 0.87962 * 0.02;
        assert!((std - want).abs() < 0.03 * want, "std {std} vs {want}");
    }

    #[test]
    fn seed_determinism_and_shape() {
        for scheme in Scheme::ALL {
            let spec = InitSpec::new(scheme, 12, 24)
                .with_kernel([2, 2, 2])
                .with_seed(42);
            let a: Tensor<f64> = sample(&spec, &[3, 4, 5], LayerKind::Conv).unwrap();
            let b: Tensor<f64> = sample(&spec, &[3, 4, 5], LayerKind::Conv).unwrap();
            assert_eq!(a.shape(), &[3, 4, 5]);
            assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{scheme} not deterministic"
            );
            let c: Tensor<f64> = sample(&spec.clone().with_seed(43), &[3, 4, 5], LayerKind::Conv)
                .unwrap();
            assert_ne!(a.data(), c.data(), "{scheme} ignores seed");
        }
    }

    #[test]
    fn f32_narrowing_respects_open_bounds() {
        let spec = InitSpec::new(Scheme::KaimingUniform, 3, 3).with_seed(7);
        let b = spec.scale(LayerKind::Linear).unwrap().value() as f32;
        let t: Tensor<f32> = kaiming_uniform(&spec, &[200_000]).unwrap();
        assert!(t.data().iter().all(|&v| v > -b && v < b));
    }

    #[test]
    fn scheme_names_round_trip() {
        for scheme in Scheme::ALL {
            let parsed: Scheme = scheme.name().parse().unwrap();
            assert_eq!(parsed, scheme);
        }
        assert!("glorot".parse::<Scheme>().is_err());
    }

    #[test]
    fn conv_fan_computation() {
        let (ci, co) = conv_fans(4, 8, [3, 3, 3]);
        assert_eq!((ci, co), (108, 216));
    }
}
