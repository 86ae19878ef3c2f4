//! Seeded batch augmentations that report the pixel-space transform they
//! applied to each sample.
//!
//! Random parameters are constants; outputs stay differentiable with
//! respect to the input batch. A chain applying `T1` then `T2` reports
//! `T2·T1`.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::{adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation};
use crate::error::{param_err, Result};
use crate::geometry::{get_perspective_transform, get_rotation_matrix2d, mat3_to_tensor, tensor_to_mat3, warp_perspective_const};
use crate::tensor::{Real, Tensor, Var};

/// Counter-based parameter stream: each augmentation call takes a fresh
/// call index, and every sample draws from its own generator keyed by
/// `(seed, call, sample)`.
#[derive(Debug, Clone)]
pub struct AugRng {
    seed: u64,
    calls: u64,
}

impl AugRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, calls: 0 }
    }

    fn next_call(&mut self) -> u64 {
        self.calls += 1;
        self.calls - 1
    }

    fn sample_stream(&self, call: u64, sample: usize) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&call.to_le_bytes());
        key[16..24].copy_from_slice(&(sample as u64).to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// Parameters drawn for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum AugParams {
    Flip { applied: bool },
    Affine { angle_deg: f64, translate: (f64, f64), scale: f64 },
    ColorJitter { brightness: f64, contrast: f64, saturation: f64, hue: f64 },
    Erase { applied: bool, x0: usize, y0: usize, width: usize, height: usize },
    ResizedCrop { x0: f64, y0: f64, width: f64, height: f64 },
    Chain(Vec<AugParams>),
}

#[derive(Debug, Clone)]
pub struct AugResult<T: Real> {
    pub output: Var<T>,
    /// `N×3×3` matrices mapping input pixel coordinates to output ones.
    pub transform: Tensor<f64>,
    pub params: Vec<AugParams>,
}

impl<T: Real> AugResult<T> {
    pub fn matrix(&self, i: usize) -> Result<Matrix3<f64>> {
        tensor_to_mat3(&self.transform, i)
    }

    pub fn matrices(&self) -> Result<Vec<Matrix3<f64>>> {
        (0..self.transform.shape()[0]).map(|i| self.matrix(i)).collect()
    }
}

pub trait Augmentation<T: Real> {
    fn apply(&self, batch: &Var<T>, rng: &mut AugRng) -> Result<AugResult<T>>;
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return param_err(format!("{name} range ({lo}, {hi}) is invalid"));
    }
    Ok(())
}

fn check_prob(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return param_err(format!("probability must lie in [0, 1], got {p}"));
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Applies `f` to every sample with its own parameter stream and
/// reassembles the batch.
fn per_sample<T: Real>(
    batch: &Var<T>,
    rng: &mut AugRng,
    mut f: impl FnMut(&Var<T>, &mut ChaCha8Rng) -> Result<(Var<T>, Matrix3<f64>, AugParams)>,
) -> Result<AugResult<T>> {
    let (n, _, _, _) = batch.value().dims4()?;
    let call = rng.next_call();
    let mut outs = Vec::with_capacity(n);
    let mut mats = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = rng.sample_stream(call, i);
        let (o, m, p) = f(&batch.slice(0, i, i + 1, 1)?, &mut s)?;
        outs.push(o);
        mats.push(m);
        params.push(p);
    }
    let output = if n == 1 { outs.pop().expect("one sample") } else { Var::concat(&outs, 0)? };
    Ok(AugResult { output, transform: mat3_to_tensor(&mats), params })
}

/// Horizontal flip (`x → W−1−x`) of each sample with probability `p`.
#[derive(Debug, Clone)]
pub struct RandomHorizontalFlip {
    pub p: f64,
}

/// Vertical flip (`y → H−1−y`) of each sample with probability `p`.
#[derive(Debug, Clone)]
pub struct RandomVerticalFlip {
    pub p: f64,
}

fn flip<T: Real>(batch: &Var<T>, rng: &mut AugRng, p: f64, axis: usize) -> Result<AugResult<T>> {
    check_prob(p)?;
    let (_, _, h, w) = batch.value().dims4()?;
    per_sample(batch, rng, |x, s| {
        let applied = s.random::<f64>() < p;
        if !applied {
            return Ok((x.clone(), Matrix3::identity(), AugParams::Flip { applied }));
        }
        let m = if axis == 3 {
            Matrix3::new(-1.0, 0.0, (w - 1) as f64, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
        } else {
            Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, (h - 1) as f64, 0.0, 0.0, 1.0)
        };
        Ok((x.flip(axis)?, m, AugParams::Flip { applied }))
    })
}

impl<T: Real> Augmentation<T> for RandomHorizontalFlip {
    fn apply(&self, batch: &Var<T>, rng: &mut AugRng) -> Result<AugResult<T>> {
        flip(batch, rng, self.p, 3)
    }
}

impl<T: Real> Augmentation<T> for RandomVerticalFlip {
    fn apply(&self, batch: &Var<T>, rng: &mut AugRng) -> Result<AugResult<T>> {
        flip(batch, rng, self.p, 2)
    }
}

/// Rotation about the image centre, isotropic scale and translation, each
/// drawn uniformly. Translations are fractions of the width and height.
#[derive(Debug, Clone)]
pub struct RandomAffine {
    pub degrees: (f64, f64),
    pub translate: (f64, f64),
    pub scale: (f64, f64),
}

impl RandomAffine {
    /// Transform of the given parameters for an `h×w` image.
    pub fn matrix(h: usize, w: usize, angle_deg: f64, translate: (f64, f64), scale: f64) -> Result<Matrix3<f64>> {
        let centre = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let r = get_rotation_matrix2d(centre, angle_deg, scale)?;
        Ok(Matrix3::new(
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)] + translate.0,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)] + translate.1,
            0.0,
            0.0,
            1.0,
        ))
    }
}

impl<T: Real> Augmentation<T> for RandomAffine {
    fn apply(&self, batch: &Var<T>, rng: &mut AugRng) -> Result<AugResult<T>> {
        check_range("degrees", self.degrees)?;
        check_range("translate", self.translate)?;
        check_range("scale", self.scale)?;
        if self.scale.0 <= 0.0 {
            return param_err(format!("scale range must be positive, got {:?}", self.scale));
        }
        let (_, _, h, w) = batch.value().dims4()?;
        per_sample(batch, rng, |x, s| {
            let angle_deg = uniform(s, self.degrees);
            let translate = (uniform(s, self.translate) * w as f64, uniform(s, self.translate) * h as f64);
            let scale = uniform(s, self.scale);
            let m = Self::matrix(h, w, angle_deg, translate, scale)?;
            let out = warp_perspective_const(x, &[m], (h, w))?;
            Ok((out, m, AugParams::Affine { angle_deg, translate, scale }))
        })
    }
}

/// Brightness offset, contrast factor, saturation factor and hue shift
/// (radians), applied in that order. Saturation and hue are skipped for
/// single-channel input, and any factor drawn at its identity value is a
/// no-op.
#[derive(Debug, Clone)]
pub struct ColorJitter {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub hue: (f64, f64),
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self { brightness: (0.0, 0.0), contrast: (1.0, 1.0), saturation: (1.0, 1.0), hue: (0.0, 0.0) }
    }
}

impl<T: Real> Augmentation<T> for ColorJitter {
    fn apply(&self, batch: &Var<T>, rng: &mut AugRng) -> Result<AugResult<T>> {
        check_range("brightness", self.brightness)?;
        check_range("contrast", self.contrast)?;
        check_range("saturation", self.saturation)?;
        check_range("hue", self.hue)?;
        let (_, c, _, _) = batch.value().dims4()?;
        per_sample(batch, rng, |x, s| {
            let brightness = uniform(s, self.brightness);
            let contrast = uniform(s, self.contrast);
            let saturation = uniform(s, self.saturation);
            let hue = uniform(s, self.hue);
            let mut y = x.clone();
            if brightness != 0.0 {
                y = adjust_brightness(&y, brightness)?;
            }
            if contrast != 1.0 {
                y = adjust_contrast(&y, contrast)?;
            }
            if c == 3 && saturation != 1.0 {
                y = adjust_saturation(&y, saturation)?;
            }
            if c == 3 && hue != 0.0 {
                y = adjust_hue(&y, hue)?;
            }
            Ok((y, Matrix3::identity(), AugParams::ColorJitter { brightness, contrast, saturation, hue }))
        })
    }
}

/// Fills a random rectangle with `value` with probability `p`. The area
/// fraction and aspect ratio are drawn from `scale` and (log-uniformly)
/// `ratio`.
#[derive(Debug, Clone)]
pub struct RandomErasing {
    pub p: f64,
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub value: f64,
}

impl<T: Real> Augmentation<T> for RandomErasing {
    fn apply(&self, batch: &Var<T>, rng: &mut AugRng) -> Result<AugResult<T>> {
        check_prob(self.p)?;
        check_range("scale", self.scale)?;
        check_range("ratio", self.ratio)?;
        if self.ratio.0 <= 0.0 {
            return param_err("aspect ratios must be positive");
        }
        let (_, c, h, w) = batch.value().dims4()?;
        per_sample(batch, rng, |x, s| {
            let applied = s.random::<f64>() < self.p;
            let area = uniform(s, self.scale) * (h * w) as f64;
            let ratio = uniform(s, (self.ratio.0.ln(), self.ratio.1.ln())).exp();
            let width = ((area * ratio).sqrt().round() as usize).clamp(1, w);
            let height = ((area / ratio).sqrt().round() as usize).clamp(1, h);
            let x0 = s.random_range(0..=w - width);
            let y0 = s.random_range(0..=h - height);
            let params = AugParams::Erase { applied, x0, y0, width, height };
            if !applied {
                return Ok((x.clone(), Matrix3::identity(), params));
            }
            let inside = |i: &[usize]| (y0..y0 + height).contains(&i[2]) && (x0..x0 + width).contains(&i[3]);
            let keep = Tensor::from_fn(&[1, c, h, w], |i| if inside(i) { T::zero() } else { T::one() });
            let fill = Tensor::from_fn(&[1, c, h, w], |i| if inside(i) { T::c(self.value) } else { T::zero() });
            Ok((x.mul_const(&keep)?.add_const(&fill)?, Matrix3::identity(), params))
        })
    }
}

/// Crops a random box (area fraction from `scale`, aspect ratio
/// log-uniform in `ratio`) and resamples it to `size`.
#[derive(Debug, Clone)]
pub struct RandomResizedCrop {
    pub size: (usize, usize),
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

impl<T: Real> Augmentation<T> for RandomResizedCrop {
    fn apply(&self, batch: &Var<T>, rng: &mut AugRng) -> Result<AugResult<T>> {
        check_range("scale", self.scale)?;
        check_range("ratio", self.ratio)?;
        if self.ratio.0 <= 0.0 || self.scale.0 <= 0.0 || self.scale.1 > 1.0 {
            return param_err("crop scale must lie in (0, 1] and ratios must be positive");
        }
        let (oh, ow) = self.size;
        if oh < 2 || ow < 2 {
            return param_err(format!("crop size must be at least 2×2, got {oh}×{ow}"));
        }
        let (_, _, h, w) = batch.value().dims4()?;
        per_sample(batch, rng, |x, s| {
            let area = uniform(s, self.scale) * ((h - 1) * (w - 1)) as f64;
            let ratio = uniform(s, (self.ratio.0.ln(), self.ratio.1.ln())).exp();
            let width = (area * ratio).sqrt().clamp(1.0, (w - 1) as f64);
            let height = (area / ratio).sqrt().clamp(1.0, (h - 1) as f64);
            let x0 = s.random::<f64>() * ((w - 1) as f64 - width);
            let y0 = s.random::<f64>() * ((h - 1) as f64 - height);
            let src = [[x0, y0], [x0 + width, y0], [x0 + width, y0 + height], [x0, y0 + height]];
            let (ox, oy) = ((ow - 1) as f64, (oh - 1) as f64);
            let dst = [[0.0, 0.0], [ox, 0.0], [ox, oy], [0.0, oy]];
            let m = get_perspective_transform(&src, &dst)?;
            let out = warp_perspective_const(x, &[m], (oh, ow))?;
            Ok((out, m, AugParams::ResizedCrop { x0, y0, width, height }))
        })
    }
}

/// Applies augmentations in order; the reported transform is the product
/// of the per-op transforms with the latest leftmost.
pub struct Sequential<T: Real> {
    ops: Vec<Box<dyn Augmentation<T>>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(ops: Vec<Box<dyn Augmentation<T>>>) -> Result<Self> {
        if ops.is_empty() {
            return param_err("a chain needs at least one augmentation");
        }
        Ok(Self { ops })
    }
}

impl<T: Real> Augmentation<T> for Sequential<T> {
    fn apply(&self, batch: &Var<T>, rng: &mut AugRng) -> Result<AugResult<T>> {
        let (n, _, _, _) = batch.value().dims4()?;
        let mut output = batch.clone();
        let mut total = vec![Matrix3::identity(); n];
        let mut params = vec![Vec::new(); n];
        for op in &self.ops {
            let r = op.apply(&output, rng)?;
            for (i, t) in total.iter_mut().enumerate() {
                *t = r.matrix(i)? * *t;
            }
            for (acc, p) in params.iter_mut().zip(r.params) {
                acc.push(p);
            }
            output = r.output;
        }
        Ok(AugResult { output, transform: mat3_to_tensor(&total), params: params.into_iter().map(AugParams::Chain).collect() })
    }
}
