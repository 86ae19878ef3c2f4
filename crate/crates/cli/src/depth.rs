//! Multi-view depth estimation by photometric gradient descent.

use gradvision::geometry::{depth_warp, resize, PinholeCamera};
use gradvision::losses::multiview_photo_loss;
use gradvision::{Error, Result, Tape, Tensor, Var};
use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{check_finite, RunConfig, Trace};
use crate::optim::{Optimizer, OptimizerKind};
use crate::synth::Texture;

pub const MOMENTUM: f64 = 0.9;
/// Depth values are kept at or above this after every step.
pub const MIN_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct View {
    /// `1×C×H×W`
    pub image: Tensor<f64>,
    pub camera: PinholeCamera,
}

#[derive(Debug, Clone)]
pub struct DepthEstimate {
    /// `1×1×H×W` reference depth.
    pub depth: Tensor<f64>,
    /// Mean absolute photometric error per pixel at the end of each level,
    /// coarsest first (`1×1×H×W`).
    pub error_maps: Vec<Tensor<f64>>,
    pub trace: Trace,
    pub warnings: Vec<String>,
}

fn level_size(h: usize, w: usize, level: usize) -> (usize, usize) {
    let f = 1usize << level;
    (h.div_ceil(f).max(2), w.div_ceil(f).max(2))
}

fn upsample(t: &Tensor<f64>, size: (usize, usize)) -> Result<Tensor<f64>> {
    Ok(resize(&Tape::new().constant(t.clone()), size)?.value().clone())
}

/// Reference depth from calibrated views; `views[reference]` is the
/// reference and every other view is warped onto it.
///
/// Depth starts uniform-random in `(0, 1]`. Level `l` optimizes a depth map
/// at `1/2^l` resolution, bilinearly upsampled to full size for the loss,
/// with SGD and momentum; each level starts from the previous one. The loss
/// is the multi-view photometric objective averaged over source views.
pub fn estimate_depth(views: &[View], reference: usize, cfg: &RunConfig) -> Result<DepthEstimate> {
    cfg.validate()?;
    if views.len() < 2 {
        return Err(Error::Parameter(format!("depth estimation needs at least 2 views, got {}", views.len())));
    }
    if reference >= views.len() {
        return Err(Error::Parameter(format!("reference index {reference} out of range")));
    }
    let ref_view = &views[reference];
    let (_, c, h, w) = ref_view.image.dims4()?;
    for v in views {
        if v.image.shape() != ref_view.image.shape() {
            return Err(Error::Shape(format!("view shapes differ: {:?} vs {:?}", v.image.shape(), ref_view.image.shape())));
        }
    }
    let mut warnings = Vec::new();
    let sources: Vec<&View> = views.iter().enumerate().filter(|(i, _)| *i != reference).map(|(_, v)| v).collect();
    if sources.iter().all(|v| (v.camera.extrinsics - ref_view.camera.extrinsics).abs().max() < 1e-12) {
        warnings.push("all views share the reference pose; the photometric loss does not depend on depth".to_string());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let levels = cfg.levels.min(usize::BITS as usize - 1);
    let (ch, cw) = level_size(h, w, levels - 1);
    let mut depth = Tensor::from_fn(&[1, 1, ch, cw], |_| 1.0 - rng.random::<f64>());
    let mut trace = Trace::default();
    let mut error_maps = Vec::new();
    for level in (0..levels).rev() {
        let size = level_size(h, w, level);
        if depth.shape()[2..] != [size.0, size.1] {
            depth = upsample(&depth, size)?;
        }
        let mut params = vec![depth];
        let mut opt = Optimizer::new(OptimizerKind::sgd_momentum(MOMENTUM), cfg.lr)?;
        let mut last_err = None;
        for it in 0..cfg.iters {
            let tape = Tape::new();
            let d = tape.leaf(params[0].clone());
            let full = if size == (h, w) { d.clone() } else { resize(&d, (h, w))? };
            let reference_img = tape.constant(ref_view.image.clone());
            let mut total: Option<Var<f64>> = None;
            let mut err = Tensor::zeros(&[1, 1, h, w]);
            for src in &sources {
                let warped = depth_warp(&tape.constant(src.image.clone()), &full, &src.camera, &ref_view.camera)?;
                let l = multiview_photo_loss(&reference_img, &warped, &full, cfg.alpha, cfg.lambda)?;
                let diff = warped.value().zip_map(reference_img.value(), |a, b| (a - b).abs())?;
                err = Tensor::from_fn(&[1, 1, h, w], |i| {
                    err.at(i) + (0..c).map(|ch| diff.at(&[0, ch, i[2], i[3]])).sum::<f64>() / (c * sources.len()) as f64
                });
                total = Some(match total {
                    None => l,
                    Some(t) => t.add(&l)?,
                });
            }
            let loss = total.expect("at least one source").mul_scalar(1.0 / sources.len() as f64);
            trace.push(level, check_finite(loss.item(), level, it)?);
            let grads = loss.backward()?;
            opt.step(&mut params, &[grads.wrt(&d)?])?;
            params[0] = params[0].map(|v| v.max(MIN_DEPTH));
            last_err = Some(err);
        }
        error_maps.push(last_err.expect("at least one iteration"));
        depth = params.pop().expect("one parameter");
    }
    if depth.shape()[2..] != [h, w] {
        depth = upsample(&depth, (h, w))?;
    }
    Ok(DepthEstimate { depth, error_maps, trace, warnings })
}

/// World→camera transform of a camera at `centre` looking down +Z.
pub fn translated_pose(centre: Vector3<f64>) -> Matrix4<f64> {
    Matrix4::new_translation(&-centre)
}

/// Views of a textured fronto-parallel plane at depth `z` from cameras at
/// the given x offsets; the first offset is the reference.
pub fn plane_scene(seed: u64, (h, w): (usize, usize), focal: f64, z: f64, offsets: &[f64]) -> Result<Vec<View>> {
    let tex = Texture::new(seed, 2.0 * w as f64, 2.0);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    // Texture units per world unit: one unit per reference pixel.
    let s = focal / z;
    let origin = w as f64;
    offsets
        .iter()
        .map(|&bx| {
            let camera = PinholeCamera::new((focal, focal, cx, cy), translated_pose(Vector3::new(bx, 0.0, 0.0)), (h, w))?;
            let image = tex.render(3, h, w, |u, v| {
                let x = bx + z * (u - cx) / focal;
                let y = z * (v - cy) / focal;
                (origin + x * s, origin + y * s)
            });
            Ok(View { image, camera })
        })
        .collect()
}
