//! Adversarial optimization of an image pair so that the feature pipeline
//! reports correspondences consistent with a chosen homography.

use gradvision::features::{
    assign_orientations, describe, detect, detect_and_describe, extract_keypoint_patches, keypoint_positions, match_mnn,
    ransac_homography, scale_space, DetectorConfig, Keypoint, DESCRIPTOR_DIM,
};
use gradvision::geometry::{mat3_to_tensor, transform_points2};
use gradvision::{Error, Result, Tape, Tensor, Var};
use nalgebra::Matrix3;

use crate::config::{check_finite, RunConfig, Trace};
use crate::optim::{Optimizer, OptimizerKind};

/// Keypoints are re-detected every this many iterations.
pub const REFRESH: usize = 10;
pub const MAX_KEYPOINTS: usize = 500;
/// RANSAC inlier threshold and the tolerance for agreeing with the target
/// homography, in pixels.
pub const MATCH_TOLERANCE: f64 = 2.0;
pub const RANSAC_ITERS: usize = 1000;

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub img_a: Tensor<f64>,
    pub img_b: Tensor<f64>,
    pub trace: Trace,
    /// `(iteration, verified matches)` at every keypoint refresh and at the end.
    pub matches: Vec<(usize, usize)>,
}

impl AttackResult {
    pub fn initial_matches(&self) -> usize {
        self.matches.first().map_or(0, |m| m.1)
    }

    pub fn final_matches(&self) -> usize {
        self.matches.last().map_or(0, |m| m.1)
    }
}

fn gray(t: &Tensor<f64>) -> Result<()> {
    let (n, c, _, _) = t.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::Shape(format!("attack images must be 1×1×H×W, got {:?}", t.shape())));
    }
    Ok(())
}

/// Mutual nearest-neighbour matches between `a` and `b` that survive RANSAC
/// and also lie within [`MATCH_TOLERANCE`] of `h_target` (mapping `a` to `b`).
pub fn verified_matches(a: &Tensor<f64>, b: &Tensor<f64>, h_target: &Matrix3<f64>, seed: u64) -> Result<usize> {
    let tape = Tape::new();
    let (ka, da) = detect_and_describe(&tape.constant(a.clone()), MAX_KEYPOINTS)?;
    let (kb, db) = detect_and_describe(&tape.constant(b.clone()), MAX_KEYPOINTS)?;
    let (Some(da), Some(db)) = (da, db) else {
        return Ok(0);
    };
    let pairs = match_mnn(da.value().data(), db.value().data(), DESCRIPTOR_DIM, None)?;
    let src: Vec<[f64; 2]> = pairs.iter().map(|m| [ka[m.ia].x, ka[m.ia].y]).collect();
    let dst: Vec<[f64; 2]> = pairs.iter().map(|m| [kb[m.ib].x, kb[m.ib].y]).collect();
    let mask = match ransac_homography(&src, &dst, MATCH_TOLERANCE, RANSAC_ITERS, seed) {
        Ok((_, mask)) => mask,
        Err(Error::Estimation(_) | Error::NoConsensus { .. }) => return Ok(0),
        Err(e) => return Err(e),
    };
    let projected = transform_points2(h_target, &src)?;
    Ok(mask
        .iter()
        .zip(projected.iter().zip(&dst))
        .filter(|(&m, (p, d))| m && (p[0] - d[0]).hypot(p[1] - d[1]) <= MATCH_TOLERANCE)
        .count())
}

fn keypoints(img: &Tensor<f64>, cfg: &DetectorConfig) -> Result<Vec<Keypoint>> {
    let ss = scale_space(&Tape::new().constant(img.clone()), cfg)?;
    let mut kps = detect(&ss, cfg, MAX_KEYPOINTS)?;
    if kps.is_empty() {
        return Err(Error::Estimation("no keypoints detected".into()));
    }
    let patches = extract_keypoint_patches(&ss, &kps, cfg.base_sigma)?;
    assign_orientations(patches.value(), &mut kps)?;
    Ok(kps)
}

/// For each keypoint of `a`, the keypoint of `b` nearest to its image under `h`.
fn pair_up(a: &[Keypoint], b: &[Keypoint], h: &Matrix3<f64>) -> Result<Vec<usize>> {
    let pa: Vec<[f64; 2]> = a.iter().map(|k| [k.x, k.y]).collect();
    Ok(transform_points2(h, &pa)?
        .iter()
        .map(|p| {
            let d = |k: &Keypoint| (k.x - p[0]).powi(2) + (k.y - p[1]).powi(2);
            (0..b.len()).min_by(|&i, &j| d(&b[i]).total_cmp(&d(&b[j]))).expect("b is non-empty")
        })
        .collect())
}

/// Maps `M×2` points through a fixed homography.
fn project(p: &Var<f64>, h: &Matrix3<f64>) -> Result<Var<f64>> {
    let m = p.shape()[0];
    let ones = p.constant_like(Tensor::ones(&[m, 1]));
    let hom = Var::concat(&[p.clone(), ones], 1)?;
    let ht = p.constant_like(mat3_to_tensor::<f64>(&[h.transpose()]).reshape(&[3, 3])?);
    let q = hom.matmul(&ht)?;
    q.slice(1, 0, 2, 1)?.div(&q.slice(1, 2, 3, 1)?.broadcast_to(&[m, 2])?)
}

/// Pairwise Euclidean distances between the rows of `a` (`M×D`) and `b` (`N×D`).
fn distance_matrix(a: &Var<f64>, b: &Var<f64>) -> Result<Var<f64>> {
    let (m, n) = (a.shape()[0], b.shape()[0]);
    let aa = a.square().sum_axes(&[1], true)?.broadcast_to(&[m, n])?;
    let bb = b.square().sum_axes(&[1], true)?.reshape(&[1, n])?.broadcast_to(&[m, n])?;
    let ab = a.matmul(&b.permute(&[1, 0])?)?;
    Ok(aa.add(&bb)?.sub(&ab.mul_scalar(2.0))?.clamp(Some(1e-12), None).sqrt())
}

/// The three attack terms for keypoint pairs `(kps_a[i], kps_b[pairs[i]])`.
/// Returns `(localization, descriptor, regularization)`.
#[allow(clippy::too_many_arguments)]
pub fn attack_terms(
    a: &Var<f64>,
    b: &Var<f64>,
    init_a: &Tensor<f64>,
    init_b: &Tensor<f64>,
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    pairs: &[usize],
    h_target: &Matrix3<f64>,
    cfg: &DetectorConfig,
) -> Result<(Var<f64>, Var<f64>, Var<f64>)> {
    let ssa = scale_space(a, cfg)?;
    let ssb = scale_space(b, cfg)?;
    let p1 = keypoint_positions(&ssa, kps_a)?;
    let p2 = keypoint_positions(&ssb, kps_b)?.index_select(0, pairs)?;
    // Offsets are measured in normalized coordinates, where the image spans [-1, 1].
    let (_, _, h, w) = init_b.dims4()?;
    let norm = Tensor::from_fn(&[pairs.len(), 2], |i| if i[1] == 0 { 2.0 / (w - 1).max(1) as f64 } else { 2.0 / (h - 1).max(1) as f64 });
    let loc = project(&p1, h_target)?.sub(&p2)?.mul_const(&norm)?.square().sum_axes(&[1], false)?.mean();

    let d1 = describe(&ssa, kps_a, cfg.base_sigma)?;
    let d2 = describe(&ssb, kps_b, cfg.base_sigma)?.index_select(0, pairs)?;
    let m = pairs.len();
    let dist = distance_matrix(&d1, &d2)?;
    let positive = d1.sub(&d2)?.square().sum_axes(&[1], false)?.clamp(Some(1e-12), None).sqrt();
    // Columns paired with the same keypoint of `b` are not negatives.
    let mask = Tensor::from_fn(&[m, m], |i| if pairs[i[0]] == pairs[i[1]] { 1e6 } else { 0.0 });
    let negative = dist.add_const(&mask)?.min_axis(1, false)?;
    let desc = positive.sub(&negative)?.add_scalar(1.0).mean();

    let n = (init_a.numel() + init_b.numel()) as f64;
    let ra = a.add_const(&init_a.map(|v| -v))?.square().sum();
    let rb = b.add_const(&init_b.map(|v| -v))?.square().sum();
    let reg = ra.add(&rb)?.mul_scalar(1.0 / n);
    Ok((loc, desc, reg))
}

/// Optimizes both images with Adam on `loc + alpha·desc + beta·reg`.
/// `h_target` maps pixel coordinates of `img_a` to `img_b`. Pixel values
/// are kept in `[0, 1]`.
pub fn attack(img_a: &Tensor<f64>, img_b: &Tensor<f64>, h_target: &Matrix3<f64>, cfg: &RunConfig) -> Result<AttackResult> {
    // Zero iterations is allowed here and returns the inputs unchanged.
    RunConfig { iters: cfg.iters.max(1), ..cfg.clone() }.validate()?;
    gray(img_a)?;
    gray(img_b)?;
    let det = DetectorConfig::default();
    let mut params = vec![img_a.clone(), img_b.clone()];
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr)?;
    let mut trace = Trace::default();
    let mut matches = Vec::new();
    let mut state: Option<(Vec<Keypoint>, Vec<Keypoint>, Vec<usize>)> = None;
    for it in 0..cfg.iters {
        if it % REFRESH == 0 || state.is_none() {
            let ka = keypoints(&params[0], &det)?;
            let kb = keypoints(&params[1], &det)?;
            let pairs = pair_up(&ka, &kb, h_target)?;
            matches.push((it, verified_matches(&params[0], &params[1], h_target, cfg.seed)?));
            state = Some((ka, kb, pairs));
        }
        let (ka, kb, pairs) = state.as_ref().expect("refreshed above");
        let tape = Tape::new();
        let a = tape.leaf(params[0].clone());
        let b = tape.leaf(params[1].clone());
        let (loc, desc, reg) = attack_terms(&a, &b, img_a, img_b, ka, kb, pairs, h_target, &det)?;
        let loss = loc.add(&desc.mul_scalar(cfg.alpha))?.add(&reg.mul_scalar(cfg.beta))?;
        trace.push(0, check_finite(loss.item(), 0, it)?);
        let grads = loss.backward()?;
        let (ga, gb) = (grads.wrt(&a)?.clone(), grads.wrt(&b)?.clone());
        opt.step(&mut params, &[&ga, &gb])?;
        for p in &mut params {
            *p = p.map(|v| v.clamp(0.0, 1.0));
        }
    }
    matches.push((cfg.iters, verified_matches(&params[0], &params[1], h_target, cfg.seed)?));
    let img_b = params.pop().expect("two images");
    let img_a = params.pop().expect("two images");
    Ok(AttackResult { img_a, img_b, trace, matches })
}
