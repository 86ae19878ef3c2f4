//! Command-line front end for the demos.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gradvision::color::rgb_to_grayscale;
use gradvision::geometry::PinholeCamera;
use gradvision::io::{read_image, write_image, write_image16};
use gradvision::{Error, Result, Tape, Tensor};

use crate::attack::attack;
use crate::bench::{bench, write_csv, BenchOp};
use crate::config::{format_matrix3, parse_matrix3, RunConfig};
use crate::depth::{estimate_depth, View};
use crate::register::register;

#[derive(Debug, Parser)]
#[command(name = "gradvision", version, about = "Gradient-descent vision demos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Optimization settings; unset values take the subcommand's default.
#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pyramid levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Iterations per level.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// depth: SSIM weight in the photometric term; attack: descriptor weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// depth: smoothness weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// attack: pixel regularization weight.
    #[arg(long)]
    pub beta: Option<f64>,
}

impl Common {
    fn config(&self, levels: usize, iters: usize, lr: f64, alpha: f64, lambda: f64, beta: f64) -> RunConfig {
        RunConfig {
            seed: self.seed,
            levels: self.levels.unwrap_or(levels),
            iters: self.iters.unwrap_or(iters),
            lr: self.lr.unwrap_or(lr),
            alpha: self.alpha.unwrap_or(alpha),
            lambda: self.lambda.unwrap_or(lambda),
            beta: self.beta.unwrap_or(beta),
            out: Some(self.out.clone()),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the homography taking SRC onto DST.
    ///
    /// Writes trace.csv, homography.txt and warped.ppm (or .pgm).
    Register {
        src: PathBuf,
        dst: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the reference depth map from calibrated views.
    ///
    /// Writes trace.csv, depth.pgm (16-bit, scaled by its maximum),
    /// depth_range.txt and error_level<L>.pgm per level.
    Depth {
        /// Images, all the same size.
        #[arg(long, num_args = 2.., required = true)]
        images: Vec<PathBuf>,
        /// Camera files in the same order as the images.
        #[arg(long, num_args = 2.., required = true)]
        cameras: Vec<PathBuf>,
        /// Index of the reference view.
        #[arg(long, default_value_t = 0)]
        reference: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Perturb two images so their features match under a target homography.
    ///
    /// Writes trace.csv, matches.csv, a.pgm and b.pgm.
    Attack {
        image_a: PathBuf,
        image_b: PathBuf,
        /// Text file with the 3×3 homography from A to B.
        #[arg(long)]
        homography: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Time an operator over batch sizes; writes bench.csv.
    Bench {
        #[arg(long, default_value = "sobel")]
        op: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn gray(img: Tensor<f64>) -> Result<Tensor<f64>> {
    match img.dims4()?.1 {
        1 => Ok(img),
        3 => Ok(rgb_to_grayscale(&Tape::new().constant(img))?.value().clone()),
        c => Err(Error::Shape(format!("expected 1 or 3 channels, got {c}"))),
    }
}

fn image_name(stem: &str, img: &Tensor<f64>) -> String {
    let ext = if img.shape()[1] == 1 { "pgm" } else { "ppm" };
    format!("{stem}.{ext}")
}

/// Runs a parsed command and returns the lines to print.
pub fn run(cli: Cli) -> Result<Vec<String>> {
    match cli.command {
        Command::Register { src, dst, common } => {
            let cfg = common.config(4, 200, 1e-3, 0.0, 0.0, 0.0);
            let (a, b) = (read_image::<f64>(&src)?, read_image::<f64>(&dst)?);
            prepare(&common.out)?;
            let r = register(&a, &b, &cfg)?;
            r.trace.save(&common.out.join("trace.csv"))?;
            fs::write(common.out.join("homography.txt"), format_matrix3(&r.homography))?;
            let warped = r.warped.last().expect("at least one level");
            write_image(common.out.join(image_name("warped", warped)), warped)?;
            Ok(vec![
                format!("final loss {:.6}", r.trace.last().unwrap_or(f64::NAN)),
                format_matrix3(&r.homography).trim_end().to_string(),
            ])
        }
        Command::Depth { images, cameras, reference, common } => {
            if images.len() != cameras.len() {
                return Err(Error::Parameter(format!("{} images but {} cameras", images.len(), cameras.len())));
            }
            let cfg = common.config(7, 500, 10.0, 0.85, 0.1, 0.0);
            let views = images
                .iter()
                .zip(&cameras)
                .map(|(ip, cp)| {
                    let image = read_image::<f64>(ip)?;
                    let (_, _, h, w) = image.dims4()?;
                    Ok(View { image, camera: PinholeCamera::read(cp, (h, w))? })
                })
                .collect::<Result<Vec<_>>>()?;
            prepare(&common.out)?;
            let r = estimate_depth(&views, reference, &cfg)?;
            r.trace.save(&common.out.join("trace.csv"))?;
            let (lo, hi) = (r.depth.min_value(), r.depth.max_value());
            write_image16(common.out.join("depth.pgm"), &r.depth.map(|v| v / hi))?;
            fs::write(common.out.join("depth_range.txt"), format!("{lo} {hi}\n"))?;
            for (i, e) in r.error_maps.iter().enumerate() {
                let level = r.error_maps.len() - 1 - i;
                write_image(common.out.join(format!("error_level{level}.pgm")), e)?;
            }
            let mut lines: Vec<String> = r.warnings.iter().map(|w| format!("warning: {w}")).collect();
            lines.push(format!(
                "loss {:.6} -> {:.6}, depth in [{lo:.4}, {hi:.4}]",
                r.trace.first().unwrap_or(f64::NAN),
                r.trace.last().unwrap_or(f64::NAN)
            ));
            Ok(lines)
        }
        Command::Attack { image_a, image_b, homography, common } => {
            let cfg = common.config(1, 300, 0.003, 1.0, 0.0, 10.0);
            let a = gray(read_image::<f64>(&image_a)?)?;
            let b = gray(read_image::<f64>(&image_b)?)?;
            let h = parse_matrix3(&fs::read_to_string(&homography)?)?;
            prepare(&common.out)?;
            let r = attack(&a, &b, &h, &cfg)?;
            r.trace.save(&common.out.join("trace.csv"))?;
            let mut csv = String::from("iteration,verified_matches\n");
            for (it, n) in &r.matches {
                csv.push_str(&format!("{it},{n}\n"));
            }
            fs::write(common.out.join("matches.csv"), csv)?;
            write_image(common.out.join("a.pgm"), &r.img_a)?;
            write_image(common.out.join("b.pgm"), &r.img_b)?;
            Ok(vec![format!("verified matches {} -> {}", r.initial_matches(), r.final_matches())])
        }
        Command::Bench { op, batches, size, repeats, out } => {
            let op: BenchOp = op.parse()?;
            if batches.is_empty() || batches.contains(&0) || size == 0 {
                return Err(Error::Parameter("batch sizes and image size must be positive".into()));
            }
            prepare(&out)?;
            let rows = bench(op, &batches, size, repeats)?;
            let mut buf = Vec::new();
            write_csv(&mut buf, &rows)?;
            fs::write(out.join("bench.csv"), &buf)?;
            Ok(String::from_utf8_lossy(&buf).lines().map(str::to_string).collect())
        }
    }
}

