//! `avatar-codec` command-line front end.
//!
//! Exit status: 0 on success, 2 for bad arguments or unreadable inputs, 3
//! when a stream fails to decode or its integrity checks.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use avatar_codec::avatar_model::{load_pose_sequence, save_pose_sequence, SkinnedTemplate};
use avatar_codec::container::{
    decode_all, encode, parse_resolution, rd_csv, rd_sweep, render_structural, report_composition,
    AvatarSource, ContainerReader, EncodeConfig,
};
use avatar_codec::generator::GeneratorWeights;
use avatar_codec::loss::{fit_generator, FitConfig, FitScene, LossWeights, ParamSet};
use avatar_codec::pipeline;
use avatar_codec::pose_space::{drive_pose, fit_poses, DEFAULT_K};
use avatar_codec::renderer::Camera;
use avatar_codec::synthetic::{surface_prior, toy_target, SceneConfig, SyntheticScene};
use avatar_codec::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "avatar-codec", version, about = "Layered codec for pose-driven Gaussian avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic avatar (template, poses, weights, camera) to a directory
    Synth {
        #[arg(short, long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        /// Pose-map resolution, HxW
        #[arg(long, default_value = "32x32", value_parser = resolution)]
        map_res: (usize, usize),
        #[arg(long, default_value_t = 128)]
        image_size: usize,
    },
    /// Compress an avatar into a layered container
    Encode {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Weight bit width Q
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(2..=8))]
        bits: u8,
        /// Store full-precision weights instead
        #[arg(long)]
        raw: bool,
        /// Pose-map quantization step, e.g. 1/255 or 0.004
        #[arg(long, default_value = "1/255", value_parser = step)]
        step: f32,
        #[arg(long, default_value = "32x32", value_parser = resolution)]
        map_res: (usize, usize),
        #[arg(long)]
        no_smplx: bool,
        #[arg(long)]
        no_posemaps: bool,
    },
    /// Decode every layer back to plain files
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        out_dir: PathBuf,
    },
    /// Render the frames of a container to PPM images
    Render {
        input: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(short, long)]
        out_dir: PathBuf,
        /// Read only the structural layer and render the rest pose
        #[arg(long)]
        structural_only: bool,
    },
    /// Drive the avatar with new poses, pulled into the stream's pose space
    Drive {
        input: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(short, long)]
        out_dir: PathBuf,
        /// Pose-space components; defaults to one fewer than the frame count
        #[arg(long)]
        components: Option<usize>,
        /// Clipping band in standard deviations
        #[arg(long, default_value_t = DEFAULT_K)]
        k: f64,
    },
    /// Fit generator weights to a synthetic target
    Fit {
        #[arg(long, value_enum, default_value_t = FitTarget::Toy)]
        target: FitTarget,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        /// Iterations over which the facial weight ramps up; 0 means all of them
        #[arg(long, default_value_t = 0)]
        total_iter: u64,
        #[arg(long, default_value_t = 1.0)]
        w_l1: f64,
        #[arg(long, default_value_t = 1.0)]
        w_mask: f64,
        #[arg(long, default_value_t = 0.1)]
        w_lpips: f64,
        #[arg(long, default_value_t = 0.005)]
        w_offset: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb every layer instead of only the output layers
        #[arg(long)]
        all_layers: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Per-layer byte shares as CSV
    Report { input: PathBuf },
    /// Rate-distortion sweep over bit widths and pose-map steps, as CSV
    RdSweep {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        #[arg(long, default_value = "32x32", value_parser = resolution)]
        map_res: (usize, usize),
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8")]
        bits: Vec<u8>,
        #[arg(long, value_delimiter = ',', default_value = "1/255,2/255,4/255,8/255", value_parser = step)]
        steps: Vec<f32>,
        /// Worker threads; 0 uses every core
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FitTarget {
    /// Two-Gaussian ball-and-head image
    Toy,
    /// Renders of the default synthetic scene
    Scene,
}

fn resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_resolution(s).ok_or_else(|| format!("expected HxW, got `{s}`"))
}

fn step(s: &str) -> std::result::Result<f32, String> {
    let v = match s.split_once('/') {
        Some((n, d)) => {
            let n: f32 = n.trim().parse().map_err(|_| format!("bad numerator in `{s}`"))?;
            let d: f32 = d.trim().parse().map_err(|_| format!("bad denominator in `{s}`"))?;
            n / d
        }
        None => s.trim().parse().map_err(|_| format!("bad step `{s}`"))?,
    };
    avatar_codec::posemap_codec::check_step(v).map_err(|e| e.to_string())?;
    Ok(v)
}

fn scene(seed: u64, frames: usize, map_res: (usize, usize), image_size: usize) -> Result<SyntheticScene> {
    SyntheticScene::new(SceneConfig {
        seed,
        frames,
        map_resolution: map_res,
        image_size,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:04}.ppm"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out_dir,
            seed,
            frames,
            map_res,
            image_size,
        } => {
            let s = scene(seed, frames, map_res, image_size)?;
            fs::create_dir_all(&out_dir)?;
            s.template.save(out_dir.join("template.hgtm"))?;
            save_pose_sequence(&s.poses, out_dir.join("poses.hgps"))?;
            s.weights.save(out_dir.join("weights.hgwt"))?;
            s.camera.save(out_dir.join("camera.txt"))?;
            eprintln!("wrote {} frames to {}", frames, out_dir.display());
        }
        Command::Encode {
            template,
            poses,
            weights,
            camera,
            output,
            bits,
            raw,
            step,
            map_res,
            no_smplx,
            no_posemaps,
        } => {
            let template = SkinnedTemplate::load(template)?;
            let poses = load_pose_sequence(poses)?;
            let weights = GeneratorWeights::load(weights)?;
            let camera = Camera::load(camera)?;
            let maps = if no_posemaps {
                Vec::new()
            } else {
                poses
                    .iter()
                    .map(|p| pipeline::pose_maps_for(&template, p, map_res))
                    .collect::<Result<Vec<_>>>()?
            };
            let cfg = EncodeConfig {
                bit_width: (!raw).then_some(bits),
                q: step,
                smplx: !no_smplx,
                pose_maps: !no_posemaps,
            };
            let src = AvatarSource {
                weights: &weights,
                template: &template,
                camera: &camera,
                poses: &poses,
                pose_maps: &maps,
            };
            let bytes = encode(&src, &cfg)?;
            fs::write(&output, &bytes)?;
            eprintln!("{}: {} bytes, {} frames", output.display(), bytes.len(), poses.len());
        }
        Command::Decode { input, out_dir } => {
            let d = decode_all(&read(&input)?)?;
            fs::create_dir_all(&out_dir)?;
            d.weights.save(out_dir.join("weights.hgwt"))?;
            d.info.camera.save(out_dir.join("camera.txt"))?;
            if !d.poses.is_empty() {
                save_pose_sequence(&d.poses, out_dir.join("poses.hgps"))?;
            }
            eprintln!(
                "decoded {} poses, {} pose-map frames, {} weights",
                d.poses.len(),
                d.pose_maps.len(),
                d.weights.num_params()
            );
        }
        Command::Render {
            input,
            template,
            out_dir,
            structural_only,
        } => {
            let template = SkinnedTemplate::load(template)?;
            fs::create_dir_all(&out_dir)?;
            if structural_only {
                let file = fs::File::open(&input).map_err(|e| Error::InvalidArgument(format!("{}: {e}", input.display())))?;
                let mut reader = ContainerReader::open(BufReader::new(file))?;
                render_structural(&mut reader, &template)?
                    .color
                    .write_ppm(out_dir.join("canonical.ppm"))?;
                return Ok(());
            }
            let d = decode_all(&read(&input)?)?;
            d.info.check_template(&template)?;
            if d.poses.is_empty() {
                pipeline::render_canonical(&d.weights, &template, &d.info.camera, d.info.map_resolution)?
                    .color
                    .write_ppm(out_dir.join("canonical.ppm"))?;
                return Ok(());
            }
            for (i, pose) in d.poses.iter().enumerate() {
                // Transmitted pose maps when present, regenerated otherwise.
                let maps = match d.pose_maps.get(i) {
                    Some(m) => m.clone(),
                    None => pipeline::pose_maps_for(&template, pose, d.info.map_resolution)?,
                };
                pipeline::render_frame(&d.weights, &template, &maps, pose, &d.info.camera)?
                    .color
                    .write_ppm(frame_path(&out_dir, i))?;
            }
        }
        Command::Drive {
            input,
            template,
            poses,
            out_dir,
            components,
            k,
        } => {
            let template = SkinnedTemplate::load(template)?;
            let novel = load_pose_sequence(poses)?;
            let d = decode_all(&read(&input)?)?;
            d.info.check_template(&template)?;
            if d.poses.len() < 2 {
                return Err(Error::InvalidArgument("drive needs a stream with at least two poses".into()));
            }
            let basis = fit_poses(&d.poses, components.unwrap_or(d.poses.len() - 1))?.with_k(k)?;
            fs::create_dir_all(&out_dir)?;
            for (i, pose) in novel.iter().enumerate() {
                let pose = drive_pose(&basis, pose)?;
                let maps = pipeline::pose_maps_for(&template, &pose, d.info.map_resolution)?;
                pipeline::render_frame(&d.weights, &template, &maps, &pose, &d.info.camera)?
                    .color
                    .write_ppm(frame_path(&out_dir, i))?;
            }
        }
        Command::Fit {
            target,
            iterations,
            alpha,
            total_iter,
            w_l1,
            w_mask,
            w_lpips,
            w_offset,
            seed,
            all_layers,
            output,
        } => {
            let (fit_scene, init) = match target {
                FitTarget::Toy => {
                    let toy = toy_target((16, 16), 32)?;
                    let prior = surface_prior(toy.template.bbox(), toy.maps.resolution());
                    (FitScene::from(toy), GeneratorWeights::seeded(100 + seed, &prior))
                }
                FitTarget::Scene => {
                    let s = SyntheticScene::new(SceneConfig::default())?;
                    let prior = surface_prior(s.template.bbox(), s.config.map_resolution);
                    (FitScene::from_synthetic(&s)?, GeneratorWeights::seeded(100 + seed, &prior))
                }
            };
            let cfg = FitConfig {
                iterations,
                alpha,
                total_iter,
                weights: LossWeights {
                    w_l1,
                    w_mask,
                    w_lpips,
                    w_offset,
                },
                seed,
                params: if all_layers { ParamSet::All } else { ParamSet::Head },
                ..FitConfig::default()
            };
            let r = fit_generator(&fit_scene, &init, &cfg)?;
            r.weights.save(&output)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "stage,loss,l1,mask,perceptual_base,perceptual_face,offset,face_l1")?;
            for (stage, loss, t) in [("initial", r.initial_loss, r.initial), ("final", r.final_loss, r.last)] {
                writeln!(
                    out,
                    "{stage},{loss:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    t.l1, t.mask, t.perceptual_base, t.perceptual_face, t.offset, t.face_l1
                )?;
            }
        }
        Command::Report { input } => {
            print!("{}", report_composition(&read(&input)?)?.to_csv());
        }
        Command::RdSweep {
            seed,
            frames,
            map_res,
            image_size,
            bits,
            steps,
            threads,
        } => {
            let s = scene(seed, frames, map_res, image_size)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let points = pool.install(|| rd_sweep(&s, &bits, &steps))?;
            print!("{}", rd_csv(&points));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_decode() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
