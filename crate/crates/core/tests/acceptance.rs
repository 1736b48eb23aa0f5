//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every check builds its own oracle. A panic inside a check counts as a
//! failure of that criterion only.

use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use avatar_codec::avatar_model::{
    axis_angle_to_matrix, blend_point, pose_template, Bbox, Gaussian3D, JointTransform, PoseMapPair, SkinnedTemplate,
    SmplxPose,
};
use avatar_codec::container::{
    decode_all, demux, encode, mux, rd_sweep, render_structural, report_composition, Codec, ContainerReader,
    EncodeConfig, Layer, Section, TracingReader,
};
use avatar_codec::entropy::{build_table, empirical_entropy, histogram, TABLE_BYTES};
use avatar_codec::generator::GeneratorWeights;
use avatar_codec::loss::{facial_weight_map, fit_generator, FacialWeightConfig, FitConfig, FitScene};
use avatar_codec::pipeline;
use avatar_codec::pose_space::{fit_pca, project_clip};
use avatar_codec::posemap_codec::{decode_posemaps, encode_posemaps, encode_posemaps_with, ModePolicy, PoseMapStream};
use avatar_codec::renderer::{deform_with, psnr, rasterize, Camera, Projection};
use avatar_codec::smplx_codec::{decode_smplx, encode_smplx, SmplxStream};
use avatar_codec::synthetic::{surface_prior, toy_target, SceneConfig, SyntheticScene};
use avatar_codec::weight_quant::{code_range, search_step, QuantConfig};
use avatar_codec::{Error, Mask};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T>(r: avatar_codec::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within(elapsed: Duration, budget: Duration, what: &str) -> Result<(), String> {
    if elapsed < budget {
        Ok(())
    } else {
        Err(format!("{what} took {elapsed:.2?}, budget {budget:?}"))
    }
}

// 1 ────────────────────────────────────────────────────────────────────────

fn losslessness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let special = [
        f32::from_bits(0x7fc0_1234),
        f32::from_bits(0xffa0_0001),
        f32::from_bits(0x7f80_0001),
        -0.0,
        0.0,
        f32::INFINITY,
        f32::NEG_INFINITY,
        f32::from_bits(1),
        f32::MAX,
    ];
    let value = |rng: &mut ChaCha8Rng| match rng.gen_range(0..10) {
        0 => special[rng.gen_range(0..special.len())],
        1 => f32::from_bits(rng.gen()),
        _ => rng.gen_range(-3.2f32..3.2),
    };
    let frames: Vec<SmplxPose> = (0..1000u32)
        .map(|i| SmplxPose {
            theta: (0..165).map(|_| value(&mut rng)).collect(),
            beta: (0..10).map(|_| value(&mut rng)).collect(),
            psi: (0..10).map(|_| value(&mut rng)).collect(),
            frame_index: i,
        })
        .collect();
    let t = Instant::now();
    let bytes = ok(encode_smplx(&frames))?.to_bytes();
    let back = ok(decode_smplx(&ok(SmplxStream::from_bytes(&bytes))?))?;
    let elapsed = t.elapsed();
    ensure!(back.len() == frames.len(), "decoded {} frames", back.len());
    let bits = |p: &SmplxPose| p.to_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for (i, (a, b)) in frames.iter().zip(&back).enumerate() {
        ensure!(bits(a) == bits(b) && a.frame_index == b.frame_index, "frame {i} differs");
    }
    within(elapsed, Duration::from_secs(1), "round trip")?;
    Ok(format!("1000 frames bit-exact, {} bytes, {elapsed:.2?}", bytes.len()))
}

// 2 ────────────────────────────────────────────────────────────────────────

fn entropy_sanity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::INFINITY;
    for h in 0..50 {
        // Random alphabet size and a skewed random distribution over it.
        let symbols = rng.gen_range(1..=256usize);
        let skew: f64 = rng.gen_range(0.0..3.0);
        let probs: Vec<f64> = (0..symbols).map(|i| 1.0 / (1.0 + i as f64).powf(skew)).collect();
        let total: f64 = probs.iter().sum();
        let n = rng.gen_range(1..20_000usize);
        let data: Vec<u8> = (0..n)
            .map(|_| {
                let mut u = rng.gen::<f64>() * total;
                for (s, p) in probs.iter().enumerate() {
                    if u < *p {
                        return s as u8;
                    }
                    u -= p;
                }
                (symbols - 1) as u8
            })
            .collect();
        let counts = histogram(&data);
        let table = ok(build_table(&counts))?;
        let payload = ok(table.encode(&data))?;
        ensure!(ok(table.decode(&payload, n))? == data, "histogram {h}: round trip failed");
        // Independent entropy: count symbols directly.
        let mut freq = [0u64; 256];
        data.iter().for_each(|&b| freq[b as usize] += 1);
        let entropy: f64 = freq
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.log2()
            })
            .sum();
        ensure!((entropy - empirical_entropy(&counts)).abs() < 1e-9, "histogram {h}: entropy disagrees");
        let bound = n as f64 * (entropy + 1.0) + (TABLE_BYTES * 8) as f64;
        let bits = payload.bit_len() as f64;
        ensure!(bits <= bound, "histogram {h}: {bits} bits > bound {bound}");
        ensure!(bits + 1e-6 >= n as f64 * entropy, "histogram {h}: {bits} bits beat the entropy");
        worst = worst.min(bound - bits);
    }
    let n = 100_000;
    let uniform: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
    let table = ok(build_table(&histogram(&uniform)))?;
    let coded = ok(table.encode(&uniform))?.bytes().len();
    ensure!(coded + TABLE_BYTES >= n, "uniform data shrank to {coded} bytes");
    Ok(format!("50 histograms within n(H+1)+table (min slack {worst:.0} bits); uniform {n} B → {coded} B"))
}

// 3 ────────────────────────────────────────────────────────────────────────

fn oracle_mse(values: &[f32], step: f64, q: u8) -> f64 {
    let lo = -(1i64 << (q - 1)) as f64;
    let hi = ((1i64 << (q - 1)) - 1) as f64;
    values
        .iter()
        .map(|&w| {
            let w = w as f64;
            let c = (w / step).round().clamp(lo, hi);
            (w - c * step).powi(2)
        })
        .sum::<f64>()
        / values.len() as f64
}

fn grid_optimum(values: &[f32], q: u8) -> f64 {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    let base = max / ((1i64 << (q - 1)) - 1) as f64;
    (0..10_000)
        .map(|i| oracle_mse(values, base * (0.1 + 1.9 * i as f64 / 9_999.0), q))
        .fold(f64::INFINITY, f64::min)
}

fn quantizer_optimality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tensors = Vec::new();
    for _ in 0..100 {
        let n = (rng.gen_range(0.0f64..8.0).exp() as usize).clamp(1, 2_500);
        let kind = rng.gen_range(0..4);
        let scale = rng.gen_range(0.01f32..2.0);
        let v: Vec<f32> = (0..n)
            .map(|_| {
                let u: f32 = rng.gen_range(-1.0..1.0);
                match kind {
                    0 => u * scale,
                    1 => scale * u.signum() * -(1.0 - u.abs()).max(1e-6).ln(),
                    2 => scale * (u + rng.gen_range(-1.0f32..1.0) + rng.gen_range(-1.0f32..1.0)),
                    _ => {
                        if rng.gen_bool(0.02) {
                            20.0 * scale * u
                        } else {
                            0.1 * scale * u
                        }
                    }
                }
            })
            .collect();
        tensors.push(v);
    }
    let mut greedy_time = Duration::ZERO;
    let mut worst: f64 = 0.0;
    for q in [2u8, 4, 8] {
        let cfg = ok(QuantConfig::new(q))?;
        let t = Instant::now();
        let steps: Vec<f32> = tensors
            .iter()
            .map(|v| search_step(v, &cfg).map(|(s, _)| s))
            .collect::<avatar_codec::Result<_>>()
            .map_err(|e| e.to_string())?;
        greedy_time += t.elapsed();
        let (lo, hi) = code_range(q);
        ensure!(lo == -(1 << (q - 1)) && hi == (1 << (q - 1)) - 1, "Q={q}: code range {lo}..{hi}");
        let ratios: Vec<f64> = tensors
            .par_iter()
            .zip(&steps)
            .map(|(v, &s)| {
                let got = oracle_mse(v, s as f64, q);
                let best = grid_optimum(v, q);
                if best <= 1e-30 {
                    if got <= 1e-30 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    got / best
                }
            })
            .collect();
        for (i, r) in ratios.iter().enumerate() {
            ensure!(*r <= 1.05, "Q={q} tensor {i} (n={}): MSE ratio {r:.4}", tensors[i].len());
            worst = worst.max(*r);
        }
    }
    within(greedy_time, Duration::from_secs(10), "greedy search")?;
    Ok(format!("300 tensors, worst MSE/grid-optimum {worst:.4}, search {greedy_time:.2?}"))
}

// 4 ────────────────────────────────────────────────────────────────────────

fn rd_monotonicity() -> Check {
    let scene = ok(SyntheticScene::new(SceneConfig::default()))?;
    let bits: Vec<u8> = (2..=8).collect();
    let steps = [1.0 / 255.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0];
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let t = Instant::now();
    let points = ok(pool.install(|| rd_sweep(&scene, &bits, &steps)))?;
    let elapsed = t.elapsed();
    ensure!(points.len() == 28, "{} points", points.len());
    for (s, &q) in steps.iter().enumerate() {
        let column: Vec<_> = bits.iter().enumerate().map(|(b, _)| &points[b * steps.len() + s]).collect();
        for pair in column.windows(2) {
            let (lower, higher) = (pair[0], pair[1]);
            ensure!(
                lower.psnr <= higher.psnr,
                "q={:.4}: PSNR {:.3} at Q={} exceeds {:.3} at Q={}",
                q,
                lower.psnr,
                lower.bit_width,
                higher.psnr,
                higher.bit_width
            );
            ensure!(
                lower.total_bytes < higher.total_bytes,
                "q={q:.4}: bytes do not drop from Q={} to Q={}",
                higher.bit_width,
                lower.bit_width
            );
        }
    }
    within(elapsed, Duration::from_secs(300), "single-threaded sweep")?;
    let first = &points[0];
    let last = &points[points.len() - 4];
    Ok(format!(
        "28 points single-threaded in {elapsed:.1?}; q=1/255: Q2 {:.2} dB/{} B → Q8 {:.2} dB/{} B",
        first.psnr, first.total_bytes, last.psnr, last.total_bytes
    ))
}

// 5 ────────────────────────────────────────────────────────────────────────

fn random_pose_maps(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PoseMapPair {
    let mut m = PoseMapPair::empty(h, w);
    for (img, mask) in [(&mut m.front, &mut m.mask_front), (&mut m.back, &mut m.mask_back)] {
        for r in 0..h {
            for c in 0..w {
                if rng.gen_bool(0.7) {
                    mask.set(r, c, true);
                    for ch in 0..3 {
                        img.set(r, c, ch, rng.gen());
                    }
                }
            }
        }
    }
    m
}

fn posemap_codec() -> Check {
    let scene = ok(SyntheticScene::new(SceneConfig::default()))?;
    let q = 1.0 / 255.0;
    let still = vec![scene.pose_maps[0].clone(); 30];
    let auto = ok(encode_posemaps(&still, q))?.byte_len() * 8;
    let intra = ok(encode_posemaps_with(&still, q, ModePolicy::AllIntra))?.byte_len() * 8;
    let ratio = auto as f64 / intra as f64;
    ensure!(ratio <= 0.2, "static sequence: inter {auto} bits vs all-intra {intra} bits ({ratio:.3})");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut samples = 0usize;
    let mut worst = 0.0f64;
    for &q in &[1.0f32 / 255.0, 3.0 / 255.0, 8.0 / 255.0, 0.1] {
        let frames: Vec<PoseMapPair> = (0..10).map(|_| random_pose_maps(&mut rng, 24, 20)).collect();
        let stream = ok(PoseMapStream::from_bytes(&ok(encode_posemaps(&frames, q))?.to_bytes()))?;
        let back = ok(decode_posemaps(&stream))?;
        for (f, (a, b)) in frames.iter().zip(&back).enumerate() {
            for (x, y) in a.front.data().iter().chain(a.back.data()).zip(b.front.data().iter().chain(b.back.data())) {
                // Same level as quantizing the source directly...
                let level = (*x as f64 / q as f64).round();
                let expect = ((level * q as f64) as f32).clamp(0.0, 1.0);
                ensure!(y.to_bits() == expect.to_bits(), "frame {f}: {y} is not the quantized {x}");
                // ...and within half a step, up to the f32 rounding of the output.
                let err = (*x as f64 - *y as f64).abs();
                ensure!(err <= q as f64 / 2.0 + f32::EPSILON as f64, "frame {f}: error {err} > q/2 = {}", q / 2.0);
                worst = worst.max(err / q as f64);
                samples += 1;
            }
        }
    }
    Ok(format!(
        "static 30 frames at {:.1}% of all-intra; {samples} samples, max error {worst:.4}·q",
        100.0 * ratio
    ))
}

// 6 ────────────────────────────────────────────────────────────────────────

fn pose_space() -> Check {
    // Worked examples on the hand-solvable toy set.
    let toy = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.1], vec![0.0, -0.1]];
    let basis = ok(fit_pca(&toy, 2))?;
    let s1 = [basis.components[(0, 0)], basis.components[(1, 0)]];
    ensure!((s1[0] - 1.0).abs() < 1e-12 && s1[1].abs() < 1e-12, "first component {s1:?}");
    let sigma1 = 0.5f64.sqrt();
    ensure!((basis.sigma[0] - sigma1).abs() < 1e-12, "σ₁ = {}", basis.sigma[0]);
    ensure!((basis.sigma[1] - 0.005f64.sqrt()).abs() < 1e-12, "σ₂ = {}", basis.sigma[1]);
    let exact = |got: &[f64], want: [f64; 2], what: &str| -> Result<(), String> {
        let d = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if d <= 1e-12 {
            Ok(())
        } else {
            Err(format!("{what}: {got:?} vs {want:?}"))
        }
    };
    exact(&ok(project_clip(&basis, &[0.0, 0.0]))?, [0.0, 0.0], "x = μ")?;
    exact(&ok(project_clip(&basis, &[0.5 * sigma1, 0.0]))?, [0.5 * sigma1, 0.0], "x = μ + 0.5σ₁s₁")?;
    let k2 = ok(basis.clone().with_k(2.0))?;
    exact(&ok(project_clip(&k2, &[10.0 * sigma1, 0.0]))?, [2.0 * sigma1, 0.0], "x = μ + 10σ₁s₁, k = 2")?;

    // Properties on a random subspace.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (dim, d) = (12, 4);
    let training: Vec<Vec<f64>> = (0..60)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|i| rng.gen_range(-1.0..1.0) * (i + 1) as f64).collect();
            (0..dim).map(|j| z[j % d] * (1.0 + j as f64 * 0.1) + 0.01 * rng.gen_range(-1.0..1.0) + j as f64).collect()
        })
        .collect();
    let basis = ok(fit_pca(&training, d))?;
    let mut worst_idem: f64 = 0.0;
    for i in 0..1000 {
        let x: Vec<f64> = (0..dim).map(|j| j as f64 + rng.gen_range(-20.0..20.0)).collect();
        let p = ok(project_clip(&basis, &x))?;
        let pp = ok(project_clip(&basis, &p))?;
        let dev = p.iter().zip(&pp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(dev <= 1e-6, "input {i}: idempotence deviation {dev:e}");
        worst_idem = worst_idem.max(dev);
        let coef = ok(basis.coefficients(&p))?;
        for c in 0..d {
            ensure!(
                coef[c].abs() <= basis.k * basis.sigma[c] + 1e-9,
                "input {i}: coefficient {c} = {} outside ±{}",
                coef[c],
                basis.k * basis.sigma[c]
            );
        }
    }
    Ok(format!("worked examples exact; 1000 inputs, max idempotence deviation {worst_idem:.1e}"))
}

// 7 ────────────────────────────────────────────────────────────────────────

fn facial_weights() -> Check {
    let (h, w) = (9, 11);
    let mut mask = Mask::new(h, w);
    for r in 2..6 {
        for c in 3..9 {
            mask.set(r, c, true);
        }
    }
    let alpha = 0.2;
    let total = 1000u64;
    let map_at = |iter: u64| {
        facial_weight_map(&FacialWeightConfig {
            alpha,
            mask: mask.clone(),
            iter,
            total_iter: total,
        })
    };
    for (iter, face) in [(0, 1.0f64), (total / 2, 1.1), (total, 1.2)] {
        let map = ok(map_at(iter))?;
        for r in 0..h {
            for c in 0..w {
                let want = if mask.get(r, c) { face } else { 1.0 };
                let got = map.get(r, c, 0) as f64;
                ensure!((got - want).abs() <= 1e-6, "iter {iter}: W[{r},{c}] = {got}, expected {want}");
            }
        }
    }
    let mut prev = ok(map_at(0))?;
    for iter in (25..=1500).step_by(25) {
        let map = ok(map_at(iter))?;
        ensure!(
            map.data().iter().zip(prev.data()).all(|(a, b)| a >= b),
            "weight map decreases at iter {iter}"
        );
        prev = map;
    }
    ensure!(ok(map_at(1500))? == ok(map_at(total))?, "map changes past total_iter");
    ensure!(
        matches!(
            facial_weight_map(&FacialWeightConfig {
                alpha,
                mask: mask.clone(),
                iter: 0,
                total_iter: 0,
            }),
            Err(Error::InvalidArgument(_))
        ),
        "total_iter = 0 accepted"
    );
    Ok("1, 1.1, 1.2 on the face at iter 0, total/2, total; nondecreasing through 1.5·total".into())
}

// 8 ────────────────────────────────────────────────────────────────────────

fn facial_attention() -> Check {
    let toy = ok(toy_target((16, 16), 32))?;
    let prior = surface_prior(toy.template.bbox(), toy.maps.resolution());
    let scene = FitScene::from(toy);
    let t = Instant::now();
    let runs: Vec<(f64, f64)> = (0..5u64)
        .into_par_iter()
        .map(|seed| {
            let init = GeneratorWeights::seeded(100 + seed, &prior);
            let face = |alpha| {
                let cfg = FitConfig {
                    alpha,
                    seed,
                    ..FitConfig::default()
                };
                fit_generator(&scene, &init, &cfg).map(|r| r.last.face_l1)
            };
            Ok((face(0.2)?, face(0.0)?))
        })
        .collect::<avatar_codec::Result<_>>()
        .map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let wins = runs.iter().filter(|(a, b)| a <= b).count();
    let table = runs
        .iter()
        .map(|(a, b)| format!("{a:.4}/{b:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    ensure!(wins >= 4, "α=0.2 face L1 ≤ α=0 on {wins}/5 seeds: {table}");
    within(elapsed, Duration::from_secs(120), "paired fits")?;
    Ok(format!("{wins}/5 seeds (face L1 α=0.2/α=0: {table}), {elapsed:.1?}"))
}

// 9 ────────────────────────────────────────────────────────────────────────

fn random_gaussians(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian3D> {
    (0..n)
        .map(|_| {
            let mut q: [f32; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let norm = q.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
            q.iter_mut().for_each(|v| *v /= norm);
            Gaussian3D {
                position: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                scale: std::array::from_fn(|_| rng.gen_range(0.005..0.12)),
                rotation: q,
                opacity: rng.gen_range(0.05..1.0),
                color: std::array::from_fn(|_| rng.gen()),
            }
        })
        .collect()
}

fn renderer_invariants() -> Check {
    let t = Instant::now();
    let mut worst_perm = 0.0f32;
    let mut worst_shift = 0.0f32;
    for s in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + s);
        let n = rng.gen_range(1..=500);
        let g = random_gaussians(&mut rng, n);
        let mut cam = Camera::orthographic(128, 128, 50.0);
        cam.rotation = axis_angle_to_matrix([rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
        cam.background = [0.2, 0.3, 0.4];
        let base = ok(rasterize(&g, &cam))?;

        let mut shuffled = g.clone();
        shuffled.shuffle(&mut rng);
        let perm = ok(rasterize(&shuffled, &cam))?;
        let dev = base
            .color
            .data()
            .iter()
            .zip(perm.color.data())
            .chain(base.alpha.data().iter().zip(perm.alpha.data()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        ensure!(dev < 1e-6, "scene {s}: permutation changes a pixel by {dev:e}");
        worst_perm = worst_perm.max(dev);

        // Conservation: alpha in [0, 1], colour in [0, 1], and swapping the
        // background moves each pixel by exactly (1 − alpha) times the change.
        let mut black = cam.clone();
        black.background = [0.0; 3];
        let dark = ok(rasterize(&g, &black))?;
        for (i, &a) in base.alpha.data().iter().enumerate() {
            ensure!((0.0..=1.0 + 1e-6).contains(&a), "scene {s}: alpha {a}");
            for c in 0..3 {
                let v = base.color.data()[i * 3 + c];
                let d = dark.color.data()[i * 3 + c];
                ensure!((0.0..=1.0).contains(&v) && (0.0..=1.0).contains(&d), "scene {s}: colour {v}/{d}");
                let want = d + (1.0 - a) * cam.background[c];
                ensure!((v - want).abs() < 1e-5, "scene {s}: background leak {v} vs {want}");
            }
        }

        // Translating the Gaussians and the camera together changes nothing.
        let shift = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0);
        let world_shift = cam.rotation.transpose() * shift;
        let moved: Vec<Gaussian3D> = g
            .iter()
            .map(|x| Gaussian3D {
                position: std::array::from_fn(|a| (x.position[a] as f64 + world_shift[a]) as f32),
                ..*x
            })
            .collect();
        let mut moved_cam = cam.clone();
        moved_cam.translation = cam.translation - cam.rotation * world_shift;
        let co = ok(rasterize(&moved, &moved_cam))?;
        let dev = base
            .color
            .data()
            .iter()
            .zip(co.color.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        ensure!(dev < 1e-4, "scene {s}: co-translation changes a pixel by {dev:e}");

        // Shifting only the Gaussians by whole pixels shifts the image.
        let Projection::Orthographic { scale, .. } = cam.projection else { unreachable!() };
        let (dr, dc) = (rng.gen_range(-5i64..=5), rng.gen_range(-5i64..=5));
        let view_shift = Vector3::new(dc as f64 / scale, dr as f64 / scale, 0.0);
        let world = cam.rotation.transpose() * view_shift;
        let shifted: Vec<Gaussian3D> = g
            .iter()
            .map(|x| Gaussian3D {
                position: std::array::from_fn(|a| (x.position[a] as f64 + world[a]) as f32),
                ..*x
            })
            .collect();
        let img = ok(rasterize(&shifted, &cam))?;
        for r in 8..120i64 {
            for c in 8..120i64 {
                let (sr, sc) = ((r - dr) as usize, (c - dc) as usize);
                for ch in 0..3 {
                    let d = (img.color.get(r as usize, c as usize, ch) - base.color.get(sr, sc, ch)).abs();
                    worst_shift = worst_shift.max(d);
                }
            }
        }
        ensure!(worst_shift < 1e-4, "scene {s}: pixel shift ({dr},{dc}) deviates by {worst_shift:e}");
    }
    let elapsed = t.elapsed();
    within(elapsed, Duration::from_secs(30), "20 scenes")?;
    Ok(format!(
        "20 scenes: permutation dev {worst_perm:.1e}, shift dev {worst_shift:.1e}, {elapsed:.1?}"
    ))
}

// 10 ───────────────────────────────────────────────────────────────────────

fn chain_template(rng: &mut ChaCha8Rng, joints: usize, n: usize) -> SkinnedTemplate {
    let parents: Vec<Option<usize>> = (0..joints).map(|j| j.checked_sub(1)).collect();
    let rest: Vec<[f32; 3]> = (0..joints).map(|j| [0.0, j as f32 * 0.3, 0.0]).collect();
    let vertices: Vec<[f32; 3]> = (0..n)
        .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..1.2), rng.gen_range(-0.5..0.5)])
        .collect();
    let mut weights = Vec::with_capacity(n * joints);
    for _ in 0..n {
        let raw: Vec<f64> = (0..joints).map(|_| rng.gen::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        let mut row: Vec<f32> = raw.iter().map(|v| (v / sum) as f32).collect();
        let tail: f32 = row[1..].iter().sum();
        row[0] = 1.0 - tail;
        weights.extend(row);
    }
    let bbox = Bbox::of_points(&vertices).unwrap().grow(0.1);
    SkinnedTemplate::new(vertices, parents, rest, weights, bbox).unwrap()
}

fn lbs_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let template = chain_template(&mut rng, 4, 200);
    let posed = ok(pose_template(&template, &SmplxPose::identity(4, 10, 10)))?;
    ensure!(posed == template.vertices(), "identity pose moved a vertex");

    // Rz(π/2) about the origin on a single joint.
    let single = ok(SkinnedTemplate::new(
        vec![[1.0, 0.0, 0.0]],
        vec![None],
        vec![[0.0; 3]],
        vec![1.0],
        Bbox {
            min: [-2.0; 3],
            max: [2.0; 3],
        },
    ))?;
    let quarter = SmplxPose {
        theta: vec![0.0, 0.0, std::f32::consts::FRAC_PI_2],
        beta: vec![],
        psi: vec![],
        frame_index: 0,
    };
    let p = ok(pose_template(&single, &quarter))?[0];
    ensure!(p[0].abs() < 1e-6 && (p[1] - 1.0).abs() < 1e-6 && p[2].abs() < 1e-6, "Rz(π/2)·(1,0,0) = {p:?}");

    // Single fully weighted joint is rigid on Gaussian centres.
    let g = random_gaussians(&mut rng, 300);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let t = JointTransform {
            rotation: axis_angle_to_matrix([rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]),
            translation: Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
        };
        let moved = ok(deform_with(&g, &[t], &vec![vec![1.0]; g.len()]))?;
        for i in (0..g.len()).step_by(7) {
            for j in (i + 1..g.len()).step_by(11) {
                let dist = |a: [f32; 3], b: [f32; 3]| {
                    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()
                };
                let d = (dist(g[i].position, g[j].position) - dist(moved[i].position, moved[j].position)).abs();
                worst = worst.max(d);
            }
        }
    }
    ensure!(worst <= 1e-6, "rigid transform changed a distance by {worst:e}");

    // Two translations blended half and half.
    let transforms = [
        JointTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::new(1.0, 0.0, 0.0),
        },
        JointTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::new(0.0, 1.0, 0.0),
        },
    ];
    let blended = blend_point([0.25, -1.0, 2.0], &[0.5, 0.5], &transforms);
    ensure!(blended == [0.75, -0.5, 2.0], "blend gave {blended:?}");
    let gauss = Gaussian3D::isotropic([0.25, -1.0, 2.0], 0.1, 0.5, [0.5; 3]);
    let moved = ok(deform_with(&[gauss], &transforms, &[vec![0.5, 0.5]]))?[0];
    ensure!(moved.position == [0.75, -0.5, 2.0], "Gaussian blend gave {:?}", moved.position);
    ensure!(moved.rotation == gauss.rotation, "pure translation rotated the Gaussian");
    Ok(format!("identity exact, Rz(π/2) exact, rigid distance drift {worst:.1e}, two-bone blend exact"))
}

// 11 ───────────────────────────────────────────────────────────────────────

fn container_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let codecs = [Codec::QuantizedWeights, Codec::Smplx, Codec::PoseMap, Codec::KeyValue];
    for trial in 0..200 {
        let mut sections = Vec::new();
        for (&layer, codec) in Layer::ALL.iter().zip(codecs) {
            if rng.gen_bool(0.7) {
                let payload = (0..rng.gen_range(0..2000)).map(|_| rng.gen()).collect();
                sections.push(Section { layer, codec, payload });
            }
        }
        let file = ok(mux(&sections))?;
        ensure!(ok(demux(&file))? == sections, "trial {trial}: round trip differs");
        if let Some(victim) = sections.iter().find(|s| !s.payload.is_empty()) {
            let entries = ok(ContainerReader::open(Cursor::new(file.clone())))?.entries().to_vec();
            let e = entries.iter().find(|e| e.layer == victim.layer).unwrap();
            let mut bad = file.clone();
            bad[(e.offset + rng.gen_range(0..e.length)) as usize] ^= 1 << rng.gen_range(0..8);
            match demux(&bad) {
                Err(Error::Crc { section, .. }) if section == victim.layer.name() => {}
                other => return Err(format!("trial {trial}: corruption gave {other:?}")),
            }
        }
    }

    let scene = ok(SyntheticScene::new(SceneConfig::default()))?;
    let file = ok(encode(&(&scene).into(), &EncodeConfig::default()))?;
    let mut reader = ok(ContainerReader::open(TracingReader::new(Cursor::new(file.clone()))))?;
    let motion: Vec<_> = reader.entries().iter().filter(|e| e.layer.is_motion()).copied().collect();
    ensure!(motion.len() == 2, "expected both motion sections");
    let img = ok(render_structural(&mut reader, &scene.template))?;
    let reference = ok(pipeline::render_canonical(
        &ok(decode_all(&file))?.weights,
        &scene.template,
        &scene.camera,
        scene.config.map_resolution,
    ))?;
    ensure!(img.color == reference.color, "structural-only render differs from the full decode");
    let covered = img.alpha.data().iter().filter(|&&a| a > 0.5).count();
    ensure!(covered > 500, "canonical render covers only {covered} pixels");
    let trace = reader.into_inner();
    for e in &motion {
        ensure!(!trace.touched(e.offset, e.offset + e.length), "{} section was read", e.layer.name());
    }

    let comp = ok(report_composition(&file))?;
    let total: f64 = comp.layers.iter().map(|l| l.percent).sum();
    ensure!((total - 100.0).abs() <= 0.01, "shares sum to {total}");
    let structural = comp.share(Layer::Structural).unwrap_or(0.0);
    ensure!(
        comp.layers.iter().all(|l| l.layer == Layer::Structural || l.percent < structural),
        "structural layer does not dominate: {}",
        comp.to_csv()
    );
    Ok(format!(
        "200 random containers bit-exact, corruption caught; progressive render read {} ranges, none in motion; structural {structural:.1}%",
        trace.reads().len()
    ))
}

// 12 ───────────────────────────────────────────────────────────────────────

/// Recorded container size for the default scene at Q = 8, q = 1/255.
const REGRESSION_BYTES_PER_FRAME: f64 = 6251.0;

fn end_to_end() -> Check {
    let scene = ok(SyntheticScene::new(SceneConfig::default()))?;
    let cfg = EncodeConfig {
        bit_width: Some(8),
        q: 1.0 / 255.0,
        ..EncodeConfig::default()
    };
    let file = ok(encode(&(&scene).into(), &cfg))?;
    let d = ok(decode_all(&file))?;
    let mut scores = Vec::new();
    for i in 0..scene.poses.len() {
        let reference = ok(scene.render(i))?;
        let img = ok(pipeline::render_frame(&d.weights, &scene.template, &d.pose_maps[i], &d.poses[i], &d.info.camera))?;
        scores.push(ok(psnr(&img.color, &reference.color, 1.0))?);
    }
    let worst = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let per_frame = file.len() as f64 / scene.poses.len() as f64;
    ensure!(worst >= 35.0, "worst frame PSNR {worst:.2} dB < 35 dB");
    ensure!(
        per_frame == REGRESSION_BYTES_PER_FRAME,
        "bytes/frame {per_frame} drifted from the recorded {REGRESSION_BYTES_PER_FRAME}"
    );
    Ok(format!("PSNR mean {mean:.2} dB, worst {worst:.2} dB; {per_frame} bytes/frame"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 12] = [
        ("smplx losslessness", losslessness),
        ("entropy sanity", entropy_sanity),
        ("quantizer optimality", quantizer_optimality),
        ("rd monotonicity", rd_monotonicity),
        ("pose-map codec", posemap_codec),
        ("pose-space projection", pose_space),
        ("facial weight schedule", facial_weights),
        ("facial attention", facial_attention),
        ("renderer invariants", renderer_invariants),
        ("lbs", lbs_suite),
        ("container", container_suite),
        ("end-to-end regression", end_to_end),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
