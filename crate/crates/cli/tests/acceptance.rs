//! Acceptance suite. Prints one PASS/FAIL line per criterion, then fails if any criterion did.
//!
//! Run alone with `cargo test -p cxinpaint --test acceptance -- --nocapture`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cxinpaint_core::checkpoint::to_bytes;
use cxinpaint_core::data::{central_region, composite, make_masked, masked_batch, read_patch_store};
use cxinpaint_core::gradcheck::{
    check_activation, check_batchnorm, check_conv2d, check_deconv2d, check_generator, check_losses,
};
use cxinpaint_core::layers::{Activation, Mode};
use cxinpaint_core::loss::{minimax_value, weighted_l2, L2Reduction, LossWeights, MaskSpec};
use cxinpaint_core::metrics::{anomaly_energy, diff_map_normalized, mse, psnr, ssim};
use cxinpaint_core::models::{build_generator, ModelConfig};
use cxinpaint_core::optim::{balance_report, Balance, Phase, TrainConfig, TrainSchedule, Trainer};
use cxinpaint_core::synthetic::{blob_rect, insert_blob, rib_corpus, GratingSpec};
use cxinpaint_core::{Generator32, Rng, Tensor, Trainer64};
use image::{GrayImage, Luma};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn a1_gradients() -> Outcome {
    let start = Instant::now();
    let mut layer_worst: f64 = 0.0;
    let mut loss_worst: f64 = 0.0;
    let acts = [Activation::LeakyRelu { slope: 0.2 }, Activation::Relu, Activation::Tanh, Activation::Sigmoid];
    for seed in 0..20 {
        for e in [check_conv2d(seed), check_deconv2d(seed), check_batchnorm(seed)] {
            layer_worst = layer_worst.max(e.map_err(|e| e.to_string())?);
        }
        for act in acts {
            layer_worst = layer_worst.max(check_activation(act, seed).map_err(|e| e.to_string())?);
        }
        loss_worst = loss_worst.max(check_losses(seed).map_err(|e| e.to_string())?);
    }
    let network = (0..3).map(|s| check_generator(s).unwrap()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("layers {layer_worst:.1e}, losses {loss_worst:.1e}, generator {network:.1e}, {secs:.1}s");
    ensure(layer_worst < 1e-4 && loss_worst < 1e-5 && network < 1e-3, || detail.clone())?;
    ensure(secs < 120.0, || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn a2_shapes() -> Outcome {
    let cfg = ModelConfig::default();
    ensure(cfg.image_size == 128, || format!("default image size {}", cfg.image_size))?;
    let g: Generator32 = build_generator(&cfg, &mut Rng::new(0)).map_err(|e| e.to_string())?;
    let pass = g.forward(&Tensor::zeros(&[1, 1, 128, 128]), Mode::Eval).map_err(|e| e.to_string())?;
    let (b, o) = (pass.bottleneck().shape().to_vec(), pass.output().shape().to_vec());
    ensure(b == [1, 4096, 1, 1] && o == [1, 1, 64, 64], || format!("bottleneck {b:?}, output {o:?}"))?;
    Ok(format!("bottleneck {b:?}, output {o:?}"))
}

fn a3_losses() -> Outcome {
    let mask = MaskSpec::<f64>::new(64, 4, 10.0, L2Reduction::Mean).map_err(|e| e.to_string())?;
    let real = Tensor::<f64>::zeros(&[1, 1, 64, 64]);
    let fake = Tensor::<f64>::ones(&[1, 1, 64, 64]);
    let l2 = weighted_l2(&real, &fake, &mask).map_err(|e| e.to_string())?;
    ensure(l2 == 12736.0 / 4096.0, || format!("uniform-difference L2 {l2}"))?;
    let half = Tensor::<f64>::full(&[8], 0.5);
    let v = minimax_value(&half, &half).map_err(|e| e.to_string())?;
    ensure((v + 4f64.ln()).abs() < 1e-9, || format!("minimax at 0.5/0.5 is {v}"))?;
    let w = LossWeights::default();
    ensure(w.lambda_l2 == 0.998 && w.lambda_adv == 0.002, || format!("loss weights {w:?}"))?;
    Ok(format!("L2 {l2}, V {v:.12}, lambda {}/{}", w.lambda_l2, w.lambda_adv))
}

/// Full 2-D window SSIM with two-pass weighted moments.
fn reference_ssim(a: &[f64], b: &[f64], side: usize) -> f64 {
    const WIN: usize = 11;
    let (c1, c2) = (6.5025, 58.5225);
    let mut kernel = vec![0.0; WIN * WIN];
    for i in 0..WIN {
        for j in 0..WIN {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            kernel[i * WIN + j] = (-(di * di + dj * dj) / 4.5).exp();
        }
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let positions = side - WIN + 1;
    let mut sum = 0.0;
    for y in 0..positions {
        for x in 0..positions {
            let idx = |i: usize| (y + i / WIN) * side + x + i % WIN;
            let mean = |img: &[f64]| (0..WIN * WIN).map(|i| kernel[i] * img[idx(i)]).sum::<f64>();
            let (mx, my) = (mean(a), mean(b));
            let vx: f64 = (0..WIN * WIN).map(|i| kernel[i] * (a[idx(i)] - mx).powi(2)).sum();
            let vy: f64 = (0..WIN * WIN).map(|i| kernel[i] * (b[idx(i)] - my).powi(2)).sum();
            let cxy: f64 = (0..WIN * WIN).map(|i| kernel[i] * (a[idx(i)] - mx) * (b[idx(i)] - my)).sum();
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    sum / (positions * positions) as f64
}

fn a4_metrics() -> Outcome {
    let plane = |v: f64| Tensor::<f64>::full(&[1, 32, 32], v);
    let m = mse(&plane(0.0), &plane(10.0)).map_err(|e| e.to_string())?;
    ensure(m == 100.0, || format!("mse {m}"))?;
    let p = psnr(&plane(0.0), &plane(10.0)).map_err(|e| e.to_string())?;
    ensure((p - 10.0 * 650.25f64.log10()).abs() < 1e-9, || format!("psnr {p}"))?;

    let mut rng = Rng::new(77);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let a: Vec<f64> = (0..1024).map(|_| rng.uniform_int(0, 255).unwrap() as f64).collect();
        let b: Vec<f64> = if case % 2 == 0 {
            a.iter().map(|v| (v + rng.normal(0.0, 12.0).unwrap()).round().clamp(0.0, 255.0)).collect()
        } else {
            (0..1024).map(|_| rng.uniform_int(0, 255).unwrap() as f64).collect()
        };
        let ta = Tensor::new(&[1, 32, 32], a.clone()).unwrap();
        let tb = Tensor::new(&[1, 32, 32], b.clone()).unwrap();
        worst = worst.max((ssim(&ta, &tb).unwrap() - reference_ssim(&a, &b, 32)).abs());
        let same = ssim(&ta, &ta).unwrap();
        ensure((same - 1.0).abs() < 1e-12, || format!("ssim(a, a) = {same}"))?;
    }
    ensure(worst < 1e-6, || format!("ssim deviates from the reference by {worst:.2e}"))?;
    Ok(format!("mse {m}, psnr {p:.9} dB, max ssim deviation {worst:.1e} over 50 pairs"))
}

struct ToyRun {
    trainer: Trainer64,
    initial_validation: f64,
    secs: f64,
}

fn toy_run() -> ToyRun {
    let corpus = rib_corpus::<f64>(2000, 32, &GratingSpec::default(), 7).unwrap();
    let (train, rest) = corpus.split_at(1800);
    let val = &rest[..100];
    let mut model = ModelConfig::with_sizes(32, 16, 16);
    model.margin_width = 1;
    let config = TrainConfig {
        schedule: TrainSchedule {
            epochs_g_l2_only: 2,
            epochs_d_only: 4,
            total_epochs: 40,
            batch_size: 64,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut trainer = Trainer64::new(&model, config, 1).unwrap();
    let initial_validation = trainer.validate(val).unwrap();
    let start = Instant::now();
    while !trainer.is_finished() {
        trainer.train_epoch(train).unwrap();
        trainer.record_validation(val).unwrap();
    }
    ToyRun { trainer, initial_validation, secs: start.elapsed().as_secs_f64() }
}

fn mean_intensity(map: &GrayImage) -> f64 {
    map.as_raw().iter().map(|&v| v as f64).sum::<f64>() / map.as_raw().len() as f64
}

fn a5_toy(run: &ToyRun) -> Outcome {
    let t = &run.trainer;
    let iterations = t.state.iteration;
    ensure(iterations <= 3000, || format!("{iterations} iterations"))?;
    let last = *t.state.validation.last().unwrap();
    let ratio = last / run.initial_validation;

    let corpus = rib_corpus::<f64>(2000, 32, &GratingSpec::default(), 7).unwrap();
    let test = &corpus[1900..];
    let diff = |img: &Tensor<f64>| {
        let (context, _) = masked_batch(&[img], 0.0).unwrap();
        let rebuilt = composite(&context, &t.generator.generate(&context, Mode::Eval).unwrap()).unwrap();
        diff_map_normalized(&img.reshape(&[1, 1, 32, 32]).unwrap(), &rebuilt).unwrap()
    };
    let clean: f64 = test[..50].iter().map(|p| mean_intensity(&diff(p))).sum::<f64>() / 50.0;
    let blob = blob_rect(32, 6).unwrap();
    let (mut corrupted, mut inside, mut outside) = (0.0, 0.0, 0.0);
    for p in &test[50..] {
        let map = diff(&insert_blob(p, 6, 1.0).unwrap());
        corrupted += mean_intensity(&map) / 50.0;
        let (i, o) = anomaly_energy(&map, blob).unwrap();
        inside += i / 50.0;
        outside += o / 50.0;
    }
    let energy = inside / outside;
    let detail = format!(
        "{iterations} iterations in {:.0}s; validation L2 {:.4} -> {last:.4} (x{ratio:.3}); diff clean {clean:.2} vs corrupted {corrupted:.2} (x{:.3}); inside/outside {energy:.1}",
        run.secs,
        run.initial_validation,
        clean / corrupted
    );
    ensure(ratio < 0.5 && clean < 0.5 * corrupted && energy > 3.0, || detail.clone())?;
    Ok(detail)
}

fn a6_balance() -> Outcome {
    let mut model = ModelConfig::with_sizes(16, 4, 4);
    model.margin_width = 1;
    let schedule = TrainSchedule {
        epochs_g_l2_only: 0,
        epochs_d_only: 0,
        total_epochs: 1,
        freeze_g_every: 2,
        batch_size: 4,
        ..Default::default()
    };
    let config = TrainConfig { schedule, ..Default::default() };
    let mut t = Trainer::<f64>::new(&model, config, 2).unwrap();
    let images = rib_corpus::<f64>(4, 16, &GratingSpec::default(), 3).unwrap();
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let (context, target) = masked_batch(&refs, 0.0).unwrap();
    let snapshot = |t: &Trainer<f64>| -> Vec<Tensor<f64>> {
        t.generator.named_params().into_iter().chain(t.generator.named_buffers()).map(|(_, p)| p.clone()).collect()
    };
    let mut frozen = 0;
    for it in 0..8 {
        let before = snapshot(&t);
        t.train_iteration(&context, &target, Phase::Joint).unwrap();
        let unchanged = before == snapshot(&t);
        ensure(unchanged == (it % 2 == 1), || format!("iteration {it}: generator unchanged = {unchanged}"))?;
        frozen += usize::from(unchanged);
    }

    // a discriminator whose head outputs zero logits scores everything 0.5
    let head = t.discriminator.net.stages.last_mut().unwrap();
    head.params.weights.data_mut().fill(0.0);
    head.params.bias.data_mut().fill(0.0);
    let start = t.state.trace.len();
    for _ in 0..6 {
        t.train_iteration(&context, &target, Phase::GeneratorL2Only).unwrap();
    }
    let trace = &t.state.trace[start..];
    let report = balance_report(trace, trace.len(), 1e-6).unwrap();
    let v = report.mean_minimax;
    ensure(report.balance == Balance::Balanced && (v + 4f64.ln()).abs() <= 1e-6, || format!("{report:?}"))?;
    Ok(format!(
        "generator bit-unchanged on {frozen}/8 iterations (every second); constant-0.5 scores give V {v:.9}, balanced"
    ))
}

fn a7_reproducible(first: &ToyRun) -> Outcome {
    let second = toy_run();
    ensure(first.trainer.state.trace == second.trainer.state.trace, || "traces differ".into())?;
    let (a, b) = (to_bytes(&first.trainer).unwrap(), to_bytes(&second.trainer).unwrap());
    ensure(a == b, || "final checkpoints differ".into())?;
    Ok(format!("{} trace records and {} checkpoint bytes identical", first.trainer.state.trace.len(), a.len()))
}

fn extract(dir: &Path, out_dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_cxinpaint"))
        .args(["extract-patches", "--patch-size", "64", "--patches-per-image", "20", "--seed", "5"])
        .arg("--manifest")
        .arg(dir.join("manifest.csv"))
        .arg("--images-dir")
        .arg(dir)
        .arg("--out")
        .arg(out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn a8_pipeline() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::from("image,labels\n");
    let mut rng = Rng::new(8);
    for i in 0..10 {
        let name = format!("scan{i}.png");
        GrayImage::from_fn(256, 256, |_, _| Luma([rng.uniform_int(0, 255).unwrap() as u8]))
            .save(dir.path().join(&name))
            .unwrap();
        manifest.push_str(&format!("{name},{}\n", if i % 2 == 0 { "No Finding" } else { "Mass" }));
    }
    fs::write(dir.path().join("manifest.csv"), manifest).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    extract(dir.path(), &a);
    extract(dir.path(), &b);
    for file in ["patches.csv", "patches.cxpd"] {
        ensure(fs::read(a.join(file)).unwrap() == fs::read(b.join(file)).unwrap(), || format!("{file} differs"))?;
    }

    let (side, patches) = read_patch_store::<f32>(fs::File::open(a.join("patches.cxpd")).unwrap()).unwrap();
    let (off, inner) = central_region(side);
    for (n, patch) in patches.iter().enumerate() {
        let m = make_masked(patch, 0.0).unwrap();
        let rebuilt = composite(&m.context, &m.target).unwrap();
        let ok_center = (0..side * side).all(|i| {
            let (y, x) = (i / side, i % side);
            let inside = (off..off + inner).contains(&y) && (off..off + inner).contains(&x);
            let c = m.context.data()[i];
            if inside {
                c == 0.0
            } else {
                c == patch.data()[i]
            }
        });
        ensure(rebuilt.data() == patch.data() && ok_center, || format!("partition broken on patch {n}"))?;
    }
    Ok(format!("index and store byte-identical; partition holds on all {} patches", patches.len()))
}

fn run(name: &str, title: &str, failures: &mut Vec<String>, f: impl FnOnce() -> Outcome) {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    match outcome {
        Ok(detail) => println!("{name} PASS  {title}: {detail}"),
        Err(detail) => {
            println!("{name} FAIL  {title}: {detail}");
            failures.push(name.to_string());
        }
    }
}

#[test]
fn acceptance() {
    let mut failures = Vec::new();
    run("A1", "gradient suite", &mut failures, a1_gradients);
    run("A2", "shape and bottleneck", &mut failures, a2_shapes);
    run("A3", "loss closed forms", &mut failures, a3_losses);
    run("A4", "metric oracles", &mut failures, a4_metrics);
    let toy = catch_unwind(toy_run).ok();
    run("A5", "toy end-to-end", &mut failures, || a5_toy(toy.as_ref().ok_or("toy run panicked")?));
    run("A6", "balancing behaviors", &mut failures, a6_balance);
    run("A7", "reproducibility", &mut failures, || a7_reproducible(toy.as_ref().ok_or("toy run panicked")?));
    run("A8", "pipeline determinism", &mut failures, a8_pipeline);
    assert!(failures.is_empty(), "failed: {}", failures.join(", "));
}
