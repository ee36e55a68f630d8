//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

use std::fs;
use std::path::Path;
use std::time::Instant;

use gravis::analysis::{default_c_grid, gradient_gap_curve, total_variation, DEFAULT_BASE};
use gravis::augment::AugmentationSpec;
use gravis::checkpoint::load_checkpoint;
use gravis::encoder::{EncoderConfig, EncoderParams};
use gravis::eval::augmented_view_retrieval;
use gravis::gradcheck::{random_instance, run_suite};
use gravis::pretrain::{pretrain_on_images, pretrain_run, PretrainConfig};
use gravis::rng::{self, Domain};
use gravis::synth::{generate_synthetic_dataset, synthetic_images, SynthConfig, MANIFEST_FILE};
use gravis::vgl::{similarity_matrix, vgl_anchor, vgl_batch, vgl_batch_with_grad, AnchorSims};
use gravis::{EmbeddingBatch, GroupId, VglConfig};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

/// Direct transcription of the per-anchor loss with plain exponentials.
fn brute_force_anchor(pos: &[f64], neg: &[f64], tau: f64) -> f64 {
    let s = |x: f64| 1.0 / (1.0 + (-x / tau).exp());
    let mut acc = 0.0;
    for (i, &ci) in pos.iter().enumerate() {
        let mut a = 0.0;
        for &cj in neg {
            a += s(cj - ci);
        }
        let mut g = 0.0;
        for (k, &ck) in pos.iter().enumerate() {
            if k != i {
                g += s(ck - ci);
            }
        }
        acc += 1.0 / (a / g + 1.0);
    }
    1.0 - acc / pos.len() as f64
}

fn worked_value() -> Verdict {
    let pos = [0.9, 0.5];
    let neg = [0.1];
    let oracle = brute_force_anchor(&pos, &neg, 0.2);

    // Unit vectors at the prescribed cosines to the anchor.
    let cos = [0.9f64, 0.5, 0.1];
    let mut vectors = vec![vec![1.0, 0.0, 0.0, 0.0]];
    for (k, c) in cos.iter().enumerate() {
        let mut v = vec![*c, 0.0, 0.0, 0.0];
        v[k + 1] = (1.0 - c * c).sqrt();
        vectors.push(v);
    }
    let groups = vec![GroupId(0), GroupId(0), GroupId(0), GroupId(1)];
    let batch = EmbeddingBatch::new(vectors, groups.clone()).unwrap();
    let cfg = VglConfig::new(0.2, true).unwrap();
    let got = vgl_anchor(0, &similarity_matrix(&batch), &groups, &cfg).unwrap();

    let passed = (oracle - 0.12515).abs() <= 1e-4 && (got - 0.12515).abs() <= 1e-4 && (got - oracle).abs() <= 1e-12;
    verdict(passed, format!("vgl_anchor {got:.6}, brute force {oracle:.6}, expected 0.12515 +- 1e-4"))
}

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let results = run_suite(7).unwrap();
    let secs = t.elapsed().as_secs_f64();
    for r in &results {
        println!("    {}", r.line());
    }
    let enough = results.iter().all(|r| r.instances >= 20) && results[..2].iter().all(|r| r.instances >= 100);
    let passed = enough && results.iter().all(|r| r.passed) && secs < 30.0;
    verdict(passed, format!("{} checks in {secs:.1}s (limit 30s)", results.len()))
}

fn invariants() -> Verdict {
    let t = Instant::now();
    let mut rng = rng::stream(3, Domain::Test, 0, 0);
    let (mut range_ok, mut perm_err, mut scale_err, mut ortho, mut mono_ok) = (true, 0.0f64, 0.0f64, 0.0f64, true);
    for i in 0..200 {
        let cfg = VglConfig::new([0.05, 0.2, 0.5, 1.0][i % 4], i % 2 == 0).unwrap();
        let batch = random_instance(&mut rng, 4, 3, 8);
        let out = vgl_batch_with_grad(&batch, &cfg).unwrap();
        range_ok &= out.per_anchor.iter().all(|l| (0.0..1.0).contains(l));

        let mut perm: Vec<usize> = (0..batch.len()).rev().collect();
        perm.rotate_left(i % batch.len());
        perm_err = perm_err.max((vgl_batch(&batch.permuted(&perm), &cfg).unwrap().total - out.total).abs());

        let scaled: Vec<Vec<f64>> = batch
            .vectors()
            .iter()
            .enumerate()
            .map(|(k, v)| v.iter().map(|x| x * (0.01 + 7.3 * k as f64)).collect())
            .collect();
        let scaled = EmbeddingBatch::new(scaled, batch.groups().to_vec()).unwrap();
        scale_err = scale_err.max((vgl_batch(&scaled, &cfg).unwrap().total - out.total).abs());

        for (g, v) in out.grad_embeddings.as_ref().unwrap().iter().zip(batch.vectors()) {
            ortho = ortho.max(g.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().abs());
        }

        let row = AnchorSims::new(vec![0.8, 0.6, 0.3], vec![0.4, -0.1]);
        let mut up = row.clone();
        up.negatives[i % 2] += 0.05;
        mono_ok &= up.loss(&cfg) > row.loss(&cfg);
    }
    let mut closed = 0.0f64;
    for (p, m) in [(2usize, 2usize), (3, 5), (19, 304)] {
        let row = AnchorSims::new(vec![0.37; p], vec![0.37; m]);
        let cfg = VglConfig::new(0.2, true).unwrap();
        closed = closed.max((row.loss(&cfg) - m as f64 / (m + p - 1) as f64).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    let passed =
        range_ok && perm_err <= 1e-10 && scale_err <= 1e-6 && mono_ok && ortho <= 1e-8 && closed <= 1e-12 && secs < 10.0;
    verdict(
        passed,
        format!(
            "range {range_ok}, perm {perm_err:.1e}, scale {scale_err:.1e}, monotone {mono_ok}, \
             orthogonality {ortho:.1e}, closed form {closed:.1e}, {secs:.2}s"
        ),
    )
}

fn gradient_gap() -> Verdict {
    let grid = default_c_grid();
    let on = gradient_gap_curve(0.2, true, &grid, DEFAULT_BASE).unwrap();
    let off = gradient_gap_curve(0.2, false, &grid, DEFAULT_BASE).unwrap();
    let min = on.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let positive = min > 0.0;
    let nondecreasing = on.windows(2).all(|w| w[1].1 >= w[0].1);
    let (tv_on, tv_off) = (total_variation(&on), total_variation(&off));
    let passed = positive && nondecreasing && tv_off < tv_on;
    verdict(
        passed,
        format!(
            "attention on: min {min:.4}, positive {positive}, nondecreasing {nondecreasing}; \
             total variation on {tv_on:.4}, off {tv_off:.4}"
        ),
    )
}

fn gap_decay() -> Verdict {
    let grid = default_c_grid();
    let sharp = gradient_gap_curve(0.01, true, &grid, DEFAULT_BASE).unwrap();
    let smooth = gradient_gap_curve(0.2, true, &grid, DEFAULT_BASE).unwrap();
    let argmax = |c: &[(f64, f64)]| {
        c.iter().enumerate().fold(0, |best, (k, p)| if p.1 > c[best].1 { k } else { best })
    };
    let (a, b) = (argmax(&sharp), argmax(&smooth));
    let max_sharp = sharp[a].1;
    let last = sharp.last().unwrap().1;
    let interior = |k: usize, n: usize| k > 0 && k + 1 < n;
    let passed = last < max_sharp && !interior(b, smooth.len());
    verdict(
        passed,
        format!(
            "tau 0.01: max {max_sharp:.4} at gap {:.3}, value at C=0.15 {last:.4}; tau 0.2: max at gap {:.3}",
            sharp[a].0, smooth[b].0
        ),
    )
}

fn desk_training() -> Verdict {
    let t = Instant::now();
    let cfg = PretrainConfig { record_wall_clock: false, ..PretrainConfig::desk() };
    let train = SynthConfig { num_sources: 200, num_classes: 3, image_size: 32, seed: 0, ..SynthConfig::default() };
    let held = SynthConfig { num_sources: 64, seed: 99, ..train.clone() };
    let (train, _) = synthetic_images(&train).unwrap();
    let (held, _) = synthetic_images(&held).unwrap();

    let out = pretrain_on_images(&cfg, &train).unwrap();
    let (first, last) = (out.metrics.first_loss().unwrap(), out.metrics.last_loss().unwrap());

    let eval_seed = rng::mix(5, Domain::Eval as u64);
    let trained = augmented_view_retrieval(&out.checkpoint.params, &held, 6, &cfg.augmentation, eval_seed, 1).unwrap();
    let init = EncoderParams::<f32>::init(cfg.encoder.clone(), rng::mix(cfg.seed, Domain::Init as u64)).unwrap();
    let random = augmented_view_retrieval(&init, &held, 6, &cfg.augmentation, eval_seed, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();

    let a = last < 0.5 * first;
    let b = trained.precision_at_k >= 3.0 * trained.chance_level;
    let c = trained.precision_at_k - random.precision_at_k >= 0.15;
    let passed = a && b && c && secs < 900.0;
    verdict(
        passed,
        format!(
            "loss {first:.3} -> {last:.3} (ratio {:.3}); p@1 {:.3} vs chance {:.4} and random init {:.3}; {secs:.0}s",
            last / first,
            trained.precision_at_k,
            trained.chance_level,
            random.precision_at_k
        ),
    )
}

fn small_config(manifest: &Path) -> PretrainConfig {
    PretrainConfig {
        manifest: Some(manifest.to_path_buf()),
        batch_size: 4,
        n_aug: 2,
        epochs: 1,
        base_lr: 0.01,
        record_wall_clock: false,
        augmentation: AugmentationSpec { output_size: 16, ..AugmentationSpec::default() },
        encoder: EncoderConfig {
            input_size: 16,
            conv_channels: vec![4, 8],
            hidden_dim: 16,
            embed_dim: 8,
            ..EncoderConfig::default()
        },
        ..PretrainConfig::default()
    }
}

fn synth_dir(dir: &Path) -> std::path::PathBuf {
    let cfg = SynthConfig { num_sources: 16, num_classes: 3, image_size: 16, seed: 2, ..SynthConfig::default() };
    generate_synthetic_dataset(&cfg, dir).unwrap();
    dir.join(MANIFEST_FILE)
}

fn ablation_harness() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dir(&dir.path().join("data"));
    let base = small_config(&manifest);
    let mut runs: Vec<(String, PretrainConfig)> = Vec::new();
    for n in [0, 2, 10, 20] {
        runs.push((format!("n{n}"), PretrainConfig { n_aug: n, ..base.clone() }));
    }
    for b in [4, 8, 16] {
        runs.push((format!("b{b}"), PretrainConfig { batch_size: b, ..base.clone() }));
    }
    for tau in [0.01, 0.1, 0.2, 0.5, 1.0] {
        runs.push((format!("tau{tau}"), PretrainConfig { tau, ..base.clone() }));
    }
    for attention in [true, false] {
        runs.push((format!("att{attention}"), PretrainConfig { attention_enabled: attention, ..base.clone() }));
    }
    let mut failures = Vec::new();
    for (name, mut cfg) in runs.clone() {
        let ckpt = dir.path().join(format!("{name}.grvs"));
        let metrics = dir.path().join(format!("{name}.csv"));
        cfg.checkpoint_path = Some(ckpt.clone());
        cfg.metrics_path = Some(metrics.clone());
        let ok = pretrain_run(&cfg).is_ok()
            && load_checkpoint(&ckpt).is_ok()
            && fs::read_to_string(&metrics).map(|m| m.lines().count() == cfg.epochs + 1).unwrap_or(false);
        if !ok {
            failures.push(name);
        }
    }
    let rejected = pretrain_run(&PretrainConfig { n_aug: 1, ..base }).err().map(|e| e.name());
    let passed = failures.is_empty() && rejected == Some("InvalidN");
    verdict(passed, format!("{} runs, failed {failures:?}; N=1 gives {rejected:?}", runs.len()))
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dir(&dir.path().join("data"));
    let run = |tag: &str| {
        let cfg = PretrainConfig {
            epochs: 3,
            checkpoint_path: Some(dir.path().join(format!("{tag}.grvs"))),
            metrics_path: Some(dir.path().join(format!("{tag}.csv"))),
            ..small_config(&manifest)
        };
        pretrain_run(&cfg).unwrap();
        (fs::read(dir.path().join(format!("{tag}.grvs"))).unwrap(), fs::read(dir.path().join(format!("{tag}.csv"))).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    let passed = a.0 == b.0 && a.1 == b.1;
    verdict(passed, format!("checkpoint {} bytes identical {}, metrics identical {}", a.0.len(), a.0 == b.0, a.1 == b.1))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("1 worked value", worked_value),
        ("2 gradient suite", gradient_suite),
        ("3 invariants", invariants),
        ("4 gradient gap under attention", gradient_gap),
        ("5 gap decay at small tau", gap_decay),
        ("6 desk training", desk_training),
        ("7 ablation harness", ablation_harness),
        ("8 determinism", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let v = run();
        println!("{} criterion {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
