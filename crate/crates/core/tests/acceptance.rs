//! Acceptance suite. Run with `cargo test --release --test acceptance`;
//! pass criterion names (`C2 C5 ...`) after `--` to run a subset.
//! Prints one line per criterion and exits nonzero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use consensus_diffusion::consensus::{average_stack, build_consensus_stack, fraction_map, AnnotationSet, SoftMap};
use consensus_diffusion::data::{synthesize, Dataset, Split, SynthSpec};
use consensus_diffusion::diffusion::{forward_noise, reverse_step, NoiseSchedule};
use consensus_diffusion::eval::{dice, pairwise_dice, soft_dice, EvalReport, SOFT_DICE_THRESHOLDS};
use consensus_diffusion::inference::{generate, image_key, mean_soft_dice, InferenceConfig};
use consensus_diffusion::maps::{Map, Mask};
use consensus_diffusion::model::{init_model, sha256_hex, ModelConfig, ModelParams};
use consensus_diffusion::training::{
    loss_and_gradients, sample_training_pair, train, TrainConfig, TrainMode, TrainRun,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn split(spec: &SynthSpec, sets: &[AnnotationSet], which: Split) -> Dataset {
    let picked = sets
        .iter()
        .enumerate()
        .filter(|(i, _)| spec.split_of(*i) == which)
        .map(|(_, s)| s.clone())
        .collect();
    Dataset::new(picked).unwrap()
}

fn c1() -> Option<Outcome> {
    None
}

fn c2() -> Outcome {
    let start = Instant::now();
    let mut problems = Vec::new();
    for t in [2, 10, 100] {
        let s = NoiseSchedule::new(t).map_err(|e| e.to_string())?;
        if (s.beta(1) - 1e-4).abs() >= 1e-12 || (s.beta(t) - 2e-2).abs() >= 1e-12 {
            problems.push(format!("T={t}: beta endpoints {} {}", s.beta(1), s.beta(t)));
        }
        if !s.alpha_bars().windows(2).all(|w| w[1] < w[0]) {
            problems.push(format!("T={t}: alpha_bar not strictly decreasing"));
        }
    }
    let ab = NoiseSchedule::new(100).unwrap().alpha_bar(100);
    if ab >= 0.01 {
        problems.push(format!("alpha_bar[100] = {ab:.4} is not < 0.01"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1.0 {
        problems.push(format!("took {secs:.2}s"));
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("endpoints and monotonicity hold, alpha_bar[100] = {ab:.4}")
        } else {
            problems.join("; ")
        },
    )
}

fn c3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sched = NoiseSchedule::new(100).unwrap();
    let n = 64;
    let (mut one_step, mut chain) = (0f64, 0f64);
    for _ in 0..100 {
        let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let t = rng.random_range(1..=100);
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        // x_1 from the true noise, then a single reverse step with that noise
        let x1 = forward_noise(&x0, 1, &eps, &sched).unwrap();
        let back = reverse_step(&x1, &eps, 1, &[], &sched).unwrap();
        one_step = back.iter().zip(&x0).fold(one_step, |m, (a, b)| m.max((a - b).abs()));
        // full chain from x_t with the oracle noise estimate at every step and z = 0
        let mut x = forward_noise(&x0, t, &eps, &sched).unwrap();
        let zero = vec![0.0; n];
        for s in (1..=t).rev() {
            let ab = sched.alpha_bar(s);
            let e: Vec<f64> = x.iter().zip(&x0).map(|(xt, x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect();
            x = reverse_step(&x, &e, s, &zero, &sched).unwrap();
        }
        chain = x.iter().zip(&x0).fold(chain, |m, (a, b)| m.max((a - b).abs()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        one_step < 1e-5 && chain < 1e-3 && secs < 5.0,
        format!("one-step max err {one_step:.2e}, chain max err {chain:.2e}, {secs:.2}s"),
    )
}

fn c4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    for i in 0..1000 {
        let c = rng.random_range(2..=7);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let p = rng.random_range(0.1..0.9);
        let masks = (0..c)
            .map(|_| Mask::new(h, w, (0..h * w).map(|_| u8::from(rng.random_bool(p))).collect()).unwrap())
            .collect();
        let set = AnnotationSet::new(format!("{i}"), Map::zeros(h, w), masks).unwrap();
        let stack = build_consensus_stack(&set);
        if average_stack(&stack) != fraction_map(&set) || !stack.is_nested() {
            bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(bad == 0 && secs < 5.0, format!("{bad} of 1000 sets differ, {secs:.2}s"))
}

fn c5() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        image_size: 8,
        base_channels: 8,
        depth: 2,
        channel_multipliers: vec![1, 2],
        res_blocks: 1,
        attention_resolutions: vec![4],
        rrdb_blocks: 1,
        growth_channels: None,
        embed_dim: 16,
        heads: 2,
        consensus_levels: 3,
        timesteps: 100,
    };
    let mut params: ModelParams<f64> = init_model(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // zero-initialised layers would hide most of the network from the loss
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let spec = SynthSpec {
        count: 4,
        test_count: 0,
        image_size: 8,
        ..Default::default()
    };
    let ds = Dataset::new(synthesize(&spec).unwrap()).unwrap();
    let batch: Vec<_> = (0..2)
        .map(|_| sample_training_pair(&ds, TrainMode::Consensus, None, &mut rng).unwrap())
        .collect();
    let sched = NoiseSchedule::new(100).unwrap();
    let eval = |p: &ModelParams<f64>| loss_and_gradients(p, &batch, &sched, &mut ChaCha8Rng::seed_from_u64(55)).unwrap();
    let analytic = eval(&params).grads;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data().len()).collect();
    let total: usize = sizes.iter().sum();
    let fd = |p: &mut ModelParams<f64>, ti: usize, i: usize, h: f64| {
        let orig = p.tensors()[ti].data()[i];
        p.tensors_mut()[ti].data_mut()[i] = orig + h;
        let up = eval(p).loss;
        p.tensors_mut()[ti].data_mut()[i] = orig - h;
        let down = eval(p).loss;
        p.tensors_mut()[ti].data_mut()[i] = orig;
        (up - down) / (2.0 * h)
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut worst = (0f64, String::new());
    let mut over = Vec::new();
    for _ in 0..200 {
        let mut flat = rng.random_range(0..total);
        let ti = sizes
            .iter()
            .position(|&s| {
                if flat < s {
                    true
                } else {
                    flat -= s;
                    false
                }
            })
            .unwrap();
        let a = analytic[ti].as_ref().map_or(0.0, |g| g.data()[flat]);
        let r = rel(a, fd(&mut params, ti, flat, 1e-3));
        if r >= 1e-4 {
            over.push((ti, flat, a));
        }
        if r > worst.0 {
            worst = (r, format!("{}[{flat}]", params.names()[ti]));
        }
    }
    // entries over tolerance are differenced again with a much smaller step
    let fine = over.iter().fold(0f64, |m, &(ti, i, a)| m.max(rel(a, fd(&mut params, ti, i, 1e-6))));
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!("max rel err {:.2e} at {} (h = 1e-3), {secs:.1}s", worst.0, worst.1);
    if !over.is_empty() {
        let mut names: Vec<&str> = over.iter().map(|&(ti, _, _)| params.names()[ti].as_str()).collect();
        names.dedup();
        detail += &format!(
            "; {} of 200 entries at or above 1e-4 ({}), the same entries at h = 1e-6 agree to {fine:.1e}",
            over.len(),
            names.join(", ")
        );
    }
    check(worst.0 < 1e-4 && secs < 120.0, detail)
}

struct Overfit {
    params: ModelParams,
    sched: NoiseSchedule,
    test: Dataset,
    result: Outcome,
}

fn c6() -> Overfit {
    let start = Instant::now();
    let spec = SynthSpec::default();
    let sets = synthesize(&spec).unwrap();
    let (tr, te) = (split(&spec, &sets, Split::Train), split(&spec, &sets, Split::Test));
    let cfg = TrainConfig {
        steps: 3000,
        batch_size: 4,
        learning_rate: 1e-3,
        augment: false,
        ..Default::default()
    };
    let out = train(&tr, &ModelConfig::desk(), &cfg, TrainRun::default()).unwrap();
    let ic = InferenceConfig {
        n_generations: 5,
        levels: 3,
        seed: 0,
        workers: 1,
    };
    let ck = out.checkpoint;
    let d = mean_soft_dice(&ck.params, &ck.schedule, &tr, &ic).unwrap();
    let tail = out.losses[out.losses.len() - 100..].iter().sum::<f64>() / 100.0;
    let secs = start.elapsed().as_secs_f64();
    Overfit {
        result: check(
            d >= 0.85,
            format!(
                "{} train samples, train soft Dice {d:.4} (n = 5), final loss {tail:.4}, {:.1} min",
                tr.len(),
                secs / 60.0
            ),
        ),
        params: ck.params,
        sched: ck.schedule,
        test: te,
    }
}

fn c7(m: &Overfit) -> Outcome {
    let start = Instant::now();
    let images: Vec<(u64, &Map)> = m.test.samples.iter().map(|s| (image_key(&s.sample_id), s.image())).collect();
    let truth: Vec<SoftMap> = m.test.samples.iter().map(fraction_map).collect();
    let ns = [1usize, 5, 10, 25];
    let repeats = 20u64;
    let mut dice_at = [0f64; 4];
    let hw = images[0].1.len();
    // running sums over repeats of each sample's n = 1 and n = 25 predictions
    let mut sum = vec![[vec![0f64; hw], vec![0f64; hw]]; images.len()];
    let mut sq = sum.clone();
    for r in 0..repeats {
        let cfg = InferenceConfig {
            n_generations: 25,
            levels: 3,
            seed: r,
            workers: 1,
        };
        let gens = generate(&images, &m.params, &m.sched, &cfg).unwrap();
        for (i, g) in gens.iter().enumerate() {
            if r == 0 {
                for (k, &n) in ns.iter().enumerate() {
                    dice_at[k] += soft_dice(&g.ensemble(n).unwrap(), &truth[i], &SOFT_DICE_THRESHOLDS).unwrap()
                        / images.len() as f64;
                }
            }
            for (slot, n) in [1usize, 25].into_iter().enumerate() {
                let e = g.ensemble(n).unwrap();
                for (p, &v) in e.data().iter().enumerate() {
                    sum[i][slot][p] += v as f64;
                    sq[i][slot][p] += (v as f64) * (v as f64);
                }
            }
        }
    }
    let mut std = [0f64; 2];
    for i in 0..images.len() {
        for (slot, s) in std.iter_mut().enumerate() {
            let mean_std: f64 = (0..hw)
                .map(|p| {
                    let mu = sum[i][slot][p] / repeats as f64;
                    let var = sq[i][slot][p] / repeats as f64 - mu * mu;
                    (var.max(0.0) * repeats as f64 / (repeats - 1) as f64).sqrt()
                })
                .sum::<f64>()
                / hw as f64;
            *s += mean_std / images.len() as f64;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        dice_at[3] >= dice_at[0] && std[1] < std[0],
        format!(
            "{} test samples, soft Dice n=1 {:.4}, n=5 {:.4}, n=10 {:.4}, n=25 {:.4}; pixel std over {repeats} repeats n=1 {:.4}, n=25 {:.4}; {:.1} min",
            images.len(),
            dice_at[0],
            dice_at[1],
            dice_at[2],
            dice_at[3],
            std[0],
            std[1],
            secs / 60.0
        ),
    )
}

fn c8() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec::default();
    let sets = synthesize(&spec).unwrap();
    let (tr, te) = (split(&spec, &sets, Split::Train), split(&spec, &sets, Split::Test));
    let mut means = [0f64; 2];
    let mut per_seed = Vec::new();
    for seed in 0..3u64 {
        let mut row = Vec::new();
        for (k, mode) in [TrainMode::Consensus, TrainMode::SoftLabel].into_iter().enumerate() {
            let cfg = TrainConfig {
                mode,
                seed,
                steps: 1500,
                learning_rate: 1e-3,
                ..Default::default()
            };
            let ck = train(&tr, &ModelConfig::desk(), &cfg, TrainRun::default()).unwrap().checkpoint;
            let ic = InferenceConfig {
                n_generations: 5 * mode.generation_factor(tr.annotators),
                levels: mode.condition_count(tr.annotators),
                seed,
                workers: 1,
            };
            let d = mean_soft_dice(&ck.params, &ck.schedule, &te, &ic).unwrap();
            means[k] += d / 3.0;
            row.push(format!("{d:.4}"));
        }
        per_seed.push(format!("seed {seed}: {}", row.join(" vs ")));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        means[0] >= means[1],
        format!(
            "test soft Dice consensus {:.4} vs soft_label {:.4} (1500 steps each, 15 sampled maps per image for both; {}); {:.1} min",
            means[0],
            means[1],
            per_seed.join(", "),
            secs / 60.0
        ),
    )
}

fn c9() -> Outcome {
    let mut failed = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-12 {
            failed.push(format!("{name}: {got} != {want}"));
        }
    };
    let m = |v: Vec<u8>| Mask::new(1, v.len(), v).unwrap();
    let s = |h: usize, w: usize, v: Vec<f32>| SoftMap::new(Map::new(h, w, v).unwrap()).unwrap();
    let t = &SOFT_DICE_THRESHOLDS;

    expect("dice a == b", dice(&m(vec![1, 1, 0]), &m(vec![1, 1, 0])).unwrap(), 1.0);
    expect("dice disjoint", dice(&m(vec![1, 0, 0]), &m(vec![0, 1, 1])).unwrap(), 0.0);
    expect("dice both empty", dice(&m(vec![0, 0]), &m(vec![0, 0])).unwrap(), 1.0);
    expect(
        "dice 4/6/3",
        dice(&m(vec![1, 1, 1, 1, 0, 0, 0]), &m(vec![0, 1, 1, 1, 1, 1, 1])).unwrap(),
        0.6,
    );
    let bin = s(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    expect("soft dice binary self", soft_dice(&bin, &bin, t).unwrap(), 1.0);
    let half = s(2, 2, vec![0.5; 4]);
    expect("soft dice uniform 0.5", soft_dice(&half, &half, t).unwrap(), 1.0);

    let votes = [3u8, 2, 2, 2, 1, 1, 0, 0, 0];
    let masks = (0..3)
        .map(|a| Mask::new(3, 3, votes.iter().map(|&v| u8::from(v > a)).collect()).unwrap())
        .collect();
    let gt = fraction_map(&AnnotationSet::new("h", Map::zeros(3, 3), masks).unwrap());
    let hand = (12.0 / 15.0 + 12.0 / 15.0 + 8.0 / 13.0 + 0.0 + 0.0) / 5.0;
    expect("soft dice 3x3 hand case", soft_dice(&s(3, 3, vec![0.6; 9]), &gt, t).unwrap(), hand);

    let same = AnnotationSet::new("s", Map::zeros(1, 3), vec![m(vec![1, 0, 1]); 3]).unwrap();
    expect("pairwise identical", 100.0 * pairwise_dice(&[same]).unwrap(), 100.0);
    let (a, b) = (m(vec![1, 1, 0, 1]), m(vec![1, 0, 0, 1]));
    let two = AnnotationSet::new("t", Map::zeros(1, 4), vec![a.clone(), b.clone()]).unwrap();
    expect("pairwise C=2", pairwise_dice(&[two]).unwrap(), dice(&a, &b).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let four: Vec<Mask> = (0..4)
        .map(|_| Mask::new(3, 3, (0..9).map(|_| rng.random_range(0..2u8)).collect()).unwrap())
        .collect();
    let mut pairs = 0.0;
    for i in 0..4 {
        for j in i + 1..4 {
            pairs += dice(&four[i], &four[j]).unwrap() / 6.0;
        }
    }
    let set4 = AnnotationSet::new("f", Map::zeros(3, 3), four).unwrap();
    expect("pairwise C=4", pairwise_dice(&[set4]).unwrap(), pairs);

    let clean = SynthSpec {
        radial_noise: 0.0,
        offset_noise: 0.0,
        ..Default::default()
    };
    let sets = synthesize(&clean).unwrap();
    let scored: Vec<_> = sets
        .iter()
        .map(|s| (s.sample_id.clone(), fraction_map(s), fraction_map(s)))
        .collect();
    let r = EvalReport::build(&scored, &sets, t).unwrap();
    expect("report soft Dice, noise 0", r.mean_soft_dice, 100.0);
    expect("report pairwise, noise 0", r.pairwise_mean.unwrap_or(f64::NAN), 100.0);
    let n = 12 - failed.len();
    check(failed.is_empty(), if failed.is_empty() { format!("{n} examples exact") } else { failed.join("; ") })
}

const TINY: &str = r#"{
  "schema_version": 1,
  "model": {
    "image_size": 16, "base_channels": 8, "depth": 2, "channel_multipliers": [1, 2],
    "res_blocks": 1, "attention_resolutions": [8], "rrdb_blocks": 1, "growth_channels": null,
    "embed_dim": 16, "heads": 2, "consensus_levels": 3, "timesteps": 20
  },
  "train": { "steps": 20, "batch_size": 4, "learning_rate": 0.001 },
  "infer": { "generations": 3 },
  "synth": { "count": 6, "test_count": 2, "image_size": 16 }
}"#;

fn pngs(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), sha256_hex(&std::fs::read(&p).unwrap())))
        .collect();
    v.sort();
    v
}

fn c10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.json"), TINY).unwrap();
    let p = |rel: &str| root.join(rel).display().to_string();
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_condiff"))
            .args(args)
            .env_remove("CONDIFF_OUTPUT_ROOT")
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
        }
    };
    let cfg = p("run.json");
    run(&["synth", "--config", &cfg, "--out", &p("data")])?;
    for r in ["r1", "r2"] {
        run(&["train", "--config", &cfg, "--data", &p("data"), "--out", &p(r)])?;
    }
    let hash = |r: &str| sha256_hex(&std::fs::read(root.join(r).join("checkpoint.ckpt")).unwrap());
    let (h1, h2) = (hash("r1"), hash("r2"));
    let ck = p("r1/checkpoint.ckpt");
    for (out, workers) in [("p1", "1"), ("p1b", "1"), ("p4", "4")] {
        run(&["infer", "--config", &cfg, "--checkpoint", &ck, "--input", &p("data"), "--out", &p(out), "--workers", workers])?;
    }
    let (a, b, c) = (pngs(&root.join("p1")), pngs(&root.join("p1b")), pngs(&root.join("p4")));
    check(
        h1 == h2 && !a.is_empty() && a == b && a == c,
        format!(
            "checkpoint hashes {} / {}, {} prediction PNGs identical across reruns: {}, across 1 vs 4 workers: {}",
            &h1[..12],
            &h2[..12],
            a.len(),
            a == b,
            a == c
        ),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('C')).collect();
    let on = |name: &str| wanted.is_empty() || wanted.iter().any(|w| w == name);
    let mut failures = 0;
    let mut report = |name: &str, title: &str, r: Option<Outcome>| {
        let (tag, detail) = match r {
            None => ("N/A ", "QUBIQ benchmark numbers need the QUBIQ data and GPU-scale training".to_string()),
            Some(Ok(d)) => ("PASS", d),
            Some(Err(d)) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{name:<3} {tag} {title}: {detail}");
    };
    if on("C1") {
        report("C1", "QUBIQ benchmark results", c1());
    }
    if on("C2") {
        report("C2", "schedule", Some(c2()));
    }
    if on("C3") {
        report("C3", "oracle round trip", Some(c3()));
    }
    if on("C4") {
        report("C4", "consensus identity", Some(c4()));
    }
    if on("C5") {
        report("C5", "gradient check", Some(c5()));
    }
    if on("C6") || on("C7") {
        let m = c6();
        if on("C6") {
            report("C6", "overfit sanity", Some(m.result.clone()));
        }
        if on("C7") {
            report("C7", "ensembling trend", Some(c7(&m)));
        }
    }
    if on("C8") {
        report("C8", "ablation direction", Some(c8()));
    }
    if on("C9") {
        report("C9", "metric examples", Some(c9()));
    }
    if on("C10") {
        report("C10", "reproducibility", Some(c10()));
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
