//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 7 and 8 are directional comparisons between trained variants;
//! their outcome is printed but only fails the target when
//! `PROMPTFORGE_STRICT_ACCEPTANCE=1`. Every other criterion is a hard check.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use promptforge::cli::{cmd_run, RunConfig, Workspace};
use promptforge::episodes::{evaluate, generate_synthetic_domain, EpisodeConfig, EvalOptions, RandomPredictor, SyntheticDomainSpec};
use promptforge::losses::{arcface_value, diversity_loss_value, grad_check_suite, semantic_contrastive_value, tsc_value, ArcFaceConfig, GradCheckOptions};
use promptforge::numerics::{cosine, SeededRng, Tensor};
use promptforge::pipeline::{augment_support, step1_train, train_episode, PipelineConfig, Variant};
use promptforge::semantic::{select_semantic_targets, top_c, draw_rank, LabeledFeatures, RankDraw, SelectionConfig};

struct Outcome {
    id: u32,
    pass: bool,
    hard: bool,
    detail: String,
}

fn line(o: &Outcome) {
    println!(
        "criterion {:>2} {}  {}",
        o.id,
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn c1_gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = grad_check_suite(&GradCheckOptions::default()).expect("suite runs");
    let elapsed = start.elapsed();
    let errs: Vec<String> = results
        .iter()
        .map(|r| format!("{} {:.1e}", r.loss.name(), r.max_relative_error))
        .collect();
    let pass = results.len() == 4
        && results.iter().all(|r| r.passed && r.configurations >= 20 && r.max_relative_error < 1e-4)
        && elapsed < Duration::from_secs(60);
    Outcome {
        id: 1,
        pass,
        hard: true,
        detail: format!("finite differences, 20 configs each: {} ({})", errs.join(", "), secs(elapsed)),
    }
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).unwrap()
}

fn c2_loss_identities() -> Outcome {
    let identical = diversity_loss_value(&matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0])).unwrap();
    let orthogonal = diversity_loss_value(&matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0])).unwrap();

    // one semantic feature equidistant from N orthonormal class prompts
    let n = 5;
    let mut prompts = vec![0.0; n * n];
    for i in 0..n {
        prompts[i * n + i] = 1.0;
    }
    let uniform = semantic_contrastive_value(&matrix(1, n, vec![1.0; n]), &[2], &matrix(n, n, prompts)).unwrap();

    let singleton = tsc_value(&matrix(1, 3, vec![0.3, -1.0, 2.0]), &[vec![0]], &matrix(1, 3, vec![1.0, 0.5, 0.1]), 0.07).unwrap();

    let mut rng = SeededRng::new(11);
    let f = matrix(4, 6, (0..24).map(|_| rng.normal()).collect());
    let w = matrix(3, 6, (0..18).map(|_| rng.normal()).collect());
    let labels = [0, 2, 1, 2];
    let arc = arcface_value(&f, &labels, &w, &ArcFaceConfig { scale: 1.0, margin: 0.0 }).unwrap();
    let mut ce = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let logits: Vec<f64> = (0..3).map(|c| cosine(f.row_slice(i), w.row_slice(c))).collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        ce += lse - logits[y];
    }
    ce /= labels.len() as f64;

    let d_ident = (identical - 1.0).abs();
    let d_orth = orthogonal.abs();
    let d_uniform = (uniform - (n as f64).ln()).abs();
    let d_single = singleton.abs();
    let d_arc = (arc - ce).abs();
    Outcome {
        id: 2,
        pass: d_ident <= 1e-12 && d_orth <= 1e-12 && d_uniform <= 1e-9 && d_single <= 1e-12 && d_arc <= 1e-12,
        hard: true,
        detail: format!(
            "L_div identical {identical} / orthogonal {orthogonal}; L_se uniform - ln 5 = {d_uniform:.1e}; \
             L_TSC singleton {singleton:.1e}; ArcFace(s=1,m=0) - cosine CE = {d_arc:.1e}"
        ),
    }
}

fn desk() -> Workspace {
    Workspace::prepare(RunConfig::default()).expect("desk workspace")
}

fn c3_gradient_isolation(ws: &Workspace) -> Outcome {
    let config = PipelineConfig {
        iterations: 100,
        ..ws.config.pipeline.clone()
    };
    let ep = promptforge::episodes::episode_for(&ws.dataset, &ws.config.episode, 0, 0).unwrap();
    let rng = SeededRng::new(0);
    let aug = augment_support(&ep.support, config.n_v, ws.weights.config().patch_size, true, &mut rng.substream("augment")).unwrap();
    let out = step1_train(&ep, &aug, &ws.text, &ws.weights, &config, &rng).unwrap();
    let r = &out.diagnostics.routing;
    let leak_a = r.iter().map(|s| s.adapter_grad_in_prompt_pass).fold(0.0, f64::max);
    let leak_p = r.iter().map(|s| s.prompt_grad_in_semantic_pass).fold(0.0, f64::max);
    let moved = r.iter().all(|s| s.prompt_delta > 0.0) && r.iter().any(|s| s.adapter_delta > 0.0);
    Outcome {
        id: 3,
        pass: r.len() == 100 && leak_a == 0.0 && leak_p == 0.0 && moved,
        hard: true,
        detail: format!(
            "{} iterations: max adapter grad in prompt pass {leak_a}, max prompt grad in L_se pass {leak_p}",
            r.len()
        ),
    }
}

fn c4_frozen_backbone(ws: &Workspace) -> Outcome {
    let before = ws.weights.compute_checksum();
    let ep = promptforge::episodes::episode_for(&ws.dataset, &ws.config.episode, 0, 1).unwrap();
    for v in [Variant::Full, Variant::OneStep] {
        let config = PipelineConfig {
            variant: v,
            ..ws.config.pipeline.clone()
        };
        train_episode(&ep, &ws.text, &ws.weights, &config, &SeededRng::new(1)).unwrap();
    }
    let after = ws.weights.compute_checksum();
    Outcome {
        id: 4,
        pass: before == after && before == ws.weights.recorded_checksum(),
        hard: true,
        detail: format!("encoder CRC32 before {before:08x}, after full + one_step episodes {after:08x}"),
    }
}

fn c5_budget(ws: &Workspace) -> Outcome {
    let mut counts = Vec::new();
    for (shots, n_v) in [(1, 24), (5, 4)] {
        let cfg = EpisodeConfig {
            shots,
            ..EpisodeConfig::default()
        };
        let ep = promptforge::episodes::episode_for(&ws.dataset, &cfg, 0, 0).unwrap();
        let config = PipelineConfig {
            n_v,
            iterations: 1,
            feature_budget: Some(25),
            ..ws.config.pipeline.clone()
        };
        config.validate(shots, ws.text.descriptions_per_class()).unwrap();
        let trained = train_episode(&ep, &ws.text, &ws.weights, &config, &SeededRng::new(0)).unwrap();
        counts.push((shots, n_v, trained.features.per_class_counts(5)));
    }
    let pass = counts.iter().all(|(_, _, c)| c.iter().all(|&n| n == 25));
    let detail = counts
        .iter()
        .map(|(k, n_v, c)| format!("K={k}, n_v={n_v}: {c:?}"))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome {
        id: 5,
        pass,
        hard: true,
        detail: format!("per-class classifier features {detail}"),
    }
}

fn c6_selection() -> Outcome {
    let mut rng = SeededRng::new(6);
    let d = 8;
    let mut topc_ok = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(1000);
        let c = 1 + rng.below(n);
        let feats = matrix(n, d, (0..n * d).map(|_| rng.normal()).collect());
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let pool: Vec<usize> = (0..n).collect();
        let got: BTreeSet<usize> = top_c(&v, &feats, &pool, c).into_iter().collect();
        // brute force: i is in the top c iff fewer than c rows beat it
        let scores: Vec<f64> = (0..n).map(|i| cosine(&v, feats.row_slice(i))).collect();
        let want: BTreeSet<usize> = (0..n)
            .filter(|&i| {
                (0..n)
                    .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                    .count()
                    < c
            })
            .collect();
        if got == want {
            topc_ok += 1;
        }
    }

    let cfg = SelectionConfig::default();
    let mut grng = SeededRng::new(7);
    let draws: Vec<f64> = (0..10_000).map(|_| draw_rank(&cfg, &mut grng).unwrap().1).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;

    let classes = 2;
    let per = cfg.c;
    let feats = matrix(classes * per, d, (0..classes * per * d).map(|_| rng.normal()).collect());
    let semantic = LabeledFeatures {
        features: feats,
        labels: (0..classes * per).map(|i| i / per).collect(),
    };
    let mut distinct_ok = 0;
    let trials = 200;
    for t in 0..trials {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let class = t % classes;
        let picks = select_semantic_targets(&v, class, &semantic, &cfg, RankDraw::Gamma, &mut rng).unwrap();
        let set: BTreeSet<usize> = picks.iter().copied().collect();
        if picks.len() == cfg.m && set.len() == cfg.m && picks.iter().all(|&i| semantic.labels[i] == class) {
            distinct_ok += 1;
        }
    }
    Outcome {
        id: 6,
        pass: topc_ok == 1000 && (mean - 150.0).abs() <= 5.0 && distinct_ok == trials,
        hard: true,
        detail: format!(
            "top-c = brute force in {topc_ok}/1000 trials; Gamma(2, 75) mean {mean:.2} over 10^4 draws; \
             {distinct_ok}/{trials} selections with m = {} distinct same-class picks",
            cfg.m
        ),
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Directional {
    /// Per seed: clip_base, b1, full, one_step means.
    means: Vec<[f64; 4]>,
    ablation_time: Duration,
}

fn run_directional(ws: &Workspace) -> Directional {
    let variants = [Variant::ClipBase, Variant::B1, Variant::Full, Variant::OneStep];
    let mut means = Vec::new();
    let mut ablation_time = Duration::ZERO;
    for &seed in &SEEDS {
        let mut row = [0.0; 4];
        for (k, &v) in variants.iter().enumerate() {
            let start = Instant::now();
            let config = PipelineConfig {
                variant: v,
                ..ws.config.pipeline.clone()
            };
            row[k] = ws.evaluate(&config, seed).unwrap().mean;
            if v != Variant::OneStep {
                ablation_time += start.elapsed();
            }
        }
        println!(
            "  seed {seed}: clip_base {:.4}  b1 {:.4}  full {:.4}  one_step {:.4}",
            row[0], row[1], row[2], row[3]
        );
        means.push(row);
    }
    Directional { means, ablation_time }
}

fn c7_ordering(d: &Directional, episodes: usize) -> Outcome {
    let ordered = d.means.iter().filter(|m| m[2] > m[1] && m[1] > m[0]).count();
    let full_over_base = d.means.iter().filter(|m| m[2] > m[0]).count();
    let b1_over_base = d.means.iter().filter(|m| m[1] > m[0]).count();
    let full_over_b1 = d.means.iter().filter(|m| m[2] > m[1]).count();
    let fast = d.ablation_time < Duration::from_secs(15 * 60);
    Outcome {
        id: 7,
        pass: ordered >= 4 && fast,
        hard: false,
        detail: format!(
            "full > b1 > clip_base in {ordered}/5 seeds ({episodes} paired episodes each; full > b1 {full_over_b1}/5, \
             b1 > clip_base {b1_over_base}/5, full > clip_base {full_over_base}/5) in {}",
            secs(d.ablation_time)
        ),
    }
}

fn c8_two_step(d: &Directional) -> Outcome {
    let wins = d.means.iter().filter(|m| m[2] >= m[3]).count();
    let gap = d.means.iter().map(|m| m[2] - m[3]).sum::<f64>() / d.means.len() as f64;
    Outcome {
        id: 8,
        pass: wins >= 4,
        hard: false,
        detail: format!("two-step >= one-step in {wins}/5 seeds, mean gap {:+.4}", gap),
    }
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["first", "second"] {
        let config = RunConfig {
            episodes: 10,
            out_dir: dir.path().join(name),
            ..RunConfig::default()
        };
        let ws = Workspace::prepare(config).unwrap();
        cmd_run(&ws, 7).unwrap();
        bytes.push(std::fs::read(dir.path().join(name).join("report.json")).unwrap());
    }
    Outcome {
        id: 9,
        pass: bytes[0] == bytes[1],
        hard: true,
        detail: format!("two desk runs, seed 7, 10 episodes: report.json {} bytes each, identical = {}", bytes[0].len(), bytes[0] == bytes[1]),
    }
}

fn c10_chance() -> Outcome {
    let dataset = generate_synthetic_domain(&SyntheticDomainSpec::default()).unwrap();
    let report = evaluate(
        &RandomPredictor,
        &dataset,
        &EpisodeConfig::default(),
        &EvalOptions {
            episodes: 1000,
            seed: 0,
            workers: 0,
            config_fingerprint: String::new(),
        },
    )
    .unwrap();
    Outcome {
        id: 10,
        pass: (report.mean - 0.2).abs() <= 0.01,
        hard: true,
        detail: format!("random predictor over 1000 5-way episodes: {:.4}", report.mean),
    }
}

fn main() -> ExitCode {
    let strict = std::env::var("PROMPTFORGE_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1");
    let mut outcomes = Vec::new();
    let mut record = |o: Outcome| {
        line(&o);
        outcomes.push(o);
    };
    record(c1_gradient_suite());
    record(c2_loss_identities());
    let ws = desk();
    record(c3_gradient_isolation(&ws));
    record(c4_frozen_backbone(&ws));
    record(c5_budget(&ws));
    record(c6_selection());
    println!("  directional runs: desk preset, 5-way 1-shot, d = 64, {} episodes per seed", ws.config.episodes);
    let d = run_directional(&ws);
    record(c7_ordering(&d, ws.config.episodes));
    record(c8_two_step(&d));
    record(c9_determinism());
    record(c10_chance());

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    let fatal = failed.iter().any(|o| o.hard || strict);
    println!(
        "acceptance: {}/{} criteria pass{}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        if failed.is_empty() || fatal { "" } else { " (failures are directional and reported only)" }
    );
    if fatal {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
