//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

// The oracles are explicit index loops on purpose.
#![allow(clippy::needless_range_loop)]

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use mpfgvc_cli::run;
use mpfgvc_core::config::{FusionMode, RunConfig, Selector};
use mpfgvc_core::data::{synthesize, Dataset};
use mpfgvc_core::gradcheck::run_suite;
use mpfgvc_core::model::{Labels, Model, GROUPS, HEAD1, IMAGE_ENCODER, PROMPT, TEXT_ENCODER, VLFM};
use mpfgvc_core::objectives::{loss_i2t_class, loss_i2t_pairs, loss_t2i_pairs, BatchEmbeddings};
use mpfgvc_core::pipeline::{evaluate, selection_hit_rate, train_stage1, train_stage2, EvalMode, LossLog};
use mpfgvc_core::ssvp::{aggregate_head_attention, reassemble_sequence, topk_indices};
use mpfgvc_core::vit::{Selection, TokenSequence};
use mpfgvc_core::vlfm::{FusionState, Vlfm};
use mpfgvc_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn labels(ds: &Dataset) -> Labels {
    Labels {
        supercategory: ds.meta.supercategory_name.clone(),
        class_names: ds.meta.class_names.clone(),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(10).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .ok_or("empty suite")?;
    for r in &reports {
        ensure(r.passed(), format!("{} relative error {:.3e}", r.name, r.max_rel_err))?;
    }
    ensure(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} checks x 10 seeds, worst {} {:.2e}, {:.1}s",
        reports.len(),
        worst.name,
        worst.max_rel_err,
        elapsed.as_secs_f64()
    ))
}

/// A parameter group's values as raw bit patterns, so that -0.0 vs 0.0 or a
/// changed NaN payload would count as a change.
type Snapshot = (&'static str, Vec<(String, Vec<u32>)>);

fn bits(m: &Model<f32>, group: &str) -> Vec<(String, Vec<u32>)> {
    m.snapshot(group)
        .into_iter()
        .map(|(n, xs)| (n, xs.iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn freeze_protocol() -> Outcome {
    let cfg = RunConfig::quick();
    let ds = synthesize(&cfg.data).map_err(err)?;
    let mut m: Model<f32> = Model::new(&cfg, labels(&ds)).map_err(err)?;
    let snap = |m: &Model<f32>| -> Vec<Snapshot> { GROUPS.iter().map(|g| (*g, bits(m, g))).collect() };
    let same = |a: &[Snapshot], b: &[Snapshot], g: &str| {
        let find = |s: &[Snapshot]| s.iter().find(|(n, _)| *n == g).map(|x| x.1.clone());
        find(a) == find(b)
    };
    let s0 = snap(&m);
    train_stage1(&mut m, &ds.train, &mut LossLog::default()).map_err(err)?;
    let s1 = snap(&m);
    ensure(same(&s0, &s1, TEXT_ENCODER), "text encoder changed in stage 1")?;
    ensure(!same(&s0, &s1, IMAGE_ENCODER), "image encoder did not train in stage 1")?;
    train_stage2(&mut m, &ds.train, &mut LossLog::default()).map_err(err)?;
    let s2 = snap(&m);
    for g in [IMAGE_ENCODER, TEXT_ENCODER, PROMPT, HEAD1] {
        ensure(same(&s1, &s2, g), format!("{g} changed in stage 2"))?;
    }
    ensure(!same(&s1, &s2, VLFM), "fusion module did not train in stage 2")?;
    let n = |g: &str| s2.iter().find(|(n, _)| *n == g).map(|x| x.1.iter().map(|p| p.1.len()).sum::<usize>());
    Ok(format!(
        "text encoder ({} values) fixed in stage 1; encoders, prompts and head1 fixed in stage 2",
        n(TEXT_ENCODER).unwrap_or(0)
    ))
}

fn sort_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

fn selection_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ties = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=196);
        let k = rng.random_range(1..=n);
        let scores: Vec<f64> = if trial % 2 == 0 {
            (0..n).map(|_| rng.random_range(0..5) as f64).collect()
        } else {
            (0..n).map(|_| rng.random::<f64>()).collect()
        };
        if trial % 2 == 0 {
            ties += 1;
        }
        let got = topk_indices(&scores, k).map_err(err)?.ids;
        ensure(got == sort_oracle(&scores, k), format!("trial {trial}: {got:?}"))?;

        // Reassembly on a random token batch: class token first, then the picks.
        let d = 2;
        let tokens = Tensor::from_fn(&[1, n + 1, d], |i| i as f64);
        let mut g = Graph::<f64>::new();
        let t = g.constant(tokens.clone());
        let seq = TokenSequence {
            tokens: t,
            layer_index: 1,
            includes_class: true,
        };
        let out = reassemble_sequence(&mut g, seq, std::slice::from_ref(&got)).map_err(err)?;
        let v = g.value(out.tokens);
        ensure(v.shape() == [1, k + 1, d], format!("reassembled shape {:?}", v.shape()))?;
        ensure(v.data()[..d] == tokens.data()[..d], "token 0 is not the class token")?;
        for (j, &id) in got.iter().enumerate() {
            ensure(
                v.data()[(j + 1) * d..(j + 2) * d] == tokens.data()[(id + 1) * d..(id + 2) * d],
                "reassembled token does not match its id",
            )?;
        }
    }

    let mut cfg = RunConfig::quick();
    cfg.vit.k = 4;
    let ds = synthesize(&cfg.data).map_err(err)?;
    let m: Model<f64> = Model::new(&cfg, labels(&ds)).map_err(err)?;
    let ids: Vec<usize> = (0..16).collect();
    let mut g = Graph::inference();
    let enc = m
        .vit
        .encode(&mut g, &m.store, &ds.train.batch(&ids, None), &Selection::Attention(Selector::Ssvp))
        .map_err(err)?;
    ensure(enc.final_len == cfg.vit.k + 1, format!("final length {}", enc.final_len))?;
    for (sel, rec) in enc.selected.iter().zip(&enc.attention) {
        ensure(*sel == sort_oracle(&aggregate_head_attention(rec), cfg.vit.k), "encoder selection differs from oracle")?;
    }
    Ok(format!("1000 vectors ({ties} with ties) match the sort oracle; encoder feeds k+1 = {} tokens", cfg.vit.k + 1))
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn nll(row: &[f64], target: usize) -> f64 {
    let mut z = 0.0;
    for v in row {
        z += v.exp();
    }
    -(row[target].exp() / z).ln()
}

fn contrastive_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let rows = |rng: &mut ChaCha8Rng, n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let tensor = |r: &[Vec<f64>]| Tensor::new(vec![r.len(), r[0].len()], r.concat()).unwrap();
    for _ in 0..500 {
        let b = rng.random_range(1..=8);
        let c = rng.random_range(2..=8);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.03..1.0);
        let v = rows(&mut rng, b, d);
        let t = rows(&mut rng, b, d);
        let tc = rows(&mut rng, c, d);
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();

        let mut i2t = 0.0;
        let mut t2i = 0.0;
        let mut cls = 0.0;
        for i in 0..b {
            let mut r1 = Vec::new();
            let mut r2 = Vec::new();
            for j in 0..b {
                r1.push(cos(&v[i], &t[j]));
                r2.push(cos(&t[i], &v[j]));
            }
            i2t += nll(&r1, i);
            t2i += nll(&r2, i);
            let mut r3 = Vec::new();
            for k in 0..c {
                r3.push(cos(&v[i], &tc[k]) / tau);
            }
            cls += nll(&r3, y[i]);
        }
        let n = b as f64;

        let mut g = Graph::new();
        let (vv, tv, cv) = (g.constant(tensor(&v)), g.constant(tensor(&t)), g.constant(tensor(&tc)));
        let a = loss_i2t_pairs(&mut g, vv, tv).map_err(err)?;
        let bb = loss_t2i_pairs(&mut g, vv, tv).map_err(err)?;
        let be = BatchEmbeddings {
            v: vv,
            t_class: cv,
            labels: y,
            tau,
        };
        let l = loss_i2t_class(&mut g, &be).map_err(err)?;
        let get = |x: Var| g.value(x).data()[0];
        for (got, want) in [(get(a), i2t / n), (get(bb), t2i / n), (get(l), cls / n)] {
            worst = worst.max((got - want).abs());
        }
        if b == 1 {
            ensure(get(a) == 0.0 && get(bb) == 0.0, format!("B=1 pair losses {} {}", get(a), get(bb)))?;
        }
    }
    ensure(worst < 1e-10, format!("max deviation {worst:.3e}"))?;
    Ok(format!("500 random batches, max deviation {worst:.2e}; B=1 gives exactly 0"))
}

fn fusion_algebra() -> Outcome {
    let (d, c, b) = (8, 6, 4);
    let mut worst_sum: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let vlfm = Vlfm::new(&mut store, d, c, &mut rng).map_err(err)?;
        let ev = Tensor::from_fn(&[b, d], |_| rng.random_range(-2.0..2.0));
        let et = Tensor::from_fn(&[c, d], |_| rng.random_range(-2.0..2.0));
        let mut g = Graph::inference();
        let (evv, etv) = (g.constant(ev), g.constant(et));
        let f = vlfm.forward(&mut g, &store, evv, etv, FusionMode::Vlfm).map_err(err)?;
        for i in 0..b {
            let s = FusionState::from_graph(&g, &f, i).s;
            worst_sum = worst_sum.max((s.iter().sum::<f64>() - 1.0).abs());
        }

        let tokens = vlfm.tokens(&mut g, evv, Some(etv)).map_err(err)?;
        let (_, _, v) = vlfm.project_qkv(&mut g, &store, evv, tokens).map_err(err)?;
        let values = g.value(v).clone();
        for hot in 0..=c {
            let s = g.constant(Tensor::from_fn(&[b, 1, c + 1], |i| if i % (c + 1) == hot { 1.0 } else { 0.0 }));
            let fused = vlfm.fuse(&mut g, s, v).map_err(err)?;
            let fv = g.value(fused);
            for img in 0..b {
                let want = &values.data()[(img * (c + 1) + hot) * d..][..d];
                ensure(&fv.data()[img * d..(img + 1) * d] == want, "one-hot S does not reproduce its value row")?;
            }
        }

        let solo = vlfm.forward(&mut g, &store, evv, etv, FusionMode::SelfAttentionOnly).map_err(err)?;
        let v0 = vlfm.wv.forward(&mut g, &store, evv).map_err(err)?;
        ensure(g.value(solo.ev_prime).data() == g.value(v0).data(), "self-attention-only output differs from V0")?;
    }
    ensure(worst_sum <= 1e-9, format!("|sum S - 1| = {worst_sum:.3e}"))?;
    Ok(format!("20 seeds: |sum S - 1| <= {worst_sum:.1e}, one-hot and self-only exact"))
}

fn learning_smoke() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let ds = synthesize(&cfg.data).map_err(err)?;
    ensure(ds.train.len() == 200 && ds.test.len() == 80, "pinned dataset size")?;

    let mut gains = Vec::new();
    let mut accuracy = String::new();
    for seed in 0..5 {
        let mut c = cfg.clone();
        c.train.seed = seed;
        let mut m: Model<f32> = Model::new(&c, labels(&ds)).map_err(err)?;
        let before = selection_hit_rate(&m, &ds.train).map_err(err)?;
        train_stage1(&mut m, &ds.train, &mut LossLog::default()).map_err(err)?;
        let after = selection_hit_rate(&m, &ds.train).map_err(err)?;
        gains.push(after - before);
        if seed == 0 {
            train_stage2(&mut m, &ds.train, &mut LossLog::default()).map_err(err)?;
            let tr = evaluate(&m, &ds.train, EvalMode::Vlfm).map_err(err)?.top1;
            let te = evaluate(&m, &ds.test, EvalMode::Vlfm).map_err(err)?.top1;
            ensure(tr >= 0.95, format!("train top1 {tr:.4} < 0.95"))?;
            ensure(te >= 0.85, format!("test top1 {te:.4} < 0.85"))?;
            accuracy = format!("train {tr:.3} test {te:.3}");
        }
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    let elapsed = start.elapsed();
    ensure(mean_gain > 0.0, format!("mean hit-rate gain {mean_gain:.4} over seeds {gains:?}"))?;
    ensure(elapsed < Duration::from_secs(1800), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{accuracy}; hit-rate gain {mean_gain:+.3} over 5 seeds; {:.0}s",
        elapsed.as_secs_f64()
    ))
}

fn cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["mpfgvc".to_string(), "--preset".into(), "quick".into(), "--out".into(), out.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    match run(argv.clone()) {
        0 => Ok(()),
        code => Err(format!("{} exited with {code}", argv[5..].join(" "))),
    }
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let out = dir.path();
    cli(out, &["ablate", "--table", "5", "--seeds", "0,1,2,3,4"])?;
    let rows = csv_rows(&out.join("results/ablation_5.csv"))?;
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    ensure(
        labels == ["baseline", "+DaTP", "+DaTP+VLFM", "+SsVP", "+SsVP+DaTP", "full"],
        format!("table 5 rows {labels:?}"),
    )?;
    let mean = |label: &str| -> f64 { rows.iter().find(|r| r[0] == label).map(|r| r[1].parse().unwrap()).unwrap() };
    let (full, base) = (mean("full"), mean("baseline"));

    cli(out, &["ablate", "--table", "strategies", "--seeds", "0"])?;
    let strat: Vec<String> = csv_rows(&out.join("results/ablation_strategies.csv"))?
        .into_iter()
        .map(|r| r[0].clone())
        .collect();
    ensure(strat == ["one-stage", "two-stage"], format!("strategies rows {strat:?}"))?;

    let quick = RunConfig::quick();
    for (param, grid) in [
        ("k", mpfgvc_core::ablation::SweepParam::K),
        ("J", mpfgvc_core::ablation::SweepParam::J),
        ("layer", mpfgvc_core::ablation::SweepParam::Layer),
    ] {
        cli(out, &["sweep", "--param", param, "--seeds", "0"])?;
        let got: Vec<usize> = csv_rows(&out.join(format!("results/sweep_{param}.csv")))?
            .iter()
            .map(|r| r[1].parse().unwrap())
            .collect();
        ensure(got == grid.default_grid(&quick), format!("{param} grid {got:?}"))?;
    }
    ensure(full >= base, format!("full {full:.4} < baseline {base:.4}"))?;
    Ok(format!("6 + 2 rows, k/J/layer grids; full {full:.4} >= baseline {base:.4} over 5 seeds"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut outputs = Vec::new();
    // Same directory both times: checkpoints embed the config, paths included.
    let out = dir.path().join("run");
    for _ in 0..2 {
        if out.exists() {
            fs::remove_dir_all(&out).map_err(err)?;
        }
        let data = out.join("data").display().to_string();
        for cmd in [
            vec!["--seed", "3", "--data", &data, "gen-data"],
            vec!["--seed", "3", "--data", &data, "train", "--stage", "1"],
            vec!["--seed", "3", "--data", &data, "train", "--stage", "2"],
            vec!["--seed", "3", "--data", &data, "eval", "--mode", "vlfm"],
            vec!["--seed", "3", "sweep", "--param", "J", "--values", "4", "--seeds", "3,4"],
        ] {
            cli(&out, &cmd)?;
        }
        let mut files = Vec::new();
        for f in [
            "logs/loss.csv",
            "results/eval_vlfm_test.csv",
            "results/eval_vlfm_test_per_class.csv",
            "results/sweep_J.csv",
            "checkpoints/stage2.bin",
        ] {
            files.push(fs::read(out.join(f)).map_err(|e| format!("{f}: {e}"))?);
        }
        outputs.push(files);
    }
    ensure(outputs[0] == outputs[1], "repeated runs differ")?;
    Ok("gen-data, train, eval and sweep reproduce losses, metrics and checkpoints byte for byte".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("freeze protocol", freeze_protocol),
        ("selection contract", selection_contract),
        ("contrastive oracles", contrastive_oracles),
        ("fusion algebra", fusion_algebra),
        ("desk-scale learning", learning_smoke),
        ("ablation harness", ablation_harness),
        ("determinism", determinism),
    ];
    // Criterion numbers on the command line run just those.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
