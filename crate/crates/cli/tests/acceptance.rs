//! Acceptance suite: one check per criterion, each printing a PASS/FAIL line.
//! Runs without the libtest harness so the lines always reach stdout.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chronorag_cli::commands::{cmd_build, cmd_forecast, cmd_synth, evaluate, ForecastMode};
use chronorag_cli::config::RunConfig;
use chronorag_cli::synth::{BenchmarkConfig, ClusteredCorpus};
use chronorag_core::coherer::{mmd2, Bandwidth, Estimator, LossConfig};
use chronorag_core::hhtr::{linear_scan_oracle, retrieve_global, retrieve_topk, Arm, Query};
use chronorag_core::index::{SeriesTree, TreeConfig};
use chronorag_core::kmeans::{kmeans, KMeansConfig};
use chronorag_core::model::{ForecastModel, Sample};
use chronorag_core::msil::{attend, average_pattern, interaction_pattern, raw_product, FusionParams};
use chronorag_core::series::{normalize, window_offsets, SeriesWindow};
use chronorag_core::storage::{read_store, write_store, StoreRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const WINDOWS: usize = 10_000;
const W: usize = 64;
const CAP: usize = 256;

struct RetrievalBench {
    tree: SeriesTree,
    queries: Vec<(String, Vec<f64>)>,
}

fn retrieval_bench() -> RetrievalBench {
    let corpus = ClusteredCorpus::new(W, 4, 10, 0.5, 2024);
    let windows = corpus.windows(WINDOWS, 1);
    let tree = SeriesTree::build(
        windows,
        TreeConfig {
            cap: CAP,
            seed: 7,
            ..TreeConfig::default()
        },
    )
    .expect("build");
    RetrievalBench {
        tree,
        queries: corpus.queries(100, 99),
    }
}

fn id_set(r: &chronorag_core::hhtr::Retrieval) -> BTreeSet<String> {
    r.hits.iter().map(|h| h.window_id.clone()).collect()
}

fn criterion_1(bench: &RetrievalBench, build_time: Duration) -> Check {
    let start = Instant::now();
    let probes = bench.tree.cluster_count();
    let mut matched = 0;
    for (_, q) in &bench.queries {
        let query = Query::new(q.clone()).with_k(8).with_probes(probes);
        let tree_hits = retrieve_global(&query, &bench.tree).map_err(|e| e.to_string())?;
        let exact = linear_scan_oracle(&query, bench.tree.windows()).map_err(|e| e.to_string())?;
        if id_set(&tree_hits) == id_set(&exact) {
            matched += 1;
        }
    }
    let elapsed = build_time + start.elapsed();
    ensure!(matched == 100, "{matched}/100 queries matched the oracle");
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("100/100 exact id sets, {} clusters, {:.2?} including build", probes, elapsed))
}

fn criterion_2(bench: &RetrievalBench) -> Check {
    let queries: Vec<Vec<f64>> = bench.queries.iter().map(|(_, q)| q.clone()).collect();
    let report = evaluate(&bench.tree, &queries, &[Some(1), Some(2), Some(4), Some(8), None], &[8])
        .map_err(|e| e.to_string())?;
    let p4 = report.rows.iter().find(|r| r.probes == 4 && !r.all).ok_or("missing probes=4 row")?;
    let prototypes = bench.tree.cluster_count() as f64;
    let bound = prototypes + 4.0 * CAP as f64;
    ensure!(p4.mean_evals <= bound, "mean evals {} > bound {bound}", p4.mean_evals);
    ensure!(
        p4.mean_evals * 5.0 <= p4.oracle_evals,
        "mean evals {} not 5x below oracle {}",
        p4.mean_evals,
        p4.oracle_evals
    );
    ensure!(p4.recall >= 0.85, "recall@8 {} < 0.85", p4.recall);
    let recalls: Vec<f64> = report.rows.iter().map(|r| r.recall).collect();
    ensure!(recalls.windows(2).all(|w| w[0] <= w[1]), "recall not monotone: {recalls:?}");
    Ok(format!(
        "probes=4: {:.1} evals/query (bound {bound}, oracle {}), recall@8 {:.3}; recall over probes {:?}",
        p4.mean_evals, p4.oracle_evals, p4.recall, recalls
    ))
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dim = 8;
    let cap = 32;
    let random_window = |rng: &mut ChaCha8Rng, id: usize, domain: &str| {
        let center = (id % 5) as f64;
        let values = (0..dim).map(|_| center + rng.gen_range(-1.0..1.0)).collect();
        SeriesWindow::new(format!("w{id:06}"), 0, 0, domain, values)
    };
    let domains = ["A", "B", "C", "D", "E", "F"];
    let initial: Vec<SeriesWindow> = (0..300)
        .map(|i| random_window(&mut rng, i, domains[i % 3]))
        .collect();
    let mut tree = SeriesTree::build(
        initial,
        TreeConfig {
            cap,
            seed: 3,
            ..TreeConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let mut splits = 0;
    for op in 0..10_000 {
        let id = 300 + op;
        let domain = domains[rng.gen_range(0..domains.len())];
        let outcome = tree.insert(random_window(&mut rng, id, domain)).map_err(|e| e.to_string())?;
        splits += usize::from(outcome.split_into > 1);
        tree.check_invariants().map_err(|e| format!("after insert {op}: {e}"))?;
        let members: usize = tree.clusters().map(|(_, c)| c.members.len()).sum();
        ensure!(members == id + 1, "after insert {op}: {members} members for {} windows", id + 1);
    }
    let mut ids: Vec<&str> = tree
        .clusters()
        .flat_map(|(_, c)| c.members.iter().map(|&m| tree.window(m).id.as_str()))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ensure!(ids.len() == 10_300, "membership lost windows: {}", ids.len());
    Ok(format!("10000 inserts, {splits} local re-clusterings, invariants held after each"))
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for instance in 0..1000 {
        let n = rng.gen_range(8..=512);
        let m = rng.gen_range(1..=8);
        let dim = rng.gen_range(1..=6);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect())
            .collect();
        let r = kmeans(&points, m, KMeansConfig { seed: instance, ..KMeansConfig::default() })
            .map_err(|e| e.to_string())?;
        ensure!(
            r.history.windows(2).all(|w| w[1] <= w[0]),
            "instance {instance}: history increased {:?}",
            r.history
        );
    }
    let points = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
    let r = kmeans(&points, 2, KMeansConfig::default()).map_err(|e| e.to_string())?;
    let a = &r.assignments;
    ensure!(a[0] == a[1] && a[2] == a[3] && a[0] != a[2], "clustering {a:?}");
    ensure!((r.objective() - 0.01).abs() <= 1e-12, "objective {}", r.objective());
    Ok(format!("1000 instances monotone; 4-point objective {:e}", r.objective()))
}

fn criterion_5(bench: &RetrievalBench) -> Check {
    let (domain, q) = &bench.queries[0];
    let base = Query::new(q.clone()).with_domain(domain.clone()).with_k(8);
    let hybrid = retrieve_topk(&base.clone().with_rho(0.6), &bench.tree).map_err(|e| e.to_string())?;
    let (local, global) = (hybrid.count(Arm::Local), hybrid.count(Arm::Global));
    ensure!(local == 5 && global == 3, "split {local}/{global}");
    ensure!(
        hybrid.hits.iter().filter(|h| h.arm == Arm::Local).all(|h| &h.domain == domain),
        "local arm left the domain"
    );

    let zero = retrieve_topk(&base.clone().with_rho(0.0), &bench.tree).map_err(|e| e.to_string())?;
    let global_only = retrieve_global(&base, &bench.tree).map_err(|e| e.to_string())?;
    ensure!(zero.hits.len() == global_only.hits.len(), "rho=0 hit count differs");
    for (a, b) in zero.hits.iter().zip(&global_only.hits) {
        ensure!(
            a.window_id == b.window_id && a.score.to_bits() == b.score.to_bits(),
            "rho=0 differs from global at {}",
            a.window_id
        );
    }

    let one = retrieve_topk(&base.with_rho(1.0), &bench.tree).map_err(|e| e.to_string())?;
    ensure!(one.hits.len() == 8, "rho=1 returned {}", one.hits.len());
    ensure!(one.hits.iter().all(|h| &h.domain == domain && h.arm == Arm::Local), "rho=1 left the domain");
    Ok(format!("5 local + 3 global; rho=0 bit-exact with global; rho=1 all in {domain}"))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_row = 0.0f64;
    for i in 0..1000 {
        let w = rng.gen_range(1..=32);
        let d = rng.gen_range(1..=8);
        let params = FusionParams::init(d, rng.gen_range(1..=8), i);
        let scale = rng.gen_range(0.1..5.0);
        let t: Vec<f64> = random_vec(&mut rng, w).iter().map(|v| v * scale).collect();
        let att = attend(&t, &random_vec(&mut rng, w), &random_vec(&mut rng, w), &params).map_err(|e| e.to_string())?;
        for r in 0..w {
            worst_row = worst_row.max((att.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst_row <= 1e-6, "attention row sum off by {worst_row}");

    let mut worst_norm = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=32);
        let series: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, w)).collect();
        let p = raw_product(&series).map_err(|e| e.to_string())?;
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_norm = worst_norm.max((norm - 1.0).abs());
    }
    ensure!(worst_norm <= 1e-9, "raw_product norm off by {worst_norm}");

    let params = FusionParams::init(4, 4, 1);
    let mut series: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 24)).collect();
    let base_int = interaction_pattern(&series, &params).map_err(|e| e.to_string())?;
    let base_avg = average_pattern(&series, &params).map_err(|e| e.to_string())?;
    for _ in 0..100 {
        series.shuffle(&mut rng);
        let i = interaction_pattern(&series, &params).map_err(|e| e.to_string())?;
        let a = average_pattern(&series, &params).map_err(|e| e.to_string())?;
        let same = |x: &(Vec<f64>, Vec<f64>), y: &(Vec<f64>, Vec<f64>)| {
            x.0.iter().chain(&x.1).zip(y.0.iter().chain(&y.1)).all(|(p, q)| p.to_bits() == q.to_bits())
        };
        ensure!(same(&i, &base_int) && same(&a, &base_avg), "shuffle changed a pattern");
    }

    let loss = LossConfig {
        lambda: 0.3,
        bandwidth: Bandwidth::Fixed(1.5),
        estimator: Estimator::Biased,
    };
    let mut worst_grad = 0.0f64;
    for case in 0..20u64 {
        let w = rng.gen_range(2..=8);
        let horizon = rng.gen_range(1..=4);
        let model = ForecastModel::init(w, horizon, rng.gen_range(1..=4), rng.gen_range(1..=4), case);
        let batch: Vec<Sample> = (0..3)
            .map(|_| Sample {
                t_norm: random_vec(&mut rng, w),
                retrieved: (0..rng.gen_range(1..=3)).map(|_| random_vec(&mut rng, w)).collect(),
                truth: random_vec(&mut rng, horizon),
            })
            .collect();
        let (_, grad) = model.loss_and_grad(&batch, &loss, false).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = grad.values().copied().collect();
        let step = 1e-5;
        let mut diff = 0.0;
        let mut norm_a = 0.0;
        let mut norm_n = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let mut up = model.clone();
            *up.values_mut().nth(i).unwrap() += step;
            let mut dn = model.clone();
            *dn.values_mut().nth(i).unwrap() -= step;
            let f = |m: &ForecastModel| m.loss(&batch, &loss, false).unwrap();
            let numeric = (f(&up) - f(&dn)) / (2.0 * step);
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        let rel = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12);
        worst_grad = worst_grad.max(rel);
    }
    ensure!(worst_grad <= 1e-4, "gradient relative error {worst_grad}");
    Ok(format!(
        "row sums within {worst_row:.1e}, product norm within {worst_norm:.1e}, shuffles bit-exact, gradient rel err {worst_grad:.1e}"
    ))
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let biased = LossConfig {
        lambda: 0.1,
        bandwidth: Bandwidth::MedianHeuristic,
        estimator: Estimator::Biased,
    };
    for _ in 0..100 {
        let x: Vec<Vec<f64>> = (0..rng.gen_range(1..20)).map(|_| random_vec(&mut rng, 3)).collect();
        let y: Vec<Vec<f64>> = (0..rng.gen_range(1..20)).map(|_| random_vec(&mut rng, 3)).collect();
        let xx = mmd2(&x, &x, &biased).map_err(|e| e.to_string())?;
        ensure!(xx <= 1e-12, "mmd2(x, x) = {xx}");
        let xy = mmd2(&x, &y, &biased).map_err(|e| e.to_string())?;
        let yx = mmd2(&y, &x, &biased).map_err(|e| e.to_string())?;
        ensure!(xy.to_bits() == yx.to_bits(), "asymmetric: {xy} vs {yx}");
        ensure!(xy >= -1e-12, "negative mmd2 {xy}");
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a = random_vec(&mut rng, 4);
        let b = random_vec(&mut rng, 4);
        let sigma: f64 = rng.gen_range(0.2..3.0);
        let cfg = LossConfig {
            bandwidth: Bandwidth::Fixed(sigma),
            ..biased
        };
        let d2: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum();
        let closed = 2.0 - 2.0 * (-d2 / (2.0 * sigma * sigma)).exp();
        let got = mmd2(&[a], &[b], &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((got - closed).abs());
    }
    ensure!(worst <= 1e-12, "singleton closed form off by {worst}");

    let mut wins = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut cloud = |mean: f64| -> Vec<Vec<f64>> {
            (0..64).map(|_| (0..2).map(|_| mean + normal.sample(&mut rng)).collect()).collect()
        };
        let (a, b, c, d) = (cloud(0.0), cloud(10.0), cloud(0.0), cloud(0.0));
        let separated = mmd2(&a, &b, &biased).map_err(|e| e.to_string())?;
        let same = mmd2(&c, &d, &biased).map_err(|e| e.to_string())?;
        wins += usize::from(separated > same);
    }
    ensure!(wins >= 95, "separated clouds won only {wins}/100");
    Ok(format!("self-distance and symmetry exact, closed form within {worst:.1e}, {wins}/100 discriminations"))
}

fn forecast_config(seed: u64) -> RunConfig {
    RunConfig::from_text(include_str!("../../../configs/synthetic.conf"))
        .map(|c| RunConfig { seed, ..c })
        .expect("bundled config parses")
}

struct ForecastRun {
    rag: f64,
    ablated: f64,
}

fn forecast_seed(dir: &std::path::Path, seed: u64) -> Result<ForecastRun, String> {
    let cfg = forecast_config(seed);
    let bench = BenchmarkConfig {
        seed,
        ..BenchmarkConfig::default()
    };
    let run_dir = dir.join(format!("seed{seed}"));
    let (kb, targets) = cmd_synth(&run_dir, &bench).map_err(|e| e.to_string())?;
    let tree = run_dir.join("kb.crbtree");
    cmd_build(&[kb], &cfg, &tree).map_err(|e| e.to_string())?;
    let stores = [targets];
    let rag = cmd_forecast(Some(&tree), &stores, &cfg, &ForecastMode::Rag, None).map_err(|e| e.to_string())?;
    let ablated = cmd_forecast(None, &stores, &cfg, &ForecastMode::Ablate, None).map_err(|e| e.to_string())?;
    Ok(ForecastRun {
        rag: rag.mse("test").ok_or("no test score")?,
        ablated: ablated.mse("test").ok_or("no test score")?,
    })
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let run = forecast_seed(dir.path(), seed)?;
        wins += usize::from(run.rag < run.ablated);
        lines.push(format!("seed {seed}: {:.4} vs {:.4}", run.rag, run.ablated));
    }
    let elapsed = start.elapsed();
    ensure!(wins >= 3, "retrieval won {wins}/5 ({})", lines.join("; "));
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!("retrieval beat ablation on {wins}/5 seeds in {elapsed:.1?} [test MSE rag vs ablated: {}]", lines.join("; ")))
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let records: Vec<StoreRecord> = (0..10_000)
        .map(|i| {
            let len = rng.gen_range(1..24);
            let target = (0..len)
                .map(|_| match rng.gen_range(0..4) {
                    0 => f64::from_bits(rng.gen::<u64>() & 0x7fef_ffff_ffff_ffff),
                    1 => -f64::from_bits(rng.gen::<u64>() & 0x000f_ffff_ffff_ffff),
                    _ => rng.gen_range(-1e6..1e6),
                })
                .collect();
            StoreRecord::new(format!("D{}", i % 7), format!("item_{i}"), "2021-03-04 05:06:07", "Hourly", target)
        })
        .collect();
    let path = dir.path().join("round.crb.jsonl");
    write_store(&records, &path).map_err(|e| e.to_string())?;
    let back = read_store(&path).map_err(|e| e.to_string())?;
    ensure!(back.len() == records.len(), "record count changed");
    for (a, b) in records.iter().zip(&back) {
        ensure!(
            a.target.iter().map(|v| v.to_bits()).eq(b.target.iter().map(|v| v.to_bits())),
            "{} changed on round trip",
            a.item_id
        );
        ensure!(a == b, "{} metadata changed", a.item_id);
    }

    let mut cases = 0;
    for n in 1..=32 {
        for w in 1..=32 {
            for s in 1..=32 {
                let expected = if w > n { None } else { Some((n - w) / s + 1) };
                let got = window_offsets(n, w, s).ok().map(|o| o.len());
                ensure!(got == expected, "N={n} w={w} s={s}: {got:?} vs {expected:?}");
                if let Ok(offsets) = window_offsets(n, w, s) {
                    ensure!(offsets.iter().all(|o| o + w <= n), "offset overruns N={n}");
                }
                cases += 1;
            }
        }
    }

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = rng.gen_range(2..64);
        let scale = rng.gen_range(0.01..100.0);
        let shift = rng.gen_range(-50.0..50.0);
        let x: Vec<f64> = (0..len).map(|_| shift + scale * rng.gen_range(-1.0..1.0)).collect();
        let (z, stats) = normalize(&x);
        for (a, b) in stats.denormalize(&z).iter().zip(&x) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    ensure!(worst <= 1e-12, "normalize round trip off by {worst}");
    Ok(format!("10000 records bit-exact, {cases} segmentation cases, normalize round trip within {worst:.1e}"))
}

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = forecast_config(3);
    let bench = BenchmarkConfig {
        seed: 3,
        target_series_per_domain: 3,
        ..BenchmarkConfig::default()
    };
    let mut artifacts: Vec<HashMap<&str, Vec<u8>>> = Vec::new();
    for run in 0..2 {
        let run_dir = dir.path().join(format!("run{run}"));
        let (kb, targets) = cmd_synth(&run_dir, &bench).map_err(|e| e.to_string())?;
        let tree = run_dir.join("kb.crbtree");
        cmd_build(&[kb], &cfg, &tree).map_err(|e| e.to_string())?;
        let model: PathBuf = run_dir.join("model.txt");
        let report = cmd_forecast(Some(&tree), &[targets], &cfg, &ForecastMode::Rag, Some(&model))
            .map_err(|e| e.to_string())?;
        let mut files = HashMap::new();
        files.insert("tree", std::fs::read(&tree).map_err(|e| e.to_string())?);
        files.insert("model", std::fs::read(&model).map_err(|e| e.to_string())?);
        files.insert("report", report.to_csv().into_bytes());
        artifacts.push(files);
    }
    for name in ["tree", "model", "report"] {
        ensure!(artifacts[0][name] == artifacts[1][name], "{name} differs between runs");
    }
    Ok(format!(
        "tree ({} bytes), model checkpoint and report byte-identical across runs",
        artifacts[0]["tree"].len()
    ))
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|_| {}));
    let start = Instant::now();
    let bench = retrieval_bench();
    let build_time = start.elapsed();

    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("1 oracle exactness", Box::new(|| criterion_1(&bench, build_time))),
        ("2 retrieval efficiency", Box::new(|| criterion_2(&bench))),
        ("3 index invariants", Box::new(criterion_3)),
        ("4 k-means", Box::new(criterion_4)),
        ("5 hybrid composition", Box::new(|| criterion_5(&bench))),
        ("6 MSIL numerics", Box::new(criterion_6)),
        ("7 MMD axioms", Box::new(criterion_7)),
        ("8 end-to-end ablation", Box::new(criterion_8)),
        ("9 data protocol", Box::new(criterion_9)),
        ("10 determinism", Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({:.1?}) {detail}", t.elapsed()),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({:.1?}) {why}", t.elapsed());
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
