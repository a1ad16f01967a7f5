//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p geosage --test acceptance`.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use geosage::corpus::{parse_checkins, parse_homes, split, Corpus, Role, UserId};
use geosage::eval::{evaluate, EvalContext, EvalOptions, ModelScorer, RandomScorer, Scenario};
use geosage::geo::{BoundingBox, CellId, CellPath, GeoPoint, PyramidConfig};
use geosage::inference::{
    gibbs_sweep, gradients, log_likelihood, topic_posterior, train, Blocks, TopicAssignment, TrainActivity, TrainOptions,
    TrainingData,
};
use geosage::model::{Dims, ModelConfig, ModelParams, PreferenceKind, Variant};
use geosage::recsys::{Query, Recommender};
use geosage::synth::{generate, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Frozen from the first calibrated run (out-of-town Recall@10, seeds 0-2).
const MARGIN_FULL_S2: f64 = 0.02;
const MARGIN_S2_S1: f64 = 0.05;
const MARGIN_S1_RANDOM: f64 = 0.05;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn unit_pyramid(height: u8) -> PyramidConfig {
    let bbox = BoundingBox::new(GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(1.0, 1.0).unwrap()).unwrap();
    PyramidConfig::new(bbox, height).unwrap()
}

fn config(topics: usize, height: u8, variant: Variant, l1_weight: f64, seed: u64) -> ModelConfig {
    ModelConfig { topics, height, variant, l1_weight, d_km: 100.0, seed }
}

fn random_instance(seed: u64, users: u32, items: u32, words: u32, n: usize, height: u8) -> TrainingData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pyramid = unit_pyramid(height);
    let locs: Vec<GeoPoint> =
        (0..items).map(|_| GeoPoint::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)).unwrap()).collect();
    let item_words: Vec<Vec<u32>> =
        (0..items).map(|_| (0..rng.random_range(0..4)).map(|_| rng.random_range(0..words)).collect()).collect();
    let activities = (0..n)
        .map(|_| {
            let item = rng.random_range(0..items);
            TrainActivity {
                user: rng.random_range(0..users),
                item,
                words: item_words[item as usize].clone(),
                role: if rng.random_bool(0.4) { Role::Tourist } else { Role::Local },
                path: pyramid.path_of(locs[item as usize]).unwrap(),
            }
        })
        .collect();
    TrainingData {
        dims: Dims { users: users as usize, items: items as usize, words: words as usize },
        pyramid,
        dict_hash: "acceptance".into(),
        activities,
    }
}

fn noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Dense random parameters with a block on every cell of every given path.
fn random_params(cfg: ModelConfig, dims: Dims, pyramid: PyramidConfig, paths: &[CellPath], seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.topics;
    let mut p = ModelParams::zeros(cfg, dims, pyramid, String::new());
    p.theta0 = noise(&mut rng, k);
    for u in 0..dims.users as UserId {
        p.theta_user.insert(u, noise(&mut rng, k));
    }
    for path in paths {
        for &c in path.cells() {
            if !p.theta_native.contains_key(&c) {
                p.theta_native.insert(c, noise(&mut rng, k));
                p.theta_tourist.insert(c, noise(&mut rng, k));
            }
        }
    }
    p.phi0 = noise(&mut rng, dims.words);
    p.phi_topic = (0..k).map(|_| noise(&mut rng, dims.words)).collect();
    p.psi0 = noise(&mut rng, dims.items);
    p.psi_topic = (0..k).map(|_| noise(&mut rng, dims.items)).collect();
    p
}

/// Mutable views of every parameter, labelled by block, in a fixed order.
fn param_slots(p: &mut ModelParams) -> Vec<(&'static str, &mut f64)> {
    let mut out: Vec<(&'static str, &mut f64)> = Vec::new();
    out.extend(p.theta0.iter_mut().map(|x| ("theta0", x)));
    out.extend(p.theta_user.values_mut().flatten().map(|x| ("theta_user", x)));
    out.extend(p.theta_native.values_mut().flatten().map(|x| ("theta_native", x)));
    out.extend(p.theta_tourist.values_mut().flatten().map(|x| ("theta_tourist", x)));
    out.extend(p.phi0.iter_mut().map(|x| ("phi0", x)));
    out.extend(p.phi_topic.iter_mut().flatten().map(|x| ("phi_topic", x)));
    out.extend(p.psi0.iter_mut().map(|x| ("psi0", x)));
    out.extend(p.psi_topic.iter_mut().flatten().map(|x| ("psi_topic", x)));
    out
}

/// Gradient values in the same order as `param_slots`; missing cells read as zero.
fn gradient_values(g: &Blocks, p: &ModelParams) -> Vec<f64> {
    let cell = |m: &BTreeMap<CellId, Vec<f64>>, c: &CellId| m.get(c).cloned().unwrap_or_else(|| vec![0.0; p.topics()]);
    let mut out = g.theta0.clone();
    for u in p.theta_user.keys() {
        out.extend(g.theta_user.get(u).cloned().unwrap_or_else(|| vec![0.0; p.topics()]));
    }
    for c in p.theta_native.keys() {
        out.extend(cell(&g.theta_native, c));
    }
    for c in p.theta_tourist.keys() {
        out.extend(cell(&g.theta_tourist, c));
    }
    out.extend(&g.phi0);
    out.extend(g.phi_topic.iter().flatten());
    out.extend(&g.psi0);
    out.extend(g.psi_topic.iter().flatten());
    out
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for (i, variant) in [Variant::Full, Variant::S1, Variant::S2, Variant::S3].into_iter().enumerate() {
        let data = random_instance(11 + i as u64, 5, 10, 8, 40, 2);
        let paths: Vec<CellPath> = data.activities.iter().map(|a| a.path.clone()).collect();
        let mut p = random_params(config(3, 2, variant, 0.0, 0), data.dims, data.pyramid, &paths, 7 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let assign = TopicAssignment::random(data.len(), 3, &mut rng);

        let analytic = gradient_values(&gradients(&p, &data, &assign), &p);
        let h = 1e-5;
        let n = param_slots(&mut p).len();
        let mut numeric = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for j in 0..n {
            let (label, orig) = {
                let mut slots = param_slots(&mut p);
                let (label, x) = &mut slots[j];
                let orig = **x;
                **x = orig + h;
                (*label, orig)
            };
            let up = log_likelihood(&p, &data, &assign);
            *param_slots(&mut p)[j].1 = orig - h;
            let down = log_likelihood(&p, &data, &assign);
            *param_slots(&mut p)[j].1 = orig;
            numeric.push((up - down) / (2.0 * h));
            labels.push(label);
        }

        let mut diff: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
        for ((label, a), n) in labels.iter().zip(&analytic).zip(&numeric) {
            let e = diff.entry(label).or_default();
            e.0 += (a - n).powi(2);
            e.1 += n * n;
        }
        for (label, (d, r)) in diff {
            let rel = d.sqrt() / r.sqrt().max(1e-3);
            let key = format!("{variant}/{label}");
            worst.insert(key, rel);
        }
    }
    let elapsed = start.elapsed();
    let (key, max) = worst.iter().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, v)| (k.clone(), *v)).unwrap();
    outcome(
        "gradient correctness",
        max < 1e-4 && elapsed < Duration::from_secs(10),
        format!("max block relative error {max:.2e} ({key}) over {} blocks, {:.2}s", worst.len(), elapsed.as_secs_f64()),
    )
}

/// Posterior over topics by direct enumeration of the joint.
fn enumerated_posterior(a: &TrainActivity, p: &ModelParams) -> Vec<f64> {
    let alpha = p.alpha(Some(a.user), a.role, &a.path, p.height()).0;
    let joint: Vec<f64> = (0..p.topics())
        .map(|z| {
            let beta = p.beta(z);
            let words: f64 = a.words.iter().map(|&w| beta[w as usize]).product();
            alpha[z] * words * p.gamma(z)[a.item as usize]
        })
        .collect();
    let total: f64 = joint.iter().sum();
    joint.iter().map(|x| x / total).collect()
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn sampler_correctness() -> Outcome {
    let mut data = random_instance(5, 3, 6, 8, 12, 2);
    let paths: Vec<CellPath> = data.activities.iter().map(|a| a.path.clone()).collect();
    let p = random_params(config(4, 2, Variant::Full, 0.0, 0), data.dims, data.pyramid, &paths, 9);
    let mut single = data.activities.swap_remove(0);
    single.words = vec![1, 5];
    data.activities = vec![single.clone()];

    let expected = enumerated_posterior(&single, &p);
    let reported = topic_posterior(&single, &p).0;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut assign = TopicAssignment { z: vec![0] };
    let draws = 100_000;
    let mut counts = vec![0.0; p.topics()];
    for _ in 0..draws {
        gibbs_sweep(&mut assign, &data, &p, &mut rng);
        counts[assign.z[0]] += 1.0;
    }
    let empirical: Vec<f64> = counts.iter().map(|c| c / draws as f64).collect();
    let d = tv(&empirical, &expected);
    let posterior_gap = tv(&reported, &expected);
    outcome(
        "sampler correctness",
        d < 0.01 && posterior_gap < 1e-12,
        format!("TV(empirical, enumerated) {d:.4} over {draws} draws; TV(reported, enumerated) {posterior_gap:.1e}"),
    )
}

fn ranking(list: &[(u32, f64)]) -> Vec<u32> {
    list.iter().map(|e| e.0).collect()
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pyramid = unit_pyramid(3);
    let mut worst: f64 = 0.0;
    let mut evals = 0;
    for m in 0..10 {
        let dims = Dims { users: 6, items: 12, words: 9 };
        let paths: Vec<CellPath> = (0..8)
            .map(|_| pyramid.path_of(GeoPoint::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)).unwrap()).unwrap())
            .collect();
        let variant = [Variant::Full, Variant::S1, Variant::S2, Variant::S3][m % 4];
        let p = random_params(config(1 + m % 5, 3, variant, 0.0, 0), dims, pyramid, &paths, m as u64);
        for _ in 0..100 {
            let user = if rng.random_bool(0.8) { Some(rng.random_range(0..6)) } else { None };
            let role = if rng.random_bool(0.5) { Role::Tourist } else { Role::Local };
            let point = GeoPoint::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)).unwrap();
            let path = pyramid.path_of(point).unwrap();
            let zoom = rng.random_range(1..=3);
            let z = rng.random_range(0..p.topics());
            for dist in [p.alpha(user, role, &path, zoom).0, p.beta(z), p.gamma(z)] {
                worst = worst.max((dist.iter().sum::<f64>() - 1.0).abs());
            }
            evals += 1;
        }
    }

    let spec = SynthSpec { n_users: 30, n_items: 60, activities_per_user: 10, seed: 4, ..Default::default() };
    let s = generate(&spec).unwrap();
    let corpus = &s.bundle.corpus;
    let paths: Vec<CellPath> = corpus.activities.iter().map(|a| corpus.pyramid.path_of(a.location).unwrap()).collect();
    let dims = Dims { users: corpus.dicts.n_users(), items: corpus.dicts.n_items(), words: corpus.dicts.n_words() };
    let mut base = random_params(config(5, spec.height, Variant::Full, 0.0, 0), dims, corpus.pyramid, &paths, 31);
    base.dict_hash = corpus.dicts.fingerprint();
    let mut shifted = base.clone();
    let c = 2.75;
    let shift = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x += c);
    shift(&mut shifted.theta0);
    shifted.theta_user.values_mut().for_each(shift);
    shifted.theta_native.values_mut().for_each(shift);
    shifted.theta_tourist.values_mut().for_each(shift);
    shift(&mut shifted.phi0);
    shift(&mut shifted.psi0);
    let train_idx = &s.bundle.split.train;
    let r0 = Recommender::new(&base, corpus, train_idx).unwrap();
    let r1 = Recommender::new(&shifted, corpus, train_idx).unwrap();
    let mut same = 0;
    for q in 0..100 {
        let a = &corpus.activities[(q * 37) % corpus.activities.len()];
        let user = if q % 5 == 0 { None } else { Some(a.user) };
        let query = Query { zoom_level: Some(1 + (q % 3) as u8), ..Query::new(user, a.location, 20) };
        if ranking(&r0.recommend(&query).unwrap().entries) == ranking(&r1.recommend(&query).unwrap().entries) {
            same += 1;
        }
    }
    outcome(
        "normalization",
        worst <= 1e-9 && evals == 1000 && same == 100,
        format!("{evals} evaluations each of alpha/beta/gamma, max |sum-1| {worst:.1e}; {same}/100 rankings shift-invariant"),
    )
}

fn smoothing(trained: &ModelParams, train_paths: &[CellPath]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let pyramid = unit_pyramid(4);
    let dims = Dims { users: 3, items: 4, words: 4 };
    let mut paths: Vec<CellPath> = (0..20)
        .map(|_| pyramid.path_of(GeoPoint::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)).unwrap()).unwrap())
        .collect();
    let mut p = random_params(config(4, 4, Variant::Full, 0.0, 0), dims, pyramid, &paths, 5);
    // Knock out some blocks so the sums also cross absent cells.
    for path in paths.iter().step_by(3) {
        p.theta_native.remove(&path.at(2));
        p.theta_tourist.remove(&path.leaf());
    }
    paths.push(pyramid.path_of(GeoPoint::new(0.999, 0.001).unwrap()).unwrap());

    let mut prefix_ok = true;
    for path in &paths {
        for kind in [PreferenceKind::Native, PreferenceKind::Tourist] {
            let cells = if kind == PreferenceKind::Native { &p.theta_native } else { &p.theta_tourist };
            let mut acc = vec![0.0; p.topics()];
            for level in 1..=4u8 {
                if let Some(block) = cells.get(&path.at(level)) {
                    acc.iter_mut().zip(block).for_each(|(a, b)| *a += b);
                }
                prefix_ok &= p.smooth_preference(kind, path, level) == acc;
            }
        }
    }

    // Leaves never visited in training carry no block; their alpha must equal the parent-level alpha.
    let visited: std::collections::BTreeSet<CellId> = train_paths.iter().map(|p| p.leaf()).collect();
    let pyr = trained.pyramid;
    let h = trained.height();
    let side = CellId::side(h);
    let mut checked = 0;
    let mut identical = 0;
    for x in 0..side {
        for y in 0..side {
            let leaf = CellId::new(h, x, y);
            if visited.contains(&leaf) {
                continue;
            }
            let path = pyr.path_of(pyr.centroid(leaf)).unwrap();
            if trained.theta_native.contains_key(&path.leaf()) || trained.theta_tourist.contains_key(&path.leaf()) {
                continue;
            }
            for (user, role) in [(Some(0), Role::Local), (Some(1), Role::Tourist), (None, Role::Tourist)] {
                checked += 1;
                let full = trained.alpha(user, role, &path, h).0;
                let truncated = trained.alpha(user, role, &path.truncated(h - 1), h - 1).0;
                let same_bits = full.iter().zip(&truncated).all(|(a, b)| a.to_bits() == b.to_bits());
                identical += usize::from(same_bits);
            }
        }
    }
    outcome(
        "smoothing",
        prefix_ok && checked > 0 && identical == checked,
        format!("prefix sums exact: {prefix_ok}; {identical}/{checked} activity-free leaf queries bitwise equal to parent level"),
    )
}

fn monotonicity(trace_mstep: &[Vec<f64>]) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    let mut steps = 0;
    for objs in trace_mstep {
        for w in objs.windows(2) {
            worst = worst.max(w[0] - w[1]);
            steps += 1;
        }
    }
    outcome(
        "m-step monotonicity",
        steps > 0 && worst <= 1e-9,
        format!("{} M-steps, {steps} inner iterations, largest decrease {:.1e}", trace_mstep.len(), worst.max(0.0)),
    )
}

fn out_of_town_recall(model: &ModelParams, corpus: &Corpus, split: &geosage::corpus::SplitDataset, seed: u64) -> [f64; 2] {
    let opts = EvalOptions { ks: vec![10], ..Default::default() };
    let ctx = EvalContext::new(corpus, split);
    let m = ctx.evaluate(&ModelScorer::new(model, corpus).unwrap(), Scenario::Out, &opts).unwrap();
    let r = ctx.evaluate(&RandomScorer { seed }, Scenario::Out, &opts).unwrap();
    [m.recall_at[&10], r.recall_at[&10]]
}

fn synthetic_ordering() -> Outcome {
    let start = Instant::now();
    let results: Vec<(u64, [f64; 4])> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..3u64)
            .map(|seed| {
                scope.spawn(move || {
                    let spec = SynthSpec { drift_strength: 1.0, seed, ..Default::default() };
                    let s = generate(&spec).unwrap();
                    let (corpus, split) = (&s.bundle.corpus, &s.bundle.split);
                    let data = TrainingData::from_corpus(corpus, &split.train);
                    let mut recall = [0.0; 4];
                    for (i, variant) in [Variant::Full, Variant::S2, Variant::S1].into_iter().enumerate() {
                        let cfg = config(spec.topics, spec.height, variant, 0.1, seed);
                        let trained = train(&data, cfg, &TrainOptions::default()).unwrap();
                        let [m, r] = out_of_town_recall(&trained.params, corpus, split, seed);
                        recall[i] = m;
                        recall[3] = r;
                    }
                    (seed, recall)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let elapsed = start.elapsed();
    let mut pass = elapsed < Duration::from_secs(300);
    let mut detail = Vec::new();
    for (seed, [full, s2, s1, random]) in &results {
        pass &= full - s2 >= MARGIN_FULL_S2 && s2 - s1 >= MARGIN_S2_S1 && s1 - random >= MARGIN_S1_RANDOM;
        detail.push(format!("seed {seed}: full {full:.3} s2 {s2:.3} s1 {s1:.3} random {random:.3}"));
    }
    outcome("synthetic recovery ordering", pass, format!("{}; {:.1}s", detail.join("; "), elapsed.as_secs_f64()))
}

/// Text files in, model and report bytes out.
fn pipeline_bytes(checkins: &[u8], homes: &[u8], spec: &SynthSpec) -> (Vec<u8>, String) {
    let parsed = parse_checkins(Cursor::new(checkins)).unwrap();
    let homes = parse_homes(Cursor::new(homes)).unwrap();
    let (corpus, _) = Corpus::build(&parsed.records, &homes, spec.pyramid().unwrap(), spec.d_km).unwrap();
    let split = split(&corpus.activities, 0.3, 17).unwrap();
    let data = TrainingData::from_corpus(&corpus, &split.train);
    let opts = TrainOptions { em_iters: 30, ..Default::default() };
    let trained = train(&data, config(5, spec.height, Variant::Full, 0.1, 17), &opts).unwrap();
    let mut report = String::new();
    for scenario in [Scenario::Home, Scenario::Out] {
        report.push_str(&evaluate(&trained.params, &corpus, &split, scenario, &EvalOptions::default()).unwrap().to_json_lines());
    }
    (trained.params.to_bytes(), report)
}

fn determinism() -> Outcome {
    let spec = SynthSpec { n_users: 60, n_items: 100, activities_per_user: 20, seed: 8, ..Default::default() };
    let s = generate(&spec).unwrap();
    let mut checkins = Vec::new();
    let mut homes = Vec::new();
    s.bundle.corpus.write_checkins(&mut checkins).unwrap();
    s.bundle.corpus.write_homes(&mut homes).unwrap();
    let (m1, r1) = pipeline_bytes(&checkins, &homes, &spec);
    let (m2, r2) = pipeline_bytes(&checkins, &homes, &spec);
    outcome(
        "determinism",
        m1 == m2 && r1 == r2 && !m1.is_empty() && !r1.is_empty(),
        format!("model {} bytes identical: {}; report {} bytes identical: {}", m1.len(), m1 == m2, r1.len(), r1 == r2),
    )
}

fn single_topic() -> Outcome {
    let spec = SynthSpec { n_users: 50, n_items: 80, activities_per_user: 20, seed: 12, ..Default::default() };
    let s = generate(&spec).unwrap();
    let data = TrainingData::from_corpus(&s.bundle.corpus, &s.bundle.split.train);
    let trained = train(&data, config(1, spec.height, Variant::Full, 0.0, 1), &TrainOptions::default()).unwrap();
    let mut counts = vec![0.0; data.dims.words];
    for a in &data.activities {
        for &w in &a.words {
            counts[w as usize] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let empirical: Vec<f64> = counts.iter().map(|c| c / total).collect();
    let d = tv(&trained.params.beta(0), &empirical);
    outcome("single-topic sanity", d < 0.01, format!("TV(beta, empirical word distribution) {d:.5}"))
}

fn main() -> ExitCode {
    let mut results = vec![gradient_correctness(), sampler_correctness(), normalization()];

    let spec = SynthSpec { drift_strength: 1.0, ..Default::default() };
    let s = generate(&spec).unwrap();
    let data = TrainingData::from_corpus(&s.bundle.corpus, &s.bundle.split.train);
    let trained = train(&data, config(spec.topics, spec.height, Variant::Full, 0.1, 0), &TrainOptions::default()).unwrap();
    let train_paths: Vec<CellPath> = data.activities.iter().map(|a| a.path.clone()).collect();
    results.push(smoothing(&trained.params, &train_paths));
    let msteps: Vec<Vec<f64>> = trained.trace.iter().map(|t| t.mstep_objectives.clone()).collect();
    results.push(monotonicity(&msteps));

    results.push(synthetic_ordering());
    results.push(determinism());
    results.push(single_topic());

    for r in &results {
        println!("[{}] {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!(
        "[INFO] published benchmark (Recall@2 0.327, Recall@10 0.535 out-of-town, height 5): documentation target only, source data unavailable"
    );
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
