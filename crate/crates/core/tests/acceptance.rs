//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test -p dtsnl --test acceptance -- 1 2 3`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use dtsnl::attention::{drop_and_max, sample_drop_plan, ScoreStack};
use dtsnl::audit::{read_trace, run_audit};
use dtsnl::config::RunConfig;
use dtsnl::datamodel::{PseudoLabel, ProbabilityVector, LabelSpace};
use dtsnl::dta::{accept_pseudo_label, DtaConfig, TeacherParams, ThresholdState};
use dtsnl::gate::Gate;
use dtsnl::losses::{
    consistency_loss, cross_entropy_objective, negative_objective, softmax_rows, supervised_loss, total_loss, LossWeights,
};
use dtsnl::network::{AttentionSettings, NetConfig, Network};
use dtsnl::sampler::BalancedSampler;
use dtsnl::snl::{extract_complementary, negative_learning_log_loss, negative_learning_loss, SnlConfig};
use dtsnl::synth::{apportion, generate_synthetic_dataset, SynthSpec, SKEWED_SHARES};
use dtsnl::trainer::{load_data, read_metrics, run_train, MetricsRecord, TrainData, Trainer, TRACE_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

type Check = Result<String, String>;

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

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn pv(v: Vec<f64>) -> ProbabilityVector {
    ProbabilityVector::new(v).expect("valid distribution")
}

/// Random point of the simplex; small `alpha` gives many tiny entries.
fn random_simplex(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> ProbabilityVector {
    let gamma = Gamma::new(alpha, 1.0).unwrap();
    loop {
        let raw: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = raw.iter().sum();
        if sum > 0.0 && raw.iter().all(|v| v.is_finite()) {
            return pv(raw.iter().map(|v| v / sum).collect());
        }
    }
}

fn c1_loss_oracles() -> Check {
    let uniform = ProbabilityVector::uniform(7);
    let ce = supervised_loss(&[3], &[uniform.clone()]).map_err(err)?;
    ensure((ce - 7f64.ln()).abs() < 1e-6, format!("uniform CE {ce} != ln 7"))?;
    let nl = negative_learning_loss(&uniform, &BTreeSet::from([2]));
    ensure((nl + 6.0 / 7.0).abs() < 1e-6, format!("uniform NL {nl} != -6/7"))?;
    let weights = LossWeights {
        lambda1: 0.5,
        lambda2: 0.1,
    };
    let total = total_loss(1.0, 0.4, -0.5, &weights).map_err(err)?;
    ensure((total - 1.15).abs() < 1e-9, format!("composition {total} != 1.15"))?;
    Ok(format!("ln7 err {:.1e}, -6/7 err {:.1e}, 1.15 err {:.1e}", (ce - 7f64.ln()).abs(), (nl + 6.0 / 7.0).abs(), (total - 1.15).abs()))
}

/// `||a - b|| / max(||a||, ||b||)`, the usual gradient-check ratio.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut point = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = point[i];
            point[i] = orig + h;
            let plus = f(&point);
            point[i] = orig - h;
            let minus = f(&point);
            point[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// One randomly drawn loss problem over logits of `n` samples.
enum LossCase {
    Labeled { targets: Vec<usize> },
    Consistency { pseudo: Vec<PseudoLabel> },
    Negative { other: Vec<f64>, negatives: Vec<BTreeSet<usize>>, log_form: bool },
}

impl LossCase {
    fn draw(kind: usize, rng: &mut ChaCha8Rng, n: usize, k: usize) -> Self {
        match kind {
            0 => LossCase::Labeled {
                targets: (0..n).map(|_| rng.gen_range(0..k)).collect(),
            },
            1 => {
                // At least one accepted sample, the rest by coin.
                let first = rng.gen_range(0..n);
                let pseudo = (0..n)
                    .map(|i| PseudoLabel {
                        sample_id: format!("u{i}"),
                        class_index: rng.gen_range(0..k),
                        confidence: 0.9,
                        accepted: i == first || rng.gen_bool(0.5),
                    })
                    .collect();
                LossCase::Consistency { pseudo }
            }
            _ => {
                let other = (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let negatives = (0..n)
                    .map(|_| {
                        let size = rng.gen_range(1..k);
                        let mut all: Vec<usize> = (0..k).collect();
                        for i in 0..size {
                            let j = rng.gen_range(i..k);
                            all.swap(i, j);
                        }
                        all[..size].iter().copied().collect()
                    })
                    .collect();
                LossCase::Negative {
                    other,
                    negatives,
                    log_form: rng.gen_bool(0.5),
                }
            }
        }
    }

    /// Loss value computed from probabilities by the plain loss functions.
    fn value(&self, logits: &[f64], k: usize) -> f64 {
        let probs = softmax_rows(logits, k).unwrap();
        match self {
            LossCase::Labeled { targets } => supervised_loss(targets, &probs).unwrap(),
            LossCase::Consistency { pseudo } => consistency_loss(pseudo, &probs).unwrap(),
            LossCase::Negative {
                other,
                negatives,
                log_form,
            } => {
                let second = softmax_rows(other, k).unwrap();
                let total: f64 = probs
                    .iter()
                    .zip(&second)
                    .zip(negatives)
                    .map(|((a, b), neg)| {
                        let avg = a.average(b).unwrap();
                        if *log_form {
                            negative_learning_log_loss(&avg, neg)
                        } else {
                            negative_learning_loss(&avg, neg)
                        }
                    })
                    .sum();
                total / negatives.len() as f64
            }
        }
    }

    /// Analytic gradient with respect to `logits` from the batch objectives
    /// the trainer uses.
    fn grad(&self, logits: &[f64], k: usize) -> Vec<f64> {
        match self {
            LossCase::Labeled { targets } => cross_entropy_objective(targets, logits, k).unwrap().1,
            LossCase::Consistency { pseudo } => {
                let rows: Vec<usize> = (0..pseudo.len()).filter(|&i| pseudo[i].accepted).collect();
                let targets: Vec<usize> = rows.iter().map(|&i| pseudo[i].class_index).collect();
                let sub: Vec<f64> = rows.iter().flat_map(|&i| logits[i * k..(i + 1) * k].to_vec()).collect();
                let g = cross_entropy_objective(&targets, &sub, k).unwrap().1;
                let mut full = vec![0.0; logits.len()];
                for (r, &i) in rows.iter().enumerate() {
                    full[i * k..(i + 1) * k].copy_from_slice(&g[r * k..(r + 1) * k]);
                }
                full
            }
            LossCase::Negative {
                other,
                negatives,
                log_form,
            } => negative_objective(logits, other, negatives, k, *log_form).unwrap().1,
        }
    }
}

fn tiny_attention_net(rng: &mut ChaCha8Rng, k: usize) -> Network {
    Network::new(NetConfig {
        in_channels: rng.gen_range(1..=3),
        input_size: 8,
        widths: vec![rng.gen_range(2..=4), rng.gen_range(4..=6)],
        num_classes: k,
        attention: Some(AttentionSettings {
            num_branches: rng.gen_range(2..=4),
            reduction: 2,
            drop_p: 0.5,
        }),
    })
    .unwrap()
}

fn c2_gradient_checks() -> Check {
    let names = ["L_l", "L_u", "L_NL"];
    let cases = 20;
    let mut worst = [[0.0f64; 2]; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (kind, name) in names.iter().enumerate() {
        for case in 0..cases {
            // Through the softmax alone.
            let k = rng.gen_range(2..=7);
            let n = rng.gen_range(1..=5);
            let logits: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let loss = LossCase::draw(kind, &mut rng, n, k);
            let e = rel_error(&loss.grad(&logits, k), &central_diff(&logits, |z| loss.value(z, k)));
            worst[kind][0] = worst[kind][0].max(e);
            ensure(e < 1e-4, format!("{name} softmax case {case}: relative error {e:.2e}"))?;

            // Through the whole network, attention bank included, with the
            // drop decisions frozen.
            let k = 7;
            let n = rng.gen_range(1..=3);
            let net = tiny_attention_net(&mut rng, k);
            let params: Vec<f64> = net
                .init_params::<f64, _>(&mut rng)
                .into_iter()
                .map(|p| p + rng.gen_range(-0.05..0.05))
                .collect();
            let input: Vec<f64> = (0..n * net.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let branches = net.config().attention.as_ref().unwrap().num_branches;
            let drops: Vec<Option<usize>> = (0..n).map(|_| rng.gen_bool(0.5).then(|| rng.gen_range(0..branches))).collect();
            let loss = LossCase::draw(kind, &mut rng, n, k);
            let fwd = net.forward(&params, &input, n, Some(&drops));
            let mut analytic = vec![0.0; net.param_count()];
            net.backward(&params, &fwd, &loss.grad(&fwd.logits, k), &mut analytic);
            let numeric = central_diff(&params, |p| loss.value(&net.forward(p, &input, n, Some(&drops)).logits, k));
            let e = rel_error(&analytic, &numeric);
            worst[kind][1] = worst[kind][1].max(e);
            ensure(e < 1e-4, format!("{name} network case {case}: relative error {e:.2e}"))?;
        }
    }
    let parts: Vec<String> = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {:.1e}/{:.1e}", w[0], w[1]))
        .collect();
    Ok(format!("{cases}+{cases} cases each, worst rel err softmax/network: {}", parts.join(", ")))
}

fn c3_threshold_recursion() -> Check {
    let k = 7;
    let epochs = 30;
    let tau0 = 0.8;
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mu in [0.8, 0.85, 0.9, 0.95] {
        let dta = DtaConfig {
            mu,
            tau_init: tau0,
            ..DtaConfig::default()
        };
        let mut gate = Gate::new(k, dta, SnlConfig::default()).map_err(err)?;
        // fresh[e][c]: mean confidence of correct predictions, if any.
        let mut fresh: Vec<Vec<Option<f64>>> = Vec::new();
        for _ in 0..epochs {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for _ in 0..rng.gen_range(5..60) {
                let p = random_simplex(&mut rng, k, 0.5);
                let y = rng.gen_range(0..k);
                let pred = (0..k).fold(0, |b, c| if p.get(c) > p.get(b) { c } else { b });
                if pred == y {
                    sums[y] += p.get(y);
                    counts[y] += 1;
                }
                gate.observe_labeled(&p, y).map_err(err)?;
            }
            gate.end_epoch();
            fresh.push((0..k).map(|c| (counts[c] > 0).then(|| sums[c] / counts[c] as f64)).collect());
            let e = fresh.len();
            for c in 0..k {
                // tau_e = mu^m tau_0 + (1 - mu) sum_j mu^(m_j) fresh_j, where
                // m counts the epochs with fresh statistics, m_j those after j.
                let updates: Vec<f64> = fresh.iter().filter_map(|f| f[c]).collect();
                let m = updates.len();
                let mut expected = mu.powi(m as i32) * tau0;
                for (j, f) in updates.iter().enumerate() {
                    expected += (1.0 - mu) * mu.powi((m - 1 - j) as i32) * f;
                }
                let got = gate.thresholds().threshold(c);
                let diff = (got - expected).abs();
                worst = worst.max(diff);
                ensure(diff < 1e-9, format!("mu {mu} epoch {e} class {c}: {got} vs {expected}"))?;
            }
        }
    }
    Ok(format!("4 values of mu x {epochs} epochs, worst abs err {worst:.1e}"))
}

fn c4_ema_teacher() -> Check {
    let decay = 0.999;
    let steps = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probes = 8;
    let start: Vec<f64> = (0..probes).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut teacher = TeacherParams::from_student(&start, decay);
    let mut students: Vec<Vec<f64>> = Vec::new();
    for _ in 0..steps {
        let s: Vec<f64> = (0..probes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        teacher.update(&s).map_err(err)?;
        students.push(s);
    }
    let mut worst: f64 = 0.0;
    for i in 0..probes {
        // t_n = d^n t_0 + (1 - d) sum_k d^(n-k) s_k
        let mut expected = decay.powi(steps as i32) * start[i];
        for (k, s) in students.iter().enumerate() {
            expected += (1.0 - decay) * decay.powi((steps - 1 - k) as i32) * s[i];
        }
        worst = worst.max((teacher.params[i] - expected).abs());
    }
    ensure(worst < 1e-9, format!("worst abs err {worst:.2e}"))?;
    Ok(format!("{probes} probes x {steps} steps at decay {decay}, worst abs err {worst:.1e}"))
}

fn c5_drop_statistics() -> Check {
    let trials = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut freqs = Vec::new();
    for p in [0.3, 0.5, 0.7] {
        let plan = sample_drop_plan(trials, 6, p, &mut rng);
        let freq = plan.iter().filter(|d| d.is_some()).count() as f64 / trials as f64;
        ensure((freq - p).abs() <= 0.02, format!("p {p}: drop frequency {freq}"))?;
        freqs.push(format!("{p}->{freq:.4}"));
    }
    let mut violations = 0;
    for _ in 0..trials {
        let branches = rng.gen_range(1..=8);
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let stack = ScoreStack {
            branches,
            height: h,
            width: w,
            values: (0..branches * h * w).map(|_| rng.gen::<f64>()).collect(),
        };
        let p = rng.gen::<f64>();
        let (dropped, _) = drop_and_max(std::slice::from_ref(&stack), p, &mut rng, true);
        let (full, _) = drop_and_max(std::slice::from_ref(&stack), p, &mut rng, false);
        if dropped[0].values.iter().zip(&full[0].values).any(|(d, f)| d > f) {
            violations += 1;
        }
    }
    ensure(violations == 0, format!("{violations} drop-dominance violations"))?;
    Ok(format!("frequencies {}, 0/{trials} dominance violations", freqs.join(" ")))
}

/// Sort ascending, take the longest prefix of entries at most `delta`,
/// capped at `C - 1`.
fn prefix_oracle(p: &ProbabilityVector, delta: f64) -> Vec<usize> {
    let k = p.num_classes();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| p.get(a).total_cmp(&p.get(b)).then(a.cmp(&b)));
    order.into_iter().take_while(|&c| p.get(c) <= delta).take(k - 1).collect()
}

fn c6_complementary_extraction() -> Check {
    let vectors = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut total_selected = 0usize;
    for delta in [0.01, 0.05, 0.1] {
        for i in 0..vectors {
            let k = 7;
            let alpha = [0.1, 0.3, 1.0][i % 3];
            let p = random_simplex(&mut rng, k, alpha);
            let got = extract_complementary(&p, &BTreeSet::new(), delta);
            let want = prefix_oracle(&p, delta);
            ensure(got == want, format!("delta {delta}: {:?} gives {got:?}, oracle {want:?}", p.as_slice()))?;
            ensure(got.len() < k, format!("delta {delta}: {} labels for {k} classes", got.len()))?;
            ensure(!got.contains(&p.argmax()), format!("delta {delta}: argmax negated in {:?}", p.as_slice()))?;
            total_selected += got.len();
        }
    }
    Ok(format!("3 x {vectors} vectors agree with the oracle ({total_selected} labels extracted)"))
}

fn c7_balanced_sampler() -> Check {
    // Upper 1% point of chi-square with 6 degrees of freedom.
    const CRITICAL: f64 = 16.811894;
    let counts = apportion(700, &SKEWED_SHARES);
    let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect();
    let sampler = BalancedSampler::new(&labels, &LabelSpace::default()).map_err(err)?;
    let draws = 70_000;
    let mut freq = [0usize; 7];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in sampler.sample(draws, &mut rng) {
        freq[labels[i]] += 1;
    }
    let expected = draws as f64 / 7.0;
    let stat: f64 = freq.iter().map(|&f| (f as f64 - expected).powi(2) / expected).sum();
    ensure(stat < CRITICAL, format!("chi-square {stat:.3} >= {CRITICAL} (counts {freq:?})"))?;
    Ok(format!("pool {counts:?}, chi-square {stat:.3} < {CRITICAL}"))
}

fn c8_acceptance_monotonicity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let k = 7;
    let mut checked = 0;
    for batch in 0..100 {
        let probs: Vec<ProbabilityVector> = (0..64).map(|_| random_simplex(&mut rng, k, 0.3)).collect();
        let low: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let high: Vec<f64> = low
            .iter()
            .map(|&t| if rng.gen_bool(0.5) { rng.gen_range(t..=1.0) } else { t })
            .collect();
        let accepted = |tau: &[f64]| -> Result<BTreeSet<usize>, String> {
            let state = ThresholdState::from_thresholds(tau.to_vec(), 0.9).map_err(err)?;
            Ok((0..probs.len())
                .filter(|&i| accept_pseudo_label(&format!("s{i}"), &probs[i], &state).accepted)
                .collect())
        };
        let (a_low, a_high) = (accepted(&low)?, accepted(&high)?);
        ensure(a_high.is_subset(&a_low), format!("batch {batch}: raised thresholds accepted {:?}", a_high.difference(&a_low)))?;
        checked += a_low.len();
    }
    Ok(format!("100 batches, 0 violations ({checked} accepted at the lower thresholds)"))
}

fn read_text(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// The ablation ladder: each rung switches on one more component.
const LADDER: [(&str, &[&str]); 5] = [
    ("supervised", &["loss.lambda1=0", "loss.lambda2=0", "attention.enabled=false", "dta.enabled=false"]),
    ("+L_u", &["loss.lambda2=0", "attention.enabled=false", "dta.enabled=false"]),
    ("+L_NL", &["attention.enabled=false", "dta.enabled=false"]),
    ("+attention", &["dta.enabled=false"]),
    ("+DTA (full)", &[]),
];

fn final_accuracy(cfg: RunConfig, data: TrainData) -> Result<f64, String> {
    let epochs = cfg.train.epochs;
    let mut trainer = Trainer::new(cfg, data).map_err(err)?;
    let mut last = None;
    for _ in 0..epochs {
        if let Some(eval) = trainer.train_epoch().map_err(err)?.record.and_then(|r| r.eval) {
            last = Some(eval.accuracy);
        }
    }
    last.ok_or_else(|| "no evaluation ran".to_string())
}

fn c9_benchmark(scratch: &Path) -> Check {
    let started = Instant::now();
    let configs = repo_root().join("configs");
    let synth_text = read_text(&configs.join("synth-bench.toml"))?;
    let spec = SynthSpec::resolve(Some(&synth_text), &[]).map_err(err)?;
    let labeled: usize = spec.labeled.iter().sum();
    let pool = labeled + spec.unlabeled.iter().sum::<usize>();
    let eval: usize = spec.eval.iter().sum();
    ensure(eval >= 3000, format!("eval split has {eval} images"))?;
    ensure(labeled * 10 == pool, format!("{labeled} of {pool} training images labeled"))?;
    let data_dir = scratch.join("bench-data");
    generate_synthetic_dataset(&spec, &data_dir).map_err(err)?;
    let manifest = toml::Value::String(data_dir.join("manifest.tsv").display().to_string());
    let base = RunConfig::load(&configs.join("bench.toml"), &[("data.manifest".into(), manifest.clone())]).map_err(err)?;
    let data = load_data(&base).map_err(err)?;

    let mut means = Vec::new();
    let mut lines = Vec::new();
    for (name, sets) in LADDER {
        let mut accs = Vec::new();
        for seed in 0..3u64 {
            let mut ov: Vec<(String, toml::Value)> = vec![("data.manifest".into(), manifest.clone())];
            for s in sets.iter() {
                ov.push(dtsnl::config::parse_override(s)?);
            }
            ov.push(("train.seed".into(), toml::Value::Integer(seed as i64)));
            let cfg = RunConfig::load(&configs.join("bench.toml"), &ov).map_err(err)?;
            accs.push(final_accuracy(cfg, data.clone())?);
        }
        let mean = accs.iter().sum::<f64>() / 3.0;
        lines.push(format!(
            "    {name:<12} mean {:.2}%  seeds {}",
            100.0 * mean,
            accs.iter().map(|a| format!("{:.2}%", 100.0 * a)).collect::<Vec<_>>().join(" ")
        ));
        means.push(mean);
    }
    let elapsed = started.elapsed().as_secs_f64();
    for l in &lines {
        println!("{l}");
    }
    let gap = 100.0 * (means[4] - means[0]);
    let mut problems = Vec::new();
    if gap < 5.0 {
        problems.push(format!("full minus supervised is {gap:.2} points (< 5)"));
    }
    for w in 1..means.len() - 1 {
        let drop = 100.0 * (means[w] - means[w + 1]);
        if drop > 1.0 {
            problems.push(format!("{} -> {} drops {drop:.2} points (> 1)", LADDER[w].0, LADDER[w + 1].0));
        }
    }
    if elapsed >= 600.0 {
        problems.push(format!("took {elapsed:.0}s (>= 600s)"));
    }
    let summary = format!("gap {gap:.2} points, 15 runs in {elapsed:.0}s");
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", problems.join("; ")))
    }
}

/// Small dataset and short schedule shared by the determinism and replay
/// checks.
fn small_run_config(scratch: &Path) -> Result<(RunConfig, TrainData), String> {
    let data_dir = scratch.join("small-data");
    if !data_dir.join("manifest.tsv").exists() {
        let spec = SynthSpec::resolve(None, &[("eval".into(), toml::Value::try_from(vec![20; 7]).map_err(err)?)]).map_err(err)?;
        generate_synthetic_dataset(&spec, &data_dir).map_err(err)?;
    }
    let text = format!(
        r#"
[data]
manifest = "{}"
[train]
epochs = 30
batch_size = 16
steps_per_epoch = 2
eval_every = 5
learning_rate = 0.003
seed = 11
[model]
widths = [4, 8]
[augment]
working_size = 16
crop = 14
[attention]
reduction = 2
[dta]
ema_decay = 0.9
"#,
        data_dir.join("manifest.tsv").display()
    );
    let cfg = RunConfig::resolve(&text, &[]).map_err(err)?;
    let data = load_data(&cfg).map_err(err)?;
    Ok((cfg, data))
}

fn c10_determinism_and_resume(scratch: &Path) -> Check {
    let (cfg, data) = small_run_config(scratch)?;
    let a = scratch.join("run-a");
    let b = scratch.join("run-b");
    let c = scratch.join("run-c");
    run_train(&cfg, data.clone(), &a, None).map_err(err)?;
    run_train(&cfg, data.clone(), &b, None).map_err(err)?;
    let metrics_a = read_text(&a.join("metrics.jsonl"))?;
    ensure(metrics_a == read_text(&b.join("metrics.jsonl"))?, "same-seed metrics streams differ")?;
    ensure(read_text(&a.join(TRACE_FILE))? == read_text(&b.join(TRACE_FILE))?, "same-seed traces differ")?;

    // Interrupt after 15 epochs, then resume to 30.
    let mut first_half = cfg.clone();
    first_half.train.epochs = 15;
    run_train(&first_half, data.clone(), &c, None).map_err(err)?;
    run_train(&cfg, data, &c, Some(&c.join("checkpoints/epoch-15"))).map_err(err)?;
    let metrics_c = read_text(&c.join("metrics.jsonl"))?;
    let tail = |text: &str| -> Vec<String> {
        text.lines()
            .filter(|l| serde_json::from_str::<MetricsRecord>(l).map(|r| r.epoch() > 15).unwrap_or(false))
            .map(String::from)
            .collect()
    };
    let (tail_a, tail_c) = (tail(&metrics_a), tail(&metrics_c));
    ensure(!tail_a.is_empty() && tail_a == tail_c, "resumed epochs 16-30 differ from the uninterrupted run")?;
    ensure(metrics_a == metrics_c, "resumed metrics stream differs from the uninterrupted run")?;
    let final_a = std::fs::read(a.join("checkpoints/epoch-30")).map_err(err)?;
    let final_c = dtsnl::trainer::RunState::load(&c.join("checkpoints/epoch-30")).map_err(err)?;
    let final_a = dtsnl::trainer::RunState::from_bytes(&final_a).map_err(err)?;
    ensure(final_a.student == final_c.student && final_a.gate == final_c.gate, "final states differ")?;
    Ok(format!("{} metric lines identical across runs; epochs 16-30 identical after resume ({} lines)", metrics_a.lines().count(), tail_a.len()))
}

fn c11_audit_replay(scratch: &Path) -> Check {
    let run = scratch.join("run-a");
    if !run.join("metrics.jsonl").exists() {
        let (cfg, data) = small_run_config(scratch)?;
        run_train(&cfg, data, &run, None).map_err(err)?;
    }
    let cfg = RunConfig::resolve(&read_text(&run.join("config.snapshot"))?, &[]).map_err(err)?;
    let logged: Vec<String> = read_metrics(&run.join("metrics.jsonl"))
        .map_err(err)?
        .into_iter()
        .filter_map(|r| match r {
            MetricsRecord::Epoch(e) => Some(serde_json::to_string(&e.gate).unwrap()),
            MetricsRecord::Step { .. } => None,
        })
        .collect();
    let file = std::fs::File::open(run.join(TRACE_FILE)).map_err(err)?;
    let trace = read_trace(std::io::BufReader::new(file)).map_err(err)?;
    let k = trace.first().ok_or("empty trace")?.probs.num_classes();
    let replayed: Vec<String> = run_audit(&trace, k, &cfg.dta, &cfg.snl)
        .map_err(err)?
        .iter()
        .map(|s| serde_json::to_string(s).unwrap())
        .collect();
    ensure(logged.len() == replayed.len(), format!("{} logged epochs, {} replayed", logged.len(), replayed.len()))?;
    for (i, (l, r)) in logged.iter().zip(&replayed).enumerate() {
        ensure(l == r, format!("epoch {}: logged {l}, replayed {r}", i + 1))?;
    }
    let accepted: usize = read_metrics(&run.join("metrics.jsonl"))
        .map_err(err)?
        .iter()
        .filter_map(|r| match r {
            MetricsRecord::Epoch(e) => Some(e.gate.accepted_per_class.iter().sum::<usize>()),
            MetricsRecord::Step { .. } => None,
        })
        .sum();
    Ok(format!("{} epochs from {} trace records replay byte-identically ({accepted} acceptances)", replayed.len(), trace.len()))
}

fn main() -> ExitCode {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let scratch = tempfile::tempdir().expect("scratch directory");
    let dir = scratch.path();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Check + '_>)> = vec![
        (1, "loss oracles", Box::new(c1_loss_oracles)),
        (2, "gradient checks", Box::new(c2_gradient_checks)),
        (3, "threshold recursion", Box::new(c3_threshold_recursion)),
        (4, "EMA teacher", Box::new(c4_ema_teacher)),
        (5, "attention drop statistics", Box::new(c5_drop_statistics)),
        (6, "complementary extraction", Box::new(c6_complementary_extraction)),
        (7, "balanced sampler", Box::new(c7_balanced_sampler)),
        (8, "acceptance monotonicity", Box::new(c8_acceptance_monotonicity)),
        (9, "end-to-end synthetic benchmark", Box::new(|| c9_benchmark(dir))),
        (10, "determinism and resume", Box::new(|| c10_determinism_and_resume(dir))),
        (11, "audit replay identity", Box::new(|| c11_audit_replay(dir))),
    ];
    let mut failed = 0;
    for (n, name, check) in &criteria {
        if !selected.is_empty() && !selected.contains(n) {
            continue;
        }
        let started = Instant::now();
        let result = check();
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n:>2} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
