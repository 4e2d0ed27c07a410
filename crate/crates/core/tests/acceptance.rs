//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Training criteria share one synthetic setup: 200 training and 20 test
//! conversations with 3-5 sessions drawn from a recurring inventory of
//! disjoint topic vocabularies, and a word-vector file in which words of the
//! same topic lie near a shared centroid.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use bicl::autodiff::{Tape, Tensor};
use bicl::clustering::hungarian;
use bicl::corpus::{generate_synthetic, Conversation, SyntheticSpec};
use bicl::gradsuite::{gradient_suite, GRAD_TOLERANCE};
use bicl::losses::{session_contrastive, session_prototypes, supervised_objective, utterance_contrastive};
use bicl::metrics::{ari, nmi, shen_f, Partition};
use bicl::trainer::{
    embedding_table, evaluate, train_supervised, train_unsupervised, EvalReport, KSelector, Mode, TrainConfig,
    TrainOutcome,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const TOPICS: usize = 50;
const WORD_DIM: usize = 128;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---- criteria 1-4: oracles ----

fn gradients() -> Verdict {
    let start = Instant::now();
    let rows = match gradient_suite(7) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("gradient suite failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    let expected = ["l_u", "l_s", "l_m", "l_k", "l_u_prime", "l_s_prime", "encoder"];
    let covered = expected.iter().all(|n| names.contains(n));
    let listing: Vec<String> = rows.iter().map(|r| format!("{}={:.1e}", r.name, r.max_relative_error)).collect();
    verdict(
        covered && worst < GRAD_TOLERANCE && secs < 60.0,
        format!("max rel err {worst:.2e} < {GRAD_TOLERANCE:.0e} [{}], {secs:.2} s < 60 s", listing.join(" ")),
    )
}

fn pair_count(labels: &[usize]) -> Vec<bool> {
    let mut out = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            out.push(labels[i] == labels[j]);
        }
    }
    out
}

fn oracle_nmi(t: &[usize], p: &[usize]) -> f64 {
    let n = t.len() as f64;
    let count = |f: &dyn Fn(usize) -> bool| (0..t.len()).filter(|&i| f(i)).count() as f64;
    let ts: BTreeSet<usize> = t.iter().copied().collect();
    let ps: BTreeSet<usize> = p.iter().copied().collect();
    let h = |set: &BTreeSet<usize>, side: &[usize]| -> f64 {
        set.iter()
            .map(|&a| {
                let q = count(&|i| side[i] == a) / n;
                -q * q.log2()
            })
            .sum()
    };
    let (ht, hp) = (h(&ts, t), h(&ps, p));
    if ht == 0.0 && hp == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for &a in &ts {
        for &b in &ps {
            let joint = count(&|i| t[i] == a && p[i] == b) / n;
            if joint > 0.0 {
                let pa = count(&|i| t[i] == a) / n;
                let pb = count(&|i| p[i] == b) / n;
                mi += joint * (joint / (pa * pb)).log2();
            }
        }
    }
    mi / (0.5 * (ht + hp))
}

fn oracle_ari(t: &[usize], p: &[usize]) -> f64 {
    let (st, sp) = (pair_count(t), pair_count(p));
    let total = st.len() as f64;
    let both = st.iter().zip(&sp).filter(|(a, b)| **a && **b).count() as f64;
    let a = st.iter().filter(|x| **x).count() as f64;
    let b = sp.iter().filter(|x| **x).count() as f64;
    let expected = a * b / total;
    let max = 0.5 * (a + b);
    if max == expected {
        return if st == sp { 1.0 } else { 0.0 };
    }
    (both - expected) / (max - expected)
}

fn metric_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.gen_range(2..=12);
        let kt = rng.gen_range(1..=n);
        let kp = rng.gen_range(1..=n);
        let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kt)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kp)).collect();
        let (pt, pp) = (Partition(t.clone()), Partition(p.clone()));
        let dn = (nmi(&pt, &pp).unwrap() - oracle_nmi(&t, &p)).abs();
        let da = (ari(&pt, &pp).unwrap() - oracle_ari(&t, &p)).abs();
        worst = worst.max(dn).max(da);
    }
    let f = shen_f(&Partition(vec![0, 0, 0, 1]), &Partition(vec![0, 0, 1, 1])).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-9 && f == 23.0 / 30.0 && secs < 10.0,
        format!("max |diff| {worst:.1e} over 500 pairs, shen_f {f} vs 23/30, {secs:.2} s < 10 s"),
    )
}

fn permutations_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

fn assignment_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=7);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let m = hungarian(&cost).unwrap();
        let realised: f64 = m.columns.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        let best = permutations_min(&cost);
        if (m.cost - best).abs() > 1e-9 || (realised - best).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 30.0,
        format!("{mismatches} mismatches in 1000 matrices, {secs:.2} s < 30 s"),
    )
}

fn closed_forms() -> Verdict {
    let mut t = Tape::new();
    let v = t.constant(Tensor::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l_u = utterance_contrastive(&mut t, v, &[0, 0, 1, 1], 0.5, None, &mut rng).unwrap();
    let l_u = t.value(l_u).item();
    let w = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let protos = session_prototypes(&mut t, w, &[0, 1]).unwrap();
    let l_s = session_contrastive(&mut t, w, &protos, &[0, 1], 1.0).unwrap();
    let l_s = t.value(l_s).item();
    let d = TrainConfig::default();
    let total = supervised_objective(1.0, 0.5, 0.2, 0.1, d.alpha, d.beta, d.gamma).total;
    let errs = [
        (l_u - 4.0 * 3f64.ln()).abs(),
        (l_s - 2.0 * (1.0 + (-1.0f64).exp()).ln()).abs(),
        (total - 1.30).abs(),
    ];
    verdict(
        errs.iter().all(|e| *e < 1e-9),
        format!("L_u {l_u:.12}, L_s {l_s:.12}, total {total:.12}; max err {:.1e}", errs.iter().fold(0.0, |a: f64, b| a.max(*b))),
    )
}

// ---- criteria 5-7: training on the synthetic corpus ----

struct Setup {
    dir: tempfile::TempDir,
    train: Vec<Conversation>,
    test: Vec<Conversation>,
    config: TrainConfig,
}

fn corpus(n: usize, seed: u64) -> Vec<Conversation> {
    let spec = SyntheticSpec {
        num_conversations: n,
        sessions_per_conversation: (3, 5),
        topics: TOPICS,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, seed).unwrap()
}

/// Topic words `w<i>` sit around the centroid of block `i / topic_words`;
/// every other token gets an unrelated vector.
fn write_word_vectors(path: &Path, corpora: &[&[Conversation]]) {
    let topic_words = SyntheticSpec::default().topic_words;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let wide = Normal::new(0.0, 0.4).unwrap();
    let narrow = Normal::new(0.0, 0.2).unwrap();
    let centroids: Vec<Vec<f64>> = (0..TOPICS).map(|_| (0..WORD_DIM).map(|_| wide.sample(&mut rng)).collect()).collect();
    let words: BTreeSet<&str> = corpora
        .iter()
        .flat_map(|c| c.iter())
        .flat_map(|c| &c.utterances)
        .flat_map(|u| &u.tokens)
        .map(String::as_str)
        .collect();
    let mut text = String::new();
    for w in words {
        let topic = w.strip_prefix('w').and_then(|i| i.parse::<usize>().ok()).map(|i| i / topic_words);
        write!(text, "{w}").unwrap();
        for d in 0..WORD_DIM {
            let x = match topic {
                Some(t) => centroids[t][d] + narrow.sample(&mut rng),
                None => wide.sample(&mut rng),
            };
            write!(text, " {x:.6}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let train = corpus(200, 1);
    let test = corpus(20, 2);
    let vectors = dir.path().join("vectors.txt");
    write_word_vectors(&vectors, &[&train, &test]);
    let config = TrainConfig {
        embedding_dim: WORD_DIM,
        hidden_dim: 128,
        attention_dim: 128,
        k_hidden: 32,
        max_sessions: 6,
        batch_size: 4,
        learning_rate: 1e-3,
        epochs: 10,
        seed: 0,
        embeddings: Some(vectors.display().to_string()),
        ..TrainConfig::default()
    };
    config.validate().unwrap();
    Setup {
        dir,
        train,
        test,
        config,
    }
}

/// Everything a training run writes, serialised for byte comparison.
#[derive(PartialEq)]
struct Artifacts {
    checkpoint: Vec<u8>,
    log: String,
    reports: Vec<String>,
}

fn artifacts(out: &TrainOutcome, reports: &[&EvalReport]) -> Artifacts {
    Artifacts {
        checkpoint: out.checkpoint.to_bytes().unwrap(),
        log: out.log.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect(),
        reports: reports.iter().map(|r| serde_json::to_string(r).unwrap()).collect(),
    }
}

struct Run {
    reports: Vec<EvalReport>,
    artifacts: Artifacts,
    secs: f64,
}

fn run(setup: &Setup, data: &[Conversation], config: &TrainConfig, selectors: &[KSelector]) -> Run {
    let start = Instant::now();
    let table = embedding_table(config).unwrap();
    let out = match config.mode {
        Mode::Supervised => train_supervised(data, config, &table),
        Mode::Unsupervised => train_unsupervised(data, config, &table),
    }
    .unwrap();
    let model = &out.checkpoint.model;
    let reports: Vec<EvalReport> =
        selectors.iter().map(|&s| evaluate(&setup.test, model, config, &table, s).unwrap()).collect();
    let secs = start.elapsed().as_secs_f64();
    let artifacts = artifacts(&out, &reports.iter().collect::<Vec<_>>());
    Run {
        reports,
        artifacts,
        secs,
    }
}

fn unlabeled(data: &[Conversation]) -> Vec<Conversation> {
    let mut data = data.to_vec();
    for c in &mut data {
        for u in &mut c.utterances {
            u.session_id = None;
        }
    }
    data
}

fn unsupervised_config(setup: &Setup) -> TrainConfig {
    TrainConfig {
        mode: Mode::Unsupervised,
        ..setup.config.clone()
    }
}

fn supervised_recovery(setup: &Setup) -> (Verdict, Run) {
    let r = run(setup, &setup.train, &setup.config, &[KSelector::Gold, KSelector::Predictor]);
    let (gold, pred) = (&r.reports[0], &r.reports[1]);
    let gap = gold.shen_f - pred.shen_f;
    let v = verdict(
        gold.nmi >= 0.85 && gold.shen_f >= 0.85 && gap <= 0.15 && r.secs < 1800.0,
        format!(
            "gold K: NMI {:.3} >= 0.85, Shen-F {:.3} >= 0.85; predictor Shen-F {:.3} (gap {gap:.3} <= 0.15, K acc {:.2}); {:.0} s < 1800 s",
            gold.nmi, gold.shen_f, pred.shen_f, pred.k_acc, r.secs
        ),
    );
    (v, r)
}

fn unsupervised_improvement(setup: &Setup, data: &[Conversation]) -> (Verdict, Run, Run) {
    let cfg = unsupervised_config(setup);
    let baseline = run(setup, data, &TrainConfig { epochs: 0, ..cfg.clone() }, &[KSelector::Elbow]);
    let trained = run(setup, data, &cfg, &[KSelector::Elbow]);
    let (b, t) = (&baseline.reports[0], &trained.reports[0]);
    let gain = t.nmi - b.nmi;
    let v = verdict(
        gain >= 0.2 && trained.secs < 2700.0,
        format!(
            "elbow K: NMI {:.3} after training vs {:.3} at initialisation (gain {gain:+.3}, need >= +0.2); {:.0} s < 2700 s",
            t.nmi, b.nmi, trained.secs
        ),
    );
    (v, baseline, trained)
}

fn ablation(setup: &Setup, data: &[Conversation], full: &Run) -> (Verdict, Run) {
    let cfg = TrainConfig {
        disable: vec!["l_u_prime".into()],
        ..unsupervised_config(setup)
    };
    let r = run(setup, data, &cfg, &[KSelector::Elbow]);
    let (with, without) = (full.reports[0].ari, r.reports[0].ari);
    let v = verdict(
        without < with,
        format!("elbow K ARI {without:.3} without L'_u vs {with:.3} with it"),
    );
    (v, r)
}

fn main() {
    let started = Instant::now();
    let mut failures = 0;
    let mut report = |n: usize, name: &str, v: &Verdict| {
        if !v.pass {
            failures += 1;
        }
        println!("criterion {n} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        std::io::stdout().flush().unwrap();
    };

    let c1 = gradients();
    report(1, "gradient correctness", &c1);
    let c2 = metric_oracles();
    report(2, "metric oracles", &c2);
    let c3 = assignment_oracle();
    report(3, "assignment oracle", &c3);
    let c4 = closed_forms();
    report(4, "closed-form losses", &c4);

    let setup = setup();
    let (c5, sup) = supervised_recovery(&setup);
    report(5, "supervised recovery", &c5);
    let data = unlabeled(&setup.train);
    let (c6, base, full) = unsupervised_improvement(&setup, &data);
    report(6, "unsupervised improvement", &c6);
    let (c7, abl) = ablation(&setup, &data, &full);
    report(7, "ablation direction", &c7);

    // criterion 8 repeats every run above from scratch
    let mut differing = Vec::new();
    let (train, test) = (corpus(200, 1), corpus(20, 2));
    if train != setup.train || test != setup.test {
        differing.push("corpus");
    }
    let vectors = setup.dir.path().join("vectors-again.txt");
    write_word_vectors(&vectors, &[&train, &test]);
    if std::fs::read(&vectors).ok() != std::fs::read(setup.config.embeddings.as_ref().unwrap()).ok() {
        differing.push("word vectors");
    }
    let suite = |s| gradient_suite(s).unwrap().iter().map(|r| r.max_relative_error.to_bits()).collect::<Vec<_>>();
    if suite(7) != suite(7) {
        differing.push("gradient suite");
    }
    let data_again = unlabeled(&train);
    let unsup = unsupervised_config(&setup);
    let reruns = [
        ("supervised", &sup, &train, setup.config.clone(), vec![KSelector::Gold, KSelector::Predictor]),
        ("baseline", &base, &data_again, TrainConfig { epochs: 0, ..unsup.clone() }, vec![KSelector::Elbow]),
        ("unsupervised", &full, &data_again, unsup.clone(), vec![KSelector::Elbow]),
        ("ablation", &abl, &data_again, TrainConfig { disable: vec!["l_u_prime".into()], ..unsup }, vec![KSelector::Elbow]),
    ];
    for (name, first, data, cfg, selectors) in reruns {
        if run(&setup, data, &cfg, &selectors).artifacts != first.artifacts {
            differing.push(name);
        }
    }
    let c8 = verdict(
        differing.is_empty(),
        if differing.is_empty() {
            "corpora, word vectors, gradient suite, and checkpoints, logs and reports of all four training runs reproduced byte for byte".to_string()
        } else {
            format!("differences in: {}", differing.join(", "))
        },
    );
    report(8, "determinism", &c8);

    println!("acceptance finished in {:.0} s", started.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
