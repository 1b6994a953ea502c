//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so every criterion reports one line, and exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use useridentifier::augment::{augment, content_budget, plain, AugmentedSample, Placement, Sample};
use useridentifier::data::SplitDataset;
use useridentifier::federated::{self, FedConfig};
use useridentifier::harness::{
    compare_baselines, prepare_for_seed, run_ablation, run_federated, summarize, CellSummary, ExperimentConfig,
    Method,
};
use useridentifier::identifiers::{assign, collision_probability, AssignOptions, Scheme, UserIdentifier};
use useridentifier::model::{
    freeze_mask, init, Classifier, Mode, ModelConfig, Parameters, Phase, PREFIX,
};
use useridentifier::tokenizer::{build_vocab, SubsetKind};
use useridentifier::trainer::{fit, prepare, train_useradapter, Conditioning, Optimizer, TrainConfig};
use useridentifier::{TokenId, UserId};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn cell<'a>(cells: &'a [CellSummary], method: Method, id_len: Option<usize>, split: &str) -> Option<&'a CellSummary> {
    cells.iter().find(|c| {
        c.method == method.name()
            && c.id_type == method.id_type()
            && id_len.is_none_or(|l| c.id_len == l)
            && c.split == split
    })
}

// ---- 1. gradients -------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;

fn random_case(seed: u64) -> (Classifier, Parameters, Vec<AugmentedSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=2);
    let d_model = heads * rng.random_range(2..=3);
    let vocab = rng.random_range(8..=16);
    let users: Vec<UserId> = (0..rng.random_range(2..=3)).map(|i| UserId(format!("u{i}"))).collect();
    let len = rng.random_range(1..=2);
    let mode = match rng.random_range(0..3) {
        0 => Mode::Tied,
        1 => Mode::Untied { len },
        _ => Mode::Prefix { len },
    };
    let cfg = ModelConfig {
        d_model,
        n_heads: heads,
        n_layers: rng.random_range(1..=2),
        d_ff: rng.random_range(3..=8),
        vocab_size: vocab,
        n_classes: rng.random_range(2..=4),
        max_seq_len: rng.random_range(6..=10),
        mode,
        users: if mode == Mode::Tied { Vec::new() } else { users.clone() },
        seed,
    };
    let mut classifier = Classifier::new(cfg.clone()).unwrap();
    classifier.set_prefix_active(rng.random_bool(0.8));
    let mut params = init(&cfg).unwrap();
    let normal = Normal::new(0.0, 0.4).unwrap();
    for (_, t) in params.iter_mut() {
        for x in t.data_mut() {
            *x = normal.sample(&mut rng);
        }
    }
    let cls = TokenId(2);
    let batch = (0..rng.random_range(1..=3))
        .map(|_| {
            let user = users[rng.random_range(0..users.len())].clone();
            let text = (0..rng.random_range(1..=6)).map(|_| TokenId(rng.random_range(3..vocab as u32))).collect();
            let sample = Sample { user: user.clone(), text, label: rng.random_range(0..cfg.n_classes), ambiguous: false };
            match mode {
                Mode::Prefix { len } => plain(&sample, cfg.max_seq_len, len, cls).unwrap(),
                _ => {
                    let ids = (0..len).map(|_| TokenId(rng.random_range(3..vocab as u32))).collect();
                    let ident = UserIdentifier { user, scheme: Scheme::RandAll, ids };
                    let placement = if rng.random_bool(0.5) { Placement::Both } else { Placement::Prefix };
                    augment(&sample, &ident, placement, cfg.max_seq_len, cls).unwrap()
                }
            }
        })
        .collect();
    (classifier, params, batch)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let configs = 60;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for seed in 0..configs {
        let (clf, params, batch) = random_case(1000 + seed);
        let refs: Vec<&AugmentedSample> = batch.iter().collect();
        let (_, grads) = clf.loss_and_grad(&params, &refs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in params.iter() {
            let g = grads.get(name).unwrap();
            for _ in 0..6 {
                let i = rng.random_range(0..t.len());
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += FD_STEP;
                let up = clf.loss(&p, &refs).unwrap();
                p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * FD_STEP;
                let down = clf.loss(&p, &refs).unwrap();
                let numeric = (up - down) / (2.0 * FD_STEP);
                let analytic = g.data()[i];
                let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(GRAD_FLOOR);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < GRAD_TOL && secs < 60.0,
        format!("{configs} configs, {checked} coordinates, max rel err {worst:.2e} (< {GRAD_TOL:.0e}), {secs:.1}s (< 60s)"),
    )
}

// ---- 2 & 3. heterogeneity and baselines --------------------------------

struct Baselines {
    cells: Vec<CellSummary>,
    conventional_ambiguous: Vec<f64>,
    identifier_ambiguous: Vec<f64>,
    secs: f64,
}

fn run_baselines(dir: &Path) -> Baselines {
    let cfg = ExperimentConfig {
        methods: vec![
            Method::Conventional,
            Method::UserAdapter,
            Method::UntiedUserEmb,
            Method::UserIdentifier(Scheme::RandAll),
        ],
        ..Default::default()
    };
    let start = Instant::now();
    let rows = compare_baselines(&cfg, &dir.join("compare.csv")).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let per_seed = |m: Method| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.method == m.name() && r.id_type == m.id_type() && r.split == "test_ambiguous")
            .map(|r| r.accuracy.unwrap())
            .collect()
    };
    Baselines {
        cells: summarize(&rows),
        conventional_ambiguous: per_seed(Method::Conventional),
        identifier_ambiguous: per_seed(Method::UserIdentifier(Scheme::RandAll)),
        secs,
    }
}

fn criterion_heterogeneity(b: &Baselines) -> Outcome {
    let conv_max = b.conventional_ambiguous.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ident_min = b.identifier_ambiguous.iter().copied().fold(f64::INFINITY, f64::min);
    check(
        b.conventional_ambiguous.len() == 3
            && b.identifier_ambiguous.len() == 3
            && conv_max <= 0.55
            && ident_min >= 0.90
            && b.secs < 600.0,
        format!(
            "ambiguous-subset test accuracy per seed: conventional {:?} (max {conv_max:.3} <= 0.55), \
             user identifier {:?} (min {ident_min:.3} >= 0.90); {:.0}s for all four methods (< 600s)",
            b.conventional_ambiguous, b.identifier_ambiguous, b.secs
        ),
    )
}

fn criterion_baselines(b: &Baselines) -> Outcome {
    let get = |m: Method| cell(&b.cells, m, None, "test").map(|c| c.mean).unwrap_or(f64::NAN);
    let ident = get(Method::UserIdentifier(Scheme::RandAll));
    let untied = get(Method::UntiedUserEmb);
    let conv = get(Method::Conventional);
    let adapter = get(Method::UserAdapter);
    check(
        ident >= untied && untied >= conv && ident >= adapter,
        format!(
            "3-seed mean test accuracy: user identifier {ident:.4}, untied {untied:.4}, conventional {conv:.4}, \
             adapter {adapter:.4}; margins identifier-untied {:+.4}, untied-conventional {:+.4}, identifier-adapter {:+.4}",
            ident - untied,
            untied - conv,
            ident - adapter
        ),
    )
}

// ---- 4 & 5. ablation and sampling space ---------------------------------

fn ablation_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    // Long enough content that the shortest budget cuts into it.
    cfg.data.synthetic.min_words = 16;
    cfg.data.synthetic.max_words = 40;
    cfg.train.epochs = 5;
    cfg
}

fn criterion_length(cells: &[CellSummary]) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for scheme in [Scheme::RandDig, Scheme::RandNon, Scheme::RandAll] {
        let m = Method::UserIdentifier(scheme);
        let at = |l| cell(cells, m, Some(l), "test").map(|c| c.mean).unwrap_or(f64::NAN);
        let (a4, a8, a16, a48) = (at(4), at(8), at(16), at(48));
        ok &= a48 < a8;
        parts.push(format!("{scheme} L4 {a4:.3} L8 {a8:.3} L16 {a16:.3} L48 {a48:.3}"));
    }
    let budgets = (content_budget(512, 10, Placement::Both), content_budget(512, 200, Placement::Both));
    ok &= budgets == (491, 111);
    check(ok, format!("{}; budgets (512,10)={} (512,200)={}", parts.join("; "), budgets.0, budgets.1))
}

fn criterion_space(cells: &[CellSummary], all_size: u64) -> Outcome {
    let grid_mean = |s: Scheme| {
        let xs: Vec<f64> = cells
            .iter()
            .filter(|c| c.id_type == s.name() && c.split == "test")
            .map(|c| c.mean)
            .collect();
        mean(&xs)
    };
    let (all, dig) = (grid_mean(Scheme::RandAll), grid_mean(Scheme::RandDig));
    let mut pairs = 0;
    let mut math_ok = true;
    for l in [1, 2, 3, 4, 8, 16] {
        for n in [2, 5, 20, 100, 1000] {
            pairs += 1;
            math_ok &= collision_probability(10, l, n) >= collision_probability(all_size, l, n);
        }
    }
    check(
        all >= dig && math_ok,
        format!(
            "3-seed grid mean test accuracy rand_all {all:.4} vs rand_dig {dig:.4}; \
             collision(10) >= collision({all_size}) on {pairs} (L, N) pairs: {math_ok}"
        ),
    )
}

// ---- 6. collision math --------------------------------------------------

fn criterion_collision() -> Outcome {
    let exact = collision_probability(10, 1, 2);
    let analytic = collision_probability(10, 2, 5);
    let vocab = build_vocab(["a"], 64, 0).unwrap();
    let users: Vec<UserId> = (0..5).map(|i| UserId(format!("u{i}"))).collect();
    let trials = 10_000;
    let mut dup = 0;
    for t in 0..trials {
        let opts = AssignOptions { enforce_unique: false, ..AssignOptions::new(Scheme::RandDig, 2, t) };
        dup += assign(&users, &opts, &vocab, None).unwrap().has_duplicates() as usize;
    }
    let freq = dup as f64 / trials as f64;
    let se = (analytic * (1.0 - analytic) / trials as f64).sqrt();
    check(
        exact == 0.1 && (freq - analytic).abs() <= 3.0 * se,
        format!(
            "P(10,1,2) = {exact}; Monte Carlo {freq:.4} vs analytic {analytic:.4} (|diff| {:.4} <= 3 se {:.4})",
            (freq - analytic).abs(),
            3.0 * se
        ),
    )
}

// ---- 7. federated degenerate case ---------------------------------------

fn criterion_fed_equivalence() -> Outcome {
    let cfg = ExperimentConfig::default();
    let full = prepare_for_seed(&cfg, 1).unwrap();
    let user = full.users[0].clone();
    let only = |v: &[Sample]| v.iter().filter(|s| s.user == user).cloned().collect::<Vec<_>>();
    let dataset = SplitDataset { train: only(&full.dataset.train), val: only(&full.dataset.val), test: only(&full.dataset.test) };
    let assignment = assign(std::slice::from_ref(&user), &AssignOptions::new(Scheme::RandAll, 4, 1), &full.vocab, None).unwrap();
    let cond = Conditioning::with_identifiers(full.vocab.specials().cls, &assignment, Placement::Both);
    let model = ModelConfig { seed: 11, ..ModelConfig::desk(full.vocab.len(), 2) };
    let clf = Classifier::new(model.clone()).unwrap();
    let p0 = init(&model).unwrap();
    let lr = 0.1;
    let rounds = 10;

    let data = prepare(&dataset.train, &cond, &clf).unwrap();
    let mask = freeze_mask(&model, &Phase::Joint).unwrap();
    let central_cfg = TrainConfig {
        epochs: 1,
        batch_size: data.len(),
        learning_rate: lr,
        optimizer: Optimizer::Sgd { momentum: 0.0 },
        seed: 0,
        eval_every: 0,
    };
    let mut central = p0.clone();
    let mut worst = 0.0f64;
    for r in 1..=rounds {
        fit(&clf, &mut central, &data, &central_cfg, &mask, |_, _| Ok(())).unwrap();
        let fed_cfg = FedConfig {
            n_rounds: r,
            clients_per_round: 1,
            local_epochs: 1,
            local_batch_size: 0,
            local_lr: lr,
            local_optimizer: Optimizer::Sgd { momentum: 0.0 },
            seed: 5,
        };
        let (fed, _) = federated::run(&clf, p0.clone(), &dataset, &cond, &fed_cfg).unwrap();
        worst = worst.max(fed.max_abs_diff(&central));
    }
    let moved = central.max_abs_diff(&p0);
    check(
        worst <= 1e-9 && moved > 1e-3,
        format!("{rounds} rounds, max per-coordinate gap {worst:.2e} (<= 1e-9); parameters moved {moved:.3}"),
    )
}

// ---- 8. federated personalization ----------------------------------------

fn criterion_fed_personalization() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    // Most of each user's labels follow their persona, so every user clears
    // the 80% skew filter.
    cfg.data.synthetic.ambiguous_fraction = 0.8;
    cfg.data.skew_threshold = Some(0.8);
    let (mut with, mut without, mut users) = (Vec::new(), Vec::new(), 0);
    for &seed in &cfg.seeds {
        let data = prepare_for_seed(&cfg, seed).unwrap();
        users = data.users.len();
        let last = |w| run_federated(&cfg, &data, w, seed).unwrap().2.last().unwrap().accuracy;
        with.push(last(true));
        without.push(last(false));
    }
    let gap = mean(&with) - mean(&without);
    check(
        gap >= 0.05,
        format!(
            "{users} skewed users; final-round test accuracy identifier {:.4} vs conventional {:.4}, gap {:+.1} points (>= 5)",
            mean(&with),
            mean(&without),
            100.0 * gap
        ),
    )
}

// ---- 9. parameter accounting ----------------------------------------------

fn criterion_parameters() -> Outcome {
    let users = |n: usize| (0..n).map(|i| UserId(format!("u{i}"))).collect::<Vec<_>>();
    let count = |mode, n| {
        let cfg = ModelConfig { mode, users: users(n), ..ModelConfig::desk(300, 2) };
        init(&cfg).unwrap().count()
    };
    let tied: Vec<usize> = [1, 5, 50, 500].iter().map(|&n| count(Mode::Tied, n)).collect();
    let tied_ok = tied.iter().all(|&c| c == tied[0]);
    let d = ModelConfig::desk(300, 2).d_model;
    let mut untied_ok = true;
    for (n, l) in [(5, 1), (20, 8), (50, 3)] {
        untied_ok &= count(Mode::Untied { len: l }, n) - tied[0] == n * l * d;
    }

    let cfg = ExperimentConfig::default();
    let data = prepare_for_seed(&cfg, 1).unwrap();
    let model = ModelConfig { mode: Mode::Prefix { len: 4 }, users: data.users.clone(), seed: 3, ..ModelConfig::desk(data.vocab.len(), 2) };
    let clf = Classifier::new(model.clone()).unwrap();
    let p1 = TrainConfig { epochs: 2, ..Default::default() };
    let p2 = TrainConfig { epochs: 2, learning_rate: 1e-2, ..Default::default() };
    let out = train_useradapter(&clf, init(&model).unwrap(), &data.dataset, data.vocab.specials().cls, &p1, &p2).unwrap();
    let mut frozen = true;
    for (name, t) in out.params.iter() {
        if name != PREFIX {
            let b = out.backbone.get(name).unwrap();
            frozen &= t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    let prefix_moved = out.params.get(PREFIX) != out.backbone.get(PREFIX);
    check(
        tied_ok && untied_ok && frozen && prefix_moved,
        format!(
            "tied count {} for 1..500 users: {tied_ok}; untied adds n*L*d exactly: {untied_ok}; \
             adapter phase 2 base bit-identical: {frozen}, prefix updated: {prefix_moved}",
            tied[0]
        ),
    )
}

// ---- 10. determinism -----------------------------------------------------

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_useridentifier")).args(args).output().unwrap()
}

fn criterion_determinism(dir: &Path) -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic.n_users = 6;
    cfg.data.synthetic.samples_per_user = 40;
    cfg.train.epochs = 2;
    cfg.train.eval_every = 1;
    cfg.methods = vec![Method::Conventional, Method::UserIdentifier(Scheme::RandAll)];
    cfg.fed.n_rounds = 3;
    cfg.fed.clients_per_round = 3;
    let config = dir.join("small.json");
    std::fs::write(&config, cfg.to_json().unwrap()).unwrap();
    let config = config.to_str().unwrap();
    let mut same = Vec::new();
    for (cmd, file) in [("train", "metrics.csv"), ("fed-train", "rounds.csv"), ("compare", "compare.csv")] {
        let outs: Vec<Vec<u8>> = ["a", "b"]
            .iter()
            .map(|tag| {
                let out_dir = dir.join(format!("{cmd}-{tag}"));
                let o = cli(&["--config", config, "--seed", "7", "--out-dir", out_dir.to_str().unwrap(), cmd]);
                assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
                std::fs::read(out_dir.join(file)).unwrap()
            })
            .collect();
        same.push((cmd, file, !outs[0].is_empty() && outs[0] == outs[1]));
    }
    let ok = same.iter().all(|s| s.2);
    let detail = same.iter().map(|(c, f, s)| format!("{c} {f} identical: {s}")).collect::<Vec<_>>().join("; ");
    check(ok, format!("seed 7 twice: {detail}"))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        let (tag, text) = match &o {
            Ok(t) => ("PASS", t),
            Err(t) => ("FAIL", t),
        };
        println!("criterion {n:>2} [{tag}] {name}: {text}");
        results.push((n, name, o));
    };

    report(1, "gradient correctness", criterion_gradients());
    let baselines = run_baselines(dir.path());
    report(2, "heterogeneity separation", criterion_heterogeneity(&baselines));
    report(3, "baseline ordering", criterion_baselines(&baselines));

    let abl = ablation_config();
    let rows = run_ablation(&abl, &dir.path().join("ablation.csv")).unwrap();
    let cells = summarize(&rows);
    report(4, "length ablation trend", criterion_length(&cells));
    let vocab = prepare_for_seed(&abl, 1).unwrap().vocab;
    report(5, "sampling-space ordering", criterion_space(&cells, vocab.subset(SubsetKind::All).len() as u64));

    report(6, "collision math", criterion_collision());
    report(7, "federated degenerate equivalence", criterion_fed_equivalence());
    report(8, "federated personalization", criterion_fed_personalization());
    report(9, "parameter accounting", criterion_parameters());
    report(10, "determinism", criterion_determinism(dir.path()));

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
