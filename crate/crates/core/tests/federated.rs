use useridentifier::data::{gen_synthetic, split_per_user, SplitDataset, SplitRatios, SyntheticConfig};
use useridentifier::federated::{aggregate, run, ClientUpdate, FedConfig};
use useridentifier::model::{init, Classifier, ModelConfig, Parameters};
use useridentifier::tokenizer::{build_vocab, Vocabulary};
use useridentifier::trainer::Conditioning;

fn setup() -> (Vocabulary, SplitDataset, Classifier, Parameters) {
    let syn = SyntheticConfig { n_users: 6, samples_per_user: 30, seed: 4, ..Default::default() };
    let vocab = build_vocab(syn.lexicon(), 2000, 0).unwrap();
    let (samples, _) = gen_synthetic(&syn, &vocab).unwrap();
    let ds = split_per_user(&samples, SplitRatios::default(), 4).unwrap();
    let cfg = ModelConfig { seed: 4, ..ModelConfig::desk(vocab.len(), 2) };
    let p = init(&cfg).unwrap();
    (vocab, ds, Classifier::new(cfg).unwrap(), p)
}

fn small() -> FedConfig {
    FedConfig { n_rounds: 3, clients_per_round: 3, ..Default::default() }
}

#[test]
fn no_local_work_keeps_global() {
    let (vocab, ds, clf, p) = setup();
    let cond = Conditioning::plain(vocab.specials().cls);
    let (out, reports) = run(&clf, p.clone(), &ds, &cond, &FedConfig { local_epochs: 0, ..small() }).unwrap();
    assert_eq!(out, p);
    assert_eq!(reports.len(), 3);
    let (out, _) = run(&clf, p.clone(), &ds, &cond, &FedConfig { local_lr: 0.0, ..small() }).unwrap();
    assert_eq!(out, p);
}

#[test]
fn fixed_seed_is_deterministic() {
    let (vocab, ds, clf, p) = setup();
    let cond = Conditioning::plain(vocab.specials().cls);
    let (a, ra) = run(&clf, p.clone(), &ds, &cond, &small()).unwrap();
    let (b, rb) = run(&clf, p.clone(), &ds, &cond, &small()).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_ne!(a, p);
    let (c, _) = run(&clf, p, &ds, &cond, &FedConfig { seed: 1, ..small() }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn sampled_clients_are_distinct_and_bounded() {
    let (vocab, ds, clf, p) = setup();
    let (_, reports) = run(&clf, p, &ds, &Conditioning::plain(vocab.specials().cls), &small()).unwrap();
    for r in reports {
        let mut c = r.clients.clone();
        c.sort();
        c.dedup();
        assert_eq!(c.len(), 3);
    }
}

#[test]
fn aggregate_weights_by_sample_count() {
    let (_, ds, _, p) = setup();
    let users = ds.users();
    let scaled = |k: f64| {
        let mut q = p.clone();
        for (_, t) in q.iter_mut() {
            for x in t.data_mut() {
                *x = k;
            }
        }
        q
    };
    let updates = [
        ClientUpdate { client: users[0].clone(), weights: scaled(1.0), n_samples: 1, loss: None },
        ClientUpdate { client: users[1].clone(), weights: scaled(4.0), n_samples: 3, loss: None },
    ];
    let avg = aggregate(&updates).unwrap();
    assert!(avg.iter().all(|(_, t)| t.data().iter().all(|&x| (x - 3.25).abs() < 1e-12)));
    let same = [updates[0].clone(), ClientUpdate { client: users[2].clone(), ..updates[0].clone() }];
    assert_eq!(aggregate(&same).unwrap(), scaled(1.0));
    assert!(aggregate(&[]).is_err());
}
