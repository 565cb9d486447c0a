use molvae_core::chem_data::{encode_all, max_len_for, EncodedMolecule, TokenVocab};
use molvae_core::neural::AdamConfig;
use molvae_core::seeding::digest_hex;
use molvae_core::vae::{
    build_model, descriptor_probe, embed, load_bundle, save_bundle, train, Arch, EmbedMode, EmbeddingSet, TrainOptions,
    VaeConfig, VaeModel,
};

const CORPUS: [&str; 8] = ["CCO", "c1ccccc1", "CC(=O)N", "ClCCBr", "CN", "OCC(O)CO", "CC(C)C", "c1ccncc1"];

fn tiny(arch: Arch) -> (VaeModel, Vec<EncodedMolecule>) {
    let max_len = max_len_for(&CORPUS);
    let vocab = TokenVocab::build(&CORPUS).unwrap();
    let (enc, _) = encode_all(&CORPUS, &vocab, max_len);
    let vocab = vocab.with_encoding_counts(&enc);
    let mut cfg = VaeConfig::desk(arch, max_len);
    cfg.latent_dim = 4;
    cfg.hidden_dim = 8;
    cfg.conv.channels = vec![4, 4];
    cfg.conv.kernels = vec![2, 2];
    (build_model(&cfg, &vocab).unwrap(), enc)
}

#[test]
fn mean_embeddings_are_deterministic_and_equal_mu() {
    let (m, _) = tiny(Arch::Pvae);
    let a = embed(&m, &CORPUS, EmbedMode::Mean, 1).unwrap();
    let b = embed(&m, &CORPUS, EmbedMode::Mean, 99).unwrap();
    assert_eq!(a.mu, b.mu);
    assert_eq!(a.z, a.mu);
    assert_eq!(a.z, b.z);
}

#[test]
fn sampled_embeddings_depend_only_on_seed() {
    let (m, _) = tiny(Arch::Cvae);
    let a = embed(&m, &CORPUS, EmbedMode::Sampled, 5).unwrap();
    let b = embed(&m, &CORPUS, EmbedMode::Sampled, 5).unwrap();
    let c = embed(&m, &CORPUS, EmbedMode::Sampled, 6).unwrap();
    assert_eq!(a.z, b.z);
    assert_ne!(a.z, c.z);
    assert_eq!(a.mu, c.mu);
}

#[test]
fn unencodable_rows_are_excluded_and_reported() {
    let (m, _) = tiny(Arch::Pvae);
    let input = ["CCO", "CCCCCCCCCCCCCCCCCCCCCCCC", "CN", "C[Se]C", "c1ccccc1"];
    let es = embed(&m, &input, EmbedMode::Mean, 0).unwrap();
    assert_eq!(es.len() + es.excluded.len(), input.len());
    assert_eq!(es.rows, vec![0, 2, 4]);
    let excluded: Vec<usize> = es.excluded.iter().map(|(i, _)| *i).collect();
    assert_eq!(excluded, vec![1, 3]);
}

#[test]
fn sampled_noise_matches_the_posterior() {
    let (m, _) = tiny(Arch::Pvae);
    let n = 4000;
    let input = vec!["CC(=O)N"; n];
    let es = embed(&m, &input, EmbedMode::Sampled, 17).unwrap();
    let mu = &es.mu[0];
    let sd: Vec<f64> = es.logvar[0].iter().map(|l| (0.5 * l).exp()).collect();
    for j in 0..es.dim() {
        let eps: Vec<f64> = es.z.iter().map(|z| (z[j] - mu[j]) / sd[j]).collect();
        let mean = eps.iter().sum::<f64>() / n as f64;
        let var = eps.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1) as f64;
        // Standard errors are 1/sqrt(n) ≈ 0.016 for the mean and ≈ 0.022 for the variance.
        assert!(mean.abs() < 0.07, "dim {j}: mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "dim {j}: variance {var}");
    }
}

#[test]
fn bundles_round_trip_byte_identically() {
    let (mut m, enc) = tiny(Arch::Pvae);
    let opts = TrainOptions {
        epochs: 2,
        batch_size: 4,
        ..Default::default()
    };
    train(&mut m, &enc, None, &enc[..2], &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_bundle(&m, &a).unwrap();
    let back = load_bundle(&a).unwrap();
    save_bundle(&back, &b).unwrap();
    for f in ["config.json", "vocab.json", "params.bin", "params.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert_eq!(digest_hex(&x), digest_hex(&y), "{f}");
    }
    let e1 = embed(&m, &CORPUS, EmbedMode::Sampled, 3).unwrap();
    let e2 = embed(&back, &CORPUS, EmbedMode::Sampled, 3).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn training_reduces_the_loss() {
    let (mut m, enc) = tiny(Arch::Pvae);
    let opts = TrainOptions {
        epochs: 150,
        batch_size: 8,
        adam: AdamConfig {
            lr: 1e-2,
            ..Default::default()
        },
        ..Default::default()
    };
    let log = train(&mut m, &enc, None, &enc, &opts).unwrap();
    let first = log.epochs.first().unwrap().recon;
    let last = log.epochs.last().unwrap().recon;
    assert!(last < 0.5 * first, "recon {first} -> {last}");
}

#[test]
fn embedding_csv_round_trips() {
    let (m, _) = tiny(Arch::Cvae);
    let es = embed(&m, &CORPUS, EmbedMode::Sampled, 8).unwrap();
    let mut buf = Vec::new();
    es.write_csv(&mut buf).unwrap();
    let back = EmbeddingSet::read_csv(buf.as_slice(), EmbedMode::Sampled, 8).unwrap();
    assert_eq!(back.smiles, es.smiles);
    assert_eq!(back.mu, es.mu);
    assert_eq!(back.logvar, es.logvar);
    assert_eq!(back.z, es.z);
}

#[test]
fn probe_recovers_a_linear_descriptor() {
    let x: Vec<Vec<f64>> = (0..60).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos(), i as f64 / 60.0]).collect();
    let col: Vec<f64> = x.iter().map(|r| 3.0 * r[0] - r[2] + 10.0).collect();
    let p = descriptor_probe(&x, &col, 1).unwrap();
    assert!(p.rmse_mean < 1e-3, "{p:?}");
    assert!(descriptor_probe(&x, &vec![1.0; 60], 1).is_err());
}

#[test]
fn toy_corpus_loss_decreases_over_the_first_epochs() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/zinc_desk_25k.csv");
    let (ds, _) = molvae_core::chem_data::Dataset::load(&path, &molvae_core::chem_data::Schema::unlabeled()).unwrap();
    let smiles: Vec<&str> = ds.smiles().into_iter().take(200).collect();
    let max_len = max_len_for(&smiles);
    let vocab = TokenVocab::build(&smiles).unwrap();
    let (enc, _) = encode_all(&smiles, &vocab, max_len);
    let vocab = vocab.with_encoding_counts(&enc);
    let cfg = VaeConfig::desk(Arch::Cvae, max_len);
    let mut m = build_model(&cfg, &vocab).unwrap();
    let opts = TrainOptions {
        epochs: 50,
        ..Default::default()
    };
    let log = train(&mut m, &enc, None, &enc[..20], &opts).unwrap();
    let totals: Vec<f64> = log.epochs.iter().take(5).map(|e| e.total).collect();
    assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
}
