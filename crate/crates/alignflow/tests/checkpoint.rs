use alignflow::checkpoint::{decode, encode, load, save, MAGIC};
use alignflow_core::harness::{
    eval_alignment, generate_corpus, train_main, ExperimentConfig, ToyModel,
};
use alignflow_core::numerics::Rng;

fn trained() -> (
    ExperimentConfig,
    ToyModel,
    Vec<alignflow_core::harness::Instance>,
) {
    let mut c = ExperimentConfig::default();
    c.train.seed = 4;
    c.train.steps_main = 30;
    c.train.steps_duration = 5;
    c.corpus.speakers = 2;
    c.corpus.instances = 8;
    c.corpus.held_out = 6;
    let corpus = generate_corpus(&c.corpus, &Rng::new(4)).unwrap();
    let mut model = ToyModel::new(&c).unwrap();
    train_main(&mut model, &c.train, &corpus).unwrap();
    (c, model, corpus.held_out)
}

#[test]
fn save_and_load_preserve_every_parameter_and_score() {
    let (config, model, held) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&path, &config, &model).unwrap();
    let (c2, m2) = load(&path).unwrap();
    assert_eq!(c2, config);
    for ((na, a), (nb, b)) in model.store.iter().zip(m2.store.iter()) {
        assert_eq!(na, nb);
        let bits = |t: &alignflow_core::numerics::Tensor| {
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(
        eval_alignment(&model, &held).unwrap(),
        eval_alignment(&m2, &held).unwrap()
    );
}

#[test]
fn layout_starts_with_magic_and_version() {
    let (config, model, _) = trained();
    let bytes = encode(&config, &model).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    let text_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    assert_eq!(&bytes[16..16 + text_len], config.to_text().as_bytes());
    let data: usize = model.store.iter().map(|(_, t)| t.len()).sum();
    assert!(bytes.len() > 16 + text_len + 8 * data);
}

#[test]
fn corrupted_containers_are_rejected() {
    let (config, model, _) = trained();
    let bytes = encode(&config, &model).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode(&bad).is_err());
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(decode(&bad).is_err());
    assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode(&long).is_err());
}
