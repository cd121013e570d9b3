use alignflow::io::{read_instances, read_matrix, write_instances, write_matrix};
use alignflow_core::harness::{generate_corpus, CorpusSpec};
use alignflow_core::numerics::{Rng, Tensor};

#[test]
fn matrix_round_trips_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let t = Tensor::standard_normal(&[3, 5], &mut Rng::new(1));
    write_matrix(&path, &t).unwrap();
    assert_eq!(read_matrix(&path).unwrap(), t);
}

#[test]
fn ragged_or_non_numeric_matrices_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(&path, "1,2\n3\n").unwrap();
    assert!(read_matrix(&path).is_err());
    std::fs::write(&path, "1,x\n").unwrap();
    assert!(read_matrix(&path).is_err());
}

#[test]
fn instances_round_trip() {
    let spec = CorpusSpec {
        speakers: 3,
        noise: 0.2,
        instances: 10,
        held_out: 0,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec, &Rng::new(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    write_instances(&path, &corpus.instances).unwrap();
    assert_eq!(read_instances(&path).unwrap(), corpus.instances);
}

#[test]
fn instance_header_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    std::fs::write(&path, "a,b,c,d,e,c0\n0,0,0,0,0,1\n").unwrap();
    assert!(read_instances(&path).is_err());
}
