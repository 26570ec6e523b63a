mod common;

use std::panic;

use adaptkit::ckpt::{read_checkpoint, Checkpoint, WriteOptions};
use adaptkit::rng::Stream;
use common::{fuzz_seed_files, mutate_ckpt_bytes};

#[test]
fn mutated_files_never_crash_the_reader() {
    let seeds = fuzz_seed_files();
    let mut c = Stream::new(14, "ckpt-fuzz").cursor();
    let (mut ok, mut err) = (0, 0);
    for i in 0..1000 {
        let src = &seeds[i % seeds.len()];
        let bytes = mutate_ckpt_bytes(src, &mut c);
        let result = panic::catch_unwind(|| Checkpoint::from_bytes(&bytes).map(|ck| ck.total_bytes()));
        match result {
            Ok(Ok(_)) => ok += 1,
            Ok(Err(_)) => err += 1,
            Err(_) => panic!("reader panicked on mutation {i}"),
        }
    }
    assert_eq!(ok + err, 1000);
    assert!(err > 0);
}

#[test]
fn reader_survives_mutated_files_on_disk() {
    let seeds = fuzz_seed_files();
    let dir = tempfile::tempdir().unwrap();
    let mut c = Stream::new(15, "ckpt-fuzz-disk").cursor();
    for i in 0..50 {
        let path = dir.path().join(format!("m{i}.tck"));
        std::fs::write(&path, mutate_ckpt_bytes(&seeds[i % seeds.len()], &mut c)).unwrap();
        let _ = read_checkpoint(&path);
    }
}

#[test]
fn unmutated_seeds_roundtrip() {
    for bytes in fuzz_seed_files() {
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes(WriteOptions::default()).unwrap(), bytes);
    }
}
