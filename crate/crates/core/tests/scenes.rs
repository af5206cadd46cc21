mod common;

use metacount::density::count;
use metacount::scenes::{
    generate_benchmark, generate_scene_pool, load_dataset, sample_episode, write_dataset, SyntheticConfig,
};
use metacount::Error;
use std::collections::BTreeSet;
use std::fs;

fn small() -> SyntheticConfig {
    SyntheticConfig {
        train_scenes: 4,
        test_scenes: 2,
        images_per_scene: 7,
        height: 24,
        width: 20,
        ..SyntheticConfig::default()
    }
}

#[test]
fn episodes_are_disjoint_and_cover_the_scene() {
    let pool = generate_scene_pool(&small(), 3, 1, 4).unwrap();
    let mut r = common::rng(51);
    for i in 0..10_000 {
        let k = if i % 2 == 0 { 1 } else { 5 };
        let e = sample_episode(&pool, k, &mut r).unwrap();
        assert_eq!(e.train.len(), k);
        let train: BTreeSet<_> = e.train.iter().collect();
        let test: BTreeSet<_> = e.test.iter().collect();
        assert_eq!(train.len(), k);
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), pool[e.scene].images.len());
        assert!(train.union(&test).all(|&&j| j < pool[e.scene].images.len()));
    }
}

#[test]
fn fixed_rng_gives_identical_episodes() {
    let pool = generate_scene_pool(&small(), 3, 1, 4).unwrap();
    let run = |seed| {
        let mut r = common::rng(seed);
        (0..50).map(|_| sample_episode(&pool, 2, &mut r).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn labels_are_faithful_to_the_generator() {
    let bench = generate_benchmark(&small(), 2, 4).unwrap();
    for scene in bench.train.iter().chain(&bench.test) {
        let spec = scene.spec.as_ref().unwrap();
        for li in &scene.images {
            let n = li.annotation.len();
            assert!(spec.count_range.0 <= n && n <= spec.count_range.1);
            assert!((count(&li.density, None).unwrap() - n as f64).abs() < 1e-6);
            assert_eq!(li.density.height(), 6);
            assert_eq!(li.density.width(), 5);
            assert!(li.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    // scene ids are distinct and images are not shared
    let ids: BTreeSet<_> = bench.train.iter().chain(&bench.test).map(|s| s.id).collect();
    assert_eq!(ids.len(), 6);
    let a = &bench.train[0].images[0];
    assert!(bench.train[1..].iter().chain(&bench.test).all(|s| !s.images.contains(a)));
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let pool = generate_scene_pool(&small(), 2, 7, 4).unwrap();
    write_dataset(dir.path(), &pool).unwrap();
    let loaded = load_dataset(dir.path(), 3.0, 4).unwrap();
    assert_eq!(loaded.len(), pool.len());
    for (a, b) in pool.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.roi, b.roi);
        assert!(b.spec.is_none());
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.annotation, y.annotation);
            assert_eq!(x.density, y.density);
            // 16-bit quantization
            assert!(x.image.max_abs_diff(&y.image) <= 0.5 / 65535.0 + 1e-12);
        }
    }
}

#[test]
fn dataset_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let pool = generate_scene_pool(&small(), 2, 7, 4).unwrap();
    write_dataset(dir.path(), &pool).unwrap();
    let ann = dir.path().join("scene_001/annotations.txt");

    let original = fs::read_to_string(&ann).unwrap();
    let mut lines: Vec<String> = original.lines().map(String::from).collect();
    lines.insert(0, "# comment".into());
    lines[3] = lines[3].replace(" 24 20", " 24 20 99 1");
    fs::write(&ann, lines.join("\n")).unwrap();
    match load_dataset(dir.path(), 3.0, 4) {
        Err(Error::Parse { path, line, .. }) => {
            assert_eq!(path, ann);
            assert_eq!(line, 4);
        }
        other => panic!("expected parse error, got {other:?}"),
    }

    fs::write(&ann, original.replace(" 24 20", " 24 21")).unwrap();
    let err = load_dataset(dir.path(), 3.0, 4).unwrap_err().to_string();
    assert!(err.contains("annotations.txt:1"), "{err}");

    fs::write(&ann, &original).unwrap();
    fs::remove_file(dir.path().join("scene_001/images/0002.pgm")).unwrap();
    let err = load_dataset(dir.path(), 3.0, 4).unwrap_err().to_string();
    assert!(err.contains("0002.pgm"), "{err}");

    let empty = tempfile::tempdir().unwrap();
    assert!(load_dataset(empty.path(), 3.0, 4).is_err());
    assert!(load_dataset(&empty.path().join("missing"), 3.0, 4).is_err());
}
