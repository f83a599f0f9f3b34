mod common;

use std::fs;
use std::path::Path;

use common::*;
use featrecon::data::{list_samples, load_split, make_synthetic_dataset, read_manifest, Split, SyntheticConfig};
use featrecon::par::Exec;
use featrecon::scoring::{read_score_map, upsample_bilinear, write_score_map};
use ndarray::Array2;
use proptest::prelude::*;

fn small_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig::new(seed, 6, 4, 12, 64)
}

fn file_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_generation_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_synthetic_dataset(&small_config(3), a.path(), Exec::Parallel).unwrap();
    make_synthetic_dataset(&small_config(3), b.path(), Exec::Sequential).unwrap();
    assert_eq!(file_bytes(a.path()), file_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    make_synthetic_dataset(&small_config(4), c.path(), Exec::Auto).unwrap();
    assert_ne!(file_bytes(a.path()), file_bytes(c.path()));
}

#[test]
fn defect_areas_stay_in_the_configured_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig::new(5, 2, 2, 40, 64);
    let (spec, manifest) = make_synthetic_dataset(&cfg, dir.path(), Exec::Auto).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    let test = load_split(&spec, Split::Test, Exec::Auto).unwrap();
    let mut anomalous = 0;
    for s in &test {
        let mask = s.mask.as_ref().unwrap();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        if s.label == 1 {
            anomalous += 1;
            assert!((0.005..=0.05).contains(&frac), "{}: {frac}", s.path.display());
        } else {
            assert_eq!(frac, 0.0);
        }
    }
    assert_eq!(anomalous, 40);
}

#[test]
fn training_split_holds_only_normals() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, _) = make_synthetic_dataset(&small_config(6), dir.path(), Exec::Auto).unwrap();
    let train = list_samples(&spec, Split::Train).unwrap();
    assert_eq!(train.len(), 6);
    assert!(train.iter().all(|s| s.label == 0));
    let test = list_samples(&spec, Split::Test).unwrap();
    assert_eq!(test.iter().filter(|s| s.label == 1).count(), 12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bilinear_matches_oracle(seed in 0u64..10_000, h in 1usize..6, w in 1usize..6, fy in 1usize..5, fx in 1usize..5) {
        use rand::Rng;
        let mut r = rng(seed);
        let src: Vec<Vec<f64>> = (0..h).map(|_| (0..w).map(|_| r.random_range(0.0..2.0f32) as f64).collect()).collect();
        let arr = Array2::from_shape_fn((h, w), |(y, x)| src[y][x] as f32);
        let got = upsample_bilinear(arr.view(), h * fy, w * fx);
        let want = oracle_bilinear(&src, h * fy, w * fx);
        for y in 0..h * fy {
            for x in 0..w * fx {
                prop_assert!((got[[y, x]] as f64 - want[y][x]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn score_maps_round_trip(values in prop::collection::vec(-1e3f32..1e3, 1..64), w in 1usize..8) {
        let h = values.len() / w;
        prop_assume!(h > 0);
        let map = Array2::from_shape_vec((h, w), values[..h * w].to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_score_map(dir.path(), "m", "img", map.view()).unwrap();
        let (header, back) = read_score_map(dir.path(), "m").unwrap();
        prop_assert_eq!(header.shape, [h, w]);
        prop_assert_eq!(back, map);
    }
}
