use super::*;
use crate::rng::seeded;

fn small_spec(seed: u64) -> SyntheticShapeSpec {
    SyntheticShapeSpec {
        points: 64,
        train_per_class: 3,
        test_per_class: 2,
        seed,
        ..SyntheticShapeSpec::default()
    }
}

#[test]
fn one_hot_basis() {
    assert_eq!(one_hot(0, 4).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    for d in 1..6 {
        for l in 0..d {
            assert_eq!(one_hot(l, d).unwrap().data().iter().sum::<f64>(), 1.0);
        }
    }
    assert!(matches!(one_hot(4, 4), Err(Error::Index(_))));
}

#[test]
fn sphere_radius_and_normals() {
    let sigma = 0.01;
    let cloud = sample_shape(ShapeFamily::Sphere, 2000, sigma, 0, &mut seeded(1)).unwrap();
    for p in &cloud.coords {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        assert!((r - 1.0).abs() <= 3.0 * sigma + 1e-12, "{r}");
    }
    let (pts, normals, parts) = sample_surface(ShapeFamily::Sphere, 500, &mut seeded(2));
    for ((p, n), part) in pts.iter().zip(&normals).zip(&parts) {
        let len = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        for k in 0..3 {
            assert!((n[k] - p[k] / len).abs() <= 1e-15);
        }
        assert_eq!(*part, usize::from(p[2] < 0.0));
    }
}

#[test]
fn families_have_unit_normals_and_their_own_parts() {
    for family in ShapeFamily::ALL {
        let (pts, normals, parts) = sample_surface(family, 300, &mut seeded(3));
        assert_eq!(pts.len(), 300);
        for n in &normals {
            assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-12);
        }
        assert!(parts.iter().all(|p| family.parts().contains(p)));
        let distinct: BTreeSet<_> = parts.iter().collect();
        assert_eq!(distinct.len(), family.parts().len(), "{family:?}");
    }
}

#[test]
fn synthetic_is_deterministic_and_normalized() {
    let a = make_synthetic(&small_spec(5)).unwrap();
    let b = make_synthetic(&small_spec(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples.len(), 20);
    assert_eq!(a.indices(Split::Train).len(), 12);
    assert_eq!(a.class_names, vec!["sphere", "box", "torus", "plane"]);
    assert!(a.samples.iter().all(|s| is_unit_normalized(&s.coords, 1e-12)));
    assert_eq!(a.num_part_labels(), 9);
    assert_eq!(a.part_sets()[1], vec![2, 3, 4]);
}

#[test]
fn seeds_give_disjoint_but_similar_sets() {
    let spec = |seed| SyntheticShapeSpec {
        families: vec![ShapeFamily::Sphere],
        points: 256,
        jitter: 0.02,
        train_per_class: 40,
        test_per_class: 0,
        seed,
    };
    let raw_radii = |seed| -> Vec<f64> {
        (0..40)
            .flat_map(|i| {
                let mut r = rng::derive(seed, &[0, i]);
                sample_shape(ShapeFamily::Sphere, 256, 0.02, 0, &mut r).unwrap().coords
            })
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .collect()
    };
    let a = make_synthetic(&spec(1)).unwrap();
    let b = make_synthetic(&spec(2)).unwrap();
    let first: BTreeSet<u64> = a.samples.iter().flat_map(|s| s.coords.iter().map(|p| p[0].to_bits())).collect();
    assert!(b.samples.iter().flat_map(|s| &s.coords).all(|p| !first.contains(&p[0].to_bits())));

    let (ra, rb) = (raw_radii(1), raw_radii(2));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    // Welch z-statistic of the two mean radii.
    let z = (mean(&ra) - mean(&rb)) / (var(&ra) / ra.len() as f64 + var(&rb) / rb.len() as f64).sqrt();
    assert!(z.abs() < 4.0, "{z}");
}

#[test]
fn resampling_rules() {
    let one = PointCloud::new(vec![[0.1, 0.2, 0.3]]).unwrap();
    let r = resample(&one, 8, &mut seeded(0));
    assert_eq!(r.coords, vec![[0.1, 0.2, 0.3]; 8]);

    let cloud = PointCloud::new((0..50).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
    let down = resample(&cloud, 20, &mut seeded(1));
    let xs: BTreeSet<u64> = down.coords.iter().map(|p| p[0] as u64).collect();
    assert_eq!(xs.len(), 20);
    let up = resample(&cloud, 80, &mut seeded(2));
    let xs: BTreeSet<u64> = up.coords.iter().map(|p| p[0] as u64).collect();
    assert_eq!(xs.len(), 50);
    assert_eq!(resample(&cloud, 50, &mut seeded(3)), cloud);
}

#[test]
fn xyz_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_synthetic(&small_spec(9)).unwrap();
    let manifest = save_xyz_dir(&data, dir.path()).unwrap();
    let back = load_xyz_dir(dir.path(), &manifest, 64, 0).unwrap();
    assert_eq!(back, data);
}

#[test]
fn loader_normalizes_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("a.xyz"), "0 0 0\n2 0 0\n0 4 0\n").unwrap();
    fs::write(root.join("one.xyz"), "1 1 1\n").unwrap();
    fs::write(root.join("m.tsv"), "a.xyz\tcube\ttrain\none.xyz\tdot\ttest\n").unwrap();
    let d = load_xyz_dir(root, &root.join("m.tsv"), 16, 0).unwrap();
    assert_eq!(d.class_names, vec!["cube", "dot"]);
    let rmax = d.samples[0]
        .coords
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    assert!((rmax - 1.0).abs() <= 1e-12);
    assert!(d.samples[1].coords.iter().all(|p| *p == [0.0; 3]));

    fs::write(root.join("bad.xyz"), "0 0 0\n1 x 0\n").unwrap();
    fs::write(root.join("m2.tsv"), "bad.xyz\tcube\ttrain\n").unwrap();
    let err = load_xyz_dir(root, &root.join("m2.tsv"), 4, 0).unwrap_err().to_string();
    assert!(err.contains("bad.xyz:2"), "{err}");

    fs::write(root.join("m3.tsv"), "# classes\tcube\na.xyz\tsphere\ttrain\n").unwrap();
    let err = load_xyz_dir(root, &root.join("m3.tsv"), 4, 0).unwrap_err().to_string();
    assert!(err.contains("m3.tsv:2") && err.contains("unknown label"), "{err}");
}

#[test]
fn cache_round_trip_quantizes_to_f32() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let mut data = make_synthetic(&small_spec(4)).unwrap();
    data.task = Task::PartSegmentation;
    save_cache(&data, &path).unwrap();
    let back = load_cache(&path).unwrap();
    assert_eq!(back.task, Task::PartSegmentation);
    assert_eq!(back.class_names, data.class_names);
    assert_eq!(back.splits, data.splits);
    for (a, b) in data.samples.iter().zip(&back.samples) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.point_labels, b.point_labels);
        for (p, q) in a.coords.iter().zip(&b.coords) {
            for k in 0..3 {
                assert_eq!(p[k] as f32 as f64, q[k]);
            }
        }
    }
}
