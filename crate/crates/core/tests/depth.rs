use std::collections::{BTreeMap, BTreeSet};

use p2d_core::depth::{
    depth_to_relief_mesh, export_depth_png16, import_depth_png16, is_watertight, normalize_depth, DepthMap,
    ReliefMesh,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(w: usize, h: usize, rng: &mut ChaCha8Rng) -> DepthMap {
    let values = (0..w * h).map(|_| rng.random_range(-3.0..5.0)).collect();
    DepthMap::new(w, h, values, "random")
}

/// Counts undirected edges and checks the closed-surface Euler characteristic.
fn edge_oracle(mesh: &ReliefMesh) -> (bool, i64) {
    let mut uses: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    for t in &mesh.triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            *uses.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    let all_twice = uses.values().all(|&n| n == 2);
    let used: BTreeSet<u32> = mesh.triangles.iter().flatten().copied().collect();
    let euler = used.len() as i64 - uses.len() as i64 + mesh.triangles.len() as i64;
    (all_twice, euler)
}

fn signed_volume(mesh: &ReliefMesh) -> f64 {
    mesh.triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                + a[2] * (b[0] * c[1] - b[1] * c[0]))
                / 6.0
        })
        .sum()
}

#[test]
fn png16_round_trip_within_one_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..20 {
        let (w, h) = (rng.random_range(2..40), rng.random_range(2..40));
        let map = normalize_depth(&random_map(w, h, &mut rng));
        let path = dir.path().join(format!("{i}.png"));
        export_depth_png16(&map, &path).unwrap();
        let back = import_depth_png16(&path, "random").unwrap();
        assert_eq!((back.width, back.height), (w, h));
        for (a, b) in map.values.iter().zip(&back.values) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }
}

#[test]
fn png16_endpoint_and_midpoint_codes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codes.png");
    let map = DepthMap {
        normalized: true,
        ..DepthMap::new(3, 1, vec![0.0, 0.5, 1.0], "codes")
    };
    export_depth_png16(&map, &path).unwrap();
    let raw = image::open(&path).unwrap().into_luma16().into_raw();
    assert_eq!(raw, vec![0, 32768, 65535]);
}

#[test]
fn constant_two_by_two_map_is_a_box() {
    let map = DepthMap {
        normalized: true,
        ..DepthMap::new(2, 2, vec![1.0; 4], "box")
    };
    let mesh = depth_to_relief_mesh(&map, 1.0, 10.0, 2.0).unwrap();
    assert_eq!(mesh.triangles.len(), 12);
    let corners: BTreeSet<[i64; 3]> = mesh.vertices.iter().map(|v| v.map(|c| c as i64)).collect();
    let expected: BTreeSet<[i64; 3]> = [0, 1]
        .iter()
        .flat_map(|&x| [0, 1].iter().flat_map(move |&y| [0, 12].map(|z| [x, y, z])))
        .collect();
    assert_eq!(corners, expected);
    assert_eq!(mesh.extent(), [1.0, 1.0, 12.0]);
    assert!((signed_volume(&mesh) - 12.0).abs() < 1e-12);
    assert!(is_watertight(&mesh));
}

#[test]
fn random_relief_meshes_are_closed() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let map = normalize_depth(&random_map(16, 16, &mut rng));
        let mesh = depth_to_relief_mesh(&map, 0.2, 8.0, 2.0).unwrap();
        assert!(is_watertight(&mesh));
        let (twice, euler) = edge_oracle(&mesh);
        assert!(twice);
        assert_eq!(euler, 2);
        assert!(signed_volume(&mesh) > 0.0);
        let top: Vec<f64> = mesh.vertices[..256].iter().map(|v| v[2]).collect();
        let lo = top.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = top.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (2.0, 10.0));
    }
}

#[test]
fn tampered_mesh_fails_the_edge_test() {
    let map = normalize_depth(&DepthMap::new(3, 3, (0..9).map(f64::from).collect(), "t"));
    let mut mesh = depth_to_relief_mesh(&map, 1.0, 1.0, 1.0).unwrap();
    mesh.triangles.pop();
    assert!(!is_watertight(&mesh));
    assert!(!edge_oracle(&mesh).0);
}

#[test]
fn stl_layout() {
    let map = normalize_depth(&DepthMap::new(3, 2, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0], "stl"));
    let mesh = depth_to_relief_mesh(&map, 1.0, 1.0, 1.0).unwrap();
    let mut bytes = Vec::new();
    mesh.write_stl(&mut bytes).unwrap();
    let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
    assert_eq!(n, mesh.triangles.len());
    assert_eq!(bytes.len(), 84 + 50 * n);
    let first_vertex: Vec<f32> = (0..3)
        .map(|k| f32::from_le_bytes(bytes[96 + 4 * k..100 + 4 * k].try_into().unwrap()))
        .collect();
    let v = mesh.vertices[mesh.triangles[0][0] as usize];
    assert_eq!(first_vertex, vec![v[0] as f32, v[1] as f32, v[2] as f32]);

    let mut obj = Vec::new();
    mesh.write_obj(&mut obj).unwrap();
    let text = String::from_utf8(obj).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), mesh.vertices.len());
    assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), n);
}

proptest! {
    #[test]
    fn normalization_is_monotone_and_idempotent(values in prop::collection::vec(-1e3f64..1e3, 4..64)) {
        let n = values.len();
        let map = DepthMap::new(n, 1, values.clone(), "p");
        let once = normalize_depth(&map);
        prop_assert_eq!(&normalize_depth(&once), &once);
        for i in 0..n {
            for j in 0..n {
                if values[i] < values[j] {
                    prop_assert!(once.values[i] < once.values[j]);
                }
                if values[i] == values[j] {
                    prop_assert_eq!(once.values[i], once.values[j]);
                }
            }
        }
    }
}
