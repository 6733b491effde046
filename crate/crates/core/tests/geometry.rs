use proptest::prelude::*;
use surfseq::geom::{self, dot, normalize, Icosphere};

#[test]
fn counts_match_closed_forms_through_order_six() {
    for n in 0..=6u32 {
        let ico = Icosphere::new(n);
        let p = 4usize.pow(n);
        assert_eq!(ico.vertex_count(), 10 * p + 2, "order {n}");
        assert_eq!(ico.face_count(), 20 * p, "order {n}");
        assert_eq!(ico.mesh.edge_count(), 30 * p, "order {n}");
        assert_eq!(ico.mesh.euler_characteristic(), 2, "order {n}");
        ico.mesh.validate().unwrap();
    }
    assert_eq!(Icosphere::new(6).vertex_count(), 40962);
}

#[test]
fn every_edge_has_two_faces_and_degrees_are_five_or_six() {
    let ico = Icosphere::new(3);
    for (edge, faces) in geom::edge_faces(&ico.mesh) {
        assert_eq!(faces.len(), 2, "edge {edge:?}");
    }
    let nb = ico.mesh.vertex_neighbors();
    let fives = nb.iter().filter(|n| n.len() == 5).count();
    assert_eq!(fives, 12);
    assert!(nb.iter().all(|n| n.len() == 5 || n.len() == 6));
}

#[test]
fn faces_wind_outward() {
    let ico = Icosphere::new(2);
    for f in 0..ico.face_count() {
        let [a, b, c] = ico.mesh.face_corners(f);
        let n = geom::cross(geom::sub(b, a), geom::sub(c, a));
        assert!(dot(n, a) > 0.0, "face {f}");
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ico3.mesh");
    let ico = Icosphere::new(3);
    ico.mesh.store(&path).unwrap();
    let back = Icosphere::from_mesh(surfseq::TriMesh::load(&path).unwrap()).unwrap();
    assert_eq!(back.order, 3);
    assert_eq!(back.mesh, ico.mesh);
}

fn unit() -> impl Strategy<Value = [f64; 3]> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-zero", |(x, y, z)| x * x + y * y + z * z > 1e-6)
        .prop_map(|(x, y, z)| normalize([x, y, z]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn location_weights_form_a_convex_combination(p in unit()) {
        let ico = Icosphere::new(3);
        let loc = ico.locator().locate(p).unwrap();
        let w = loc.weights;
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // gnomonic: the weighted corner sum points along p
        let [a, b, c] = ico.mesh.face_corners(loc.face);
        let q: Vec<f64> = (0..3).map(|i| w[0] * a[i] + w[1] * b[i] + w[2] * c[i]).collect();
        let q = normalize([q[0], q[1], q[2]]);
        prop_assert!(dot(q, p) > 1.0 - 1e-12);
        prop_assert_eq!(geom::locate_face(&ico.mesh, p).unwrap().face, loc.face);
    }
}
