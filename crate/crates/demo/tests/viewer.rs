use surfseq_demo::{Viewer, KEPT, MASKED, SWAPPED, UNTOUCHED};

#[test]
fn counts_for_ico4_over_ico1() {
    let v = Viewer::new(4, 1);
    assert_eq!((v.vertex_count(), v.patch_count(), v.patch_size()), (2562, 80, 45));
    assert_eq!(v.positions().len(), 3 * 2562);
    assert_eq!(v.triangles().len(), 3 * 5120);
}

#[test]
fn every_patch_owns_the_same_number_of_faces() {
    let v = Viewer::new(3, 1);
    let mut per_patch = vec![0; v.patch_count()];
    for p in v.face_patch() {
        per_patch[p as usize] += 1;
    }
    // a patch two levels down covers 4^2 fine faces
    assert!(per_patch.iter().all(|&n| n == 16), "{per_patch:?}");
}

#[test]
fn orders_are_clamped() {
    let v = Viewer::new(9, 9);
    assert_eq!((v.order(), v.patch_order()), (5, 4));
    let v = Viewer::new(0, 0);
    assert_eq!((v.order(), v.patch_order()), (1, 0));
}

#[test]
fn zero_rotation_keeps_the_field() {
    let v = Viewer::new(3, 1);
    let a = v.rotated_field(2, "z", 0.0);
    let b = v.rotated_field(2, "nonsense", 40.0);
    assert_eq!(a, b);
    assert_ne!(a, v.rotated_field(2, "y", 40.0));
}

#[test]
fn mask_states_follow_the_split() {
    let v = Viewer::new(4, 2);
    let s = v.mpp_states(3);
    let count = |k: u8| s.iter().filter(|&&x| x == k).count();
    assert_eq!((count(UNTOUCHED), count(MASKED), count(SWAPPED), count(KEPT)), (160, 128, 16, 16));
    assert_eq!(s, v.mpp_states(3));
    assert_ne!(s, v.mpp_states(4));
}
