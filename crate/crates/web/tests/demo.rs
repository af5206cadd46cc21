use metacount_web::{density_impl, quadratic_impl, scene_impl};

#[test]
fn clicked_points_sum_to_their_count() {
    let g = density_impl(32, 48, &[0.5, 0.5, 20.0, 10.0, 47.9, 31.9], 4.0).unwrap();
    assert_eq!(g.values().len(), 32 * 48);
    assert!((g.total() - 3.0).abs() < 1e-9);
    assert!(density_impl(32, 48, &[1.0], 4.0).is_err());
    assert!(density_impl(32, 48, &[60.0, 1.0], 4.0).is_err());
}

#[test]
fn scene_sample_is_consistent() {
    let s = scene_impl(3, 1, 2).unwrap();
    let (img, den) = (s.image(), s.density());
    assert_eq!((img.height(), img.width()), (48, 48));
    assert_eq!((den.height(), den.width()), (12, 12));
    assert_eq!(s.points().len() as f64, 2.0 * img.total());
    assert!((den.total() - img.total()).abs() < 1e-6);
    assert_eq!(scene_impl(3, 1, 2).unwrap().image().values(), img.values());
    assert!(scene_impl(3, 9, 0).is_err());
}

#[test]
fn quadratic_explorer_agrees_with_closed_form() {
    let m = quadratic_impl(1.0, 0.0, 0.1).unwrap();
    assert!((m.second_order - 1.28).abs() < 1e-12);
    assert!((m.closed_form - 1.28).abs() < 1e-12);
    assert!((m.first_order - 1.6).abs() < 1e-12);
    assert!((m.adapted - 0.8).abs() < 1e-15);
}
