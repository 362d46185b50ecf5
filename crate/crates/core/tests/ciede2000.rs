mod common;

use common::SHARMA_PAIRS;
use proptest::prelude::*;
use sdace::imaging::LabPixel;
use sdace::metrics::ciede2000;

fn pair(row: &[f64; 7]) -> (LabPixel, LabPixel) {
    (LabPixel::new(row[0], row[1], row[2]), LabPixel::new(row[3], row[4], row[5]))
}

#[test]
fn reference_pairs() {
    let mut worst: f64 = 0.0;
    for row in &SHARMA_PAIRS {
        let (p, q) = pair(row);
        let d = ciede2000(p, q);
        worst = worst.max((d - row[6]).abs());
    }
    assert!(worst <= 1e-4, "max abs deviation {worst}");
}

#[test]
fn reference_pairs_are_symmetric() {
    for row in &SHARMA_PAIRS {
        let (p, q) = pair(row);
        assert!((ciede2000(p, q) - ciede2000(q, p)).abs() < 1e-9);
    }
}

fn lab() -> impl Strategy<Value = LabPixel> {
    (0.0..100.0f64, -128.0..128.0f64, -128.0..128.0f64).prop_map(|(l, a, b)| LabPixel::new(l, a, b))
}

proptest! {
    #[test]
    fn symmetric(p in lab(), q in lab()) {
        prop_assert!((ciede2000(p, q) - ciede2000(q, p)).abs() < 1e-9);
    }

    #[test]
    fn zero_only_on_identity(p in lab()) {
        prop_assert_eq!(ciede2000(p, p), 0.0);
        let q = LabPixel::new(p.l + 1.0, p.a, p.b);
        prop_assert!(ciede2000(p, q) > 0.0);
    }
}
