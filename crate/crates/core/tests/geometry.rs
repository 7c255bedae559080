use cseg_core::geometry::{
    box_from_extreme_points, build_region_annotation_pair, rasterize_extreme_points, AnnotationMap, ExtremePoints, Point,
    PointF, Scribble,
};
use cseg_core::ops::{bilinear_crop, channel_softmax, Extent};
use cseg_core::Tensor;
use proptest::prelude::*;

/// Consistent quadruples: the top and bottom points lie within the
/// horizontal span, the left and right points within the vertical span.
fn extreme_points(w: usize, h: usize) -> impl Strategy<Value = ExtremePoints> {
    (0..w, 0..w, 0..h, 0..h).prop_flat_map(|(a, b, c, d)| {
        let (x0, x1, y0, y1) = (a.min(b), a.max(b), c.min(d), c.max(d));
        (x0..=x1, x0..=x1, y0..=y1, y0..=y1).prop_map(move |(tx, bx, ly, ry)| ExtremePoints {
            left: Point::new(x0, ly),
            right: Point::new(x1, ry),
            top: Point::new(tx, y0),
            bottom: Point::new(bx, y1),
        })
    })
}

fn point(w: usize, h: usize) -> impl Strategy<Value = PointF> {
    (0.0..=(w - 1) as f64, 0.0..=(h - 1) as f64).prop_map(|(x, y)| PointF::new(x, y))
}

fn random_map(w: usize, h: usize) -> impl Strategy<Value = AnnotationMap> {
    proptest::collection::vec(proptest::bool::weighted(0.2), w * h).prop_map(move |bits| {
        let mut m = AnnotationMap::new(w, h);
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            m.set(i % w, i / w);
        }
        m
    })
}

proptest! {
    #[test]
    fn boxes_cover_their_extreme_points(ep in extreme_points(40, 30), margin in 0.0..0.5f64) {
        let b = box_from_extreme_points(&ep, margin, 40, 30).unwrap();
        prop_assert!(b.x0 < b.x1 && b.y0 < b.y1);
        prop_assert!(b.within(40, 30));
        for p in ep.points() {
            prop_assert!(b.contains_pixel(p.x, p.y));
        }
    }

    #[test]
    fn disc_rasters_stay_inside_and_cover_points(ep in extreme_points(20, 24)) {
        let m = rasterize_extreme_points(&ep, 20, 24);
        prop_assert_eq!((m.width(), m.height()), (20, 24));
        prop_assert!(!m.is_empty());
        for p in ep.points() {
            prop_assert!(m.get(p.x, p.y));
        }
    }

    #[test]
    fn scribbles_stay_inside_and_pass_their_points(a in point(25, 17), b in point(25, 17), c in point(25, 17)) {
        let s = Scribble::new(1, [a, b, c], 25, 17).unwrap();
        prop_assert!(!s.is_empty());
        prop_assert!(s.pixels().iter().all(|&(x, y)| x < 25 && y < 17));
        for p in [a, b, c] {
            let (x, y) = (p.x.round() as usize, p.y.round() as usize);
            prop_assert!(s.pixels().contains(&(x, y)));
        }
    }

    #[test]
    fn negative_channel_is_union_of_other_regions(maps in proptest::collection::vec(random_map(9, 7), 1..6)) {
        for i in 1..=maps.len() {
            let pair = build_region_annotation_pair(i, &maps).unwrap();
            prop_assert_eq!(&pair.positive, &maps[i - 1]);
            for y in 0..7 {
                for x in 0..9 {
                    let others = maps.iter().enumerate().any(|(j, m)| j + 1 != i && m.get(x, y));
                    prop_assert_eq!(pair.negative.get(x, y), others);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(logits in proptest::collection::vec(-50.0f32..50.0, 4 * 5 * 3)) {
        let t = Tensor::new(vec![4, 5, 3], logits).unwrap();
        let p = channel_softmax(&t);
        for px in p.data().chunks(3) {
            let s: f32 = px.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn crop_of_constant_is_constant(
        v in -5.0f64..5.0,
        x0 in -3.0f64..10.0, y0 in -3.0f64..10.0, bw in 0.2f64..12.0, bh in 0.2f64..12.0,
        oh in 1usize..9, ow in 1usize..9,
    ) {
        let t = Tensor::full(&[10, 11, 2], v);
        let e = Extent { x0, y0, x1: x0 + bw, y1: y0 + bh };
        let c = bilinear_crop(&t, &e, oh, ow).unwrap();
        prop_assert_eq!(c.shape(), &[oh, ow, 2]);
        prop_assert!(c.data().iter().all(|&u| (u - v).abs() <= 1e-12));
    }
}
