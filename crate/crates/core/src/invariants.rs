//! Property tests over the geometry, tiling, matching and loss invariants.

use crate::classifier::{contrastive_loss, focal_loss, next_positives, EmbeddingBatch, HybridLossParams};
use crate::eval::{match_detections, metrics, MatchRule};
use crate::geometry::{iou, merge_cross_patch, nms, to_global, to_patch, BBox, Detection, Frame};
use crate::tiling::{crop_annotations, make_grid};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..400.0f64, 0.0..400.0f64, 1.0..80.0f64, 1.0..80.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
}

fn dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((bbox(), 0.0..=1.0f64), 0..max)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, (b, s))| Detection::new(b, s, Frame::Global).unwrap().with_id(i)).collect())
}

fn ids(d: &[Detection]) -> Vec<usize> {
    let mut v: Vec<usize> = d.iter().map(|d| d.id).collect();
    v.sort();
    v
}

proptest! {
    #[test]
    fn iou_is_a_symmetric_similarity(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_a_spread_subset(d in dets(40), thr in 0.05..0.95f64) {
        let kept = nms(&d, thr);
        prop_assert!(kept.len() <= d.len());
        prop_assert!(d.is_empty() || !kept.is_empty());
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(d.contains(a));
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
            }
        }
        prop_assert_eq!(ids(&nms(&kept, thr)), ids(&kept));
    }

    #[test]
    fn merge_is_order_free_and_separates_components(d in dets(40), thr in 0.05..0.95f64, rot in 0usize..40) {
        let m = merge_cross_patch(&d, thr).unwrap();
        for (i, a) in m.iter().enumerate() {
            for b in &m[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) < thr);
            }
        }
        let mut shuffled = d.clone();
        if !shuffled.is_empty() {
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
        }
        prop_assert_eq!(merge_cross_patch(&shuffled, thr).unwrap(), m);
    }

    #[test]
    fn patch_frames_round_trip(b in bbox(), size in 64usize..1024, overlap in 0.0..0.5f64, w in 1usize..3000, h in 1usize..3000) {
        let grid = make_grid(w, h, size, overlap).unwrap();
        let p = grid.patches[grid.len() / 2];
        let d = Detection::new(b, 0.5, Frame::Patch(p.id)).unwrap();
        let back = to_patch(&to_global(&d, &p).unwrap(), &p).unwrap();
        prop_assert!((back.bbox.x - b.x).abs() < 1e-9 && (back.bbox.y - b.y).abs() < 1e-9);
        prop_assert_eq!(back.frame, Frame::Patch(p.id));
    }

    #[test]
    fn grids_cover_every_pixel(w in 1usize..2100, h in 1usize..2100, size in prop::sample::select(vec![64usize, 128, 512]), overlap in 0.0..0.6f64) {
        let grid = make_grid(w, h, size, overlap).unwrap();
        // Row and column coverage imply full coverage of the rectangle.
        let mut cols = vec![false; w];
        let mut rows = vec![false; h];
        for p in &grid.patches {
            prop_assert!(p.origin_x + p.valid_w <= w && p.origin_y + p.valid_h <= h);
            cols[p.origin_x..p.origin_x + p.valid_w].iter_mut().for_each(|c| *c = true);
            rows[p.origin_y..p.origin_y + p.valid_h].iter_mut().for_each(|c| *c = true);
        }
        prop_assert!(cols.iter().all(|&c| c) && rows.iter().all(|&c| c));
    }

    #[test]
    fn every_annotation_lands_in_a_patch(cx in 0.0..1500.0f64, cy in 0.0..1100.0f64) {
        let grid = make_grid(1500, 1100, 512, 0.2).unwrap();
        let placed = crop_annotations(&grid, &[(cx, cy)], 30.0).unwrap();
        let hits: Vec<_> = placed.values().flatten().collect();
        prop_assert!(!hits.is_empty());
        prop_assert!(hits.iter().all(|a| !a.truncated));
    }

    #[test]
    fn matching_accounts_for_everything(d in dets(30), gts in prop::collection::vec((0.0..450.0f64, 0.0..450.0f64), 0..30), r in 1.0..60.0f64) {
        let m = match_detections(&d, &gts, MatchRule::Center(r));
        prop_assert_eq!(m.tp + m.fp, d.len());
        prop_assert_eq!(m.tp + m.fn_, gts.len());
        let s = metrics(m.tp, m.fp, m.fn_);
        prop_assert!((0.0..=1.0).contains(&s.f1));
        prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-12);
    }

    #[test]
    fn losses_are_non_negative(raw in prop::collection::vec((prop::collection::vec(-1.0..1.0f64, 4), 0usize..2, 0.01..1.0f64), 1..12)) {
        let feats: Vec<Vec<f64>> = raw.iter().map(|(f, _, _)| {
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            let mut u: Vec<f64> = f.iter().map(|v| v / n).collect();
            if n <= 1e-3 { u = vec![1.0, 0.0, 0.0, 0.0]; }
            u
        }).collect();
        let labels: Vec<usize> = raw.iter().map(|r| r.1).collect();
        let probs: Vec<f64> = raw.iter().map(|r| r.2).collect();
        let batch = EmbeddingBatch::new(feats, labels.clone(), probs).unwrap();
        let params = HybridLossParams::default();
        prop_assert!(focal_loss(&batch, &params).unwrap() >= 0.0);
        let c = contrastive_loss(&batch, &next_positives(&labels), &params).unwrap();
        prop_assert!(c.value >= -1e-12);
    }
}
