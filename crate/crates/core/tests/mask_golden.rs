use gst_core::sequence::{build_attention_mask, AttentionMask, MaskMode};

const GOLDEN: &str = include_str!("golden/packed_joint_l1.rle");

#[test]
fn packed_joint_matches_hand_written_golden() {
    let golden = AttentionMask::from_rle(GOLDEN).unwrap();
    let built = build_attention_mask(MaskMode::PackedJoint, 1);
    assert_eq!(built, golden);
    assert_eq!(built.to_rle(), GOLDEN);
}

#[test]
fn second_branch_image_sees_prefix_and_own_branch_only() {
    // Layout: BOS, o, TASK_CAM_FIRST, c, i, TASK_POSE_FIRST, i, c.
    let m = build_attention_mask(MaskMode::PackedJoint, 1);
    let visible: Vec<usize> = (0..8).filter(|&k| m.allows(6, k)).collect();
    assert_eq!(visible, vec![0, 1, 5, 6]);
}

#[test]
fn packed_rule_holds_for_larger_segments() {
    for l in 1..6 {
        let m = build_attention_mask(MaskMode::PackedJoint, l);
        let b2 = 3 * l + 2;
        assert_eq!(m.size(), 5 * l + 3);
        for q in 0..m.size() {
            for k in 0..m.size() {
                let expected = k <= q && !(q >= b2 && k > l && k < b2);
                assert_eq!(m.allows(q, k), expected, "l={l} q={q} k={k}");
            }
        }
    }
}
