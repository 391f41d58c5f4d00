//! Stage-1 → stage-2 weight sharing and fusion gradient flow.

mod common;

use common::pipeline_audit;
use damage_core::pipeline::UNetConfig;

#[test]
fn shared_backbone_and_live_fusion_gradients() {
    for (depth, base) in [(2, 4), (3, 8)] {
        let cfg = UNetConfig {
            depth,
            base_channels: base,
            ..UNetConfig::default()
        };
        let a = pipeline_audit(&cfg, 32, 7);
        assert!(a.encoder_features_identical);
        assert_eq!(a.unexplained_params, 0, "{a:?}");
        assert!(a.stage2_params > a.stage1_params);
        assert_eq!(a.fusion_tensors.len(), 4 * (depth + 1));
        assert!(a.zero_grad_fusion.is_empty(), "{:?}", a.zero_grad_fusion);
    }
}
