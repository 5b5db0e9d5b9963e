use super::{downsampling_blocks, ArchSpec, Architecture, LayerPlan};
use crate::error::Result;
use crate::inference::{predict_pc_sliding, PredictOptions};
use crate::layers::linear::FcSpec;
use crate::layers::pool::PoolSpec;
use crate::network::Network;
use crate::optim::Schedule;
use crate::tensor::Tensor;

/// Patch classifier: four pooled blocks and a fully connected head that
/// scores the central pixel of the patch.
pub struct PatchClassifier;

impl Architecture for PatchClassifier {
    fn tag(&self) -> &'static str {
        "pc"
    }

    fn description(&self) -> &'static str {
        "patch classification, one label per patch, sliding-window dense maps"
    }

    fn plan(&self, spec: &ArchSpec) -> Result<Vec<LayerPlan>> {
        let (mut plan, c) = downsampling_blocks(spec, true);
        let pool = PoolSpec::downsample(crate::layers::PoolMode::Max);
        let mut n = spec.patch;
        for _ in 0..4 {
            n = pool.out_size(n)?;
        }
        plan.push(LayerPlan::Fc(
            "head".into(),
            FcSpec {
                in_channels: c,
                in_height: n,
                in_width: n,
                out_features: spec.classes,
            },
        ));
        Ok(plan)
    }

    fn default_schedule(&self) -> Schedule {
        Schedule::patch_classifier()
    }

    fn batch_size(&self) -> usize {
        128
    }

    fn predict(
        &self,
        net: &mut Network<f32>,
        spec: &ArchSpec,
        image: &Tensor<f32>,
        opts: &PredictOptions,
    ) -> Result<Tensor<f32>> {
        predict_pc_sliding(net, spec, image, opts.stride, opts.batch)
    }
}
