use super::{downsampling_blocks, ArchSpec, Architecture, LayerPlan};
use crate::error::Result;
use crate::inference::{predict_spl, PredictOptions};
use crate::layers::conv::ConvSpec;
use crate::network::Network;
use crate::optim::Schedule;
use crate::tensor::Tensor;

/// Sub-patch labeling: the classifier without its last pooling, with a 1×1
/// convolution scoring every bottleneck cell.
pub struct SubPatch;

impl Architecture for SubPatch {
    fn tag(&self) -> &'static str {
        "spl"
    }

    fn description(&self) -> &'static str {
        "sub-patch labeling, coarse score map upsampled bilinearly"
    }

    fn plan(&self, spec: &ArchSpec) -> Result<Vec<LayerPlan>> {
        let (mut plan, c) = downsampling_blocks(spec, false);
        plan.push(LayerPlan::Conv("head".into(), ConvSpec::same(c, spec.classes, 1)));
        Ok(plan)
    }

    fn default_schedule(&self) -> Schedule {
        Schedule::subpatch()
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
        predict_spl(net, spec, image, opts.tile)
    }
}
