use super::{downsampling_blocks, ArchSpec, Architecture, LayerPlan, DECONV_WIDTH};
use crate::error::Result;
use crate::inference::{predict_fpl, PredictOptions, TilingPlan};
use crate::layers::conv::ConvSpec;
use crate::layers::deconv::DeconvSpec;
use crate::network::Network;
use crate::optim::Schedule;
use crate::tensor::Tensor;

/// Full-patch labeling: the sub-patch network followed by three learned
/// 2× upsampling blocks back to the input resolution.
pub struct FullPatch;

impl Architecture for FullPatch {
    fn tag(&self) -> &'static str {
        "fpl"
    }

    fn description(&self) -> &'static str {
        "full-patch labeling, learned upsampling, single-pass dense maps"
    }

    fn plan(&self, spec: &ArchSpec) -> Result<Vec<LayerPlan>> {
        let (mut plan, mut c) = downsampling_blocks(spec, false);
        let w = spec.width(DECONV_WIDTH);
        for d in 1..=3 {
            let de = DeconvSpec { in_channels: c, out_channels: w, kernel: 3, stride: 2, crop: 1 };
            plan.push(LayerPlan::Deconv(format!("deconv{d}.deconv"), de));
            plan.push(LayerPlan::BatchNorm(format!("deconv{d}.bn"), w));
            plan.push(LayerPlan::Act(format!("deconv{d}.act")));
            plan.push(LayerPlan::Dropout(format!("deconv{d}.drop"), spec.dropout));
            c = w;
        }
        plan.push(LayerPlan::Conv("head".into(), ConvSpec::same(c, spec.classes, 1)));
        Ok(plan)
    }

    fn default_schedule(&self) -> Schedule {
        Schedule::full_patch()
    }

    fn batch_size(&self) -> usize {
        32
    }

    fn predict(
        &self,
        net: &mut Network<f32>,
        spec: &ArchSpec,
        image: &Tensor<f32>,
        opts: &PredictOptions,
    ) -> Result<Tensor<f32>> {
        let plan = TilingPlan::for_arch(spec, opts.tile)?;
        predict_fpl(net, image, &plan)
    }
}
