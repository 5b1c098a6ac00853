use super::net::{forward, postprocess};
use super::{task_loss, DetectionBox, DetectorParams};
use crate::autodiff::Graph;
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::par;
use crate::tensor::Tensor;

/// Detector inputs for one scene plus its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInputs {
    /// `[3, H, W]`
    pub image: Tensor,
    /// `[K, 3]`, `None` for an empty sweep.
    pub points: Option<Tensor>,
    pub camera: CameraModel,
    pub targets: Vec<DetectionBox>,
}

/// Loss and parameter gradients (name order) for one sample.
pub fn loss_and_grads(params: &DetectorParams, sample: &SampleInputs) -> Result<(f64, Vec<Tensor>)> {
    let g = Graph::new();
    let p = params.bind(&g, true);
    let image = g.constant(sample.image.clone());
    let points = sample.points.clone().map(|t| g.constant(t));
    let prop = forward(image, points, &sample.camera, &p, &params.config)?;
    let loss = task_loss(&prop, &sample.targets, &params.config)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("task loss {value}")));
    }
    g.backward(loss)?;
    Ok((value, p.grads(&g)))
}

/// One optimizer step on the batch-mean task loss. A non-finite loss leaves
/// the parameters untouched and is reported as an error.
pub fn train_step(params: &mut DetectorParams, opt: &mut Adam, batch: &[SampleInputs]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let results = par::map(batch, |s| loss_and_grads(params, s));
    let mut total = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for r in results {
        let (l, gs) = r?;
        total += l;
        match &mut grads {
            None => grads = Some(gs),
            Some(acc) => acc.iter_mut().zip(&gs).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let n = batch.len() as f64;
    let mut grads = grads.expect("non-empty batch");
    grads.iter_mut().for_each(|g| g.scale_inplace(1.0 / n));
    let refs: Vec<&Tensor> = grads.iter().collect();
    opt.update(&mut params.tensors_mut(), &refs)?;
    Ok(total / n)
}

/// Every anchor's decoded box and score, without gradients.
pub fn propose(params: &DetectorParams, image: &Tensor, points: Option<&Tensor>, cam: &CameraModel) -> Result<Vec<DetectionBox>> {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let prop = forward(g.constant(image.clone()), points.map(|t| g.constant(t.clone())), cam, &p, &params.config)?;
    Ok(prop.boxes)
}

/// Thresholded, NMS-filtered detections.
pub fn detect_boxes(
    params: &DetectorParams,
    image: &Tensor,
    points: Option<&Tensor>,
    cam: &CameraModel,
    score_threshold: f64,
) -> Result<Vec<DetectionBox>> {
    let boxes = propose(params, image, points, cam)?;
    Ok(postprocess(&boxes, score_threshold, params.config.nms_iou))
}
