//! Segmentation head and the conditional, consistency and combined losses.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::features::FusedFeature;
use crate::nn::{self, Conv2d, GroupNorm, VarPath};

/// Pre-softmax class scores, (cls, H, W).
#[derive(Debug, Clone)]
pub struct SegmentationLogits {
    pub data: Tensor,
}

impl SegmentationLogits {
    /// Per-pixel argmax as a label map.
    pub fn argmax(&self) -> Result<LabelMap> {
        let (_, h, w) = self.data.dims3()?;
        let idx = self.data.argmax(0)?.flatten_all()?.to_vec1::<u32>()?;
        LabelMap::new(h, w, idx.into_iter().map(|v| v as u8).collect())
    }
}

/// Two conv-norm-SiLU stages, a 1×1 classifier and bilinear upsampling.
#[derive(Debug, Clone)]
pub struct SegHead {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    classifier: Conv2d,
}

impl SegHead {
    pub fn new(
        vs: &mut VarPath,
        in_channels: usize,
        hidden: usize,
        classes: usize,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Parameter(format!(
                "need at least two classes, got {classes}"
            )));
        }
        Ok(Self {
            conv1: Conv2d::new(&mut vs.pp("conv1"), in_channels, hidden, 3)?,
            norm1: GroupNorm::new(&mut vs.pp("norm1"), hidden)?,
            conv2: Conv2d::new(&mut vs.pp("conv2"), hidden, hidden, 3)?,
            norm2: GroupNorm::new(&mut vs.pp("norm2"), hidden)?,
            classifier: Conv2d::with_gain(&mut vs.pp("classifier"), hidden, classes, 1, 1.0)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_channels()
    }

    /// (B, C, h, w) → (B, cls, out_h, out_w).
    pub fn forward(&self, x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "segmentation head expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let h = nn::silu(&self.norm1.forward(&self.conv1.forward(x)?)?)?;
        let h = nn::silu(&self.norm2.forward(&self.conv2.forward(&h)?)?)?;
        nn::resize_bilinear(&self.classifier.forward(&h)?, out_h, out_w)
    }
}

pub fn seg_head_forward(
    head: &SegHead,
    f: &FusedFeature,
    out_h: usize,
    out_w: usize,
) -> Result<SegmentationLogits> {
    let data = head
        .forward(&f.data.unsqueeze(0)?, out_h, out_w)?
        .squeeze(0)?;
    Ok(SegmentationLogits { data })
}

/// Mean cross-entropy over labelled pixels.
#[derive(Debug, Clone)]
pub struct ConditionalLoss {
    pub value: Tensor,
    pub labelled_pixels: usize,
}

impl ConditionalLoss {
    /// Set when every pixel was ignored and the loss defaulted to zero.
    pub fn all_ignored(&self) -> bool {
        self.labelled_pixels == 0
    }
}

fn one_hot(labels: &[LabelMap], classes: usize, dtype: DType) -> Result<(Tensor, usize)> {
    let mut data = Vec::new();
    let mut count = 0;
    for l in labels {
        for &v in &l.data {
            let mut row = vec![0f32; classes];
            if v != IGNORE_INDEX {
                if v as usize >= classes {
                    return Err(Error::Data(format!("label {v} outside {classes} classes")));
                }
                row[v as usize] = 1.0;
                count += 1;
            }
            data.extend(row);
        }
    }
    let n = data.len() / classes;
    Ok((
        Tensor::from_vec(data, (n, classes), &Device::Cpu)?.to_dtype(dtype)?,
        count,
    ))
}

/// Pixel-major (N, cls) view of (B, cls, H, W) logits.
fn pixels(logits: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    Ok(logits.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?)
}

/// Cross-entropy of batched logits (B, cls, H, W) against one label map per item.
pub fn conditional_loss(logits: &Tensor, labels: &[LabelMap]) -> Result<ConditionalLoss> {
    let (b, c, h, w) = logits.dims4()?;
    if labels.len() != b || labels.iter().any(|l| (l.height, l.width) != (h, w)) {
        return Err(Error::Shape(format!(
            "{} label maps for logits {:?}",
            labels.len(),
            logits.dims()
        )));
    }
    let (target, count) = one_hot(labels, c, logits.dtype())?;
    if count == 0 {
        log::warn!("every pixel in the batch is ignored; conditional loss set to 0");
        return Ok(ConditionalLoss {
            value: Tensor::zeros((), logits.dtype(), logits.device())?,
            labelled_pixels: 0,
        });
    }
    let logp = nn::log_softmax_last(&pixels(logits)?)?;
    let value = ((logp * target)?.sum_all()?.neg()? / count as f64)?;
    Ok(ConditionalLoss {
        value,
        labelled_pixels: count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyKind {
    L2,
    Kl,
}

impl std::str::FromStr for ConsistencyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Self::L2),
            "kl" => Ok(Self::Kl),
            other => Err(Error::Parameter(format!(
                "unknown consistency kind `{other}`"
            ))),
        }
    }
}

/// Consistency between teacher (conditional) and student (unconditional) logits.
/// The teacher is detached inside. Both are (B, cls, H, W).
pub fn consistency_loss(
    teacher: &Tensor,
    student: &Tensor,
    kind: ConsistencyKind,
) -> Result<Tensor> {
    if teacher.dims() != student.dims() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            teacher.dims(),
            student.dims()
        )));
    }
    let teacher = teacher.detach();
    match kind {
        ConsistencyKind::L2 => Ok((student - teacher)?.sqr()?.mean_all()?),
        ConsistencyKind::Kl => {
            let (b, _, h, w) = student.dims4()?;
            let log_t = nn::log_softmax_last(&pixels(&teacher)?)?;
            let log_s = nn::log_softmax_last(&pixels(student)?)?;
            let kl = (log_t.exp()? * (log_t - log_s)?)?.sum_all()?;
            Ok((kl / (b * h * w) as f64)?)
        }
    }
}

/// Scalar losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_condit: f64,
    pub l_consis: f64,
    pub l_final: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossRecord {
    pub fn linearity_error(&self) -> f64 {
        (self.l_final - (self.lambda1 * self.l_condit + self.lambda2 * self.l_consis)).abs()
    }
}

pub fn total_loss(l_condit: f64, l_consis: f64, lambda1: f64, lambda2: f64) -> Result<LossRecord> {
    for (name, v) in [
        ("l_condit", l_condit),
        ("l_consis", l_consis),
        ("lambda1", lambda1),
        ("lambda2", lambda2),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v}")));
        }
    }
    Ok(LossRecord {
        l_condit,
        l_consis,
        l_final: lambda1 * l_condit + lambda2 * l_consis,
        lambda1,
        lambda2,
    })
}

/// Differentiable λ1·L_condit + λ2·L_consis.
pub fn combine(l_condit: &Tensor, l_consis: &Tensor, lambda1: f64, lambda2: f64) -> Result<Tensor> {
    Ok(((l_condit * lambda1)? + (l_consis * lambda2)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarStore;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn head_shape_contract() {
        let mut vs = VarStore::new(0, DType::F32);
        let head = SegHead::new(&mut vs.root().pp("head"), 256, 32, 4).unwrap();
        let f = FusedFeature::new(Tensor::randn(0f32, 1.0, (256, 16, 16), &Device::Cpu).unwrap())
            .unwrap();
        let a = seg_head_forward(&head, &f, 32, 32).unwrap();
        assert_eq!(a.data.dims(), &[4, 32, 32]);
        let b = seg_head_forward(&head, &f, 32, 32).unwrap();
        assert_eq!(
            a.data.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.data.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let bad = Tensor::zeros((1, 255, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(head.forward(&bad, 8, 8), Err(Error::Shape(_))));
    }

    #[test]
    fn saturated_and_uniform_cross_entropy() {
        let labels = LabelMap::new(1, 2, vec![2, 0]).unwrap();
        let mut v = vec![0f32; 8];
        v[2 * 2] = 100.0;
        v[1] = 100.0;
        let logits = Tensor::from_vec(v, (1, 4, 1, 2), &Device::Cpu).unwrap();
        assert!(
            scalar(
                &conditional_loss(&logits, std::slice::from_ref(&labels))
                    .unwrap()
                    .value
            ) < 1e-8
        );
        let uniform = Tensor::zeros((1, 4, 1, 2), DType::F64, &Device::Cpu).unwrap();
        let l = scalar(&conditional_loss(&uniform, &[labels]).unwrap().value);
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_flagged_zero() {
        let labels = LabelMap::new(1, 2, vec![IGNORE_INDEX; 2]).unwrap();
        let logits = Tensor::ones((1, 3, 1, 2), DType::F32, &Device::Cpu).unwrap();
        let l = conditional_loss(&logits, &[labels]).unwrap();
        assert!(l.all_ignored());
        assert_eq!(scalar(&l.value), 0.0);
    }

    #[test]
    fn consistency_cases() {
        let a = Tensor::randn(0f64, 1.0, (2, 4, 3, 3), &Device::Cpu).unwrap();
        for kind in [ConsistencyKind::L2, ConsistencyKind::Kl] {
            assert_eq!(scalar(&consistency_loss(&a, &a, kind).unwrap()), 0.0);
        }
        let shifted = (&a + 0.3).unwrap();
        assert!(
            (scalar(&consistency_loss(&a, &shifted, ConsistencyKind::L2).unwrap()) - 0.09).abs()
                < 1e-12
        );
        let per_pixel = Tensor::randn(0f64, 1.0, (2, 1, 3, 3), &Device::Cpu).unwrap();
        let moved = a.broadcast_add(&per_pixel).unwrap();
        assert!(scalar(&consistency_loss(&a, &moved, ConsistencyKind::Kl).unwrap()).abs() < 1e-12);
        assert!(scalar(&consistency_loss(&a, &moved, ConsistencyKind::L2).unwrap()) > 0.0);
        let wrong = Tensor::zeros((2, 4, 3, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            consistency_loss(&a, &wrong, ConsistencyKind::L2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let t = candle_core::Var::randn(0f64, 1.0, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let s = candle_core::Var::randn(0f64, 1.0, (1, 3, 2, 2), &Device::Cpu).unwrap();
        for kind in [ConsistencyKind::L2, ConsistencyKind::Kl] {
            let g = consistency_loss(t.as_tensor(), s.as_tensor(), kind)
                .unwrap()
                .backward()
                .unwrap();
            assert!(g.get(t.as_tensor()).is_none());
            assert!(g.get(s.as_tensor()).is_some());
        }
    }

    #[test]
    fn total_loss_cases() {
        let r = total_loss(0.7, 0.2, 1.0, 1.0).unwrap();
        assert!((r.l_final - 0.9).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 0.2, 1.0, 0.0).unwrap().l_final, 0.7);
        assert_eq!(total_loss(0.0, 0.0, 1.0, 1.0).unwrap().l_final, 0.0);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 1.0, 1.0),
            Err(Error::Numeric(_))
        ));
    }
}
