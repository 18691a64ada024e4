//! Cross-domain evaluation reports and the five-arm ablation grid.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::FeatureExtractor;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::path_control::decompose_annotation;
use crate::seg::ConsistencyKind;
use crate::trainer::{IpklTrainer, Objective, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub dataset: String,
    pub images: usize,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// mIoU of the conditional branch given ground-truth masks, when requested.
    pub reference_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub run_id: String,
    pub config_hash: String,
    pub classes: Vec<String>,
    pub source: Option<BenchmarkRow>,
    pub targets: Vec<BenchmarkRow>,
    /// Mean of the per-target mIoU values.
    pub average_miou: f64,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per dataset plus an `average` row over targets.
    pub fn to_csv(&self) -> String {
        let mut header = vec![
            "split".to_string(),
            "dataset".into(),
            "miou".into(),
            "pixel_accuracy".into(),
        ];
        header.extend(self.classes.iter().map(|c| format!("iou_{c}")));
        header.push("reference_miou".into());
        let mut out = header.join(",") + "\n";
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut row = |split: &str, r: &BenchmarkRow| {
            let mut cells = vec![
                split.to_string(),
                r.dataset.clone(),
                format!("{:.6}", r.miou),
                format!("{:.6}", r.pixel_accuracy),
            ];
            cells.extend(r.per_class_iou.iter().map(|v| fmt(*v)));
            cells.push(fmt(r.reference_miou));
            out.push_str(&(cells.join(",") + "\n"));
        };
        if let Some(s) = &self.source {
            row("source", s);
        }
        for t in &self.targets {
            row("target", t);
        }
        let mut avg = vec![
            "average".to_string(),
            String::new(),
            format!("{:.6}", self.average_miou),
            String::new(),
        ];
        avg.extend(self.classes.iter().map(|_| String::new()));
        avg.push(String::new());
        out.push_str(&(avg.join(",") + "\n"));
        out
    }
}

/// Scores one dataset with the unconditional predictor and, optionally, the reference path.
pub fn evaluate(
    trainer: &IpklTrainer,
    data: &Dataset,
    with_reference: bool,
) -> Result<BenchmarkRow> {
    if data.is_empty() {
        return Err(Error::Parameter(format!("dataset {} is empty", data.name)));
    }
    let classes = trainer.classes().len();
    let mut cm = ConfusionMatrix::new(classes);
    let mut ref_cm = with_reference.then(|| ConfusionMatrix::new(classes));
    for s in &data.samples {
        let pred = trainer.predict(&s.image)?;
        cm.accumulate(&pred, &s.labels)?;
        if let Some(rcm) = ref_cm.as_mut() {
            let masks = decompose_annotation(&s.labels, trainer.classes())?;
            rcm.accumulate(
                &trainer.predict_with_reference(&s.image, &masks)?,
                &s.labels,
            )?;
        }
    }
    Ok(BenchmarkRow {
        dataset: data.name.clone(),
        images: data.len(),
        miou: cm.miou()?,
        pixel_accuracy: cm.pixel_accuracy()?,
        per_class_iou: cm.per_class_iou(),
        reference_miou: ref_cm.map(|c| c.miou()).transpose()?,
    })
}

pub fn run_id(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())[..12].to_string()
}

pub fn run_benchmark(
    trainer: &IpklTrainer,
    source: Option<&Dataset>,
    targets: &[Dataset],
    with_reference: bool,
    config_hash: &str,
) -> Result<BenchmarkReport> {
    if targets.is_empty() {
        return Err(Error::Parameter(
            "benchmark needs at least one target dataset".into(),
        ));
    }
    let source = source
        .map(|d| evaluate(trainer, d, with_reference))
        .transpose()?;
    let targets = targets
        .iter()
        .map(|d| evaluate(trainer, d, with_reference))
        .collect::<Result<Vec<_>>>()?;
    let average_miou = targets.iter().map(|r| r.miou).sum::<f64>() / targets.len() as f64;
    let checksum = trainer.trainable_checksum()?;
    let names: Vec<&str> = targets.iter().map(|r| r.dataset.as_str()).collect();
    let mut id_parts = vec![config_hash, checksum.as_str()];
    id_parts.extend(names);
    Ok(BenchmarkReport {
        run_id: run_id(&id_parts),
        config_hash: config_hash.to_string(),
        classes: trainer.classes().to_vec(),
        source,
        targets,
        average_miou,
    })
}

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub diff: bool,
    pub ipkl: bool,
    pub consistency: Option<ConsistencyKind>,
    pub config: TrainerConfig,
    pub final_loss: f64,
    pub source_miou: Option<f64>,
    pub target_miou: Vec<(String, f64)>,
    pub average_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub steps: usize,
    pub arms: Vec<ArmResult>,
    /// Whether L2 ≥ KL ≥ DIFF-only ≥ baseline ≥ no-consistency holds on the average target mIoU.
    pub ordering_holds: bool,
    pub ordering: String,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,diff,ipkl,consistency,source_miou,average_miou\n");
        for a in &self.arms {
            let consis = match a.consistency {
                Some(ConsistencyKind::L2) => "l2",
                Some(ConsistencyKind::Kl) => "kl",
                None => "",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{:.6}\n",
                a.name,
                a.diff,
                a.ipkl,
                consis,
                a.source_miou.map(|v| format!("{v:.6}")).unwrap_or_default(),
                a.average_miou
            ));
        }
        out
    }
}

/// The five arms in table order: name, uses diffusion features, uses the dual branch, trainer config.
pub fn ablation_arms(base: &TrainerConfig) -> Vec<(String, bool, bool, TrainerConfig)> {
    let lambda2 = if base.lambda2 > 0.0 {
        base.lambda2
    } else {
        1.0
    };
    let arm = |objective, consistency, lambda2| TrainerConfig {
        objective,
        consistency,
        lambda2,
        ..base.clone()
    };
    vec![
        (
            "baseline".into(),
            false,
            false,
            arm(Objective::Baseline, ConsistencyKind::L2, 0.0),
        ),
        (
            "diff".into(),
            true,
            false,
            arm(Objective::UnconditionalOnly, ConsistencyKind::L2, 0.0),
        ),
        (
            "diff+ipkl w/o consis".into(),
            true,
            true,
            arm(Objective::Ipkl, ConsistencyKind::L2, 0.0),
        ),
        (
            "diff+ipkl kl".into(),
            true,
            true,
            arm(Objective::Ipkl, ConsistencyKind::Kl, lambda2),
        ),
        (
            "diff+ipkl l2".into(),
            true,
            true,
            arm(Objective::Ipkl, ConsistencyKind::L2, lambda2),
        ),
    ]
}

#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    extractor: Arc<FeatureExtractor>,
    classes: &[String],
    base: &TrainerConfig,
    train: &[Sample],
    source_eval: Option<&Dataset>,
    targets: &[Dataset],
    steps: usize,
    config_hash: &str,
) -> Result<AblationReport> {
    if targets.is_empty() {
        return Err(Error::Parameter(
            "ablation needs at least one target dataset".into(),
        ));
    }
    let mut arms = Vec::with_capacity(5);
    for (name, diff, ipkl, config) in ablation_arms(base) {
        log::info!("ablation arm `{name}`: {steps} steps");
        let mut trainer = IpklTrainer::new(extractor.clone(), classes.to_vec(), config.clone())?;
        let log = trainer.fit(train, steps, |_, _| {})?;
        let source_miou = source_eval
            .map(|d| evaluate(&trainer, d, false).map(|r| r.miou))
            .transpose()?;
        let target_miou = targets
            .iter()
            .map(|d| Ok((d.name.clone(), evaluate(&trainer, d, false)?.miou)))
            .collect::<Result<Vec<_>>>()?;
        let average_miou =
            target_miou.iter().map(|(_, v)| v).sum::<f64>() / target_miou.len() as f64;
        arms.push(ArmResult {
            name,
            diff,
            ipkl,
            consistency: (ipkl && config.lambda2 > 0.0).then_some(config.consistency),
            config,
            final_loss: log.last().map(|r| r.l_final).unwrap_or(0.0),
            source_miou,
            target_miou,
            average_miou,
        });
    }
    let score = |name: &str| {
        arms.iter()
            .find(|a| a.name == name)
            .map(|a| a.average_miou)
            .unwrap_or(f64::NAN)
    };
    let chain = [
        score("diff+ipkl l2"),
        score("diff+ipkl kl"),
        score("diff"),
        score("baseline"),
        score("diff+ipkl w/o consis"),
    ];
    let ordering_holds = chain.windows(2).all(|w| w[0] >= w[1]);
    let ordering = format!(
        "l2 {:.4} >= kl {:.4} >= diff {:.4} >= baseline {:.4} >= w/o consis {:.4}: {}",
        chain[0],
        chain[1],
        chain[2],
        chain[3],
        chain[4],
        if ordering_holds {
            "holds"
        } else {
            "does not hold"
        }
    );
    Ok(AblationReport {
        config_hash: config_hash.to_string(),
        steps,
        arms,
        ordering_holds,
        ordering,
    })
}
