//! End-to-end helpers shared by the CLI and tests.

use crate::backend::Backend;
use crate::baseline::{det_sam_predict, OracleDetector};
use crate::config::Config;
use crate::data::{derive_weak_labels, Dataset, TrainingScope};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, MetricsReport};
use crate::inference::{oracle_predict, predict_features};
use crate::prompter::PrompterParams;
use crate::teacher::{build_target_set, Teacher};
use crate::trainer::{fit, FitOptions, TrainSample, TrainState};
use crate::types::LabelKind;

/// Encodes every record once and builds its target set from weak labels
/// under `mode`. Ground-truth masks are unreachable from here.
pub fn encode_samples(
    dataset: &Dataset,
    mode: LabelKind,
    backend: &dyn Backend,
    teacher: &Teacher,
    cfg: &Config,
) -> Result<Vec<TrainSample>> {
    let _scope = TrainingScope::enter();
    if dataset.num_categories() != cfg.num_categories {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} categories, num_categories is {}",
            dataset.num_categories(),
            cfg.num_categories
        )));
    }
    dataset
        .records
        .iter()
        .map(|r| {
            let labels = derive_weak_labels(r, mode);
            Ok(TrainSample {
                features: backend.encode_image(&r.image)?,
                targets: build_target_set(teacher, &labels, cfg)?,
            })
        })
        .collect()
}

/// Trains a fresh prompter on `dataset`.
pub fn train(
    dataset: &Dataset,
    mode: LabelKind,
    backend: &dyn Backend,
    teacher: &Teacher,
    cfg: &Config,
    opts: &FitOptions,
) -> Result<TrainState> {
    let samples = encode_samples(dataset, mode, backend, teacher, cfg)?;
    let state = TrainState::new(
        cfg,
        cfg.seed,
        &backend.parameter_checksum(),
        &teacher.parameter_checksum(),
    )?;
    fit(&samples, cfg, state, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    Student,
    Oracle(LabelKind),
    DetSam { jitter_sigma: f64, drop_prob: f64, seed: u64 },
}

pub fn evaluate(
    dataset: &Dataset,
    mode: EvalMode,
    params: Option<&PrompterParams>,
    backend: &dyn Backend,
    teacher: &Teacher,
    cfg: &Config,
) -> Result<MetricsReport> {
    let hash = cfg.hash();
    match mode {
        EvalMode::Student => {
            let params = params.ok_or_else(|| Error::InvalidConfig("student evaluation needs a checkpoint".into()))?;
            evaluate_dataset(
                dataset,
                |r| predict_features(&backend.encode_image(&r.image)?, params, backend, cfg),
                &hash,
            )
        }
        EvalMode::Oracle(kind) => evaluate_dataset(
            dataset,
            |r| oracle_predict(&r.image, &derive_weak_labels(r, kind), teacher, backend, cfg),
            &hash,
        ),
        EvalMode::DetSam {
            jitter_sigma,
            drop_prob,
            seed,
        } => {
            let detector = OracleDetector {
                jitter_sigma,
                drop_prob,
                seed,
            };
            evaluate_dataset(
                dataset,
                |r| det_sam_predict(&r.image, Some(r), &detector, teacher, backend, cfg),
                &hash,
            )
        }
    }
}
