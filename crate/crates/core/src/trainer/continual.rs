use serde::{Deserialize, Serialize};

use super::train::{mean_loss, train, Stage, TrainConfig};
use crate::diffusion::{initial_noise, Label, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::ndkernel::Array;
use crate::skipdit::{is_fusion_param, ModelConfig, SkipDiT};

/// How stage 1 initialises the fusion branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionInit {
    /// Random fusion weights.
    #[default]
    Random,
    /// Fusion linear selects the normalised deep half: weight `[0; I]`,
    /// zero bias. The closest learnable stand-in for the exact bypass.
    Passthrough,
}

#[derive(Clone, Debug)]
pub struct ContinualOutcome {
    pub model: SkipDiT,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    /// SHA-256 of the non-fusion entries before stage 1 and after it.
    pub block_digest_before: String,
    pub block_digest_after_stage1: String,
    /// Max deviation between the vanilla model and the bypassed skip model
    /// on probe inputs, measured before stage 1.
    pub passthrough_max_diff: f64,
}

pub fn block_digest(model: &SkipDiT) -> String {
    model.params().digest(|n| !is_fusion_param(n))
}

/// `mean(first w of stage 2) / mean(last w of stage 1)`.
pub fn loss_continuity_ratio(stage1: &[f64], stage2: &[f64], window: usize) -> Result<f64> {
    if window == 0 || stage1.len() < window || stage2.len() < window {
        return Err(invalid("loss window longer than a stage"));
    }
    Ok(mean_loss(&stage2[..window]) / mean_loss(&stage1[stage1.len() - window..]))
}

/// Convert a trained vanilla model into a skip model: stage 1 trains only the
/// fusion branches, stage 2 unfreezes everything. The stage fields of the two
/// configs are overridden accordingly.
pub fn two_stage_continual(
    vanilla: &SkipDiT,
    skip_config: &ModelConfig,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    init: FusionInit,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<ContinualOutcome> {
    if !skip_config.is_skip() {
        return Err(invalid("two-stage training targets a skip-variant config"));
    }
    let mut model = SkipDiT::new(skip_config.clone(), seed)?;
    model.copy_shared_from(vanilla)?;
    if init == FusionInit::Passthrough {
        let d = skip_config.hidden_dim;
        for i in 1..=skip_config.skip_branches() {
            let mut w = Array::zeros([2 * d, d]);
            for j in 0..d {
                w.data_mut()[(d + j) * d + j] = 1.0;
            }
            model.params_mut().insert(format!("skips.{i}.linear.weight"), w);
            model.params_mut().insert(format!("skips.{i}.linear.bias"), Array::zeros([d]));
        }
    }

    let mut probe = model.clone().init_passthrough_fusion()?;
    let mut passthrough_max_diff: f64 = 0.0;
    for k in 0..4u64 {
        let x = initial_noise(&skip_config.image_shape(), seed.wrapping_add(k));
        let t = 1 + (k as usize * 997) % sched.len();
        let a = vanilla.forward(&x, t, Label::Null)?;
        let b = probe.forward(&x, t, Label::Null)?;
        passthrough_max_diff = passthrough_max_diff.max(a.max_abs_diff(&b)?);
    }
    probe.set_bypass(false)?;

    let block_digest_before = block_digest(&model);
    let s1 = TrainConfig {
        stage: Stage::SkipOnly,
        ..stage1.clone()
    };
    let stage1_losses = train(&mut model, &s1, sched)?;
    let block_digest_after_stage1 = block_digest(&model);
    let s2 = TrainConfig {
        stage: Stage::Full,
        ..stage2.clone()
    };
    let stage2_losses = train(&mut model, &s2, sched)?;
    Ok(ContinualOutcome {
        model,
        stage1_losses,
        stage2_losses,
        block_digest_before,
        block_digest_after_stage1,
        passthrough_max_diff,
    })
}
