//! Dataset evaluation and the ablation variants.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::model::{self, ModelConfig};
use crate::params::ParamStore;
use crate::synth::{Scenario, SegSample, SCENARIOS};
use crate::text::{self, Vocabulary};
use crate::train::TrainConfig;

/// Anything that turns a sample into a hard mask.
pub trait SegModel {
    fn classes(&self) -> usize;
    fn predict(&self, sample: &SegSample) -> Result<ClassMask>;
}

/// A parameter set plus what is needed to run it.
#[derive(Debug, Clone)]
pub struct Segmenter<'a> {
    pub params: &'a ParamStore,
    pub config: ModelConfig,
    pub vocab: &'a Vocabulary,
    pub zero_text: bool,
}

impl Segmenter<'_> {
    pub fn probabilities(&self, image: &crate::tensor::Tensor, prompt: &str) -> Result<crate::tensor::Tensor> {
        let seq = text::tokenize(prompt, self.vocab, self.config.max_tokens);
        model::predict_mask(self.params, &self.config, image, &seq, self.zero_text)
    }
}

impl SegModel for Segmenter<'_> {
    fn classes(&self) -> usize {
        self.config.classes
    }

    fn predict(&self, sample: &SegSample) -> Result<ClassMask> {
        model::argmax_mask(&self.probabilities(&sample.image, &sample.prompt)?)
    }
}

/// Accumulates one confusion matrix per scenario (in canonical scenario order) for the
/// samples whose scenario passes `filter` (all when `None`).
pub fn confusion_by_scenario<M: SegModel + ?Sized>(
    model: &M,
    samples: &[SegSample],
    filter: Option<&[Scenario]>,
) -> Result<Vec<(Scenario, ConfusionMatrix)>> {
    let mut out: Vec<(Scenario, ConfusionMatrix)> = Vec::new();
    for s in samples {
        if filter.is_some_and(|f| !f.contains(&s.scenario)) {
            continue;
        }
        let pred = model.predict(s)?;
        let slot = match out.iter().position(|(sc, _)| *sc == s.scenario) {
            Some(i) => i,
            None => {
                out.push((s.scenario, ConfusionMatrix::new(model.classes())));
                out.len() - 1
            }
        };
        out[slot].1.accumulate(&pred, &s.mask)?;
    }
    out.sort_by_key(|(sc, _)| SCENARIOS.iter().position(|x| x == sc));
    Ok(out)
}

/// Builds the overall report with per-scenario sub-reports from per-scenario matrices.
pub fn report_from(parts: &[(Scenario, ConfusionMatrix)], classes: usize) -> Result<MetricReport> {
    if parts.is_empty() {
        return Err(Error::contract("no samples matched the scenario filter"));
    }
    let mut all = ConfusionMatrix::new(classes);
    let mut scenarios = Vec::with_capacity(parts.len());
    for (sc, cm) in parts {
        all.merge(cm)?;
        scenarios.push((String::from(sc.as_str()), cm.metrics()?));
    }
    let mut report = all.metrics()?;
    report.scenarios = scenarios;
    Ok(report)
}

pub fn evaluate<M: SegModel + ?Sized>(
    model: &M,
    samples: &[SegSample],
    filter: Option<&[Scenario]>,
) -> Result<MetricReport> {
    let parts = confusion_by_scenario(model, samples, filter)?;
    report_from(&parts, model.classes())
}

/// Train/held-out split: the last 20% of samples by index are held out.
pub fn held_out_split<T>(items: &[T]) -> (&[T], &[T]) {
    items.split_at(items.len() * 4 / 5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AblationVariant {
    Full,
    NoLanguageLoss,
    NoMultiScale,
    NoLanguageGuidance,
}

pub const ABLATION_VARIANTS: [AblationVariant; 4] = [
    AblationVariant::Full,
    AblationVariant::NoLanguageLoss,
    AblationVariant::NoMultiScale,
    AblationVariant::NoLanguageGuidance,
];

impl AblationVariant {
    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoLanguageLoss => "no_language_loss",
            AblationVariant::NoMultiScale => "no_multi_scale",
            AblationVariant::NoLanguageGuidance => "no_language_guidance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ABLATION_VARIANTS
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(alloc::format!("unknown ablation variant {s:?}")))
    }

    /// Applies this variant's delta to a base configuration.
    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (*model, *train);
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoLanguageLoss => t.loss.triplet = 0.0,
            AblationVariant::NoMultiScale => {
                m.levels = 1;
                t.loss.multi_scale = 0.0;
            }
            AblationVariant::NoLanguageGuidance => {
                t.zero_text = true;
                t.loss.triplet = 0.0;
            }
        }
        (m, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_holds_out_last_fifth() {
        let v: Vec<u32> = (0..320).collect();
        let (a, b) = held_out_split(&v);
        assert_eq!((a.len(), b.len()), (256, 64));
        assert_eq!(b[0], 256);
    }

    #[test]
    fn variant_deltas() {
        let (m, t) = (ModelConfig::default(), TrainConfig::default());
        assert_eq!(AblationVariant::Full.apply(&m, &t), (m, t));
        let (_, nl) = AblationVariant::NoLanguageLoss.apply(&m, &t);
        assert_eq!(nl.loss.triplet, 0.0);
        assert!(!nl.zero_text);
        let (nm, nmt) = AblationVariant::NoMultiScale.apply(&m, &t);
        assert_eq!((nm.levels, nmt.loss.multi_scale), (1, 0.0));
        let (_, ng) = AblationVariant::NoLanguageGuidance.apply(&m, &t);
        assert!(ng.zero_text);
        assert_eq!(ng.loss.triplet, 0.0);
        for v in ABLATION_VARIANTS {
            assert_eq!(AblationVariant::parse(v.name()).unwrap(), v);
        }
    }
}
