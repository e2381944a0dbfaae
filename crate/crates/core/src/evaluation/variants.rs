//! Ablation variants as configuration transforms, and their train-and-evaluate runner.

use std::fmt;
use std::str::FromStr;

use crate::backbone::Provenance;
use crate::channel_text::TextQuality;
use crate::config::{Fusion, Output, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::report::{EvalReport, HorizonRow};
use crate::pipeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    FusionSum,
    FusionConcat,
    FusionAttention,
    PlmOnly,
    TsOnly,
    Llm2Attn,
    Llm2Trsf,
    RandomInit,
    NoFreeze,
    NoText,
    RandomText,
    NoisyText,
    NoExtractor,
    NoChannelLayer,
    NoCurrent,
    NoMemory,
    NoGating,
    NPlm(usize),
}

impl Variant {
    pub fn all() -> Vec<Variant> {
        use Variant::*;
        vec![
            Full,
            FusionSum,
            FusionConcat,
            FusionAttention,
            PlmOnly,
            TsOnly,
            Llm2Attn,
            Llm2Trsf,
            RandomInit,
            NoFreeze,
            NoText,
            RandomText,
            NoisyText,
            NoExtractor,
            NoChannelLayer,
            NoCurrent,
            NoMemory,
            NoGating,
            NPlm(3),
            NPlm(6),
            NPlm(12),
        ]
    }

    /// The base configuration with this variant's changes applied and validated.
    pub fn apply(self, base: &RunConfig) -> Result<RunConfig> {
        let mut c = base.clone();
        let m = &mut c.model;
        match self {
            Variant::Full => {}
            Variant::FusionSum => m.fusion = Fusion::Sum,
            Variant::FusionConcat => m.fusion = Fusion::Concat,
            Variant::FusionAttention => m.fusion = Fusion::Attention,
            Variant::PlmOnly => {
                c.train.lambda = 1.0;
                m.output = Output::Plm;
            }
            Variant::TsOnly => {
                m.components.plm = false;
                c.train.lambda = 0.0;
            }
            Variant::Llm2Attn => c.backbone.provenance = Provenance::Llm2Attn,
            Variant::Llm2Trsf => c.backbone.provenance = Provenance::Llm2Trsf,
            Variant::RandomInit => c.backbone.provenance = Provenance::RandomInit,
            Variant::NoFreeze => c.train.freeze.freeze = false,
            Variant::NoText => m.components.text = false,
            Variant::RandomText => c.data.text_quality = TextQuality::RandomText,
            Variant::NoisyText => c.data.text_quality = TextQuality::AddNoise { rate: 0.1 },
            Variant::NoExtractor => m.components.extractor = false,
            Variant::NoChannelLayer => m.components.channel_layer = false,
            Variant::NoCurrent => m.components.current = false,
            Variant::NoMemory => m.components.memory = false,
            Variant::NoGating => m.components.gating = false,
            Variant::NPlm(n) => c.backbone.n_plm = n,
        }
        c.variant = self.to_string();
        if self != Variant::TsOnly && !c.model.components.plm {
            return Err(Error::Config(format!("variant {self} needs the PLM branch")));
        }
        c.validate()
            .map_err(|e| Error::Config(format!("variant {self} conflicts with the base config: {e}")))?;
        Ok(c)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::FusionSum => "fusion_sum",
            Variant::FusionConcat => "fusion_concat",
            Variant::FusionAttention => "fusion_attention",
            Variant::PlmOnly => "plm_only",
            Variant::TsOnly => "ts_only",
            Variant::Llm2Attn => "llm2attn",
            Variant::Llm2Trsf => "llm2trsf",
            Variant::RandomInit => "random_init",
            Variant::NoFreeze => "no_freeze",
            Variant::NoText => "no_text",
            Variant::RandomText => "random_text",
            Variant::NoisyText => "noisy_text",
            Variant::NoExtractor => "no_extractor",
            Variant::NoChannelLayer => "no_channel_layer",
            Variant::NoCurrent => "no_current",
            Variant::NoMemory => "no_memory",
            Variant::NoGating => "no_gating",
            Variant::NPlm(n) => return write!(f, "n_plm{n}"),
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(n) = s.strip_prefix("n_plm") {
            let n: usize = n
                .trim_start_matches(['=', '_'])
                .parse()
                .map_err(|_| Error::Config(format!("bad layer count in variant {s:?}")))?;
            return Ok(Variant::NPlm(n));
        }
        Variant::all()
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Trains the variant from scratch and evaluates it on the test split.
pub fn run_variant(base: &RunConfig, variant: Variant) -> Result<EvalReport> {
    let cfg = variant.apply(base)?;
    let run = pipeline::train(&cfg)?;
    let (mse, mae) = pipeline::test_metrics(&run.model, &run.data.test, 64)?;
    let mut report = EvalReport::new(&variant.to_string(), &cfg.data.name, &cfg.hash()?);
    report.rows.push(HorizonRow {
        horizon: cfg.model.horizon,
        mse,
        mae,
    });
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        let all = Variant::all();
        assert_eq!(all.len(), 21);
        for v in all {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn every_variant_yields_a_valid_config() {
        let base = RunConfig::quick(0);
        for v in Variant::all() {
            let c = v.apply(&base).unwrap();
            assert_eq!(c.variant, v.to_string());
        }
        assert_eq!(Variant::Full.apply(&base).unwrap().model, base.model);
    }

    #[test]
    fn conflicts_are_reported() {
        let mut base = RunConfig::quick(0);
        base.model.components.memory = false;
        let err = Variant::FusionSum.apply(&base).unwrap_err().to_string();
        assert!(err.contains("fusion_sum") && err.contains("memory"), "{err}");
        let err = Variant::NoCurrent.apply(&base).unwrap_err().to_string();
        assert!(err.contains("both"), "{err}");
    }
}
