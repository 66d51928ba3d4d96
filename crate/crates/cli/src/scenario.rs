//! Scenario files: JSON documents that either name a preset and override some
//! of its sections, or spell out a scenario in full.

use std::path::{Path, PathBuf};

use calibra_core::bridge::BridgeConfig;
use calibra_core::freq::FreqScenario;
use calibra_core::jzs::JzsConfig;
use calibra_core::mcmc::McmcConfig;
use calibra_core::sbc::{GenerativePrior, SbcAnalysis, SbcScenario, SbcSettings, TestedEffect};
use calibra_core::scenarios::{freq_preset, sbc_preset, Scale, FREQ_PRESETS, SBC_PRESETS};
use calibra_core::{ContrastScheme, DesignSpec, Family, ParamPins};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub plots: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub scale: Option<Scale>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub design: Option<DesignSpec>,
    #[serde(default)]
    pub contrasts: Option<Vec<(String, ContrastScheme)>>,
    #[serde(default)]
    pub family: Option<Family>,
    #[serde(default)]
    pub priors: Option<GenerativePrior>,
    #[serde(default)]
    pub pins: Option<ParamPins>,
    #[serde(default)]
    pub effects: Option<Vec<TestedEffect>>,
    #[serde(default)]
    pub analyses: Option<Vec<SbcAnalysis>>,
    #[serde(default)]
    pub sbc: Option<SbcSettings>,
    #[serde(default)]
    pub mcmc: Option<McmcConfig>,
    #[serde(default)]
    pub bridge: Option<BridgeConfig>,
    #[serde(default)]
    pub jzs: Option<JzsConfig>,
    #[serde(default)]
    pub freq: Option<FreqScenario>,
    #[serde(default)]
    pub output: Option<OutputSection>,
}

/// A scenario ready to run: the SBC part, the frequentist part, or both.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub sbc: Option<SbcScenario>,
    pub freq: Option<FreqScenario>,
    pub output: OutputSection,
}

/// Dataset presets that are not simulation experiments of their own.
const DATASET_ALIASES: [(&str, &str); 1] = [("gibson_wu", "sim2_1")];

/// Frequentist companion of SBC presets.
fn companion_freq(preset: &str) -> Option<&'static str> {
    match preset {
        "sim1_1" | "sim1_1_prior50" => Some("appendix_a"),
        "sim2_1" => Some("appendix_e"),
        _ => None,
    }
}

pub fn known_presets() -> Vec<&'static str> {
    let mut v: Vec<&str> = SBC_PRESETS.to_vec();
    v.extend(FREQ_PRESETS);
    v.extend(DATASET_ALIASES.iter().map(|(a, _)| *a));
    v
}

fn preset_parts(name: &str, scale: Scale) -> anyhow::Result<(Option<SbcScenario>, Option<FreqScenario>)> {
    let name = DATASET_ALIASES.iter().find(|(a, _)| *a == name).map(|(_, p)| *p).unwrap_or(name);
    if FREQ_PRESETS.contains(&name) {
        return Ok((None, Some(freq_preset(name)?)));
    }
    if SBC_PRESETS.contains(&name) {
        let freq = companion_freq(name).map(freq_preset).transpose()?;
        return Ok((Some(sbc_preset(name, scale)?), freq));
    }
    anyhow::bail!("unknown preset {name}; known: {}", known_presets().join(", "))
}

impl ScenarioFile {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn has_sbc_sections(&self) -> bool {
        self.design.is_some()
            || self.contrasts.is_some()
            || self.family.is_some()
            || self.priors.is_some()
            || self.pins.is_some()
            || self.effects.is_some()
            || self.analyses.is_some()
            || self.sbc.is_some()
            || self.mcmc.is_some()
            || self.bridge.is_some()
            || self.jzs.is_some()
    }

    /// Applies the file's sections over its preset (if any) and validates the
    /// result. `scale` overrides the file's own scale.
    pub fn resolve(self, scale: Option<Scale>) -> anyhow::Result<Resolved> {
        let scale = scale.or(self.scale).unwrap_or_default();
        let (base_sbc, base_freq) = match &self.preset {
            Some(p) => preset_parts(p, scale)?,
            None => (None, None),
        };
        let sbc = if let Some(mut sc) = base_sbc {
            if let Some(v) = self.name.clone() {
                sc.name = v;
            }
            if let Some(v) = self.design.clone() {
                sc.design = v;
            }
            if let Some(v) = self.contrasts.clone() {
                sc.contrasts = v;
            }
            if let Some(v) = self.family {
                sc.family = v;
            }
            if let Some(v) = self.priors.clone() {
                sc.priors = v;
            }
            if let Some(v) = self.pins.clone() {
                sc.pins = v;
            }
            if let Some(v) = self.effects.clone() {
                sc.effects = v;
            }
            if let Some(v) = self.analyses.clone() {
                sc.analyses = v;
            }
            if let Some(v) = self.sbc.clone() {
                sc.sbc = v;
            }
            if let Some(v) = self.mcmc {
                sc.mcmc = v;
            }
            if let Some(v) = self.bridge {
                sc.bridge = v;
            }
            if let Some(v) = self.jzs {
                sc.jzs = v;
            }
            Some(sc)
        } else if self.has_sbc_sections() {
            let missing = |what: &str| anyhow::anyhow!("scenario without a preset needs a {what} section");
            Some(SbcScenario {
                name: self.name.clone().unwrap_or_else(|| "custom".into()),
                design: self.design.clone().ok_or_else(|| missing("design"))?,
                contrasts: self.contrasts.clone().ok_or_else(|| missing("contrasts"))?,
                family: self.family.unwrap_or_default(),
                priors: self.priors.clone().ok_or_else(|| missing("priors"))?,
                pins: self.pins.clone().unwrap_or_default(),
                effects: self.effects.clone().ok_or_else(|| missing("effects"))?,
                analyses: self.analyses.clone().ok_or_else(|| missing("analyses"))?,
                sbc: self.sbc.clone().ok_or_else(|| missing("sbc"))?,
                mcmc: self.mcmc.unwrap_or_default(),
                bridge: self.bridge.unwrap_or_default(),
                jzs: self.jzs.unwrap_or_default(),
            })
        } else {
            None
        };
        if self.preset.is_some() && sbc.is_none() && self.has_sbc_sections() {
            anyhow::bail!("preset {} has no SBC part to override", self.preset.as_deref().unwrap_or(""));
        }
        let freq = self.freq.clone().or(base_freq);
        if sbc.is_none() && freq.is_none() {
            anyhow::bail!("scenario defines nothing to run");
        }
        if let Some(sc) = &sbc {
            sc.validate()?;
        }
        if let Some(f) = &freq {
            f.validate()?;
        }
        Ok(Resolved {
            sbc,
            freq,
            output: self.output.unwrap_or(OutputSection { dir: None, plots: true }),
        })
    }
}

/// A preset name or the path of a JSON scenario file.
pub fn load(arg: &str, scale: Option<Scale>) -> anyhow::Result<Resolved> {
    let path = Path::new(arg);
    let file = if path.extension().is_some_and(|e| e == "json") || path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read {arg}: {e}"))?;
        ScenarioFile::parse(&text).map_err(|e| anyhow::anyhow!("{arg}: {e}"))?
    } else {
        ScenarioFile {
            preset: Some(arg.to_string()),
            ..ScenarioFile::default()
        }
    };
    file.resolve(scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ScenarioFile::parse(r#"{"preset": "sim1_1", "colour": 3}"#).is_err());
        assert!(ScenarioFile::parse(r#"{"preset": "sim1_1", "sbc": {"n_sims": 3, "prior_p1": 0.5, "sede": 1}}"#).is_err());
    }

    #[test]
    fn overrides_apply_over_presets() {
        let f = ScenarioFile::parse(r#"{"preset": "sim1_1", "scale": "desk", "sbc": {"n_sims": 7, "prior_p1": 0.3, "seed": 9}}"#).unwrap();
        let r = f.resolve(None).unwrap();
        let sc = r.sbc.unwrap();
        assert_eq!(sc.sbc.runs(), 7);
        assert_eq!(sc.design.n_subj, 10);
        assert!(r.freq.is_some());
    }

    #[test]
    fn round_trip_of_a_full_scenario() {
        let sc = sbc_preset("sim1_8", Scale::Desk).unwrap();
        let mut v = serde_json::to_value(&sc).unwrap();
        v.as_object_mut().unwrap().remove("name");
        let f: ScenarioFile = serde_json::from_value(v).unwrap();
        let r = f.resolve(None).unwrap();
        assert_eq!(r.sbc.unwrap().analyses, sc.analyses);
    }

    #[test]
    fn incomplete_custom_scenario_is_an_error() {
        let f = ScenarioFile::parse(r#"{"sbc": {"n_sims": 3, "prior_p1": 0.5}}"#).unwrap();
        assert!(f.resolve(None).is_err());
        assert!(ScenarioFile::default().resolve(None).is_err());
        assert!(load("no_such_preset", None).is_err());
    }
}
