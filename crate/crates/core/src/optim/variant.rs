use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, ConceptLayout};

/// Ablation switches; all false is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantFlags {
    pub entangle: bool,
    pub no_scm: bool,
    pub linear_scm: bool,
    pub no_prior: bool,
    pub no_cond: bool,
    pub no_gcn: bool,
    pub no_gru: bool,
}

/// Named model variants as spelled on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    Entangle,
    NoScm,
    LinearScm,
    NoPrior,
    NoCond,
    NoGcn,
    NoGru,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::Entangle,
        Variant::NoScm,
        Variant::LinearScm,
        Variant::NoPrior,
        Variant::NoCond,
        Variant::NoGcn,
        Variant::NoGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Entangle => "entangle",
            Variant::NoScm => "no-scm",
            Variant::LinearScm => "linear-scm",
            Variant::NoPrior => "no-prior",
            Variant::NoCond => "no-cond",
            Variant::NoGcn => "no-gcn",
            Variant::NoGru => "no-gru",
        }
    }

    pub fn flags(self) -> VariantFlags {
        let mut f = VariantFlags::default();
        match self {
            Variant::Full => {}
            Variant::Entangle => f.entangle = true,
            Variant::NoScm => f.no_scm = true,
            Variant::LinearScm => f.linear_scm = true,
            Variant::NoPrior => f.no_prior = true,
            Variant::NoCond => f.no_cond = true,
            Variant::NoGcn => f.no_gcn = true,
            Variant::NoGru => f.no_gru = true,
        }
        f
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant '{s}', expected one of {}", names.join(", ")))
            })
    }
}

impl VariantFlags {
    fn set(&self) -> Vec<&'static str> {
        let all = [
            (self.entangle, "entangle"),
            (self.no_scm, "no_scm"),
            (self.linear_scm, "linear_scm"),
            (self.no_prior, "no_prior"),
            (self.no_cond, "no_cond"),
            (self.no_gcn, "no_gcn"),
            (self.no_gru, "no_gru"),
        ];
        all.iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect()
    }

    /// Merges the flags of a named variant; any second flag is a conflict.
    pub fn with_variant(mut self, v: Variant) -> Result<Self> {
        let extra = v.flags();
        self.entangle |= extra.entangle;
        self.no_scm |= extra.no_scm;
        self.linear_scm |= extra.linear_scm;
        self.no_prior |= extra.no_prior;
        self.no_cond |= extra.no_cond;
        self.no_gcn |= extra.no_gcn;
        self.no_gru |= extra.no_gru;
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        let on = self.set();
        if on.len() > 1 {
            return Err(Error::Config(format!(
                "conflicting variant flags: {} (at most one variant at a time)",
                on.join(", ")
            )));
        }
        Ok(())
    }
}

/// Architecture switches for a set of variant flags.
pub fn apply_variant(flags: &VariantFlags) -> Result<Architecture> {
    flags.check()?;
    let mut arch = Architecture::default();
    if flags.entangle {
        arch.concepts = ConceptLayout::Entangled;
    }
    arch.causal_propagation = !flags.no_scm;
    arch.nonlinear_transform = !flags.linear_scm;
    arch.prior_network = !flags.no_prior;
    arch.use_conditions = !flags.no_cond;
    arch.graph_convolution = !flags.no_gcn;
    arch.recurrence = !flags.no_gru;
    Ok(arch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("w/o-scm".parse::<Variant>().is_err());
    }

    #[test]
    fn conflicts_are_rejected() {
        let f = VariantFlags {
            no_scm: true,
            no_gcn: true,
            ..Default::default()
        };
        assert!(matches!(apply_variant(&f), Err(Error::Config(_))));
        assert_eq!(apply_variant(&VariantFlags::default()).unwrap(), Architecture::default());
    }
}
