//! Policy selection and the `name:a+b` notation used on the command line and
//! in manifests.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CormError;

/// Sentinel for an unbounded window or recent size, written `inf`.
pub const UNBOUNDED: usize = usize::MAX;

pub const POLICY_NAMES: &[&str] = &[
    "full",
    "streaming:SINK+RECENT",
    "h2o:HEAVY+RECENT",
    "scissorhands:BUDGET+RECENT[@WINDOW]",
    "tova:BUDGET",
    "corm:W+R",
    "corm-gqa:W+R@GROUP",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicyConfig {
    Full,
    StreamingLlm {
        sink: usize,
        recent: usize,
    },
    H2o {
        heavy: usize,
        recent: usize,
    },
    Scissorhands {
        budget: usize,
        window: usize,
        recent: usize,
    },
    Tova {
        budget: usize,
    },
    Corm {
        w: usize,
        r: usize,
    },
    CormGqa {
        w: usize,
        r: usize,
        group_size: usize,
    },
}

/// Denominator of the importance threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `score >= 1/t` with `t` the absolute step.
    #[default]
    AbsoluteStep,
    /// `score >= 1/n` with `n` the number of entries in the row.
    CacheSize,
}

impl FromStr for ThresholdMode {
    type Err = CormError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "step" | "absolute_step" => Ok(ThresholdMode::AbsoluteStep),
            "cache" | "cache_size" => Ok(ThresholdMode::CacheSize),
            other => Err(CormError::InvalidPolicy(format!(
                "unknown threshold mode {other:?}, expected step or cache"
            ))),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), CormError> {
        let sizes: &[(&str, usize)] = match self {
            PolicyConfig::Full => &[],
            PolicyConfig::StreamingLlm { sink, recent } => &[("sink", *sink), ("recent", *recent)],
            PolicyConfig::H2o { heavy, recent } => &[("heavy", *heavy), ("recent", *recent)],
            PolicyConfig::Scissorhands {
                budget,
                window,
                recent,
            } => &[
                ("budget", *budget),
                ("window", *window),
                ("recent", *recent),
            ],
            PolicyConfig::Tova { budget } => &[("budget", *budget)],
            PolicyConfig::Corm { w, r } => &[("w", *w), ("r", *r)],
            PolicyConfig::CormGqa { w, r, group_size } => {
                &[("w", *w), ("r", *r), ("group_size", *group_size)]
            }
        };
        for (name, value) in sizes {
            if *value < 1 {
                return Err(CormError::InvalidPolicy(format!(
                    "{name} must be at least 1 in {self}"
                )));
            }
        }
        Ok(())
    }

    /// Rows of the importance message the policy needs to keep.
    pub fn message_window(&self) -> usize {
        match self {
            PolicyConfig::Corm { w, .. } | PolicyConfig::CormGqa { w, .. } => *w,
            PolicyConfig::Scissorhands { window, .. } => *window,
            _ => 0,
        }
    }

    /// Largest cache a fixed-budget policy may hold, `None` for budget-free
    /// policies.
    pub fn size_bound(&self) -> Option<usize> {
        match *self {
            PolicyConfig::StreamingLlm { sink, recent } => Some(sink.saturating_add(recent)),
            PolicyConfig::H2o { heavy, recent } => Some(heavy.saturating_add(recent)),
            PolicyConfig::Scissorhands { budget, recent, .. } => {
                Some(budget.saturating_add(recent))
            }
            PolicyConfig::Tova { budget } => Some(budget),
            _ => None,
        }
    }

    /// Directory-friendly name, e.g. `corm-8+8`.
    pub fn slug(&self) -> String {
        self.to_string().replace([':', '@'], "-")
    }
}

fn fmt_size(n: usize) -> String {
    if n == UNBOUNDED {
        "inf".to_string()
    } else {
        n.to_string()
    }
}

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = fmt_size;
        match *self {
            PolicyConfig::Full => write!(f, "full"),
            PolicyConfig::StreamingLlm { sink, recent } => {
                write!(f, "streaming:{}+{}", s(sink), s(recent))
            }
            PolicyConfig::H2o { heavy, recent } => write!(f, "h2o:{}+{}", s(heavy), s(recent)),
            PolicyConfig::Scissorhands {
                budget,
                window,
                recent,
            } => {
                write!(f, "scissorhands:{}+{}", s(budget), s(recent))?;
                if window != recent {
                    write!(f, "@{}", s(window))?;
                }
                Ok(())
            }
            PolicyConfig::Tova { budget } => write!(f, "tova:{}", s(budget)),
            PolicyConfig::Corm { w, r } => write!(f, "corm:{}+{}", s(w), s(r)),
            PolicyConfig::CormGqa { w, r, group_size } => {
                write!(f, "corm-gqa:{}+{}@{}", s(w), s(r), group_size)
            }
        }
    }
}

fn parse_size(text: &str, full: &str) -> Result<usize, CormError> {
    let text = text.trim();
    if text.eq_ignore_ascii_case("inf") {
        return Ok(UNBOUNDED);
    }
    text.parse::<usize>()
        .map_err(|_| CormError::InvalidPolicy(format!("bad size {text:?} in {full:?}")))
}

fn parse_pair(args: &str, full: &str) -> Result<(usize, usize), CormError> {
    let (a, b) = args
        .split_once('+')
        .ok_or_else(|| CormError::InvalidPolicy(format!("expected A+B arguments in {full:?}")))?;
    Ok((parse_size(a, full)?, parse_size(b, full)?))
}

impl FromStr for PolicyConfig {
    type Err = CormError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let text = text.trim();
        let (name, args) = match text.split_once(':') {
            Some((n, a)) => (n.trim().to_ascii_lowercase(), Some(a)),
            None => (text.to_ascii_lowercase(), None),
        };
        let need = || {
            args.ok_or_else(|| {
                CormError::InvalidPolicy(format!("{name} needs arguments, e.g. {name}:8+8"))
            })
        };
        let policy = match name.as_str() {
            "full" => {
                if args.is_some() {
                    return Err(CormError::InvalidPolicy("full takes no arguments".into()));
                }
                PolicyConfig::Full
            }
            "streaming" | "streamingllm" | "streamllm" => {
                let (sink, recent) = parse_pair(need()?, text)?;
                PolicyConfig::StreamingLlm { sink, recent }
            }
            "h2o" => {
                let (heavy, recent) = parse_pair(need()?, text)?;
                PolicyConfig::H2o { heavy, recent }
            }
            "scissorhands" => {
                let args = need()?;
                let (pair, window) = match args.split_once('@') {
                    Some((p, w)) => (p, Some(parse_size(w, text)?)),
                    None => (args, None),
                };
                let (budget, recent) = parse_pair(pair, text)?;
                PolicyConfig::Scissorhands {
                    budget,
                    window: window.unwrap_or(recent),
                    recent,
                }
            }
            "tova" => PolicyConfig::Tova {
                budget: parse_size(need()?, text)?,
            },
            "corm" => {
                let (w, r) = parse_pair(need()?, text)?;
                PolicyConfig::Corm { w, r }
            }
            "corm-gqa" | "corm_gqa" | "gqa-corm" => {
                let args = need()?;
                let (pair, group) = args.split_once('@').ok_or_else(|| {
                    CormError::InvalidPolicy(format!("expected W+R@GROUP in {text:?}"))
                })?;
                let (w, r) = parse_pair(pair, text)?;
                PolicyConfig::CormGqa {
                    w,
                    r,
                    group_size: parse_size(group, text)?,
                }
            }
            other => {
                return Err(CormError::InvalidPolicy(format!(
                    "unknown policy {other:?}; valid policies: {}",
                    POLICY_NAMES.join(", ")
                )))
            }
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl TryFrom<String> for PolicyConfig {
    type Error = CormError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<PolicyConfig> for String {
    fn from(p: PolicyConfig) -> String {
        p.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_reference_configurations() {
        assert_eq!(
            "corm:256+256".parse::<PolicyConfig>().unwrap(),
            PolicyConfig::Corm { w: 256, r: 256 }
        );
        assert_eq!(
            "streaming:4+1020".parse::<PolicyConfig>().unwrap(),
            PolicyConfig::StreamingLlm {
                sink: 4,
                recent: 1020
            }
        );
        assert_eq!(
            "h2o:768+256".parse::<PolicyConfig>().unwrap(),
            PolicyConfig::H2o {
                heavy: 768,
                recent: 256
            }
        );
        assert_eq!(
            "scissorhands:768+256".parse::<PolicyConfig>().unwrap(),
            PolicyConfig::Scissorhands {
                budget: 768,
                window: 256,
                recent: 256
            }
        );
        assert_eq!(
            "scissorhands:768+256@128".parse::<PolicyConfig>().unwrap(),
            PolicyConfig::Scissorhands {
                budget: 768,
                window: 128,
                recent: 256
            }
        );
        assert_eq!(
            "tova:512".parse::<PolicyConfig>().unwrap(),
            PolicyConfig::Tova { budget: 512 }
        );
        assert_eq!(
            "corm:inf+inf".parse::<PolicyConfig>().unwrap(),
            PolicyConfig::Corm {
                w: UNBOUNDED,
                r: UNBOUNDED
            }
        );
        assert_eq!(
            "corm-gqa:8+8@4".parse::<PolicyConfig>().unwrap(),
            PolicyConfig::CormGqa {
                w: 8,
                r: 8,
                group_size: 4
            }
        );
        assert_eq!("FULL".parse::<PolicyConfig>().unwrap(), PolicyConfig::Full);
    }

    #[test]
    fn rejects_bad_input() {
        let err = "lru:4".parse::<PolicyConfig>().unwrap_err().to_string();
        assert!(err.contains("valid policies") && err.contains("corm:W+R"));
        assert!("corm:0+8".parse::<PolicyConfig>().is_err());
        assert!("corm:8".parse::<PolicyConfig>().is_err());
        assert!("corm".parse::<PolicyConfig>().is_err());
        assert!("h2o:a+b".parse::<PolicyConfig>().is_err());
        assert!("full:3".parse::<PolicyConfig>().is_err());
    }

    #[test]
    fn slug_is_path_safe() {
        assert_eq!(PolicyConfig::Corm { w: 8, r: 8 }.slug(), "corm-8+8");
        assert_eq!(
            PolicyConfig::CormGqa {
                w: 8,
                r: 4,
                group_size: 2
            }
            .slug(),
            "corm-gqa-8+4-2"
        );
    }

    fn any_policy() -> impl Strategy<Value = PolicyConfig> {
        let size = prop_oneof![1usize..5000, Just(UNBOUNDED)];
        prop_oneof![
            Just(PolicyConfig::Full),
            (size.clone(), size.clone())
                .prop_map(|(sink, recent)| PolicyConfig::StreamingLlm { sink, recent }),
            (size.clone(), size.clone())
                .prop_map(|(heavy, recent)| PolicyConfig::H2o { heavy, recent }),
            (size.clone(), size.clone(), size.clone()).prop_map(|(budget, window, recent)| {
                PolicyConfig::Scissorhands {
                    budget,
                    window,
                    recent,
                }
            }),
            size.clone()
                .prop_map(|budget| PolicyConfig::Tova { budget }),
            (size.clone(), size.clone()).prop_map(|(w, r)| PolicyConfig::Corm { w, r }),
            (size.clone(), size, 1usize..16).prop_map(|(w, r, group_size)| PolicyConfig::CormGqa {
                w,
                r,
                group_size
            }),
        ]
    }

    proptest! {
        #[test]
        fn display_parses_back(p in any_policy()) {
            prop_assert_eq!(p.to_string().parse::<PolicyConfig>().unwrap(), p);
        }
    }
}
