use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Per-sample weighting of the unlabeled loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WeightPolicy {
    /// 1 on argmax agreement between the two classifiers, a reduced weight otherwise.
    Ncue,
    /// 1 on agreement, 0 otherwise.
    NcueZeroVariant,
    /// 1 when the discriminative confidence reaches the threshold, else 0.
    FixedThreshold(f64),
    /// Every sample weighted 1.
    None,
}

impl WeightPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightPolicy::FixedThreshold(t) if !(t > 0.0 && t <= 1.0) => {
                Err(Error::invalid(format!("threshold {t} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for WeightPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightPolicy::Ncue => write!(f, "ncue"),
            WeightPolicy::NcueZeroVariant => write!(f, "ncue-zero"),
            WeightPolicy::FixedThreshold(t) => write!(f, "threshold:{t}"),
            WeightPolicy::None => write!(f, "none"),
        }
    }
}

impl FromStr for WeightPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let p = match s.trim() {
            "ncue" => WeightPolicy::Ncue,
            "ncue-zero" => WeightPolicy::NcueZeroVariant,
            "none" => WeightPolicy::None,
            other => match other.strip_prefix("threshold:") {
                Some(t) => WeightPolicy::FixedThreshold(
                    t.parse()
                        .map_err(|_| Error::Config(format!("bad threshold in policy {other:?}")))?,
                ),
                None => return Err(Error::Config(format!("unknown weight policy {other:?}"))),
            },
        };
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }
}

impl TryFrom<String> for WeightPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WeightPolicy> for String {
    fn from(p: WeightPolicy) -> String {
        p.to_string()
    }
}

/// Weight given to a sample on which the two classifiers disagree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisagreementWeight {
    /// `min(max_y p_d, max_y p_n)`.
    #[default]
    MinOfMax,
    /// `min(p_d[c], p_n[c])` at the discriminative argmax `c`.
    MinAtDiscriminativeArgmax,
}

fn check_rows(name: &str, p: &Tensor) -> Result<()> {
    for i in 0..p.rows() {
        let s: f64 = p.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 || p.row(i).iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "{name} row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Per-sample weights for the unlabeled loss. Argmax ties resolve to the lowest class.
pub fn ncue_weight(
    p_d: &Tensor,
    p_n: &Tensor,
    policy: WeightPolicy,
    rule: DisagreementWeight,
) -> Result<Vec<f64>> {
    if p_d.shape() != p_n.shape() {
        return Err(Error::invalid(format!(
            "p_d {:?} vs p_n {:?}",
            p_d.shape(),
            p_n.shape()
        )));
    }
    check_rows("p_d", p_d)?;
    check_rows("p_n", p_n)?;
    policy.validate()?;
    let (arg_d, arg_n) = (p_d.argmax_rows(), p_n.argmax_rows());
    let (max_d, max_n) = (p_d.max_rows(), p_n.max_rows());
    Ok((0..p_d.rows())
        .map(|i| {
            let agree = arg_d[i] == arg_n[i];
            match policy {
                WeightPolicy::None => 1.0,
                WeightPolicy::FixedThreshold(t) => f64::from(u8::from(max_d[i] >= t)),
                WeightPolicy::NcueZeroVariant => f64::from(u8::from(agree)),
                WeightPolicy::Ncue if agree => 1.0,
                WeightPolicy::Ncue => match rule {
                    DisagreementWeight::MinOfMax => max_d[i].min(max_n[i]),
                    DisagreementWeight::MinAtDiscriminativeArgmax => {
                        let c = arg_d[i];
                        p_d.at(i, c).min(p_n.at(i, c))
                    }
                },
            }
        })
        .collect())
}
