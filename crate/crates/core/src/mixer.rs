//! A single description of how to produce an `n × n` doubly stochastic
//! mixing matrix from a flat logit vector.

use serde::{Deserialize, Serialize};

use crate::baselines::{
    bvn_generic, kron_generic, sinkhorn_generic, KroneckerFactors, SinkhornReport, MAX_BVN_SIZE,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::{Dual, Real};
use crate::transport::{tangent_matrix, ChartParams};
use crate::variants::squash::{SquashKind, SquashSpec};
use crate::variants::{average_generic, AveragingSpec, ChartKind, SpectralShaping};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Tbp,
    Rtbp,
    Bvn,
    Kron,
    Sinkhorn,
}

impl MixerKind {
    pub fn is_exact(self) -> bool {
        self != MixerKind::Sinkhorn
    }

    fn chart(self) -> Option<ChartKind> {
        match self {
            MixerKind::Tbp => Some(ChartKind::Tbp),
            MixerKind::Rtbp => Some(ChartKind::Rtbp),
            _ => None,
        }
    }
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tbp" => Ok(MixerKind::Tbp),
            "rtbp" => Ok(MixerKind::Rtbp),
            "bvn" => Ok(MixerKind::Bvn),
            "kron" => Ok(MixerKind::Kron),
            "sinkhorn" => Ok(MixerKind::Sinkhorn),
            other => Err(Error::InvalidSpec(format!("unknown mixer kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerSpec {
    pub kind: MixerKind,
    pub n: usize,
    #[serde(default)]
    pub squash: SquashSpec,
    #[serde(default)]
    pub shaping: SpectralShaping,
    #[serde(default)]
    pub averaging: Option<AveragingSpec>,
    #[serde(default = "default_iterations")]
    pub sinkhorn_iterations: usize,
    #[serde(default)]
    pub kron_factors: Vec<usize>,
}

fn default_iterations() -> usize {
    crate::baselines::DEFAULT_SINKHORN_ITERATIONS
}

/// A mixer matrix, with the Sinkhorn residuals when it is approximate.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerOutput {
    pub matrix: Matrix,
    pub sinkhorn: Option<SinkhornReport>,
}

impl MixerSpec {
    pub fn new(kind: MixerKind, n: usize) -> Self {
        Self {
            kind,
            n,
            squash: SquashSpec::default(),
            shaping: SpectralShaping::default(),
            averaging: None,
            sinkhorn_iterations: default_iterations(),
            kron_factors: Vec::new(),
        }
    }

    pub fn tbp(n: usize) -> Self {
        Self::new(MixerKind::Tbp, n)
    }

    pub fn rtbp(n: usize) -> Self {
        Self::new(MixerKind::Rtbp, n)
    }

    pub fn sinkhorn(n: usize, iterations: usize) -> Self {
        Self {
            sinkhorn_iterations: iterations,
            ..Self::new(MixerKind::Sinkhorn, n)
        }
    }

    pub fn kron(factor_sizes: Vec<usize>) -> Self {
        Self {
            n: factor_sizes.iter().product(),
            kron_factors: factor_sizes,
            ..Self::new(MixerKind::Kron, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("mixer size must be positive".into()));
        }
        self.squash.validate()?;
        self.shaping.validate()?;
        if let Some(avg) = &self.averaging {
            if self.kind.chart().is_none() {
                return Err(Error::InvalidSpec(
                    "averaging applies only to tbp and rtbp".into(),
                ));
            }
            avg.validate()?;
            if avg.permutations.iter().any(|p| p.len() != self.n) {
                return Err(Error::InvalidSpec(format!(
                    "averaging permutations must have length {}",
                    self.n
                )));
            }
        }
        match self.kind {
            MixerKind::Bvn if self.n > MAX_BVN_SIZE => Err(Error::TooLarge {
                n: self.n,
                max: MAX_BVN_SIZE,
            }),
            MixerKind::Kron => {
                KroneckerFactors::uniform(self.kron_factors.clone()).validate()?;
                let product: usize = self.kron_factors.iter().product();
                if product != self.n {
                    return Err(Error::InvalidSpec(format!(
                        "factor sizes {:?} multiply to {product}, not {}",
                        self.kron_factors, self.n
                    )));
                }
                Ok(())
            }
            MixerKind::Sinkhorn if self.sinkhorn_iterations == 0 => Err(Error::InvalidSpec(
                "sinkhorn needs at least one iteration".into(),
            )),
            _ => Ok(()),
        }
    }

    fn charts(&self) -> usize {
        self.averaging.as_ref().map_or(1, AveragingSpec::len)
    }

    /// Length of the logit vector [`MixerSpec::build`] expects.
    pub fn logit_count(&self) -> usize {
        let n = self.n;
        match self.kind {
            MixerKind::Tbp | MixerKind::Rtbp => self.charts() * ChartParams::expected_len(n, n),
            MixerKind::Bvn => (1..=n).product(),
            MixerKind::Kron => KroneckerFactors::logit_count(&self.kron_factors),
            MixerKind::Sinkhorn => n * n,
        }
    }

    /// Logits giving the usual starting mixer: chart midpoints (`0.5` for the
    /// clipped linear squash), and near-identity for the baselines.
    pub fn init_logits(&self) -> Vec<f64> {
        match self.kind {
            MixerKind::Tbp | MixerKind::Rtbp => {
                let v = if self.squash.kind == SquashKind::LinearClipped {
                    0.5
                } else {
                    0.0
                };
                vec![v; self.logit_count()]
            }
            MixerKind::Bvn => identity_first(self.logit_count()),
            MixerKind::Kron => self
                .kron_factors
                .iter()
                .flat_map(|&s| identity_first((1..=s).product()))
                .collect(),
            MixerKind::Sinkhorn => {
                crate::baselines::identity_biased_logits(self.n, -8.0).into_data()
            }
        }
    }

    pub(crate) fn build_generic<S: Real>(&self, logits: &[S]) -> Result<Matrix<S>> {
        self.validate()?;
        let expected = self.logit_count();
        if logits.len() != expected {
            return Err(Error::ParamCount {
                expected,
                found: logits.len(),
            });
        }
        let n = self.n;
        let raw = match self.kind {
            MixerKind::Tbp | MixerKind::Rtbp => {
                let chart = self.kind.chart().expect("chart kind");
                let ones = vec![1.0; n];
                match &self.averaging {
                    Some(avg) => {
                        let per = ChartParams::expected_len(n, n);
                        let chunks: Vec<&[S]> = if per == 0 {
                            vec![&logits[..0]; avg.len()]
                        } else {
                            logits.chunks(per).collect()
                        };
                        average_generic(&ones, &ones, &chunks, avg, chart, &self.squash)?
                    }
                    None => {
                        let ones: Vec<S> = ones.into_iter().map(S::constant).collect();
                        chart.fill(&ones, &ones, logits, &self.squash)?
                    }
                }
            }
            MixerKind::Bvn => bvn_generic(n, logits)?,
            MixerKind::Kron => kron_generic(&self.kron_factors, logits)?,
            MixerKind::Sinkhorn => sinkhorn_generic(
                &Matrix::from_vec(n, n, logits.to_vec())?,
                self.sinkhorn_iterations,
            )?,
        };
        Ok(self.shaping.apply_generic(&raw))
    }

    pub fn build(&self, logits: &[f64]) -> Result<MixerOutput> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixer logits"));
        }
        let matrix = self.build_generic(logits)?;
        let sinkhorn = (self.kind == MixerKind::Sinkhorn).then(|| {
            let ones = vec![1.0; self.n];
            let (row_residual, col_residual) = matrix.margin_deviation(&ones, &ones);
            SinkhornReport {
                row_residual,
                col_residual,
                iterations: self.sinkhorn_iterations,
            }
        });
        Ok(MixerOutput { matrix, sinkhorn })
    }

    /// `∂H_ij / ∂logit_k`, rows in row-major cell order.
    pub fn jacobian(&self, logits: &[f64]) -> Result<Matrix> {
        let x = self.build_generic(&Dual::variables(logits))?;
        Ok(tangent_matrix(&x, logits.len()))
    }
}

fn identity_first(len: usize) -> Vec<f64> {
    (0..len).map(|k| if k == 0 { 0.0 } else { -8.0 }).collect()
}
