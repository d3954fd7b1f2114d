use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use birkhoff_core::{AveragingSpec, MixerKind, MixerSpec, SpectralShaping, SquashKind, SquashSpec};
use clap::{Args, ValueEnum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Tbp,
    Rtbp,
    Bvn,
    Kron,
    Sinkhorn,
}

impl From<KindArg> for MixerKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Tbp => MixerKind::Tbp,
            KindArg::Rtbp => MixerKind::Rtbp,
            KindArg::Bvn => MixerKind::Bvn,
            KindArg::Kron => MixerKind::Kron,
            KindArg::Sinkhorn => MixerKind::Sinkhorn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SquashArg {
    Sigmoid,
    Scaled,
    MarginedScaled,
    LinearClipped,
}

impl From<SquashArg> for SquashKind {
    fn from(k: SquashArg) -> Self {
        match k {
            SquashArg::Sigmoid => SquashKind::Sigmoid,
            SquashArg::Scaled => SquashKind::Scaled,
            SquashArg::MarginedScaled => SquashKind::MarginedScaled,
            SquashArg::LinearClipped => SquashKind::LinearClipped,
        }
    }
}

/// Flags describing one mixer. `--spec` replaces all of them.
#[derive(Args, Clone, Debug)]
pub struct MixerArgs {
    /// JSON mixer spec file.
    #[arg(long, conflicts_with_all = ["kind", "n", "factors"])]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tbp")]
    pub kind: KindArg,
    /// Matrix size. Implied by `--factors` for kron.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum, default_value = "sigmoid")]
    pub squash: SquashArg,
    #[arg(long, default_value_t = 4.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub rho: f64,
    /// Weight of the chart against the identity.
    #[arg(long, default_value_t = 1.0)]
    pub lazy_alpha: f64,
    /// Weight moved from the chart to the uniform matrix.
    #[arg(long, default_value_t = 0.0)]
    pub minorize_mu: f64,
    /// Uniform mixing applied after the other shaping.
    #[arg(long, default_value_t = 0.0)]
    pub post_delta: f64,
    /// Average the chart with its reversed-order conjugate.
    #[arg(long)]
    pub average: bool,
    /// Sinkhorn iterations.
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    /// Kronecker factor sizes, e.g. `2,2`.
    #[arg(long, value_delimiter = ',')]
    pub factors: Option<Vec<usize>>,
}

impl MixerArgs {
    pub fn to_spec(&self) -> Result<MixerSpec> {
        if let Some(path) = &self.spec {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let spec: MixerSpec = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            spec.validate()?;
            return Ok(spec);
        }
        let kind = MixerKind::from(self.kind);
        let mut spec = match (kind, &self.factors) {
            (MixerKind::Kron, Some(f)) => MixerSpec::kron(f.clone()),
            (MixerKind::Kron, None) => bail!("kron needs --factors"),
            (_, Some(_)) => bail!("--factors applies only to kron"),
            (_, None) => match self.n {
                Some(n) => MixerSpec::new(kind, n),
                None => bail!("--n is required"),
            },
        };
        if let Some(n) = self.n {
            if n != spec.n {
                bail!("--n {n} disagrees with factor product {}", spec.n);
            }
        }
        spec.squash = SquashSpec {
            kind: self.squash.into(),
            beta: self.beta,
            epsilon: self.epsilon,
            rho: self.rho,
        };
        spec.shaping = SpectralShaping {
            lazy_alpha: self.lazy_alpha,
            minorize_mu: self.minorize_mu,
            post_delta: self.post_delta,
        };
        if self.average {
            spec.averaging = Some(AveragingSpec::identity_and_reverse(spec.n));
        }
        spec.sinkhorn_iterations = self.iters;
        spec.validate()?;
        Ok(spec)
    }
}
