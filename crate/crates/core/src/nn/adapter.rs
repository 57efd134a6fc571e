//! Adapter configuration: mixer design, wiring, attachment point and weight
//! initialisation. The adapter itself is a per-tap pointwise channel mixer
//! ("navigator") whose parameters live in the owning model.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seeded::normal;
use crate::tensor::Tensor;

use super::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterDesign {
    /// Full `[c,c,1,1]` channel mixer.
    Conventional,
    /// Factored mixer `[c,r,1,1] . [r,c,1,1]` with `r < c`.
    LowRank { rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connection {
    /// Output is `x + mixer(x)`; zero weights make the adapter transparent.
    Residual,
    /// Output is `mixer(x)` alone.
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    /// One mixer at the first backbone tap, inline in the trunk.
    BackboneShallow,
    /// One mixer at the last backbone tap.
    BackboneDeep,
    /// One mixer on the encoder output, off the backbone entirely.
    BetweenEncDec,
    /// One mixer at every backbone tap.
    AllTaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    Zero,
    /// Gaussian with fixed std 1e-2.
    Gaussian,
    /// Gaussian with std sqrt(2 / fan_in).
    Kaiming,
    /// Gaussian with std sqrt(2 / (fan_in + fan_out)).
    Xavier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub design: AdapterDesign,
    pub connection: Connection,
    pub placement: Placement,
    pub init: InitScheme,
}

impl AdapterSpec {
    /// Full configuration: conventional residual mixers at every tap.
    pub fn full() -> Self {
        Self {
            design: AdapterDesign::Conventional,
            connection: Connection::Residual,
            placement: Placement::AllTaps,
            init: InitScheme::Gaussian,
        }
    }

    /// Single deep-tap residual mixer, the usual single-adapter setup.
    pub fn deep_residual() -> Self {
        Self { placement: Placement::BackboneDeep, ..Self::full() }
    }

    /// Backbone tap indices this placement attaches to.
    pub fn taps(&self) -> &'static [usize] {
        match self.placement {
            Placement::BackboneShallow => &[0],
            Placement::BackboneDeep => &[2],
            Placement::BetweenEncDec => &[],
            Placement::AllTaps => &[0, 1, 2],
        }
    }

    pub fn on_encoder(&self) -> bool {
        self.placement == Placement::BetweenEncDec
    }

    /// Number of mixers this spec instantiates.
    pub fn mixer_count(&self) -> usize {
        self.taps().len() + usize::from(self.on_encoder())
    }
}

const GAUSSIAN_STD: f64 = 1e-2;

fn filled(dims: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| std * normal(rng)).collect()).expect("mixer shape")
}

/// Initialises the weight tensors of one mixer over `c` channels: one
/// `[c,c,1,1]` tensor for the conventional design, a down/up pair for the
/// low-rank design.
pub fn init_mixer(
    design: AdapterDesign,
    c: usize,
    init: InitScheme,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor>> {
    let std_for = |fan_in: usize, fan_out: usize| match init {
        InitScheme::Zero => 0.0,
        InitScheme::Gaussian => GAUSSIAN_STD,
        InitScheme::Kaiming => (2.0 / fan_in as f64).sqrt(),
        InitScheme::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    match design {
        AdapterDesign::Conventional => Ok(vec![filled(&[c, c, 1, 1], std_for(c, c), rng)]),
        AdapterDesign::LowRank { rank } => {
            if rank == 0 || rank >= c {
                return Err(NnError::BadLoraRank { rank, channels: c });
            }
            let down = filled(&[rank, c, 1, 1], std_for(c, rank), rng);
            let up = filled(&[c, rank, 1, 1], std_for(rank, c), rng);
            Ok(vec![down, up])
        }
    }
}

impl fmt::Display for AdapterDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Conventional => write!(f, "conventional"),
            Self::LowRank { rank } => write!(f, "low-rank:{rank}"),
        }
    }
}

impl FromStr for AdapterDesign {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "conventional" {
            return Ok(Self::Conventional);
        }
        if let Some(r) = s.strip_prefix("low-rank:") {
            let rank = r
                .parse()
                .map_err(|_| NnError::Checkpoint(format!("bad low-rank spec {s:?}")))?;
            return Ok(Self::LowRank { rank });
        }
        Err(NnError::Checkpoint(format!("unknown adapter design {s:?}")))
    }
}

impl fmt::Display for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Residual => "residual",
            Self::Serial => "serial",
        })
    }
}

impl FromStr for Connection {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(Self::Residual),
            "serial" => Ok(Self::Serial),
            _ => Err(NnError::Checkpoint(format!("unknown connection {s:?}"))),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BackboneShallow => "backbone-shallow",
            Self::BackboneDeep => "backbone-deep",
            Self::BetweenEncDec => "between-enc-dec",
            Self::AllTaps => "all-taps",
        })
    }
}

impl FromStr for Placement {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone-shallow" => Ok(Self::BackboneShallow),
            "backbone-deep" => Ok(Self::BackboneDeep),
            "between-enc-dec" => Ok(Self::BetweenEncDec),
            "all-taps" => Ok(Self::AllTaps),
            _ => Err(NnError::Checkpoint(format!("unknown placement {s:?}"))),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Zero => "zero",
            Self::Gaussian => "gaussian",
            Self::Kaiming => "kaiming",
            Self::Xavier => "xavier",
        })
    }
}

impl FromStr for InitScheme {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "gaussian" => Ok(Self::Gaussian),
            "kaiming" => Ok(Self::Kaiming),
            "xavier" => Ok(Self::Xavier),
            _ => Err(NnError::Checkpoint(format!("unknown init scheme {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded::phase_rng;

    #[test]
    fn placements_enumerate_expected_mixers() {
        assert_eq!(AdapterSpec::full().taps(), &[0, 1, 2]);
        assert_eq!(AdapterSpec::deep_residual().taps(), &[2]);
        let enc = AdapterSpec { placement: Placement::BetweenEncDec, ..AdapterSpec::full() };
        assert!(enc.taps().is_empty());
        assert!(enc.on_encoder());
        assert_eq!(enc.mixer_count(), 1);
        assert_eq!(AdapterSpec::full().mixer_count(), 3);
    }

    #[test]
    fn low_rank_requires_rank_below_channels() {
        let mut rng = phase_rng(0, "t");
        for bad in [0, 8, 9] {
            let r = init_mixer(AdapterDesign::LowRank { rank: bad }, 8, InitScheme::Gaussian, &mut rng);
            assert!(matches!(r, Err(NnError::BadLoraRank { .. })), "rank {bad} accepted");
        }
        let ok = init_mixer(AdapterDesign::LowRank { rank: 4 }, 8, InitScheme::Gaussian, &mut rng).unwrap();
        assert_eq!(ok[0].dims(), [4, 8, 1, 1]);
        assert_eq!(ok[1].dims(), [8, 4, 1, 1]);
    }

    #[test]
    fn zero_init_yields_zero_weights() {
        let mut rng = phase_rng(0, "t");
        let w = init_mixer(AdapterDesign::Conventional, 16, InitScheme::Zero, &mut rng).unwrap();
        assert!(w[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spec_strings_roundtrip() {
        for d in [AdapterDesign::Conventional, AdapterDesign::LowRank { rank: 3 }] {
            assert_eq!(d, d.to_string().parse().unwrap());
        }
        for c in [Connection::Residual, Connection::Serial] {
            assert_eq!(c, c.to_string().parse().unwrap());
        }
        for p in [
            Placement::BackboneShallow,
            Placement::BackboneDeep,
            Placement::BetweenEncDec,
            Placement::AllTaps,
        ] {
            assert_eq!(p, p.to_string().parse().unwrap());
        }
        for i in [InitScheme::Zero, InitScheme::Gaussian, InitScheme::Kaiming, InitScheme::Xavier] {
            assert_eq!(i, i.to_string().parse().unwrap());
        }
    }
}
