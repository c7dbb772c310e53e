use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which cached tensors a scheme compresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    K,
    V,
    KV,
}

/// How a single side (keys or values) is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Paradigm {
    Identity,
    Quantize { bits: u8 },
    Project { rank: usize },
    /// Project onto `rank` directions, then quantize the retained coordinates.
    Hybrid { rank: usize, bits: u8 },
}

impl Paradigm {
    pub fn bits(&self) -> Option<u8> {
        match *self {
            Paradigm::Quantize { bits } | Paradigm::Hybrid { bits, .. } => Some(bits),
            _ => None,
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match *self {
            Paradigm::Project { rank } | Paradigm::Hybrid { rank, .. } => Some(rank),
            _ => None,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Paradigm::Identity)
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if let Some(b) = self.bits() {
            if !(2..=16).contains(&b) {
                return Err(Error::Config(format!("bit width {b} outside [2, 16]")));
            }
        }
        if let Some(r) = self.rank() {
            if r == 0 || r > head_dim {
                return Err(Error::Config(format!("rank {r} outside [1, {head_dim}]")));
            }
        }
        Ok(())
    }

    /// Short label used in reports: `fp`, `quant`, `rank`, `hybrid`.
    pub fn family(&self) -> &'static str {
        match self {
            Paradigm::Identity => "fp",
            Paradigm::Quantize { .. } => "quant",
            Paradigm::Project { .. } => "rank",
            Paradigm::Hybrid { .. } => "hybrid",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Paradigm::Identity => write!(f, "fp"),
            Paradigm::Quantize { bits } => write!(f, "int{bits}"),
            Paradigm::Project { rank } => write!(f, "rank{rank}"),
            Paradigm::Hybrid { rank, bits } => write!(f, "rank{rank}-int{bits}"),
        }
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognized paradigm `{s}` (expected fp, intB, rankR or rankR-intB)"));
        if s == "fp" || s == "none" || s == "identity" {
            return Ok(Paradigm::Identity);
        }
        if let Some(b) = s.strip_prefix("int") {
            return Ok(Paradigm::Quantize { bits: b.parse().map_err(|_| bad())? });
        }
        if let Some(rest) = s.strip_prefix("rank") {
            return match rest.split_once("-int") {
                Some((r, b)) => Ok(Paradigm::Hybrid {
                    rank: r.parse().map_err(|_| bad())?,
                    bits: b.parse().map_err(|_| bad())?,
                }),
                None => Ok(Paradigm::Project { rank: rest.parse().map_err(|_| bad())? }),
            };
        }
        Err(bad())
    }
}

/// Coordinate system a side is compressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    /// The model's own coordinates (no rotation).
    Original,
    /// Top eigenvectors of `VᵀαᵀαV`.
    Theorem,
    /// Top eigenvectors of the raw Gram matrix.
    Pca,
    /// Output-projection-weighted Gram matrix.
    KqSvd,
    /// Entropy-weighted theorem metric.
    Entropy,
    /// Haar-random orthogonal basis.
    Random(u64),
}

impl Basis {
    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Basis::Original => write!(f, "original"),
            Basis::Theorem => write!(f, "theorem"),
            Basis::Pca => write!(f, "pca"),
            Basis::KqSvd => write!(f, "kqsvd"),
            Basis::Entropy => write!(f, "entropy"),
            Basis::Random(s) => write!(f, "random{s}"),
        }
    }
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "original" => Basis::Original,
            "theorem" => Basis::Theorem,
            "pca" => Basis::Pca,
            "kqsvd" => Basis::KqSvd,
            "entropy" => Basis::Entropy,
            _ => match s.strip_prefix("random") {
                Some("") => Basis::Random(0),
                Some(seed) => Basis::Random(
                    seed.parse().map_err(|_| Error::Config(format!("bad random basis seed in `{s}`")))?,
                ),
                None => return Err(Error::Config(format!("unrecognized basis `{s}`"))),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Key,
    Value,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Key => "key",
            Side::Value => "value",
        })
    }
}

/// Paradigm plus basis for one side of the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SideScheme {
    pub paradigm: Paradigm,
    pub basis: Basis,
}

impl SideScheme {
    pub const IDENTITY: SideScheme = SideScheme { paradigm: Paradigm::Identity, basis: Basis::Original };

    /// Uses the default basis for the paradigm: quantization stays in the
    /// original coordinates; projections use the theorem basis for values and
    /// PCA for keys.
    pub fn with_default_basis(side: Side, paradigm: Paradigm) -> Self {
        SideScheme { paradigm, basis: default_basis(side, paradigm) }
    }
}

fn default_basis(side: Side, paradigm: Paradigm) -> Basis {
    match (paradigm, side) {
        (Paradigm::Identity | Paradigm::Quantize { .. }, _) => Basis::Original,
        (_, Side::Value) => Basis::Theorem,
        (_, Side::Key) => Basis::Pca,
    }
}

/// Declarative description of one compressor.
///
/// Text form (also the scheme id used in reports): space-separated parts
/// `k=<paradigm>[@<basis>]`, `v=...`, `kv=...` and `exempt=<l1>,<l2>`, where
/// a paradigm is `fp`, `int<b>`, `rank<r>` or `rank<r>-int<b>`. The bare word
/// `identity` is the uncompressed cache. Examples: `v=int4`, `v=rank8`,
/// `v=rank16-int8`, `k=int8 v=int4`, `v=int4@random7`, `v=rank8 exempt=0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CompressionScheme {
    pub key: SideScheme,
    pub value: SideScheme,
    pub exempt_layers: BTreeSet<usize>,
}

impl Default for CompressionScheme {
    fn default() -> Self {
        Self::identity()
    }
}

impl CompressionScheme {
    pub fn identity() -> Self {
        Self { key: SideScheme::IDENTITY, value: SideScheme::IDENTITY, exempt_layers: BTreeSet::new() }
    }

    pub fn new(target: Target, paradigm: Paradigm, basis: Option<Basis>) -> Self {
        let side = |s: Side, on: bool| {
            if !on {
                return SideScheme::IDENTITY;
            }
            match basis {
                Some(b) => SideScheme { paradigm, basis: b },
                None => SideScheme::with_default_basis(s, paradigm),
            }
        };
        Self {
            key: side(Side::Key, matches!(target, Target::K | Target::KV)),
            value: side(Side::Value, matches!(target, Target::V | Target::KV)),
            exempt_layers: BTreeSet::new(),
        }
    }

    pub fn quantize_v(bits: u8) -> Self {
        Self::new(Target::V, Paradigm::Quantize { bits }, None)
    }

    pub fn project_v(rank: usize) -> Self {
        Self::new(Target::V, Paradigm::Project { rank }, None)
    }

    pub fn hybrid_v(rank: usize, bits: u8) -> Self {
        Self::new(Target::V, Paradigm::Hybrid { rank, bits }, None)
    }

    pub fn with_basis(mut self, basis: Basis) -> Self {
        if !self.key.paradigm.is_identity() {
            self.key.basis = basis;
        }
        if !self.value.paradigm.is_identity() {
            self.value.basis = basis;
        }
        self
    }

    pub fn with_exempt(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.exempt_layers.extend(layers);
        self
    }

    pub fn side(&self, side: Side) -> &SideScheme {
        match side {
            Side::Key => &self.key,
            Side::Value => &self.value,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.key.paradigm.is_identity() && self.value.paradigm.is_identity()
    }

    pub fn target(&self) -> Option<Target> {
        match (self.key.paradigm.is_identity(), self.value.paradigm.is_identity()) {
            (true, true) => None,
            (false, true) => Some(Target::K),
            (true, false) => Some(Target::V),
            (false, false) => Some(Target::KV),
        }
    }

    pub fn validate(&self, head_dim: usize, layers: usize) -> Result<()> {
        self.key.paradigm.validate(head_dim)?;
        self.value.paradigm.validate(head_dim)?;
        if let Some(&l) = self.exempt_layers.iter().find(|&&l| l >= layers) {
            return Err(Error::Config(format!("exempt layer {l} out of range for {layers} layers")));
        }
        Ok(())
    }

    /// Is `layer` compressed at all under this scheme?
    pub fn applies_to(&self, layer: usize) -> bool {
        !self.exempt_layers.contains(&layer)
    }

    /// Bases the scheme needs from calibration.
    pub fn required_bases(&self) -> Vec<(Side, Basis)> {
        [(Side::Key, self.key), (Side::Value, self.value)]
            .into_iter()
            .filter(|(_, s)| !s.paradigm.is_identity() && s.basis != Basis::Original)
            .map(|(side, s)| (side, s.basis))
            .collect()
    }
}

impl fmt::Display for CompressionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (label, side, s) in [("k", Side::Key, self.key), ("v", Side::Value, self.value)] {
            if s.paradigm.is_identity() {
                continue;
            }
            if s.basis == default_basis(side, s.paradigm) {
                parts.push(format!("{label}={}", s.paradigm));
            } else {
                parts.push(format!("{label}={}@{}", s.paradigm, s.basis));
            }
        }
        if parts.is_empty() {
            parts.push("identity".to_string());
        }
        if !self.exempt_layers.is_empty() {
            let l: Vec<String> = self.exempt_layers.iter().map(ToString::to_string).collect();
            parts.push(format!("exempt={}", l.join(",")));
        }
        write!(f, "{}", parts.join(" "))
    }
}

impl FromStr for CompressionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut scheme = CompressionScheme::identity();
        let mut seen_any = false;
        for part in s.split_whitespace() {
            seen_any = true;
            if part == "identity" {
                continue;
            }
            let (lhs, rhs) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("scheme part `{part}` is not `side=paradigm`")))?;
            if lhs == "exempt" {
                for l in rhs.split(',').filter(|x| !x.is_empty()) {
                    let layer = l.parse().map_err(|_| Error::Config(format!("bad exempt layer `{l}`")))?;
                    scheme.exempt_layers.insert(layer);
                }
                continue;
            }
            let (paradigm, basis) = match rhs.split_once('@') {
                Some((p, b)) => (p.parse::<Paradigm>()?, Some(b.parse::<Basis>()?)),
                None => (rhs.parse::<Paradigm>()?, None),
            };
            let build = |side: Side| match basis {
                Some(b) => SideScheme { paradigm, basis: b },
                None => SideScheme::with_default_basis(side, paradigm),
            };
            match lhs {
                "k" => scheme.key = build(Side::Key),
                "v" => scheme.value = build(Side::Value),
                "kv" => {
                    scheme.key = build(Side::Key);
                    scheme.value = build(Side::Value);
                }
                _ => return Err(Error::Config(format!("unknown scheme side `{lhs}` in `{part}`"))),
            }
        }
        if !seen_any {
            return Err(Error::Config("empty scheme".into()));
        }
        Ok(scheme)
    }
}
