//! Sweep description: a `key = value` file plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flash_lcsm::{BlockKind, SamplerSpec, TauImplKind};

use crate::{BenchError, Result};

/// One benchmarked execution strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Lazy,
    Eager,
    RelaxedDirect,
    RelaxedFft,
    RelaxedHybrid,
    Generic,
    DataDependent,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Self::Lazy,
        Self::Eager,
        Self::RelaxedDirect,
        Self::RelaxedFft,
        Self::RelaxedHybrid,
        Self::Generic,
        Self::DataDependent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lazy => "lazy",
            Self::Eager => "eager",
            Self::RelaxedDirect => "relaxed-direct",
            Self::RelaxedFft => "relaxed-fft",
            Self::RelaxedHybrid => "relaxed-hybrid",
            Self::Generic => "generic",
            Self::DataDependent => "data-dependent",
        }
    }

    pub fn is_relaxed(self) -> bool {
        matches!(
            self,
            Self::RelaxedDirect | Self::RelaxedFft | Self::RelaxedHybrid
        )
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == t)
            .ok_or_else(|| BenchError::Usage(format!("unknown mode {s:?}")))
    }
}

/// τ selection for `relaxed-hybrid` and `generic`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImplChoice {
    /// The dispatch table (loaded, calibrated or default).
    Hybrid,
    Forced(TauImplKind),
}

impl ImplChoice {
    pub fn name(self) -> &'static str {
        match self {
            Self::Hybrid => "hybrid",
            Self::Forced(k) => k.name(),
        }
    }
}

impl FromStr for ImplChoice {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("hybrid") {
            return Ok(Self::Hybrid);
        }
        s.parse::<TauImplKind>()
            .map(Self::Forced)
            .map_err(|e| BenchError::Usage(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub lanes: Vec<usize>,
    pub layers: Vec<usize>,
    pub channels: Vec<usize>,
    pub horizons: Vec<usize>,
    pub modes: Vec<Mode>,
    pub implementation: ImplChoice,
    /// Empty means all MLP.
    pub block_kinds: Vec<BlockKind>,
    pub sampler: SamplerSpec,
    pub seed: u64,
    pub reps: usize,
    pub warmup: usize,
    pub layer_parallel: bool,
    pub half_memory: bool,
    pub deterministic: bool,
    pub max_parallel_tile: Option<usize>,
    pub output: Option<PathBuf>,
    pub dispatch_table: Option<PathBuf>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            lanes: vec![1],
            layers: vec![4],
            channels: vec![64],
            horizons: vec![4096],
            modes: vec![Mode::Lazy, Mode::RelaxedHybrid],
            implementation: ImplChoice::Hybrid,
            block_kinds: Vec::new(),
            sampler: SamplerSpec::Echo,
            seed: 0,
            reps: 4,
            warmup: 2,
            layer_parallel: false,
            half_memory: false,
            deterministic: false,
            max_parallel_tile: None,
            output: None,
            dispatch_table: None,
        }
    }
}

fn usage(msg: impl Into<String>) -> BenchError {
    BenchError::Usage(msg.into())
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| usage(format!("{key}: cannot parse {s:?}")))
        })
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(usage(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| usage(format!("{key}: cannot parse {value:?}")))
}

impl SweepSpec {
    /// Apply one `key = value` setting. Keys are case-insensitive except
    /// the single-letter shape keys, which accept either case.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        match k.to_ascii_lowercase().as_str() {
            "b" => self.lanes = parse_list(k, value)?,
            "m" => self.layers = parse_list(k, value)?,
            "d" => self.channels = parse_list(k, value)?,
            "l" => self.horizons = parse_list(k, value)?,
            "mode" | "modes" => {
                self.modes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "impl" => self.implementation = value.parse()?,
            "block_kinds" => {
                self.block_kinds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<BlockKind>().map_err(|e| usage(e.to_string())))
                    .collect::<Result<_>>()?
            }
            "sampler" => {
                self.sampler = value
                    .trim()
                    .parse()
                    .map_err(|e: flash_lcsm::Error| usage(e.to_string()))?
            }
            "seed" => self.seed = parse_one(k, value)?,
            "reps" | "repetitions" => self.reps = parse_one(k, value)?,
            "warmup" => self.warmup = parse_one(k, value)?,
            "layer_parallel" => self.layer_parallel = parse_bool(k, value)?,
            "half_memory" => self.half_memory = parse_bool(k, value)?,
            "deterministic" => self.deterministic = parse_bool(k, value)?,
            "max_parallel_tile" => self.max_parallel_tile = Some(parse_one(k, value)?),
            "output" => self.output = Some(PathBuf::from(value.trim())),
            "dispatch_table" => self.dispatch_table = Some(PathBuf::from(value.trim())),
            _ => return Err(usage(format!("unknown config key {k:?}"))),
        }
        Ok(())
    }

    /// Parse a config file body. Blank lines and `#` comments are skipped.
    pub fn parse_config(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load_config(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.parse_config(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(usage("at least one mode is required"));
        }
        for (name, list) in [
            ("B", &self.lanes),
            ("M", &self.layers),
            ("D", &self.channels),
            ("L", &self.horizons),
        ] {
            if list.is_empty() {
                return Err(usage(format!("{name} needs at least one value")));
            }
            if list.contains(&0) {
                return Err(usage(format!("{name} values must be positive")));
            }
        }
        if let Some(l) = self
            .horizons
            .iter()
            .find(|l| !l.is_power_of_two() || **l < 2)
        {
            return Err(usage(format!("L = {l} is not a power of two >= 2")));
        }
        if self.reps == 0 {
            return Err(usage("reps must be at least 1"));
        }
        if matches!(self.max_parallel_tile, Some(0)) {
            return Err(usage("max_parallel_tile must be positive"));
        }
        Ok(())
    }

    /// Block kinds for `m` layers: the configured list cycled, or all MLP.
    pub fn kinds_for(&self, m: usize) -> Vec<BlockKind> {
        if self.block_kinds.is_empty() {
            vec![BlockKind::Mlp; m]
        } else {
            self.block_kinds.iter().copied().cycle().take(m).collect()
        }
    }
}
