//! Synthetic next-token samplers.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::rng::stream_rng;

pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerSpec {
    /// `a_{0,i+1} = a_{M,i}`.
    Echo,
    /// Echo plus independent Gaussian noise per coordinate.
    EchoNoise { sigma: f64 },
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Echo => f.write_str("echo"),
            Self::EchoNoise { sigma } => write!(f, "echo_noise:{sigma}"),
        }
    }
}

impl FromStr for SamplerSpec {
    type Err = Error;

    /// `echo`, `echo_noise` or `echo_noise:<sigma>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        match (name, arg) {
            ("echo", None) => Ok(Self::Echo),
            ("echo_noise", None) => Ok(Self::EchoNoise {
                sigma: DEFAULT_NOISE_SIGMA,
            }),
            ("echo_noise", Some(a)) => {
                let sigma: f64 = a
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad noise sigma {a:?}")))?;
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(Error::Parse(format!(
                        "noise sigma must be >= 0, got {sigma}"
                    )));
                }
                Ok(Self::EchoNoise { sigma })
            }
            _ => Err(Error::Parse(format!("unknown sampler {s:?}"))),
        }
    }
}

/// Produces `a_{0,i+1}` from `a_{M,i}`, optionally replaying a prompt for
/// the first positions.
#[derive(Debug, Clone)]
pub struct Sampler {
    spec: SamplerSpec,
    rng: ChaCha8Rng,
    prompt: Vec<f64>,
    prompt_len: usize,
    width: usize,
}

impl Sampler {
    pub fn new(spec: SamplerSpec, seed: u64) -> Self {
        Self {
            spec,
            rng: stream_rng(seed, 4),
            prompt: Vec::new(),
            prompt_len: 0,
            width: 0,
        }
    }

    pub fn echo() -> Self {
        Self::new(SamplerSpec::Echo, 0)
    }

    /// Serve `prompt` (lane-major `[lane][position][channel]`, `prompt_len`
    /// positions of `width` channels) for positions `1 ..= prompt_len`.
    pub fn with_prompt(mut self, prompt: &[f64], prompt_len: usize, width: usize) -> Result<Self> {
        if width == 0 || prompt_len == 0 || !prompt.len().is_multiple_of(prompt_len * width) {
            return Err(invalid(format!(
                "prompt of {} values is not lanes x {prompt_len} x {width}",
                prompt.len()
            )));
        }
        self.prompt = prompt.to_vec();
        self.prompt_len = prompt_len;
        self.width = width;
        Ok(self)
    }

    pub fn spec(&self) -> SamplerSpec {
        self.spec
    }

    /// Write the embedding of `position` for `lane` into `out`; `last` is the
    /// top-level output at `position - 1`.
    pub fn next_token(&mut self, position: usize, lane: usize, last: &[f64], out: &mut [f64]) {
        if position <= self.prompt_len {
            let o = (lane * self.prompt_len + position - 1) * self.width;
            out.copy_from_slice(&self.prompt[o..o + self.width]);
            return;
        }
        out.copy_from_slice(last);
        if let SamplerSpec::EchoNoise { sigma } = self.spec {
            for v in out.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut self.rng);
                *v += sigma * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_specs() {
        assert_eq!("echo".parse::<SamplerSpec>().unwrap(), SamplerSpec::Echo);
        assert_eq!(
            "echo_noise".parse::<SamplerSpec>().unwrap(),
            SamplerSpec::EchoNoise { sigma: 0.01 }
        );
        assert_eq!(
            "echo_noise:0.5".parse::<SamplerSpec>().unwrap(),
            SamplerSpec::EchoNoise { sigma: 0.5 }
        );
        assert!("echo_noise:-1".parse::<SamplerSpec>().is_err());
        assert!("greedy".parse::<SamplerSpec>().is_err());
    }

    #[test]
    fn prompt_then_echo() {
        let prompt = [1.0, 2.0, 3.0, 4.0];
        let mut s = Sampler::echo().with_prompt(&prompt, 2, 1).unwrap();
        let mut out = [0.0];
        s.next_token(2, 1, &[9.0], &mut out);
        assert_eq!(out, [4.0]);
        s.next_token(3, 0, &[9.0], &mut out);
        assert_eq!(out, [9.0]);
    }

    #[test]
    fn noise_is_seeded() {
        let mut a = Sampler::new(SamplerSpec::EchoNoise { sigma: 0.1 }, 3);
        let mut b = Sampler::new(SamplerSpec::EchoNoise { sigma: 0.1 }, 3);
        let (mut x, mut y) = ([0.0; 4], [0.0; 4]);
        a.next_token(5, 0, &[1.0; 4], &mut x);
        b.next_token(5, 0, &[1.0; 4], &mut y);
        assert_eq!(x, y);
        assert_ne!(x, [1.0; 4]);
    }
}
