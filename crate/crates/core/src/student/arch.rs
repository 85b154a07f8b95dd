use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::STUDENT_PLANES;

pub const CONV_LAYERS: usize = 7;

/// Layer widths and sizes. The topology is fixed: conv×2, pool, conv×2,
/// pool, conv×3, then a fully connected layer over
/// `[conv7, input resized, conv4 resized]`. Conv4 is the last layer of the
/// stage between the two pools, so the skip carries mid-level features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_size: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub widths: [usize; CONV_LAYERS],
    /// 1-based conv layers followed by 2×2 max pooling.
    pub pool_after: [usize; 2],
    /// 1-based conv layer whose (post-ReLU) output feeds the skip.
    pub skip_from: usize,
}

impl Architecture {
    pub fn new(input_size: usize, widths: [usize; CONV_LAYERS]) -> Result<Self> {
        let arch = Self {
            input_size,
            in_channels: STUDENT_PLANES,
            kernel: 3,
            widths,
            pool_after: [2, 4],
            skip_from: 4,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("architecture: {m}")));
        if self.input_size == 0 || !self.input_size.is_multiple_of(4) {
            return fail(format!("input size {} must be a positive multiple of 4", self.input_size));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return fail(format!("kernel {} must be odd", self.kernel));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return fail("channel counts must be positive".into());
        }
        if self.pool_after != [2, 4] || self.skip_from != 4 {
            return fail(format!(
                "unsupported topology (pool after {:?}, skip from {}); only pooling after conv 2 and 4 with the skip from conv 4 is implemented",
                self.pool_after, self.skip_from
            ));
        }
        Ok(())
    }

    pub fn output_side(&self) -> usize {
        self.input_size / 4
    }

    pub fn output_len(&self) -> usize {
        self.output_side() * self.output_side()
    }

    /// (input channels, output channels) of conv layer `l` (0-based).
    pub fn conv_io(&self, l: usize) -> (usize, usize) {
        let c_in = if l == 0 { self.in_channels } else { self.widths[l - 1] };
        (c_in, self.widths[l])
    }

    /// Spatial side length at conv layer `l` (0-based).
    pub fn conv_side(&self, l: usize) -> usize {
        match l {
            0 | 1 => self.input_size,
            2 | 3 => self.input_size / 2,
            _ => self.input_size / 4,
        }
    }

    pub fn skip_channels(&self) -> usize {
        self.widths[self.skip_from - 1]
    }

    pub fn fc_inputs(&self) -> usize {
        self.output_len() * (self.widths[CONV_LAYERS - 1] + self.in_channels + self.skip_channels())
    }

    pub fn param_count(&self) -> usize {
        let conv: usize = (0..CONV_LAYERS)
            .map(|l| {
                let (i, o) = self.conv_io(l);
                o * i * self.kernel * self.kernel + o
            })
            .sum();
        conv + self.fc_inputs() * self.output_len() + self.output_len()
    }

    /// Flat integer encoding stored in checkpoints.
    pub fn to_codes(&self) -> Vec<usize> {
        let mut v = vec![self.input_size, self.in_channels, self.kernel];
        v.extend_from_slice(&self.widths);
        v.extend_from_slice(&self.pool_after);
        v.push(self.skip_from);
        v
    }

    pub fn from_codes(codes: &[usize]) -> Result<Self> {
        if codes.len() != 13 {
            return Err(Error::Config(format!(
                "architecture code has {} entries, expected 13",
                codes.len()
            )));
        }
        let mut widths = [0; CONV_LAYERS];
        widths.copy_from_slice(&codes[3..10]);
        let arch = Self {
            input_size: codes[0],
            in_channels: codes[1],
            kernel: codes[2],
            widths,
            pool_after: [codes[10], codes[11]],
            skip_from: codes[12],
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 32, 32, 64, 64, 128, 128, 128 channels at 128×128.
    Paper,
    /// 8, 8, 16, 16, 32, 32, 32 channels at 128×128.
    Desk,
    /// 8×8 input with a handful of channels, for gradient checks.
    Tiny,
}

impl Preset {
    pub fn architecture(self) -> Architecture {
        let (size, widths) = match self {
            Preset::Paper => (128, [32, 32, 64, 64, 128, 128, 128]),
            Preset::Desk => (128, [8, 8, 16, 16, 32, 32, 32]),
            Preset::Tiny => (8, [2, 3, 3, 4, 4, 3, 2]),
        };
        Architecture::new(size, widths).expect("preset architectures are valid")
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
            Preset::Tiny => "tiny",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected paper, desk or tiny)"
            ))),
        }
    }
}
