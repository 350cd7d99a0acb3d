use std::collections::BTreeSet;
use std::fmt;

use crate::data::{CHANNELS, WINDOW};
use crate::nn::{Conv1d, Dense, Lstm};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    HydroDeep,
    CnnOnly,
    LstmOnly,
}

impl Variant {
    pub const NAMES: [&'static str; 3] = ["hydrodeep", "cnn_only", "lstm_only"];

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "hydrodeep" => Ok(Self::HydroDeep),
            "cnn_only" => Ok(Self::CnnOnly),
            "lstm_only" => Ok(Self::LstmOnly),
            other => Err(ModelError::Arch(format!(
                "unknown variant `{other}` (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::HydroDeep => "hydrodeep",
            Self::CnnOnly => "cnn_only",
            Self::LstmOnly => "lstm_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
}

/// Layer topology of the discharge model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub conv: Vec<ConvSpec>,
    pub lstm: Vec<usize>,
    pub target_branch_units: usize,
    pub head: Vec<usize>,
    pub variant: Variant,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            conv: vec![
                ConvSpec {
                    out_channels: 16,
                    kernel: 3,
                },
                ConvSpec {
                    out_channels: 32,
                    kernel: 3,
                },
            ],
            lstm: vec![32],
            target_branch_units: 8,
            head: vec![32, 1],
            variant: Variant::HydroDeep,
        }
    }
}

/// Shape of the tensor each block hands to the next, derived from an [`ArchSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Widths {
    /// Channels and timesteps leaving the conv stack (raw inputs when it is empty).
    pub conv_channels: usize,
    pub conv_steps: usize,
    pub head_in: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Arch(m));
        match self.variant {
            Variant::HydroDeep if self.conv.is_empty() || self.lstm.is_empty() => {
                return err("hydrodeep needs at least one conv and one lstm layer".into())
            }
            Variant::CnnOnly if self.conv.is_empty() || !self.lstm.is_empty() => {
                return err("cnn_only needs at least one conv layer and no lstm layers".into())
            }
            Variant::LstmOnly if !self.conv.is_empty() || self.lstm.is_empty() => {
                return err("lstm_only needs at least one lstm layer and no conv layers".into())
            }
            _ => {}
        }
        if let Some(c) = self.conv.iter().find(|c| c.out_channels == 0 || c.kernel == 0) {
            return err(format!("conv layer {}x{} must have positive width and kernel", c.out_channels, c.kernel));
        }
        let shrink: usize = self.conv.iter().map(|c| c.kernel - 1).sum();
        if shrink >= WINDOW {
            return err(format!(
                "conv kernels shrink the {WINDOW}-day window by {shrink}, leaving no timesteps"
            ));
        }
        if self.lstm.contains(&0) {
            return err("lstm hidden sizes must be positive".into());
        }
        if self.target_branch_units == 0 {
            return err("target_branch units must be positive".into());
        }
        match self.head.last() {
            None => return err("head must have at least one layer".into()),
            Some(&w) if w != 1 => return err(format!("last head layer must have width 1, got {w}")),
            _ => {}
        }
        if self.head.contains(&0) {
            return err("head widths must be positive".into());
        }
        Ok(())
    }

    pub(crate) fn widths(&self) -> Widths {
        let conv_channels = self.conv.last().map_or(CHANNELS, |c| c.out_channels);
        let conv_steps = WINDOW - self.conv.iter().map(|c| c.kernel - 1).sum::<usize>();
        let sequence_out = match self.variant {
            Variant::CnnOnly => conv_channels * conv_steps,
            _ => *self.lstm.last().expect("validated"),
        };
        Widths {
            conv_channels,
            conv_steps,
            head_in: sequence_out + self.target_branch_units,
        }
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let w = self.widths();
        let mut total = 0;
        let mut c_in = CHANNELS;
        for c in &self.conv {
            total += Conv1d::param_count(c_in, c.out_channels, c.kernel);
            c_in = c.out_channels;
        }
        let mut h_in = w.conv_channels;
        for &h in &self.lstm {
            total += Lstm::param_count(h_in, h);
            h_in = h;
        }
        total += Dense::param_count(CHANNELS, self.target_branch_units);
        let mut d_in = w.head_in;
        for &d in &self.head {
            total += Dense::param_count(d_in, d);
            d_in = d;
        }
        total
    }

    /// Line-oriented `key = value` form used in checkpoints and run configs.
    pub fn canonical_text(&self) -> String {
        self.to_string()
    }

    pub fn parse_conv(s: &str) -> Result<Vec<ConvSpec>, ModelError> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|item| {
                let (c, k) = item.trim().split_once('x').ok_or_else(|| {
                    ModelError::Arch(format!("conv layer `{item}` must be written CHANNELSxKERNEL"))
                })?;
                Ok(ConvSpec {
                    out_channels: parse_usize(c, "conv channels")?,
                    kernel: parse_usize(k, "conv kernel")?,
                })
            })
            .collect()
    }

    pub fn parse_widths(s: &str, what: &str) -> Result<Vec<usize>, ModelError> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|w| parse_usize(w, what)).collect()
    }

    pub fn format_conv(conv: &[ConvSpec]) -> String {
        conv.iter()
            .map(|c| format!("{}x{}", c.out_channels, c.kernel))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn format_widths(widths: &[usize]) -> String {
        widths.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }

    /// Inverse of [`ArchSpec::canonical_text`]. Returns the spec and any keys it did not consume.
    pub fn parse_text(text: &str) -> Result<(Self, Vec<(String, String)>), ModelError> {
        let mut variant = None;
        let mut conv = None;
        let mut lstm = None;
        let mut target = None;
        let mut head = None;
        let mut rest = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Arch(format!("line `{line}` is not `key = value`")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "variant" => variant = Some(Variant::parse(v)?),
                "conv" => conv = Some(Self::parse_conv(v)?),
                "lstm" => lstm = Some(Self::parse_widths(v, "lstm hidden size")?),
                "target_branch" => target = Some(parse_usize(v, "target_branch units")?),
                "head" => head = Some(Self::parse_widths(v, "head width")?),
                _ => rest.push((k.to_string(), v.to_string())),
            }
        }
        let missing = |k: &str| ModelError::Arch(format!("architecture text is missing `{k}`"));
        let spec = Self {
            variant: variant.ok_or_else(|| missing("variant"))?,
            conv: conv.ok_or_else(|| missing("conv"))?,
            lstm: lstm.ok_or_else(|| missing("lstm"))?,
            target_branch_units: target.ok_or_else(|| missing("target_branch"))?,
            head: head.ok_or_else(|| missing("head"))?,
        };
        spec.validate()?;
        Ok((spec, rest))
    }
}

fn parse_usize(s: &str, what: &str) -> Result<usize, ModelError> {
    s.trim()
        .parse()
        .map_err(|_| ModelError::Arch(format!("{what} `{}` is not a non-negative integer", s.trim())))
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant = {}", self.variant.name())?;
        writeln!(f, "conv = {}", Self::format_conv(&self.conv))?;
        writeln!(f, "lstm = {}", Self::format_widths(&self.lstm))?;
        writeln!(f, "target_branch = {}", self.target_branch_units)?;
        writeln!(f, "head = {}", Self::format_widths(&self.head))
    }
}

/// The four parameter groups that freeze masks address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Conv,
    Lstm,
    TargetBranch,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::Conv, Self::Lstm, Self::TargetBranch, Self::Head];

    pub fn prefix(self) -> &'static str {
        match self {
            Self::Conv => "conv",
            Self::Lstm => "lstm",
            Self::TargetBranch => "target_branch",
            Self::Head => "head",
        }
    }

    pub fn parse(prefix: &str) -> Result<Self, ModelError> {
        Self::ALL
            .into_iter()
            .find(|g| g.prefix() == prefix)
            .ok_or_else(|| ModelError::UnknownGroup(prefix.to_string()))
    }

    /// Group owning a parameter name such as `lstm.0.w_hh`.
    pub fn of(name: &str) -> Result<Self, ModelError> {
        Self::parse(name.split('.').next().unwrap_or(""))
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Set of frozen parameter groups.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeMask(BTreeSet<ParamGroup>);

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self(ParamGroup::ALL.into_iter().collect())
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        Self(groups.iter().copied().collect())
    }

    /// Builds a mask from group prefixes; an unknown prefix is an error.
    pub fn from_prefixes<S: AsRef<str>>(prefixes: &[S]) -> Result<Self, ModelError> {
        prefixes
            .iter()
            .map(|p| ParamGroup::parse(p.as_ref().trim()))
            .collect::<Result<BTreeSet<_>, _>>()
            .map(Self)
    }

    pub fn contains(&self, group: ParamGroup) -> bool {
        self.0.contains(&group)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.0.iter().copied()
    }
}

impl fmt::Display for FreezeMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|g| g.prefix()).collect();
        f.write_str(&names.join(","))
    }
}
