//! Model configuration: a plain-text key-value file with one section per
//! stage, and the named presets.
//!
//! ```text
//! name = tiny-kdna
//! in_channels = 3
//! input_size = 32
//! num_classes = 10
//! stem = cifar
//! stem_channels = 16
//!
//! [stage1]
//! layout = FS-SF-SF
//! channels = 16
//! stride = 1
//! block = basic
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kerneldna::{AttentionSet, DEFAULT_REDUCTION};
use crate::topology::layout::Layout;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stem {
    /// 7×7 stride-2 convolution followed by a 3×3 stride-2 max pool.
    Imagenet,
    /// A single 3×3 stride-1 convolution.
    Cifar,
}

/// How `S` slots are realised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Child layers with adapters.
    Adapter,
    /// Children reuse the parent kernel verbatim.
    Copy,
    /// Every `S` becomes an independent full convolution.
    Expand,
}

/// Which layer implements the 3×3 convolutions of the stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    /// Softmax-routed pool of `n` kernels.
    Pool(usize),
    /// Batch-expanded dynamic convolution over `n` kernels.
    Dynamic(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub layout: String,
    pub channels: usize,
    pub stride: usize,
    pub block: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: String,
    pub in_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub stem: Stem,
    pub stem_channels: usize,
    pub reduction: usize,
    pub attentions: AttentionSet,
    pub variant: Variant,
    pub conv: ConvKind,
    pub stages: Vec<StageConfig>,
}

fn stage(layout: &str, channels: usize, stride: usize) -> StageConfig {
    StageConfig { layout: layout.into(), channels, stride, block: "basic".into() }
}

impl ModelConfig {
    fn resnet18(name: &str, layouts: [&str; 4]) -> Self {
        Self {
            name: name.into(),
            in_channels: 3,
            input_size: 224,
            num_classes: 1000,
            stem: Stem::Imagenet,
            stem_channels: 64,
            reduction: DEFAULT_REDUCTION,
            attentions: AttentionSet::ALL,
            variant: Variant::Adapter,
            conv: ConvKind::Standard,
            stages: vec![
                stage(layouts[0], 64, 1),
                stage(layouts[1], 128, 2),
                stage(layouts[2], 256, 2),
                stage(layouts[3], 512, 2),
            ],
        }
    }

    fn small(
        name: &str,
        layout: &str,
        in_channels: usize,
        input_size: usize,
        widths: [usize; 3],
        classes: usize,
    ) -> Self {
        Self {
            name: name.into(),
            in_channels,
            input_size,
            num_classes: classes,
            stem: Stem::Cifar,
            stem_channels: widths[0],
            reduction: DEFAULT_REDUCTION,
            attentions: AttentionSet::ALL,
            variant: Variant::Adapter,
            conv: ConvKind::Standard,
            stages: vec![stage(layout, widths[0], 1), stage(layout, widths[1], 2), stage(layout, widths[2], 2)],
        }
    }

    /// Names accepted by [`ModelConfig::preset`].
    pub const PRESETS: &'static [&'static str] = &[
        "resnet18-orig",
        "resnet18-imagenet",
        "resnet18-kdna",
        "resnet18-copy",
        "resnet18-expand",
        "resnet18-ff-ff-ff",
        "resnet18-ff-fff",
        "resnet18-fs-ssf",
        "resnet18-fs-fsf",
        "resnet18-fs-sf-sf",
        "tiny-cifar",
        "tiny-orig",
        "tiny-kdna",
        "tiny-copy",
        "tiny-expand",
        "tiny-pool",
        "tiny-dynamic",
        "toy-orig",
        "toy-kdna",
        "toy-copy",
        "toy-expand",
    ];

    /// Looks up a preset. `resnet18-kdna-r<N>` selects a reduction ratio.
    ///
    /// The ResNet-18 presets vary only the last two stages; the first two
    /// keep the original `FF-FF` layout. `tiny-*` are 32×32 RGB networks
    /// with 16/32/64 channels; `toy-*` are 16×16 single-channel networks
    /// with 8/16/32 channels sized for quick training runs.
    pub fn preset(name: &str) -> Result<Self> {
        if let Some(r) = name.strip_prefix("resnet18-kdna-r") {
            let r: usize = r.parse().map_err(|_| Error::Config(format!("bad reduction in preset {name:?}")))?;
            if r == 0 {
                return Err(Error::Config("reduction must be positive".into()));
            }
            let mut cfg = Self::preset("resnet18-kdna")?;
            cfg.name = name.into();
            cfg.reduction = r;
            return Ok(cfg);
        }
        let orig = "FF-FF";
        fn late(l: &str) -> [&str; 4] {
            ["FF-FF", "FF-FF", l, l]
        }
        let mut cfg = match name {
            "resnet18-orig" | "resnet18-imagenet" => Self::resnet18(name, late(orig)),
            "resnet18-kdna" | "resnet18-fs-sf-sf" => Self::resnet18(name, late("FS-SF-SF")),
            "resnet18-copy" => Self::resnet18(name, late("FS-SF-SF")).with_variant(Variant::Copy),
            "resnet18-expand" => Self::resnet18(name, late("FS-SSF")).with_variant(Variant::Expand),
            "resnet18-ff-ff-ff" => Self::resnet18(name, late("FF-FF-FF")),
            "resnet18-ff-fff" => Self::resnet18(name, late("FF-FFF")),
            "resnet18-fs-ssf" => Self::resnet18(name, late("FS-SSF")),
            "resnet18-fs-fsf" => Self::resnet18(name, late("FS-FSF")),
            "tiny-orig" => Self::small(name, orig, 3, 32, [16, 32, 64], 10),
            "tiny-cifar" | "tiny-kdna" => Self::small(name, "FS-SF-SF", 3, 32, [16, 32, 64], 10),
            "tiny-copy" => Self::small(name, "FS-SF-SF", 3, 32, [16, 32, 64], 10).with_variant(Variant::Copy),
            "tiny-expand" => Self::small(name, "FS-SF-SF", 3, 32, [16, 32, 64], 10).with_variant(Variant::Expand),
            "tiny-pool" => Self::small(name, orig, 3, 32, [16, 32, 64], 10).with_conv(ConvKind::Pool(4)),
            "tiny-dynamic" => Self::small(name, orig, 3, 32, [16, 32, 64], 10).with_conv(ConvKind::Dynamic(4)),
            "toy-orig" => Self::small(name, orig, 1, 16, [8, 16, 32], 4),
            "toy-kdna" => Self::small(name, "FS-SF-SF", 1, 16, [8, 16, 32], 4),
            "toy-copy" => Self::small(name, "FS-SF-SF", 1, 16, [8, 16, 32], 4).with_variant(Variant::Copy),
            "toy-expand" => Self::small(name, "FS-SF-SF", 1, 16, [8, 16, 32], 4).with_variant(Variant::Expand),
            _ => return Err(Error::Config(format!("unknown preset {name:?}"))),
        };
        cfg.name = name.into();
        Ok(cfg)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_conv(mut self, conv: ConvKind) -> Self {
        self.conv = conv;
        self
    }

    pub fn with_attentions(mut self, attentions: AttentionSet) -> Self {
        self.attentions = attentions;
        self
    }

    /// Layouts as the builder will realise them (`Expand` rewrites `S`).
    pub fn effective_layouts(&self) -> Result<Vec<Layout>> {
        self.stages
            .iter()
            .map(|s| {
                let l = Layout::parse(&s.layout)?;
                Ok(if self.variant == Variant::Expand { l.expanded() } else { l })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("input_size", self.input_size),
            ("num_classes", self.num_classes),
            ("stem_channels", self.stem_channels),
            ("reduction", self.reduction),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.stride == 0 {
                return Err(Error::Config(format!("stage{}: channels and stride must be positive", i + 1)));
            }
            if s.block != "basic" {
                return Err(Error::Config(format!("stage{}: unknown block kind {:?}", i + 1, s.block)));
            }
        }
        match self.conv {
            ConvKind::Pool(0) | ConvKind::Dynamic(0) => Err(Error::Config("pool size must be positive".into())),
            _ => self.effective_layouts().map(|_| ()),
        }
    }

    /// Serialises to the key-value format read by [`ModelConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let stem = match self.stem {
            Stem::Imagenet => "imagenet",
            Stem::Cifar => "cifar",
        };
        let variant = match self.variant {
            Variant::Adapter => "adapter",
            Variant::Copy => "copy",
            Variant::Expand => "expand",
        };
        let conv = match self.conv {
            ConvKind::Standard => "standard".to_string(),
            ConvKind::Pool(n) => format!("pool:{n}"),
            ConvKind::Dynamic(n) => format!("dynamic:{n}"),
        };
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "stem = {stem}");
        let _ = writeln!(s, "stem_channels = {}", self.stem_channels);
        let _ = writeln!(s, "reduction = {}", self.reduction);
        let _ = writeln!(s, "attentions = {}", self.attentions.label());
        let _ = writeln!(s, "variant = {variant}");
        let _ = writeln!(s, "conv = {conv}");
        for (i, st) in self.stages.iter().enumerate() {
            let _ = write!(
                s,
                "\n[stage{}]\nlayout = {}\nchannels = {}\nstride = {}\nblock = {}\n",
                i + 1,
                st.layout,
                st.channels,
                st.stride,
                st.block
            );
        }
        s
    }

    /// Parses the key-value format. `pos` in parse errors is the byte
    /// offset of the offending line. Missing global keys fall back to the
    /// `tiny-kdna` preset's values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::preset("tiny-kdna")?;
        cfg.stages.clear();
        let mut stage_no: Option<usize> = None;
        let mut offset = 0;
        for raw in text.split_inclusive('\n') {
            let pos = offset;
            offset += raw.len();
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { pos, msg };
            if let Some(sec) = line.strip_prefix('[') {
                let sec = sec.strip_suffix(']').ok_or_else(|| err("unterminated section header".into()))?;
                let n: usize = sec
                    .strip_prefix("stage")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| err(format!("unknown section [{sec}]")))?;
                if n != cfg.stages.len() + 1 {
                    return Err(err(format!("expected [stage{}], found [{sec}]", cfg.stages.len() + 1)));
                }
                cfg.stages.push(StageConfig { layout: String::new(), channels: 0, stride: 1, block: "basic".into() });
                stage_no = Some(n);
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected key = value, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || {
                value
                    .parse::<usize>()
                    .map_err(|_| err(format!("{key}: expected a non-negative integer, found {value:?}")))
            };
            match stage_no {
                Some(_) => {
                    let st = cfg.stages.last_mut().unwrap();
                    match key {
                        "layout" => st.layout = value.into(),
                        "channels" => st.channels = num()?,
                        "stride" => st.stride = num()?,
                        "block" => st.block = value.into(),
                        _ => return Err(err(format!("unknown stage key {key:?}"))),
                    }
                }
                None => match key {
                    "name" => cfg.name = value.into(),
                    "in_channels" => cfg.in_channels = num()?,
                    "input_size" => cfg.input_size = num()?,
                    "num_classes" => cfg.num_classes = num()?,
                    "stem_channels" => cfg.stem_channels = num()?,
                    "reduction" => cfg.reduction = num()?,
                    "stem" => {
                        cfg.stem = match value {
                            "imagenet" => Stem::Imagenet,
                            "cifar" => Stem::Cifar,
                            _ => return Err(err(format!("unknown stem {value:?}"))),
                        }
                    }
                    "variant" => {
                        cfg.variant = match value {
                            "adapter" => Variant::Adapter,
                            "copy" => Variant::Copy,
                            "expand" => Variant::Expand,
                            _ => return Err(err(format!("unknown variant {value:?}"))),
                        }
                    }
                    "attentions" => {
                        cfg.attentions =
                            AttentionSet::parse(value).ok_or_else(|| err(format!("unknown attentions {value:?}")))?
                    }
                    "conv" => {
                        let (kind, n) = value.split_once(':').unwrap_or((value, "4"));
                        let n: usize = n.parse().map_err(|_| err(format!("bad pool size in {value:?}")))?;
                        cfg.conv = match kind {
                            "standard" => ConvKind::Standard,
                            "pool" => ConvKind::Pool(n),
                            "dynamic" => ConvKind::Dynamic(n),
                            _ => return Err(err(format!("unknown conv kind {value:?}"))),
                        }
                    }
                    _ => return Err(err(format!("unknown key {key:?}"))),
                },
            }
        }
        if cfg.stages.is_empty() {
            return Err(Error::Parse { pos: offset, msg: "no [stageN] sections".into() });
        }
        for (i, st) in cfg.stages.iter().enumerate() {
            if st.layout.is_empty() || st.channels == 0 {
                return Err(Error::Config(format!("stage{} needs layout and channels", i + 1)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves either a preset name or a path to a config file.
    pub fn load(preset: Option<&str>, path: Option<&std::path::Path>) -> Result<Self> {
        match (preset, path) {
            (Some(p), None) => Self::preset(p),
            (None, Some(path)) => Self::parse(&std::fs::read_to_string(path)?),
            (Some(_), Some(_)) => Err(Error::Config("give either a preset or a config file, not both".into())),
            (None, None) => Err(Error::Config("a preset or a config file is required".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates_and_round_trips() {
        for name in ModelConfig::PRESETS.iter().copied().chain(["resnet18-kdna-r8"]) {
            let cfg = ModelConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg, "{name}");
        }
        assert!(matches!(ModelConfig::preset("nope"), Err(Error::Config(_))));
        assert!(matches!(ModelConfig::preset("resnet18-kdna-r0"), Err(Error::Config(_))));
    }

    #[test]
    fn parse_errors_report_line_offset() {
        let text = "name = x\n[stage1]\nlayout = FF\nchanels = 4\n";
        match ModelConfig::parse(text) {
            Err(Error::Parse { pos, .. }) => assert_eq!(pos, text.find("chanels").unwrap()),
            other => panic!("{other:?}"),
        }
        assert!(matches!(ModelConfig::parse("[stage2]\n"), Err(Error::Parse { pos: 0, .. })));
        assert!(matches!(ModelConfig::parse("name = x\n"), Err(Error::Parse { .. })));
        assert!(matches!(
            ModelConfig::parse("[stage1]\nlayout = FX\nchannels = 4\n"),
            Err(Error::Parse { pos: 1, .. })
        ));
        assert!(matches!(ModelConfig::parse("[stage1]\nlayout = FF\n"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = ModelConfig::parse("# toy\nnum_classes = 2 # two\n[stage1]\nlayout = FS\nchannels = 8\n").unwrap();
        assert_eq!(cfg.num_classes, 2);
        assert_eq!(cfg.stages[0].stride, 1);
        assert_eq!(cfg.reduction, DEFAULT_REDUCTION);
    }
}
