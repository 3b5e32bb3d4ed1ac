//! Declarative network description.
//!
//! ```json
//! {
//!   "name": "toy_small",
//!   "input": { "channels": 3, "height": 16, "width": 16 },
//!   "stem": { "kernel": 3, "out": 16, "stride": 1, "maxpool": true },
//!   "stages": [ { "blocks": 1, "out": 32, "cardinality": 8, "width": 2, "stride": 1, "gated": true } ],
//!   "head": { "classes": 4 },
//!   "question_dim": 4,
//!   "k": 2,
//!   "seed": 7
//! }
//! ```
//!
//! Optional keys: `stem.padding` (default `kernel / 2`), `stages[i].k`
//! (per-stage override), `stages[i].in_channels` (checked against the previous
//! stage), `post_conv {out, bn_relu}` (1x1 conv after the last stage),
//! `gate_hidden` (controller hidden width, default 32) and `paper_flops`
//! (reference totals printed by the CLI).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::init::BlockShape;
use crate::nn::conv::window_out;
use crate::nn::layers::PoolSpec;

pub const DEFAULT_GATE_HIDDEN: usize = 32;

/// Configs shipped in `configs/`, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("clevr_table4", include_str!("../../../configs/clevr_table4.json")),
    ("toy_small", include_str!("../../../configs/toy_small.json")),
    ("vqa_table3", include_str!("../../../configs/vqa_table3.json")),
    ("vqa_table3_narrow", include_str!("../../../configs/vqa_table3_narrow.json")),
];

pub fn bundled_config(name: &str) -> Result<NetworkConfig> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(vec![Violation { path: String::new(), message: format!("no bundled config named {name:?}") }]))?;
    parse_config(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub kernel: usize,
    pub out: usize,
    pub stride: usize,
    pub maxpool: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
}

impl StemConfig {
    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.kernel / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub out: usize,
    pub cardinality: usize,
    pub width: usize,
    pub stride: usize,
    pub gated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostConvConfig {
    pub out: usize,
    pub bn_relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub classes: usize,
}

/// A published total to print next to computed ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaperFlops {
    pub k: usize,
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub name: String,
    pub input: InputConfig,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_conv: Option<PostConvConfig>,
    pub head: HeadConfig,
    pub question_dim: usize,
    pub k: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paper_flops: Vec<PaperFlops>,
}

/// One block of the expanded layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    pub stage: usize,
    pub index: usize,
    pub shape: BlockShape,
}

impl BlockPlan {
    pub fn name(&self) -> String {
        format!("stage{}.block{}", self.stage + 1, self.index)
    }
}

/// Parse and validate a JSON config.
pub fn parse_config(text: &str) -> Result<NetworkConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: NetworkConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(vec![Violation { path, message: e.into_inner().to_string() }])
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<NetworkConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

impl NetworkConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn gate_hidden(&self) -> usize {
        self.gate_hidden.unwrap_or(DEFAULT_GATE_HIDDEN)
    }

    /// Active experts in stage `i` (all paths for ungated stages).
    pub fn stage_k(&self, i: usize) -> usize {
        let s = &self.stages[i];
        if s.gated {
            s.k.unwrap_or(self.k)
        } else {
            s.cardinality
        }
    }

    /// All problems with the config, each with its path.
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut bad = |path: String, message: &str| v.push(Violation { path, message: message.to_string() });
        let positive = "must be positive";
        for (name, value) in [
            ("input.channels", self.input.channels),
            ("input.height", self.input.height),
            ("input.width", self.input.width),
            ("stem.kernel", self.stem.kernel),
            ("stem.out", self.stem.out),
            ("stem.stride", self.stem.stride),
            ("head.classes", self.head.classes),
        ] {
            if value == 0 {
                bad(name.into(), positive);
            }
        }
        if self.stages.is_empty() {
            bad("stages".into(), "at least one stage required");
        }
        let any_gated = self.stages.iter().any(|s| s.gated);
        if any_gated && self.question_dim == 0 {
            bad("question_dim".into(), positive);
        }
        if any_gated && self.gate_hidden == Some(0) {
            bad("gate_hidden".into(), positive);
        }
        if self.k == 0 {
            bad("k".into(), positive);
        }
        let mut prev = self.stem.out;
        for (i, s) in self.stages.iter().enumerate() {
            let p = |f: &str| format!("stages[{i}].{f}");
            for (f, value) in
                [("blocks", s.blocks), ("out", s.out), ("cardinality", s.cardinality), ("width", s.width), ("stride", s.stride)]
            {
                if value == 0 {
                    bad(p(f), positive);
                }
            }
            if let Some(c) = s.in_channels {
                if c != prev {
                    bad(p("in_channels"), &format!("channel mismatch: previous layer has {prev} channels, stage declares {c}"));
                }
            }
            if s.gated && s.cardinality > 0 {
                let k = s.k.unwrap_or(self.k);
                let path = if s.k.is_some() { p("k") } else { "k".into() };
                if k > s.cardinality {
                    bad(path, &format!("k exceeds cardinality (k={k}, cardinality={})", s.cardinality));
                } else if k == 0 {
                    bad(path, positive);
                }
            }
            prev = s.out;
        }
        if let Some(pc) = &self.post_conv {
            if pc.out == 0 {
                bad("post_conv.out".into(), positive);
            }
        }
        for (i, pf) in self.paper_flops.iter().enumerate() {
            if !(pf.flops.is_finite() && pf.flops > 0.0) {
                bad(format!("paper_flops[{i}].flops"), "must be a positive number");
            }
        }
        if v.is_empty() {
            if let Err(e) = self.output_sizes(self.input.height, self.input.width) {
                v.push(Violation { path: "input".into(), message: e.to_string() });
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn stem_pool(&self) -> Option<PoolSpec> {
        self.stem.maxpool.then_some(PoolSpec::RESNET)
    }

    /// Spatial size after the stem convolution, after each stage (the first
    /// including the stem max-pool), and after the post conv if present.
    pub fn output_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let too_small = || Error::KernelTooLarge;
        let (k, s, p) = (self.stem.kernel, self.stem.stride, self.stem.padding());
        let mut cur = (window_out(h, k, s, p).ok_or_else(too_small)?, window_out(w, k, s, p).ok_or_else(too_small)?);
        let mut sizes = vec![cur];
        if let Some(pool) = self.stem_pool() {
            cur = pool.out_size(cur.0, cur.1)?;
        }
        for st in &self.stages {
            if st.stride == 0 {
                return Err(Error::Shape("stage stride must be positive".into()));
            }
            cur = (window_out(cur.0, 3, st.stride, 1).ok_or_else(too_small)?, window_out(cur.1, 3, st.stride, 1).ok_or_else(too_small)?);
            sizes.push(cur);
        }
        if self.post_conv.is_some() {
            sizes.push(cur);
        }
        Ok(sizes)
    }

    /// Expanded block list with shapes; only the first block of a stage
    /// strides.
    pub fn block_plan(&self) -> Vec<BlockPlan> {
        let mut plan = Vec::new();
        let mut c = self.stem.out;
        for (si, s) in self.stages.iter().enumerate() {
            for b in 0..s.blocks {
                plan.push(BlockPlan {
                    stage: si,
                    index: b,
                    shape: BlockShape {
                        in_channels: c,
                        out_channels: s.out,
                        cardinality: s.cardinality,
                        group_width: s.width,
                        stride: if b == 0 { s.stride } else { 1 },
                        k: self.stage_k(si),
                        gate: s.gated.then(|| (self.question_dim, self.gate_hidden())),
                    },
                });
                c = s.out;
            }
        }
        plan
    }

    pub fn final_channels(&self) -> usize {
        match &self.post_conv {
            Some(p) => p.out,
            None => self.stages.last().map_or(self.stem.out, |s| s.out),
        }
    }

    pub fn gated_blocks(&self) -> usize {
        self.stages.iter().filter(|s| s.gated).map(|s| s.blocks).sum()
    }

    /// The config with every gated stage running `k` experts.
    pub fn with_k(&self, k: usize) -> Result<NetworkConfig> {
        let mut c = self.clone();
        c.k = k;
        for s in &mut c.stages {
            s.k = None;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn with_input(&self, h: usize, w: usize) -> Result<NetworkConfig> {
        let mut c = self.clone();
        c.input.height = h;
        c.input.width = w;
        c.validate()?;
        Ok(c)
    }
}
