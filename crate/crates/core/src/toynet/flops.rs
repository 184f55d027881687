use serde::Serialize;

use super::{ModelConfig, Result};
use crate::blocks::AttentionConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub name: String,
    pub flops: u64,
}

/// Analytic FLOPs, counting a multiply-accumulate as 2. Residual additions
/// are not counted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub total: u64,
}

impl FlopsReport {
    pub fn get(&self, name: &str) -> Option<u64> {
        self.layers.iter().find(|l| l.name == name).map(|l| l.flops)
    }

    pub fn to_text(&self) -> String {
        let width = self
            .layers
            .iter()
            .map(|l| l.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = String::new();
        for l in &self.layers {
            s += &format!("{:<width$} {:>12}\n", l.name, l.flops);
        }
        s += &format!("{:<width$} {:>12}\n", "total", self.total);
        s
    }
}

#[derive(Default)]
struct Counter {
    layers: Vec<LayerFlops>,
}

struct Conv {
    c_in: usize,
    c_out: usize,
    k: usize,
    groups: usize,
    bias: bool,
    bn: bool,
    act: bool,
}

impl Counter {
    fn push(&mut self, name: String, flops: u64) {
        self.layers.push(LayerFlops { name, flops });
    }

    /// Conv unit producing an `hw`-pixel map.
    fn conv(&mut self, name: &str, c: Conv, hw: u64) {
        let (ci, co, k, g) = (c.c_in as u64, c.c_out as u64, c.k as u64, c.groups as u64);
        self.push(format!("{name}.conv"), 2 * co * (ci / g) * k * k * hw);
        if c.bias {
            self.push(format!("{name}.bias"), hw * co);
        }
        if c.bn {
            self.push(format!("{name}.bn"), 2 * co * hw);
        }
        if c.act {
            self.push(format!("{name}.act"), 2 * co * hw);
        }
    }

    fn pointwise(&mut self, name: &str, c_in: usize, c_out: usize, act: bool, hw: u64) {
        self.conv(
            name,
            Conv {
                c_in,
                c_out,
                k: 1,
                groups: 1,
                bias: false,
                bn: true,
                act,
            },
            hw,
        );
    }

    fn attention(&mut self, name: &str, cfg: &AttentionConfig, hw: u64) {
        let c = cfg.channels;
        let (m, kd, d) = (
            cfg.num_heads as u64,
            cfg.key_dim as u64,
            cfg.head_dim as u64,
        );
        let n2 = hw * hw;
        self.pointwise(&format!("{name}.qkv"), c, cfg.qkv_channels(), false, hw);
        self.push(format!("{name}.scores"), 2 * m * kd * n2);
        self.push(format!("{name}.softmax"), 5 * m * n2);
        self.push(format!("{name}.weighted_sum"), 2 * m * d * n2);
        self.conv(
            &format!("{name}.pe"),
            Conv {
                c_in: c,
                c_out: c,
                k: 3,
                groups: c,
                bias: true,
                bn: false,
                act: false,
            },
            hw,
        );
        self.pointwise(&format!("{name}.proj"), c, c, false, hw);
    }
}

pub fn flops_estimate(cfg: &ModelConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let mut f = Counter::default();
    let mut c_in = 3;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        let side = cfg.stage_size(i) as u64;
        let hw = side * side;
        f.conv(
            &format!("stage{i}"),
            Conv {
                c_in,
                c_out: c,
                k: 3,
                groups: 1,
                bias: false,
                bn: true,
                act: true,
            },
            hw,
        );
        if cfg.psa_placements.contains(&i) {
            let p = format!("psa{i}");
            let half = c / 2;
            f.pointwise(&format!("{p}.entry"), c, c, true, hw);
            let acfg = AttentionConfig::for_channels(half, cfg.attn_ratio)?;
            f.attention(&format!("{p}.attn"), &acfg, hw);
            f.pointwise(&format!("{p}.ffn.0"), half, c, true, hw);
            f.pointwise(&format!("{p}.ffn.1"), c, half, false, hw);
            f.pointwise(&format!("{p}.exit"), c, c, true, hw);
        }
        c_in = c;
    }
    let g = cfg.grid() as u64;
    f.conv(
        "head",
        Conv {
            c_in,
            c_out: cfg.head_channels(),
            k: 1,
            groups: 1,
            bias: true,
            bn: false,
            act: false,
        },
        g * g,
    );
    let total = f.layers.iter().map(|l| l.flops).sum();
    Ok(FlopsReport {
        layers: f.layers,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pointwise_conv() {
        // 2 · 4 · 8 · 1 · 1 · 2 · 2
        let mut f = Counter::default();
        f.conv(
            "x",
            Conv {
                c_in: 4,
                c_out: 8,
                k: 1,
                groups: 1,
                bias: false,
                bn: false,
                act: false,
            },
            4,
        );
        assert_eq!(
            f.layers,
            vec![LayerFlops {
                name: "x.conv".into(),
                flops: 256
            }]
        );
    }
}
