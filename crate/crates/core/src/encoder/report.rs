use super::EncoderConfig;
use crate::moe::{ExpertBank, RouterParams};
use crate::nn::{ConvModuleParams, FfnParams, FrontendParams, MhsaParams};

/// Encoder parameter counts by category. Shared weights are counted once
/// per block position; norms and routers once per `(g, c)` when individual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamReport {
    pub frontend: usize,
    /// Plain feed-forward layers (the first FFN, and the second when there
    /// are no experts).
    pub ffn: usize,
    pub mhsa: usize,
    /// Convolution modules without their batch norm.
    pub conv: usize,
    pub experts: usize,
    pub routers: usize,
    /// Layer norms and convolution batch norms (scale and offset only).
    pub norms: usize,
    pub total: usize,
}

pub fn count_params(cfg: &EncoderConfig) -> ParamReport {
    let (c, g, d) = (cfg.blocks, cfg.groups, cfg.dim);
    let ffn_one = FfnParams::count(d, cfg.ffn_dim);
    let frontend = FrontendParams::count(cfg.feature_dim, cfg.frontend_channels, d);
    let ffn = c * ffn_one * if cfg.is_moe() { 1 } else { 2 };
    let mhsa = c * MhsaParams::count(d, true);
    let conv = c * ConvModuleParams::count(d, cfg.conv_channels(), cfg.kernel);
    let experts = if cfg.is_moe() { c * ExpertBank::count(d, cfg.ffn_dim, cfg.experts) } else { 0 };
    let norm_sets = if cfg.share_norms { c } else { c * g };
    let norms = norm_sets * (5 * 2 * d + 2 * cfg.conv_channels());
    let router_sets = if cfg.share_routers { c } else { c * g };
    let routers = if cfg.is_moe() { router_sets * RouterParams::count(d, cfg.experts) } else { 0 };
    ParamReport {
        frontend,
        ffn,
        mhsa,
        conv,
        experts,
        routers,
        norms,
        total: frontend + ffn + mhsa + conv + experts + routers + norms,
    }
}

impl ParamReport {
    fn rows(&self) -> [(&'static str, usize); 8] {
        [
            ("frontend", self.frontend),
            ("ffn", self.ffn),
            ("mhsa", self.mhsa),
            ("conv", self.conv),
            ("experts", self.experts),
            ("routers", self.routers),
            ("norms", self.norms),
            ("total", self.total),
        ]
    }

    /// Aligned two-column table with a millions column.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>12} {:>9}\n", "category", "params", "millions");
        for (name, n) in self.rows() {
            if name == "total" {
                out.push_str(&format!("{}\n", "-".repeat(33)));
            }
            out.push_str(&format!("{name:<10} {n:>12} {:>9.3}\n", n as f64 / 1e6));
        }
        out
    }

    /// `category=count` lines.
    pub fn kv_lines(&self) -> String {
        self.rows().iter().map(|(name, n)| format!("{name}={n}\n")).collect()
    }
}
