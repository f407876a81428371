//! Analytic multiply-accumulate counts per layer category.

use std::fmt;

use super::{ModelConfig, ScanMode};

/// MACs per (token, channel, state) step of the recurrence: `Ā·h`, `B̄·x`
/// and the `C·h` readout.
pub const SCAN_MACS_PER_STEP: u64 = 3;

/// Multiply-accumulate counts for one forward pass.
///
/// `extras` covers elementwise multiplies (normalization affines, gating,
/// channel scaling and the residual scales). Data movement, additions and
/// transcendental functions are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlopReport {
    pub mode: ScanMode,
    pub conv: u64,
    pub linear: u64,
    pub scan: u64,
    pub extras: u64,
    pub scan_invocations: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.conv + self.linear + self.scan + self.extras
    }

    fn add(&mut self, o: FlopReport) {
        self.conv += o.conv;
        self.linear += o.linear;
        self.scan += o.scan;
        self.extras += o.extras;
        self.scan_invocations += o.scan_invocations;
    }

    fn empty(mode: ScanMode) -> Self {
        FlopReport {
            mode,
            conv: 0,
            linear: 0,
            scan: 0,
            extras: 0,
            scan_invocations: 0,
        }
    }

    /// `category,macs` lines.
    pub fn to_csv(&self) -> String {
        format!(
            "category,macs\nconv,{}\nlinear,{}\nscan,{}\nextras,{}\ntotal,{}\n",
            self.conv,
            self.linear,
            self.scan,
            self.extras,
            self.total()
        )
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mode={} conv={} linear={} scan={} extras={} total={} scans={} (scan MACs per step = {})",
            self.mode,
            self.conv,
            self.linear,
            self.scan,
            self.extras,
            self.total(),
            self.scan_invocations,
            SCAN_MACS_PER_STEP
        )
    }
}

fn conv_macs(l: usize, cin_per_group: usize, cout: usize, k: usize) -> u64 {
    (l * cin_per_group * cout * k * k) as u64
}

/// One residual block over `l` tokens.
fn block(cfg: &ModelConfig, l: usize) -> FlopReport {
    let (c, di, ds, r) = (cfg.channels, cfg.d_inner(), cfg.d_state, cfg.dt_rank());
    let (hid, ch) = (cfg.mlp_hidden(), cfg.cab_hidden());
    let k = cfg.scan_mode.scans_per_block();
    let l64 = l as u64;
    FlopReport {
        mode: cfg.scan_mode,
        conv: conv_macs(l, 1, di, 3) + 2 * conv_macs(l, c, c, 3) + conv_macs(1, c, ch, 1) + conv_macs(1, ch, c, 1),
        linear: l64 * (c * 2 * di + di * (r + 2 * ds) + r * di + di * c + 2 * c * hid) as u64,
        scan: (k * l * di * ds) as u64 * SCAN_MACS_PER_STEP,
        // two block norms, output norm, gate, channel scale, s1 and s2
        extras: l64 * (2 * c + di + di + c + 2 * c) as u64,
        scan_invocations: k as u64,
    }
}

fn group(cfg: &ModelConfig, l: usize) -> FlopReport {
    let mut g = FlopReport::empty(cfg.scan_mode);
    for _ in 0..cfg.blocks_per_group {
        g.add(block(cfg, l));
    }
    g.conv += conv_macs(l, cfg.channels, cfg.channels, 3);
    g
}

/// Counts for a `height × width` input, derived from the configuration alone.
pub fn count_flops(cfg: &ModelConfig, height: usize, width: usize) -> FlopReport {
    let c = cfg.channels;
    let (h, w) = if cfg.cross_scale {
        (height + height % 2, width + width % 2)
    } else {
        (height, width)
    };
    let l = h * w;
    let s2 = cfg.scale * cfg.scale;
    let mut rep = FlopReport::empty(cfg.scan_mode);
    rep.conv += conv_macs(l, 3, c, 3);
    for _ in 0..cfg.groups {
        rep.add(group(cfg, l));
    }
    rep.conv += conv_macs(l, c, c, 3) + conv_macs(l, c, c * s2, 3) + conv_macs(l * s2, c, 3, 3);
    if cfg.cross_scale {
        let ld = (h / 2) * (w / 2);
        rep.conv += conv_macs(ld, 3, c, 3);
        rep.add(group(cfg, ld));
        rep.add(block(cfg, 5 * ld));
    }
    rep
}
