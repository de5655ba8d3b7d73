//! Ablation grids: enumerable config sets reproducing the standard
//! experimental matrices — cumulative SE enabling per module, stage counts
//! 1..7, the (BC, C) channel grid, and the loss-weight grid.

use crate::model::{ModelConfig, SeFlags};

/// Cumulative SE ablation: none, then SEBEM only, then +SETEM, +SENRM, all.
pub fn se_grid() -> Vec<(String, SeFlags)> {
    let rows = [
        ("none", [false, false, false, false]),
        ("sebem", [true, false, false, false]),
        ("sebem+setem", [true, true, false, false]),
        ("sebem+setem+senrm", [true, true, true, false]),
        ("all", [true, true, true, true]),
    ];
    rows.iter()
        .map(|(label, [b, t, n, r])| {
            (
                label.to_string(),
                SeFlags {
                    sebem: *b,
                    setem: *t,
                    senrm: *n,
                    seirm: *r,
                },
            )
        })
        .collect()
}

/// Stage-count sweep K = 1..=7.
pub fn stage_grid(base: &ModelConfig) -> Vec<ModelConfig> {
    (1..=7)
        .map(|stages| ModelConfig { stages, ..*base })
        .collect()
}

/// Channel grid: bottleneck width at fixed C, then main width at fixed BC.
pub fn channel_grid(base: &ModelConfig) -> Vec<ModelConfig> {
    [(4, 32), (8, 32), (16, 32), (4, 40), (4, 48), (4, 56), (4, 64)]
        .iter()
        .map(|&(bc, c)| ModelConfig {
            bottleneck_channels: bc,
            channels: c,
            ..*base
        })
        .collect()
}

/// Loss-weight grid for the fidelity term.
pub fn eta_grid() -> Vec<f64> {
    vec![0.005, 0.01, 0.015, 0.2]
}
