#![allow(dead_code)]

use std::path::Path;

use sfodlab::config::StageConfig;

/// A configuration small enough for a full run in a couple of seconds.
pub fn tiny_config(out: &Path) -> StageConfig {
    let mut cfg = StageConfig::default();
    cfg.seed = 11;
    cfg.out_dir = out.to_path_buf();
    cfg.data.n_source = 48;
    cfg.data.n_target = 30;
    cfg.train.pretrain_iters = 40;
    cfg.train.align_iters = 12;
    cfg.train.finetune_iters = 12;
    cfg.train.ema_period = 5;
    cfg.division.mc_passes = 4;
    cfg.division.mc_sweep = vec![2];
    cfg.division.tau_det = 0.2;
    cfg
}

pub fn write_config(cfg: &StageConfig, path: &Path) {
    std::fs::write(path, cfg.resolved_json()).unwrap();
}
