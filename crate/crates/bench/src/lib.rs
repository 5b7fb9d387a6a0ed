//! Shared fixtures for the kernel benchmarks.

use selcon_core::model::embed;
use selcon_core::{
    generate_dataset, Dataset, MemoryBanks, ModelConfig, ModelParams, ProjectedKeys, Result, RunConfig,
};

pub struct Fixture {
    pub config: RunConfig,
    pub data: Dataset,
    pub params: ModelParams,
    pub keys: Vec<ProjectedKeys>,
    pub banks: MemoryBanks,
    pub cameras: Vec<u16>,
}

/// Default dataset, freshly initialized model, banks filled with its keys.
pub fn fixture() -> Result<Fixture> {
    let config = RunConfig::default();
    let data = generate_dataset(&config.data)?;
    let params = ModelParams::init(&config.model, 0)?;
    let images: Vec<&[f32]> = data.train.iter().map(|s| s.pixels.as_slice()).collect();
    let keys = embed(&params, &images)?;
    let ModelConfig { key_dim, stripes, .. } = config.model;
    let mut banks = MemoryBanks::new(keys.len(), key_dim, stripes)?;
    for (i, k) in keys.iter().enumerate() {
        banks.update_anchor_global(i, &k.v_global)?;
        banks.update_anchor_local(i, &k.v_stripes)?;
        banks.update_mixture_positives(&[i], Some(&k.v_global), Some(&k.v_local_concat))?;
    }
    let cameras = data.train_cameras();
    Ok(Fixture {
        config,
        data,
        params,
        keys,
        banks,
        cameras,
    })
}
