//! Seeded fixtures for the kernel benchmarks.

use rand::Rng;

use semloc::nn::{ArchitectureConfig, Tensor};
use semloc::rng::seeded;
use semloc::synth::{generate_scene, SceneSpec};
use semloc::{ClassPalette, EmbeddingModel, PanoramaRecord, Result, SemanticMask};

/// Mask with independently uniform classes.
pub fn random_mask(width: usize, height: usize, palette: &ClassPalette, seed: u64) -> Result<SemanticMask> {
    let mut rng = seeded(seed);
    let n = palette.size() as u8;
    SemanticMask::from_fn(width, height, palette, |_, _| rng.random_range(0..n))
}

/// A default-sized synthetic street panorama.
pub fn street_panorama(seed: u64) -> Result<PanoramaRecord> {
    generate_scene(&SceneSpec { seed, ..SceneSpec::default() }, 0)
}

/// Default model with its inputs: `count` prepared random masks.
pub fn model_and_inputs(count: usize, seed: u64) -> Result<(EmbeddingModel, Vec<Tensor>)> {
    let model = ArchitectureConfig::default().build(seed)?;
    let palette = ClassPalette::street();
    let shape = model.input_shape();
    let inputs = (0..count)
        .map(|i| model.prepare(&random_mask(shape.w, shape.h, &palette, seed + 1 + i as u64)?))
        .collect::<Result<_>>()?;
    Ok((model, inputs))
}

/// `count` unit vectors of dimension `dim`.
pub fn unit_embeddings(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}
