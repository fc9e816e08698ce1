use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig};
use crate::error::Result;
use crate::tensor::gradcheck::{check_store, GradcheckConfig, GradcheckReport};
use crate::tensor::Tensor;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Finite-difference check of the whole model's cross-entropy gradient on a
/// random two-image batch. Parameters are jittered off their initial values
/// first so zero-initialized tensors carry signal.
pub fn gradcheck_model(config: ModelConfig, seed: u64, gc: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: Model<f64> = Model::build_with_rng(config, &mut rng)?;
    for id in model.store().ids().collect::<Vec<_>>() {
        let v = model.store().value(id).clone();
        let noise = uniform(v.shape(), &mut rng).scale(0.1);
        *model.store_mut().value_mut(id) = v.add(&noise)?;
    }
    let cfg = model.config();
    let x = uniform(&[2, cfg.image_side, cfg.image_side, cfg.in_channels], &mut rng);
    let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..cfg.num_classes)).collect();
    check_store(
        model.store(),
        |g| {
            let xv = g.input(x.clone());
            let logits = model.forward(g, xv)?;
            g.tape.cross_entropy(logits, &labels)
        },
        gc,
    )
}
