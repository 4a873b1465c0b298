#![allow(dead_code)]

use maskrefine_core::param::ParamStore;
use maskrefine_core::rng::{self, StreamRng};
use maskrefine_core::Tensor;
use rand::Rng;

pub fn rng(seed: u64) -> StreamRng {
    rng::stream(seed, 99)
}

pub fn rand_tensor(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Overwrites every parameter (biases included) with uniform noise.
pub fn randomize(store: &mut ParamStore, r: &mut StreamRng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}
