//! Wall-clock timing of the head variants on identical trunk outputs.

use std::time::{Duration, Instant};

use maskrefine_core::network::{Head, HeadConfig, HeadVariant, ModelConfig};
use maskrefine_core::param::ParamStore;
use maskrefine_core::rng;
use maskrefine_core::{Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadTiming {
    pub variant: HeadVariant,
    pub params: usize,
    pub batch: usize,
    /// Fastest of the repetitions, seconds per batch.
    pub seconds: f64,
    /// Median of the repetitions, seconds per batch.
    pub median_seconds: f64,
}

/// Times `reps` forward passes of each head on the same random trunk
/// output `[batch, F, S, S]`. Variants are interleaved within every
/// repetition so slow drifts of the machine hit all of them alike.
pub fn bench_heads(cfg: &ModelConfig, variants: &[HeadVariant], batch: usize, reps: usize, seed: u64) -> Result<Vec<HeadTiming>> {
    let side = cfg.trunk.final_side();
    let f = cfg.trunk.features;
    let mut r = rng::stream(seed, 77);
    let input = Tensor::from_fn(&[batch, f, side, side], |_| r.gen_range(0.0..1.0));
    let heads = variants
        .iter()
        .map(|&variant| {
            let mut store = ParamStore::new();
            let head = Head::build(&mut store, &HeadConfig { variant, ..cfg.head.clone() }, f, side, seed)?;
            Ok((head, store))
        })
        .collect::<maskrefine_core::Result<Vec<_>>>()?;
    let mut times: Vec<Vec<Duration>> = vec![Vec::with_capacity(reps); heads.len()];
    for _ in 0..reps.max(1) {
        for (k, (head, store)) in heads.iter().enumerate() {
            let t = Instant::now();
            let mut g = Graph::new();
            let p = store.bind(&mut g, |_| false);
            let x = g.input(input.clone());
            let out = head.forward(&mut g, &p, x)?;
            std::hint::black_box(g.value(out.score_logit));
            times[k].push(t.elapsed());
        }
    }
    Ok(heads
        .iter()
        .zip(times)
        .map(|((head, _), mut t)| {
            t.sort();
            HeadTiming {
                variant: head.variant,
                params: head.param_count(),
                batch,
                seconds: t[0].as_secs_f64(),
                median_seconds: t[t.len() / 2].as_secs_f64(),
            }
        })
        .collect())
}
