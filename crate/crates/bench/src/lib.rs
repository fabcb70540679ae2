//! Benchmark fixtures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xatl::blocks::ScanInputs;
use xatl::data::{next_batch, synthetic_text, TokenStream};
use xatl::model::{build_model, forward};
use xatl::optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimizerState};
use xatl::{FreezeMask, Graph, ModelConfig, ParameterStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major `m x k` and `k x n` operands.
pub fn matrices(m: usize, k: usize, n: usize) -> (Vec<f32>, Vec<f32>) {
    let mut r = rng(1);
    (
        Tensor::<f32>::uniform(&[m, k], -1.0, 1.0, &mut r).into_data(),
        Tensor::<f32>::uniform(&[k, n], -1.0, 1.0, &mut r).into_data(),
    )
}

/// Query, key and value tensors of shape `[b, h, t, dh]`.
pub fn qkv(b: usize, h: usize, t: usize, dh: usize) -> [Tensor<f32>; 3] {
    let mut r = rng(2);
    let scale = 1.0 / (dh as f64).sqrt();
    [0, 1, 2].map(|_| Tensor::uniform(&[b, h, t, dh], -scale, scale, &mut r))
}

pub fn scan_inputs(b: usize, t: usize, e: usize, n: usize) -> ScanInputs<f32> {
    let mut r = rng(3);
    ScanInputs {
        u: Tensor::uniform(&[b, t, e], -1.0, 1.0, &mut r),
        delta: Tensor::uniform(&[b, t, e], 1e-3, 0.1, &mut r),
        a: Tensor::uniform(&[e, n], -16.0, -1.0, &mut r),
        b: Tensor::uniform(&[b, t, n], -1.0, 1.0, &mut r),
        c: Tensor::uniform(&[b, t, n], -1.0, 1.0, &mut r),
        d: Tensor::ones(&[e]),
    }
}

/// One optimizer update of a preset model on synthetic text.
pub struct TrainStep {
    pub model: ModelConfig,
    store: ParameterStore<f32>,
    opt: OptimizerState<f32>,
    stream: TokenStream,
    cursor: usize,
    batch: usize,
    seq: usize,
}

impl TrainStep {
    pub fn new(preset: &str, batch: usize, seq: usize) -> Self {
        let model = ModelConfig::preset(preset).expect("preset");
        let store = build_model::<f32>(&model, 0).expect("model");
        let opt = OptimizerState::new(&store, AdamWConfig::default());
        TrainStep {
            model,
            store,
            opt,
            stream: TokenStream::from_bytes(&synthetic_text(1 << 16, 0)).expect("corpus"),
            cursor: 0,
            batch,
            seq,
        }
    }

    /// Returns the loss before the update.
    pub fn step(&mut self) -> f32 {
        let batch = next_batch(self.stream.train(), self.batch, self.seq, self.cursor);
        self.cursor = batch.cursor;
        let mut g = Graph::new();
        let vars = g.load_params(&self.store, true);
        let logits = forward(&mut g, &vars, &self.model, &batch.inputs, self.batch, self.seq).expect("forward");
        let loss = g.cross_entropy(logits, &batch.targets, None).expect("loss");
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss).expect("backward");
        let mask = FreezeMask::empty();
        clip_grad_norm(&mut grads, &mask, 1.0);
        adamw_step(&mut self.store, &grads, &mut self.opt, &mask, 1e-3).expect("update");
        value
    }
}
