#![allow(dead_code)]

use gradleak_core::models::{build_model, Family, InputShape, ModelSpec, ModelState, Noise};
use gradleak_core::{PrivacyModuleSpec, RandomStream, Tensor};

/// A small model described by a few integers so proptest can shrink it.
#[derive(Debug, Clone, Copy)]
pub struct Tiny {
    pub family: Family,
    pub width: usize,
    pub classes: usize,
    /// 0: none, 1: fully connected module, 2: convolutional module.
    pub module: u8,
    pub seed: u64,
}

impl Tiny {
    pub fn spec(&self) -> ModelSpec {
        let mut spec = match self.family {
            Family::Cnn => {
                let mut s = ModelSpec::cnn(InputShape::new(7, 7, 2), self.classes);
                s.conv_channels = vec![self.width, self.width + 1, 2];
                s.kernel = 3;
                s.stride = 1;
                s
            }
            Family::Mlp => {
                ModelSpec::mlp(InputShape::new(3, 3, 1), self.classes).with_hidden(vec![self.width + 2, self.width])
            }
        };
        match (self.module, self.family) {
            (1, _) => spec = spec.with_privacy(PrivacyModuleSpec::precode(1, 2, 0.1)),
            (2, Family::Cnn) => spec = spec.with_privacy(PrivacyModuleSpec::cvb(1, 3, 0.5, 0.1)),
            _ => {}
        }
        spec
    }

    /// Model with weights moved away from zero so no unit is dead.
    pub fn build(&self) -> ModelState<f64> {
        let mut m = build_model::<f64>(&self.spec(), self.seed).unwrap();
        let mut rng = RandomStream::new(self.seed ^ 0x5eed);
        for p in m.params.iter_mut() {
            let noise: Tensor<f64> = rng.normal_tensor(p.shape());
            for (v, n) in p.data_mut().iter_mut().zip(noise.data()) {
                *v += 0.3 * n;
            }
        }
        m
    }

    pub fn input(&self, rng: &mut RandomStream) -> Tensor<f64> {
        let shape = self.spec().input.chw();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap()
    }

    pub fn noise(&self, rng: &mut RandomStream) -> Noise<f64> {
        Noise::sample(&self.spec(), 1, rng).unwrap()
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
}
