use petri_grad::Tensor;
use rand::Rng;

use super::WorldConfig;

/// Per-cell network: flattened 3x3 neighborhood -> dense(hidden) -> tanh ->
/// dense(C).
#[derive(Clone, Debug, PartialEq)]
pub struct AgentNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl AgentNet {
    /// Weights and first bias uniform in `±1/sqrt(fan_in)`, output bias zero.
    pub fn init(config: &WorldConfig, rng: &mut impl Rng) -> Self {
        let c = config.channels();
        let inputs = 9 * c;
        let hidden = config.hidden_width;
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f32).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
        };
        let w1 = uniform(vec![inputs, hidden], inputs);
        let b1 = uniform(vec![hidden], inputs);
        let w2 = uniform(vec![hidden, c], hidden);
        Self {
            w1,
            b1,
            w2,
            b2: Tensor::zeros([c]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn from_tensors([w1, b1, w2, b2]: [Tensor; 4]) -> Self {
        Self { w1, b1, w2, b2 }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Check shapes against a world configuration.
    pub fn conforms_to(&self, config: &WorldConfig) -> bool {
        let c = config.channels();
        let h = config.hidden_width;
        self.w1.shape() == [9 * c, h]
            && self.b1.shape() == [h]
            && self.w2.shape() == [h, c]
            && self.b2.shape() == [c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bounds() {
        let config = WorldConfig::default();
        let net = AgentNet::init(&config, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(net.conforms_to(&config));
        let b = 1.0 / (144f32).sqrt();
        assert!(net.w1.max_abs() <= b);
        assert!(net.w2.max_abs() <= 1.0 / 8.0);
        assert_eq!(net.b2.max_abs(), 0.0);
        assert_eq!(net.parameter_count(), 144 * 64 + 64 + 64 * 16 + 16);
    }
}
