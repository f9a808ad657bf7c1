use crate::model::{Gradients, Params};

/// Adaptive-moment optimizer with bias correction and optional global
/// gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    clip_norm: Option<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(
        param_count: usize,
        learning_rate: f64,
        (beta1, beta2): (f64, f64),
        epsilon: f64,
        clip_norm: Option<f64>,
    ) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            clip_norm,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut Params, grads: &Gradients) -> f64 {
        let norm = grads.l2_norm();
        let clip = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads.values())
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let g = g * clip;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_params() -> Params {
        Params::init(&ModelConfig {
            vocab_size: 8,
            model_dim: 2,
            num_heads: 1,
            num_layers: 1,
            ffn_dim: 2,
            max_source_length: 2,
            dropout_rate: 0.0,
            seed: 1,
        })
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first step is lr * g / (|g| + eps) ≈ lr * sign(g)
        let mut p = small_params();
        let before = p.values().to_vec();
        let mut g = Gradients::zeros_like(&p);
        g.values_mut()[0] = 0.5;
        g.values_mut()[1] = -2.0;
        let mut adam = Adam::new(p.len(), 0.01, (0.9, 0.999), 1e-8, None);
        adam.update(&mut p, &g);
        assert!((before[0] - p.values()[0] - 0.01).abs() < 1e-9);
        assert!((p.values()[1] - before[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.values()[2], before[2]);
    }

    #[test]
    fn clipping_scales_gradient() {
        let mut p = small_params();
        let mut g = Gradients::zeros_like(&p);
        g.values_mut()[0] = 30.0;
        g.values_mut()[1] = 40.0;
        let mut adam = Adam::new(p.len(), 0.01, (0.9, 0.999), 1e-8, Some(1.0));
        let norm = adam.update(&mut p, &g);
        assert!((norm - 50.0).abs() < 1e-12);
        // first moment holds (1 - beta1) * clipped gradient
        assert!((adam.first_moment[0] - 0.1 * 0.6).abs() < 1e-12);
        assert!((adam.first_moment[1] - 0.1 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        // drive every parameter toward 0.5 under loss sum (p - 0.5)^2
        let mut p = small_params();
        let mut adam = Adam::new(p.len(), 0.05, (0.9, 0.999), 1e-8, None);
        for _ in 0..500 {
            let mut g = Gradients::zeros_like(&p);
            for (gk, &pk) in g.values_mut().iter_mut().zip(p.values()) {
                *gk = 2.0 * (pk - 0.5);
            }
            adam.update(&mut p, &g);
        }
        assert!(p.values().iter().all(|v| (v - 0.5).abs() < 1e-2));
    }
}
