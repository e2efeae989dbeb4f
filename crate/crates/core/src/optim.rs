/// AdamW with the AMSGrad running maximum of the second moment, decoupled
/// weight decay and bias correction as in the common deep-learning
/// frameworks.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: Vec<Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    second_max: Vec<f64>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter group. Groups must keep their order and
    /// lengths across calls.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter group");
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| Moments {
                    first: vec![0.0; p.len()],
                    second: vec![0.0; p.len()],
                    second_max: vec![0.0; p.len()],
                })
                .collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step_size = self.learning_rate / bc1;
        let decay = 1.0 - self.learning_rate * self.weight_decay;
        for ((p, g), m) in params.iter_mut().zip(grads).zip(self.state.iter_mut()) {
            assert_eq!(p.len(), g.len(), "gradient length");
            for i in 0..p.len() {
                p[i] *= decay;
                m.first[i] = self.beta1 * m.first[i] + (1.0 - self.beta1) * g[i];
                m.second[i] = self.beta2 * m.second[i] + (1.0 - self.beta2) * g[i] * g[i];
                m.second_max[i] = m.second_max[i].max(m.second[i]);
                let denom = m.second_max[i].sqrt() / bc2_sqrt + self.eps;
                p[i] -= step_size * m.first[i] / denom;
            }
        }
    }
}
