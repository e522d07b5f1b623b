use ndarray::ArrayD;

use super::{Grads, Params, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over every trainable entry of one [`Params`] registry.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Option<ArrayD<F>>>,
    v: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, params: &Params<F>) -> Self {
        Adam {
            cfg,
            t: 0,
            m: (0..params.len()).map(|_| None).collect(),
            v: (0..params.len()).map(|_| None).collect(),
        }
    }

    pub fn step(&mut self, params: &mut Params<F>, grads: &Grads<F>) {
        self.t += 1;
        let lr = F::from_f64(self.cfg.lr);
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let eps = F::from_f64(self.cfg.eps);
        let one = F::one();
        let bc1 = one - F::from_f64(self.cfg.beta1.powi(self.t as i32));
        let bc2 = one - F::from_f64(self.cfg.beta2.powi(self.t as i32));

        for id in params.ids() {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let idx = id.index();
            if self.m[idx].is_none() {
                self.m[idx] = Some(ArrayD::zeros(g.raw_dim()));
                self.v[idx] = Some(ArrayD::zeros(g.raw_dim()));
            }
            let m = self.m[idx].as_mut().unwrap();
            let v = self.v[idx].as_mut().unwrap();
            let mut value = params.get_mut(id);
            ndarray::Zip::from(&mut value)
                .and(m)
                .and(v)
                .and(&g)
                .for_each(|p, m, v, &gv| {
                    *m = b1 * *m + (one - b1) * gv;
                    *v = b2 * *v + (one - b2) * gv * gv;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Moment tensors in registry order for checkpointing (zeros where a
    /// parameter has not received a gradient yet).
    pub fn state(&self, params: &Params<F>) -> (u64, Vec<ArrayD<F>>, Vec<ArrayD<F>>) {
        let take = |side: &Vec<Option<ArrayD<F>>>| {
            params
                .ids()
                .map(|id| match &side[id.index()] {
                    Some(a) => a.clone(),
                    None => ArrayD::zeros(params.get(id).raw_dim()),
                })
                .collect()
        };
        (self.t, take(&self.m), take(&self.v))
    }

    pub fn restore(&mut self, t: u64, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>) {
        self.t = t;
        self.m = m.into_iter().map(Some).collect();
        self.v = v.into_iter().map(Some).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init;

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut p = Params::<f32>::new();
        let id = p.add("w", init::ones(&[3]), true);
        let before = p.get(id).to_owned();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &p,
        );
        let mut g = Grads::new(&p);
        g.accumulate(id, init::ones(&[3]));
        adam.step(&mut p, &g);
        assert_eq!(p.get(id), before.view());
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = Params::<f64>::new();
        let id = p.add("w", init::ones(&[1]), true);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &p,
        );
        for _ in 0..200 {
            let w = p.get(id)[0];
            let mut g = Grads::new(&p);
            g.accumulate(id, ndarray::arr1(&[2.0 * w]).into_dyn());
            adam.step(&mut p, &g);
        }
        assert!(p.get(id)[0].abs() < 1e-2);
    }
}
