use ndarray::{Array1, Array4};

use super::{init, Grads, ParamId, Params, Scalar};

/// Whether batch statistics (training) or running statistics (inference)
/// drive normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over (N, H, W) per channel, affine, with running
/// statistics for inference. Forward never mutates parameters; the trainer
/// applies [`BatchNorm2d::update_running`] after a training-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub c: usize,
    pub eps: f64,
    pub momentum: f64,
}

pub struct BatchNorm2dCache<F> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
    batch_mean: Array1<F>,
    batch_var: Array1<F>,
    mode: Mode,
}

impl BatchNorm2d {
    pub fn new<F: Scalar>(params: &mut Params<F>, name: &str, c: usize) -> Self {
        BatchNorm2d {
            gamma: params.add(format!("{name}.gamma"), init::ones(&[c]), true),
            beta: params.add(format!("{name}.beta"), init::zeros(&[c]), true),
            running_mean: params.add(format!("{name}.running_mean"), init::zeros(&[c]), false),
            running_var: params.add(format!("{name}.running_var"), init::ones(&[c]), false),
            c,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        p: &Params<F>,
        x: &Array4<F>,
        mode: Mode,
    ) -> (Array4<F>, BatchNorm2dCache<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c, "batchnorm channels");
        let m = F::from_f64((n * h * w) as f64);
        let eps = F::from_f64(self.eps);

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::<F>::zeros(c);
                let mut var = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let lane = x.slice(ndarray::s![.., ci, .., ..]);
                    let mu = lane.iter().copied().sum::<F>() / m;
                    let v = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / m;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                (mean, var)
            }
            Mode::Eval => (
                p.get(self.running_mean).to_owned().into_dimensionality().unwrap(),
                p.get(self.running_var).to_owned().into_dimensionality().unwrap(),
            ),
        };

        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);

        let mut xhat = x.clone();
        let mut y = Array4::<F>::zeros((n, c, h, w));
        for ci in 0..c {
            let mu = mean[ci];
            let is = inv_std[ci];
            let g = gamma[ci];
            let b = beta[ci];
            let mut xh = xhat.slice_mut(ndarray::s![.., ci, .., ..]);
            let mut yl = y.slice_mut(ndarray::s![.., ci, .., ..]);
            ndarray::Zip::from(&mut xh).and(&mut yl).for_each(|xv, yv| {
                *xv = (*xv - mu) * is;
                *yv = g * *xv + b;
            });
        }
        (
            y,
            BatchNorm2dCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                mode,
            },
        )
    }

    /// Fold the cached batch statistics into the running averages
    /// (training steps only; single-writer).
    pub fn update_running<F: Scalar>(&self, p: &mut Params<F>, cache: &BatchNorm2dCache<F>, batch_elems: usize) {
        debug_assert_eq!(cache.mode, Mode::Train);
        let mom = F::from_f64(self.momentum);
        let one = F::one();
        let m = batch_elems as f64;
        // running_var keeps the unbiased estimate
        let unbias = F::from_f64(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
        {
            let mut rm = p.get_mut(self.running_mean);
            for (r, &b) in rm.iter_mut().zip(cache.batch_mean.iter()) {
                *r = (one - mom) * *r + mom * b;
            }
        }
        let mut rv = p.get_mut(self.running_var);
        for (r, &b) in rv.iter_mut().zip(cache.batch_var.iter()) {
            *r = (one - mom) * *r + mom * b * unbias;
        }
    }

    pub fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &BatchNorm2dCache<F>,
        dy: &Array4<F>,
        mut grads: Option<&mut Grads<F>>,
    ) -> Array4<F> {
        let (n, c, h, w) = dy.dim();
        let m = F::from_f64((n * h * w) as f64);
        let gamma = p.get(self.gamma);

        let mut dx = Array4::<F>::zeros((n, c, h, w));
        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);

        for ci in 0..c {
            let xh = cache.xhat.slice(ndarray::s![.., ci, .., ..]);
            let dyl = dy.slice(ndarray::s![.., ci, .., ..]);
            let g = gamma[ci];
            let is = cache.inv_std[ci];

            let sum_dy = dyl.iter().copied().sum::<F>();
            let sum_dy_xhat = dyl.iter().zip(xh.iter()).map(|(&d, &x)| d * x).sum::<F>();
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;

            let mut dxl = dx.slice_mut(ndarray::s![.., ci, .., ..]);
            match cache.mode {
                Mode::Train => {
                    ndarray::Zip::from(&mut dxl).and(&dyl).and(&xh).for_each(|d, &dyv, &xv| {
                        *d = g * is / m * (m * dyv - sum_dy - xv * sum_dy_xhat);
                    });
                }
                Mode::Eval => {
                    ndarray::Zip::from(&mut dxl).and(&dyl).for_each(|d, &dyv| {
                        *d = g * is * dyv;
                    });
                }
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            g.accumulate(self.gamma, dgamma.into_dyn());
            g.accumulate(self.beta, dbeta.into_dyn());
        }
        dx
    }
}

/// Instance normalization over (H, W) per sample and channel, no affine
/// parameters. Uses instance statistics in both modes.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    pub c: usize,
    pub eps: f64,
}

pub struct InstanceNorm2dCache<F> {
    xhat: Array4<F>,
    inv_std: ndarray::Array2<F>, // [n, c]
}

impl InstanceNorm2d {
    pub fn new(c: usize) -> Self {
        InstanceNorm2d { c, eps: 1e-5 }
    }

    pub fn forward<F: Scalar>(&self, x: &Array4<F>) -> (Array4<F>, InstanceNorm2dCache<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c, "instancenorm channels");
        let m = F::from_f64((h * w) as f64);
        let eps = F::from_f64(self.eps);

        let mut xhat = x.clone();
        let mut inv_std = ndarray::Array2::<F>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut lane = xhat.slice_mut(ndarray::s![ni, ci, .., ..]);
                let mu = lane.iter().copied().sum::<F>() / m;
                let var = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / m;
                let is = F::one() / (var + eps).sqrt();
                inv_std[[ni, ci]] = is;
                lane.mapv_inplace(|v| (v - mu) * is);
            }
        }
        let y = xhat.clone();
        (y, InstanceNorm2dCache { xhat, inv_std })
    }

    pub fn backward<F: Scalar>(&self, cache: &InstanceNorm2dCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = dy.dim();
        let m = F::from_f64((h * w) as f64);
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let xh = cache.xhat.slice(ndarray::s![ni, ci, .., ..]);
                let dyl = dy.slice(ndarray::s![ni, ci, .., ..]);
                let is = cache.inv_std[[ni, ci]];
                let sum_dy = dyl.iter().copied().sum::<F>();
                let sum_dy_xhat = dyl.iter().zip(xh.iter()).map(|(&d, &x)| d * x).sum::<F>();
                let mut dxl = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
                ndarray::Zip::from(&mut dxl).and(&dyl).and(&xh).for_each(|d, &dyv, &xv| {
                    *d = is / m * (m * dyv - sum_dy - xv * sum_dy_xhat);
                });
            }
        }
        dx
    }
}
