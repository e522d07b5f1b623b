use ndarray::{Array1, Array2};
use rand::Rng;

use super::{gemm_nn, gemm_nt, gemm_tn, init, Grads, ParamId, Params, Scalar};

/// Fully connected layer, `y = x W^T + b`, activations `[n, features]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId, // [out, in]
    pub b: ParamId, // [out]
    pub fin: usize,
    pub fout: usize,
}

pub struct LinearCache<F> {
    x: Array2<F>,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        params: &mut Params<F>,
        rng: &mut R,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        let w = params.add(
            format!("{name}.weight"),
            init::kaiming_uniform(rng, &[fout, fin], fin, 0.2),
            true,
        );
        let b = params.add(format!("{name}.bias"), init::zeros(&[fout]), true);
        Linear { w, b, fin, fout }
    }

    pub fn forward<F: Scalar>(&self, p: &Params<F>, x: &Array2<F>) -> (Array2<F>, LinearCache<F>) {
        let (n, fin) = x.dim();
        assert_eq!(fin, self.fin, "linear input features");
        let weight = p.get(self.w);
        let weight = weight.as_slice().unwrap();
        let bias = p.get(self.b);
        let bias = bias.as_slice().unwrap();

        let mut y = Array2::<F>::zeros((n, self.fout));
        // y = x (n,fin) * W^T (fin,fout)
        gemm_nt(
            n,
            self.fin,
            self.fout,
            F::one(),
            x.as_slice().unwrap(),
            weight,
            F::zero(),
            y.as_slice_mut().unwrap(),
        );
        for mut row in y.rows_mut() {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += *b;
            }
        }
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward<F: Scalar>(
        &self,
        _p: &Params<F>,
        cache: &LinearCache<F>,
        dy: &Array2<F>,
        mut grads: Option<&mut Grads<F>>,
    ) -> Array2<F> {
        let (n, _) = cache.x.dim();
        let mut dx = Array2::<F>::zeros((n, self.fin));
        // dx = dy (n,fout) * W (fout,fin)
        let p = _p;
        let weight = p.get(self.w);
        let weight = weight.as_slice().unwrap();
        gemm_nn(
            n,
            self.fout,
            self.fin,
            F::one(),
            dy.as_slice().unwrap(),
            weight,
            F::zero(),
            dx.as_slice_mut().unwrap(),
        );
        if let Some(g) = grads.as_deref_mut() {
            // dW = dy^T (fout,n) * x (n,fin)
            let mut dw = vec![F::zero(); self.fout * self.fin];
            gemm_tn(
                self.fout,
                n,
                self.fin,
                F::one(),
                dy.as_slice().unwrap(),
                cache.x.as_slice().unwrap(),
                F::zero(),
                &mut dw,
            );
            let mut db = vec![F::zero(); self.fout];
            for row in dy.rows() {
                for (a, v) in db.iter_mut().zip(row) {
                    *a += *v;
                }
            }
            g.accumulate(
                self.w,
                ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[self.fout, self.fin]), dw).unwrap(),
            );
            g.accumulate(self.b, Array1::from_vec(db).into_dyn());
        }
        dx
    }
}
