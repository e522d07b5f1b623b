//! Classical optical-flow alignment backend: coarse-to-fine pyramidal
//! estimation with warping refinement and a variational (Horn-Schunck
//! style) inner solver, plus backward warping. Alignment cost is inherently
//! two flow passes per triplet, against the single fused pass of the
//! deformable backend.

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::config::FlowConfig;
use crate::error::{Error, Result};
use crate::frame::LumaFrame;
use crate::nn::{downsample2_avg, Conv2d, Conv2dCache, Grads, Params, Scalar};

/// Dense displacement field: `dy`/`dx` give, per pixel of the destination,
/// where to sample the source (`src(p + flow(p)) ~ dst(p)`).
#[derive(Debug, Clone)]
pub struct FlowField {
    pub dy: Array2<f32>,
    pub dx: Array2<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            dy: Array2::zeros((h, w)),
            dx: Array2::zeros((h, w)),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dy.dim()
    }
}

/// Estimate dense flow from `src` to `dst` with a pyramid of `levels`
/// levels and default solver settings.
pub fn estimate_flow(src: &LumaFrame, dst: &LumaFrame, levels: usize) -> Result<FlowField> {
    let cfg = FlowConfig {
        levels,
        ..FlowConfig::default()
    };
    estimate_flow_cfg(src, dst, &cfg)
}

pub fn estimate_flow_cfg(src: &LumaFrame, dst: &LumaFrame, cfg: &FlowConfig) -> Result<FlowField> {
    if (src.height(), src.width()) != (dst.height(), dst.width()) {
        return Err(Error::shape("flow estimation needs equal frame dimensions"));
    }
    if cfg.levels == 0 {
        return Err(Error::Config("flow estimator needs at least one pyramid level".into()));
    }
    let mut src_pyr = vec![src.pixels().clone()];
    let mut dst_pyr = vec![dst.pixels().clone()];
    for _ in 1..cfg.levels {
        let s = src_pyr.last().unwrap();
        if s.dim().0 < 8 || s.dim().1 < 8 {
            break;
        }
        src_pyr.push(downsample2_avg(s));
        dst_pyr.push(downsample2_avg(dst_pyr.last().unwrap()));
    }

    let coarsest = src_pyr.len() - 1;
    let (ch, cw) = src_pyr[coarsest].dim();
    let mut flow = FlowField::zeros(ch, cw);
    for level in (0..src_pyr.len()).rev() {
        if level != coarsest {
            flow = upscale_flow(&flow, src_pyr[level].dim());
        }
        refine_level(&src_pyr[level], &dst_pyr[level], &mut flow, cfg);
    }
    Ok(flow)
}

/// One pyramid level: `iters` warping refinements, each solving the
/// linearized constancy equation with `sweeps` Jacobi relaxations.
fn refine_level(src: &Array2<f32>, dst: &Array2<f32>, flow: &mut FlowField, cfg: &FlowConfig) {
    let (h, w) = src.dim();
    let alpha2 = (cfg.alpha * cfg.alpha) as f32;
    for _ in 0..cfg.iters {
        let warped = warp_plane(&src.view(), &flow.dy, &flow.dx);
        // averaged spatial gradients of warped source and target,
        // edge-replicated; averaging conditions the linearization
        let mut ix = Array2::<f32>::zeros((h, w));
        let mut iy = Array2::<f32>::zeros((h, w));
        let mut it = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(w - 1);
                let ym = y.saturating_sub(1);
                let yp = (y + 1).min(h - 1);
                let dx_span = (xp - xm).max(1) as f32;
                let dy_span = (yp - ym).max(1) as f32;
                ix[[y, x]] = 0.5 * ((warped[[y, xp]] - warped[[y, xm]]) + (dst[[y, xp]] - dst[[y, xm]])) / dx_span;
                iy[[y, x]] = 0.5 * ((warped[[yp, x]] - warped[[ym, x]]) + (dst[[yp, x]] - dst[[ym, x]])) / dy_span;
                it[[y, x]] = warped[[y, x]] - dst[[y, x]];
            }
        }

        let mut du = Array2::<f32>::zeros((h, w));
        let mut dv = Array2::<f32>::zeros((h, w));
        let mut du_next = Array2::<f32>::zeros((h, w));
        let mut dv_next = Array2::<f32>::zeros((h, w));
        for _ in 0..cfg.sweeps {
            for y in 0..h {
                for x in 0..w {
                    let xm = x.saturating_sub(1);
                    let xp = (x + 1).min(w - 1);
                    let ym = y.saturating_sub(1);
                    let yp = (y + 1).min(h - 1);
                    let dubar = 0.25 * (du[[ym, x]] + du[[yp, x]] + du[[y, xm]] + du[[y, xp]]);
                    let dvbar = 0.25 * (dv[[ym, x]] + dv[[yp, x]] + dv[[y, xm]] + dv[[y, xp]]);
                    let gx = ix[[y, x]];
                    let gy = iy[[y, x]];
                    let r = (gy * dubar + gx * dvbar + it[[y, x]]) / (alpha2 + gx * gx + gy * gy);
                    // du is the vertical increment (pairs with iy), dv horizontal
                    du_next[[y, x]] = dubar - gy * r;
                    dv_next[[y, x]] = dvbar - gx * r;
                }
            }
            std::mem::swap(&mut du, &mut du_next);
            std::mem::swap(&mut dv, &mut dv_next);
        }
        // the linearization is only valid for subpixel residual motion;
        // clamp each refinement to one pixel
        du.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        dv.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        flow.dy += &du;
        flow.dx += &dv;
        // 3x3 median cleans spike outliers at occlusions and flat spots
        flow.dy = median3(&flow.dy);
        flow.dx = median3(&flow.dx);
    }
}

fn median3(plane: &Array2<f32>) -> Array2<f32> {
    let (h, w) = plane.dim();
    let mut vals = [0.0f32; 9];
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut n = 0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                vals[n] = plane[[yy, xx]];
                n += 1;
            }
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals[4]
    })
}

fn upscale_flow(flow: &FlowField, target: (usize, usize)) -> FlowField {
    let (th, tw) = target;
    let (sh, sw) = flow.dims();
    let scale_y = th as f32 / sh as f32;
    let scale_x = tw as f32 / sw as f32;
    let sample = |plane: &Array2<f32>, y: usize, x: usize| -> f32 {
        let sy = ((y as f32 + 0.5) / scale_y - 0.5).clamp(0.0, (sh - 1) as f32);
        let sx = ((x as f32 + 0.5) / scale_x - 0.5).clamp(0.0, (sw - 1) as f32);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let fy = sy - y0 as f32;
        let fx = sx - x0 as f32;
        (plane[[y0, x0]] * (1.0 - fy) + plane[[y1, x0]] * fy) * (1.0 - fx)
            + (plane[[y0, x1]] * (1.0 - fy) + plane[[y1, x1]] * fy) * fx
    };
    FlowField {
        dy: Array2::from_shape_fn((th, tw), |(y, x)| sample(&flow.dy, y, x) * scale_y),
        dx: Array2::from_shape_fn((th, tw), |(y, x)| sample(&flow.dx, y, x) * scale_x),
    }
}

fn warp_plane(src: &ndarray::ArrayView2<f32>, dy: &Array2<f32>, dx: &Array2<f32>) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        crate::align::bilinear_sample(src, y as f32 + dy[[y, x]], x as f32 + dx[[y, x]])
    })
}

/// Backward warping with zero padding outside the source frame.
pub fn warp(frame: &LumaFrame, flow: &FlowField) -> Result<LumaFrame> {
    if flow.dims() != (frame.height(), frame.width()) {
        return Err(Error::shape("flow field dimensions must match the frame"));
    }
    LumaFrame::from_clamped(warp_plane(&frame.pixels().view(), &flow.dy, &flow.dx))
}

/// Flow-based alignment module: estimate prev->curr and next->curr flows,
/// warp the neighbors, and lift the 3-plane stack to the aligned-feature
/// width with one 3x3 convolution so it is drop-in compatible with the
/// enhancement module. Gradients stop at the warped planes; only the
/// lifting convolution is trainable.
#[derive(Debug, Clone)]
pub struct FlowAlign {
    pub lift: Conv2d,
    pub cfg: FlowConfig,
}

pub struct FlowAlignCache<F> {
    lift: Conv2dCache<F>,
    frame_dims: (usize, usize, usize, usize),
}

impl FlowAlign {
    pub fn new<F: Scalar, R: Rng>(
        params: &mut Params<F>,
        rng: &mut R,
        name: &str,
        aligned_channels: usize,
        cfg: &FlowConfig,
    ) -> Self {
        FlowAlign {
            lift: Conv2d::new(params, rng, &format!("{name}.lift"), 3, aligned_channels, 3, 1, 1),
            cfg: cfg.clone(),
        }
    }

    /// Warp neighbors onto the center frame, then lift to `C_a` channels.
    pub fn forward<F: Scalar>(&self, p: &Params<F>, frames: &Array4<F>) -> (Array4<F>, FlowAlignCache<F>) {
        let stacked = self.warp_stack(frames);
        let (z, lift) = self.lift.forward(p, &stacked);
        (
            z,
            FlowAlignCache {
                lift,
                frame_dims: frames.dim(),
            },
        )
    }

    /// The warped 3-plane stack before lifting (used by the benchmark to
    /// time the alignment work itself).
    pub fn warp_stack<F: Scalar>(&self, frames: &Array4<F>) -> Array4<F> {
        let (n, t, h, w) = frames.dim();
        assert_eq!(t, 3, "flow alignment expects 3 stacked frames");
        let mut stacked = Array4::<F>::zeros((n, 3, h, w));
        for ni in 0..n {
            let plane = |ci: usize| {
                Array2::from_shape_fn((h, w), |(y, x)| frames[[ni, ci, y, x]].to_f64() as f32)
            };
            let prev = plane(0);
            let curr = plane(1);
            let next = plane(2);
            let f_prev = estimate_plane_flow(&prev, &curr, &self.cfg);
            let f_next = estimate_plane_flow(&next, &curr, &self.cfg);
            let wp = warp_plane(&prev.view(), &f_prev.dy, &f_prev.dx);
            let wn = warp_plane(&next.view(), &f_next.dy, &f_next.dx);
            for (ci, pl) in [&wp, &curr, &wn].into_iter().enumerate() {
                let mut lane = stacked.slice_mut(ndarray::s![ni, ci, .., ..]);
                ndarray::Zip::from(&mut lane).and(pl).for_each(|o, &v| *o = F::from_f64(v as f64));
            }
        }
        stacked
    }

    pub fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &FlowAlignCache<F>,
        dz: &Array4<F>,
        grads: Option<&mut Grads<F>>,
    ) -> Array4<F> {
        let _ = self.lift.backward(p, &cache.lift, dz, grads);
        // classical flow estimation is not differentiated; input gradient
        // is defined as zero
        Array4::zeros(cache.frame_dims)
    }
}

fn estimate_plane_flow(src: &Array2<f32>, dst: &Array2<f32>, cfg: &FlowConfig) -> FlowField {
    let mut src_pyr = vec![src.clone()];
    let mut dst_pyr = vec![dst.clone()];
    for _ in 1..cfg.levels {
        let s = src_pyr.last().unwrap();
        if s.dim().0 < 8 || s.dim().1 < 8 {
            break;
        }
        src_pyr.push(downsample2_avg(s));
        dst_pyr.push(downsample2_avg(dst_pyr.last().unwrap()));
    }
    let coarsest = src_pyr.len() - 1;
    let (ch, cw) = src_pyr[coarsest].dim();
    let mut flow = FlowField::zeros(ch, cw);
    for level in (0..src_pyr.len()).rev() {
        if level != coarsest {
            flow = upscale_flow(&flow, src_pyr[level].dim());
        }
        refine_level(&src_pyr[level], &dst_pyr[level], &mut flow, cfg);
    }
    flow
}
