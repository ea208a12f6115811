//! Group normalization (per-sample, so train and eval behave identically and
//! batches stay decoupled).

use super::params::{GradBuf, InitKind, LayerKind, ParamId, ParamReg, ParamSet};
use super::Feat;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub ch: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<S: Scalar>(reg: &mut ParamReg<S>, name: &str, ch: usize) -> Self {
        let groups = preferred_groups(ch);
        let gamma = reg
            .params
            .register(&format!("{name}.g"), &[ch], InitKind::Constant(1.0), reg.rng);
        let beta = reg
            .params
            .register(&format!("{name}.b"), &[ch], InitKind::Constant(0.0), reg.rng);
        reg.note_layer(name, LayerKind::GroupNorm);
        Self {
            gamma,
            beta,
            ch,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamSet<S>, x: &Feat<S>) -> Feat<S> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.ch);
        let gamma = ps.slice(self.gamma);
        let beta = ps.slice(self.beta);
        let mut y = x.clone();
        let per = c / self.groups;
        let hw = h * w;
        let ys = y.as_slice_mut().unwrap();
        for g in 0..self.groups {
            let lo = g * per * hw;
            let hi = (g + 1) * per * hw;
            let (mean, inv_std) = moments(&ys[lo..hi], self.eps);
            for ci in g * per..(g + 1) * per {
                let ga = gamma[ci];
                let be = beta[ci];
                for v in &mut ys[ci * hw..(ci + 1) * hw] {
                    *v = (*v - mean) * inv_std * ga + be;
                }
            }
        }
        y
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Feat<S>,
        gy: &Feat<S>,
        grads: &mut GradBuf<S>,
    ) -> Feat<S> {
        let (c, h, w) = x.dim();
        let hw = h * w;
        let per = c / self.groups;
        let gamma = ps.slice(self.gamma).to_vec();
        let xs = x.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let mut gx = Feat::<S>::zeros(x.dim());
        let gxs = gx.as_slice_mut().unwrap();

        for g in 0..self.groups {
            let lo = g * per * hw;
            let hi = (g + 1) * per * hw;
            let m = S::from_usize(hi - lo);
            let (mean, inv_std) = moments(&xs[lo..hi], self.eps);

            // per-channel param grads + group-level reductions
            let mut sum_gh = S::zero();
            let mut sum_gh_xhat = S::zero();
            for ci in g * per..(g + 1) * per {
                let mut gga = S::zero();
                let mut gbe = S::zero();
                for i in ci * hw..(ci + 1) * hw {
                    let xhat = (xs[i] - mean) * inv_std;
                    let gyv = gys[i];
                    gga += gyv * xhat;
                    gbe += gyv;
                    let gh = gyv * gamma[ci];
                    sum_gh += gh;
                    sum_gh_xhat += gh * xhat;
                }
                grads.slice_mut(ps, self.gamma)[ci] += gga;
                grads.slice_mut(ps, self.beta)[ci] += gbe;
            }
            let mean_gh = sum_gh / m;
            let mean_gh_xhat = sum_gh_xhat / m;
            for ci in g * per..(g + 1) * per {
                for i in ci * hw..(ci + 1) * hw {
                    let xhat = (xs[i] - mean) * inv_std;
                    let gh = gys[i] * gamma[ci];
                    gxs[i] = (gh - mean_gh - xhat * mean_gh_xhat) * inv_std;
                }
            }
        }
        gx
    }
}

fn moments<S: Scalar>(v: &[S], eps: f64) -> (S, S) {
    let m = S::from_usize(v.len());
    let mean = v.iter().copied().sum::<S>() / m;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / m;
    (mean, (var + S::from_f64(eps)).sqrt().recip())
}

/// Largest divisor of `ch` not exceeding 8.
fn preferred_groups(ch: usize) -> usize {
    (1..=8.min(ch)).rev().find(|g| ch % g == 0).unwrap_or(1)
}
