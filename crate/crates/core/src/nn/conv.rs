//! Strided 2-D convolution and its transpose, both on channel-last
//! (`[batch, height, width, channels]`) activations via im2col + gemm.

use rand::Rng;

use super::params::{Init, ParamId, ParamStore};
use super::real::{matmul, Real};

/// Geometry of a square-kernel convolution from a `big` grid to a `small` one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub big: usize,
    pub small: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(big: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let small = (big + 2 * pad - kernel) / stride + 1;
        Self { big, small, kernel, stride, pad }
    }

    #[inline]
    fn source(&self, out: usize, k: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.big).then_some(pos as usize)
    }

    /// `[big, big, c]` → `[small·small, k·k·c]` patch matrix.
    fn gather<T: Real>(&self, x: &[T], c: usize) -> Vec<T> {
        let (k, s) = (self.kernel, self.small);
        let row = k * k * c;
        let mut cols = vec![T::zero(); s * s * row];
        for oy in 0..s {
            for ox in 0..s {
                let dst = &mut cols[(oy * s + ox) * row..][..row];
                for ky in 0..k {
                    let Some(iy) = self.source(oy, ky) else { continue };
                    for kx in 0..k {
                        let Some(ix) = self.source(ox, kx) else { continue };
                        let src = &x[(iy * self.big + ix) * c..][..c];
                        dst[(ky * k + kx) * c..][..c].copy_from_slice(src);
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`gather`](Self::gather): accumulates patches into `x`.
    fn scatter<T: Real>(&self, cols: &[T], c: usize, x: &mut [T]) {
        let (k, s) = (self.kernel, self.small);
        let row = k * k * c;
        for oy in 0..s {
            for ox in 0..s {
                let src = &cols[(oy * s + ox) * row..][..row];
                for ky in 0..k {
                    let Some(iy) = self.source(oy, ky) else { continue };
                    for kx in 0..k {
                        let Some(ix) = self.source(ox, kx) else { continue };
                        let dst = &mut x[(iy * self.big + ix) * c..][..c];
                        for (d, &v) in dst.iter_mut().zip(&src[(ky * k + kx) * c..][..c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Downsampling convolution `big → small`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        let fan_in = geom.kernel * geom.kernel * cin;
        let w = store.add(format!("{name}.weight"), &[fan_in, cout], Init::Kaiming { fan_in }, rng);
        let b = store.add(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Self { w, b, cin, cout, geom }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &[T], batch: usize) -> (Vec<T>, ConvCache<T>) {
        let g = self.geom;
        let in_sz = g.big * g.big * self.cin;
        let out_px = g.small * g.small;
        let row = g.kernel * g.kernel * self.cin;
        let mut cols = Vec::with_capacity(batch * out_px * row);
        for n in 0..batch {
            cols.extend(g.gather(&x[n * in_sz..][..in_sz], self.cin));
        }
        let bias = store.value(self.b);
        let mut y = Vec::with_capacity(batch * out_px * self.cout);
        for _ in 0..batch * out_px {
            y.extend_from_slice(bias);
        }
        matmul(&cols, store.value(self.w), &mut y, batch * out_px, row, self.cout, false, false, true);
        (y, ConvCache { cols })
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &[T],
        batch: usize,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let g = self.geom;
        let out_px = g.small * g.small;
        let row = g.kernel * g.kernel * self.cin;
        let rows = batch * out_px;
        matmul(&cache.cols, dy, &mut store.grads[self.w.0], row, rows, self.cout, true, false, true);
        {
            let gb = &mut store.grads[self.b.0];
            for r in dy.chunks_exact(self.cout) {
                for (gv, &d) in gb.iter_mut().zip(r) {
                    *gv += d;
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); rows * row];
        matmul(dy, &store.values[self.w.0], &mut dcols, rows, self.cout, row, false, true, false);
        let in_sz = g.big * g.big * self.cin;
        let mut dx = vec![T::zero(); batch * in_sz];
        for n in 0..batch {
            g.scatter(&dcols[n * out_px * row..][..out_px * row], self.cin, &mut dx[n * in_sz..][..in_sz]);
        }
        Some(dx)
    }
}

/// Upsampling transposed convolution `small → big`, the adjoint of a
/// [`Conv2d`] with the same geometry.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

pub struct ConvTransposeCache<T> {
    x: Vec<T>,
}

impl ConvTranspose2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        // Each output pixel receives roughly (k/s)^2 taps per input channel.
        let taps = (geom.kernel / geom.stride).max(1);
        let fan_in = taps * taps * cin;
        let row = geom.kernel * geom.kernel * cout;
        let w = store.add(format!("{name}.weight"), &[cin, row], Init::Kaiming { fan_in }, rng);
        let b = store.add(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Self { w, b, cin, cout, geom }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
    ) -> (Vec<T>, ConvTransposeCache<T>) {
        let g = self.geom;
        let in_px = g.small * g.small;
        let row = g.kernel * g.kernel * self.cout;
        let mut cols = vec![T::zero(); batch * in_px * row];
        matmul(x, store.value(self.w), &mut cols, batch * in_px, self.cin, row, false, false, false);
        let out_sz = g.big * g.big * self.cout;
        let mut y = vec![T::zero(); batch * out_sz];
        for n in 0..batch {
            g.scatter(&cols[n * in_px * row..][..in_px * row], self.cout, &mut y[n * out_sz..][..out_sz]);
        }
        let bias = store.value(self.b);
        for px in y.chunks_exact_mut(self.cout) {
            for (v, &b) in px.iter_mut().zip(bias) {
                *v += b;
            }
        }
        (y, ConvTransposeCache { x: x.to_vec() })
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ConvTransposeCache<T>,
        dy: &[T],
        batch: usize,
    ) -> Vec<T> {
        let g = self.geom;
        let in_px = g.small * g.small;
        let row = g.kernel * g.kernel * self.cout;
        let out_sz = g.big * g.big * self.cout;
        {
            let gb = &mut store.grads[self.b.0];
            for px in dy.chunks_exact(self.cout) {
                for (gv, &d) in gb.iter_mut().zip(px) {
                    *gv += d;
                }
            }
        }
        let mut dcols = Vec::with_capacity(batch * in_px * row);
        for n in 0..batch {
            dcols.extend(g.gather(&dy[n * out_sz..][..out_sz], self.cout));
        }
        let rows = batch * in_px;
        matmul(&cache.x, &dcols, &mut store.grads[self.w.0], self.cin, rows, row, true, false, true);
        let mut dx = vec![T::zero(); rows * self.cin];
        matmul(&dcols, &store.values[self.w.0], &mut dx, rows, row, self.cin, false, true, false);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometry_matches_expected_sizes() {
        assert_eq!(ConvGeom::new(32, 3, 2, 1).small, 16);
        assert_eq!(ConvGeom::new(8, 3, 2, 1).small, 4);
        assert_eq!(ConvGeom::new(32, 4, 2, 1).small, 16);
        assert_eq!(ConvGeom::new(8, 4, 2, 1).small, 4);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let geom = ConvGeom::new(6, 3, 2, 1);
        let conv = Conv2d::new(&mut store, "c", 2, 3, geom, &mut rng);
        store.value_mut(conv.b).copy_from_slice(&[0.1, -0.2, 0.3]);
        let x: Vec<f64> = (0..6 * 6 * 2).map(|i| (i as f64 * 0.13).sin()).collect();
        let (y, _) = conv.forward(&store, &x, 1);
        let w = store.value(conv.w);
        for oy in 0..3 {
            for ox in 0..3 {
                for co in 0..3 {
                    let mut acc = store.value(conv.b)[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 6 || ix >= 6 {
                                continue;
                            }
                            for ci in 0..2 {
                                let xv = x[((iy as usize) * 6 + ix as usize) * 2 + ci];
                                acc += xv * w[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    assert!((y[(oy * 3 + ox) * 3 + co] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> when both share one kernel and no bias.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let geom = ConvGeom::new(8, 4, 2, 1);
        let conv = Conv2d::new(&mut store, "c", 3, 2, geom, &mut rng);
        let deconv = ConvTranspose2d::new(&mut store, "d", 2, 3, geom, &mut rng);
        // conv weight [k*k*3, 2]; deconv weight [2, k*k*3] is its transpose.
        let wc = store.value(conv.w).to_vec();
        let kk3 = 16 * 3;
        let wd = store.value_mut(deconv.w);
        for r in 0..kk3 {
            for co in 0..2 {
                wd[co * kk3 + r] = wc[r * 2 + co];
            }
        }
        let x: Vec<f64> = (0..8 * 8 * 3).map(|i| (i as f64 * 0.29).cos()).collect();
        let y: Vec<f64> = (0..4 * 4 * 2).map(|i| (i as f64 * 0.41).sin()).collect();
        let (cx, _) = conv.forward(&store, &x, 1);
        let (ty, _) = deconv.forward(&store, &y, 1);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let geom = ConvGeom::new(4, 4, 2, 1);
        let deconv = ConvTranspose2d::new(&mut store, "d", 2, 2, geom, &mut rng);
        let conv = Conv2d::new(&mut store, "c", 2, 2, ConvGeom::new(4, 3, 2, 1), &mut rng);
        let x: Vec<f64> = (0..2 * 2 * 2).map(|i| (i as f64 * 0.7).sin()).collect();
        let f = |v: &[f64]| -> f64 {
            let (u, _) = deconv.forward(&store, v, 1);
            let (w, _) = conv.forward(&store, &u, 1);
            w.iter().enumerate().map(|(i, z)| z * (i as f64 + 1.0)).sum()
        };
        let (u, dc) = deconv.forward(&store, &x, 1);
        let (w, cc) = conv.forward(&store, &u, 1);
        let dy: Vec<f64> = (0..w.len()).map(|i| i as f64 + 1.0).collect();
        let mut grads = store.clone();
        let du = conv.backward(&mut grads, &cc, &dy, 1, true).unwrap();
        let dx = deconv.backward(&mut grads, &dc, &du, 1);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1e-5;
            let mut xm = x.clone();
            xm[i] -= 1e-5;
            let fd = (f(&xp) - f(&xm)) / 2e-5;
            assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
