//! Differentiable building blocks of the localization network.
//!
//! All ops take and return [`FeatureMap`]s: channel-major tensors whose
//! channels use the same x-fastest layout as [`crate::volume::Volume3D`].
//! Convolutions use stride 1 and zero padding, so spatial dims never change;
//! only `maxpool2` / `upsample2` move between resolutions.
//!
//! Every backward function is the exact transpose of its forward linearization
//! and is validated against central finite differences in the tests.

use super::NetError;
use crate::par;

/// Channel-major dense tensor: `data[((c*nz + z)*ny + y)*nx + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> FeatureMap {
        FeatureMap {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_channels(dims: [usize; 3], channels: Vec<Vec<f64>>) -> Result<FeatureMap, NetError> {
        let voxels = dims[0] * dims[1] * dims[2];
        if channels.iter().any(|c| c.len() != voxels) {
            return Err(NetError::Shape(format!(
                "channel data does not match dims {dims:?}"
            )));
        }
        let n = channels.len();
        let mut data = Vec::with_capacity(n * voxels);
        for c in channels {
            data.extend_from_slice(&c);
        }
        Ok(FeatureMap {
            channels: n,
            dims,
            data,
        })
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let v = self.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }
}

/// 3D convolution parameters: odd cubic kernel, stride 1, zero padding.
///
/// Weight layout: `[co][ci][kz][ky][kx]`, then one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub ksize: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn zeros(in_channels: usize, out_channels: usize, ksize: usize) -> Result<Conv3d, NetError> {
        if ksize % 2 == 0 || ksize == 0 {
            return Err(NetError::Shape(format!("kernel size {ksize} must be odd")));
        }
        Ok(Conv3d {
            in_channels,
            out_channels,
            ksize,
            weights: vec![0.0; out_channels * in_channels * ksize * ksize * ksize],
            bias: vec![0.0; out_channels],
        })
    }

    /// Number of weights per output channel (fan-in of each output voxel).
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.ksize * self.ksize * self.ksize
    }

    #[inline]
    fn weight_index(&self, co: usize, ci: usize, kz: usize, ky: usize, kx: usize) -> usize {
        (((co * self.in_channels + ci) * self.ksize + kz) * self.ksize + ky) * self.ksize + kx
    }

    fn check_input(&self, input: &FeatureMap) -> Result<(), NetError> {
        if input.channels != self.in_channels {
            return Err(NetError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        Ok(())
    }

    /// Forward convolution; output has the same spatial dims as the input.
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap, NetError> {
        self.check_input(input)?;
        let [nx, ny, nz] = input.dims;
        let voxels = input.voxels();
        let pad = (self.ksize / 2) as isize;

        let channels = par::map_indexed(self.out_channels, |co| {
            let mut out = vec![self.bias[co]; voxels];
            for ci in 0..self.in_channels {
                let src = input.channel(ci);
                for kz in 0..self.ksize {
                    let dz = kz as isize - pad;
                    for ky in 0..self.ksize {
                        let dy = ky as isize - pad;
                        for kx in 0..self.ksize {
                            let dx = kx as isize - pad;
                            let w = self.weights[self.weight_index(co, ci, kz, ky, kx)];
                            accumulate_shifted(&mut out, src, [nx, ny, nz], [dx, dy, dz], w);
                        }
                    }
                }
            }
            out
        });
        FeatureMap::from_channels(input.dims, channels)
    }

    /// Gradients of the loss w.r.t. input, weights, and bias, given the
    /// upstream gradient w.r.t. this conv's output.
    pub fn backward(
        &self,
        input: &FeatureMap,
        upstream: &FeatureMap,
    ) -> Result<(FeatureMap, Conv3d), NetError> {
        self.check_input(input)?;
        if upstream.channels != self.out_channels || upstream.dims != input.dims {
            return Err(NetError::Shape(
                "upstream gradient shape does not match conv output".to_string(),
            ));
        }
        let [nx, ny, nz] = input.dims;
        let voxels = input.voxels();
        let pad = (self.ksize / 2) as isize;

        // d loss / d input: correlate upstream with the flipped kernel.
        let grad_in_channels = par::map_indexed(self.in_channels, |ci| {
            let mut g = vec![0.0; voxels];
            for co in 0..self.out_channels {
                let up = upstream.channel(co);
                for kz in 0..self.ksize {
                    let dz = kz as isize - pad;
                    for ky in 0..self.ksize {
                        let dy = ky as isize - pad;
                        for kx in 0..self.ksize {
                            let dx = kx as isize - pad;
                            let w = self.weights[self.weight_index(co, ci, kz, ky, kx)];
                            accumulate_shifted(&mut g, up, [nx, ny, nz], [-dx, -dy, -dz], w);
                        }
                    }
                }
            }
            g
        });
        let grad_input = FeatureMap::from_channels(input.dims, grad_in_channels)?;

        // d loss / d weights and bias, one output channel at a time.
        let per_co: Vec<(Vec<f64>, f64)> = par::map_indexed(self.out_channels, |co| {
            let up = upstream.channel(co);
            let k3 = self.ksize * self.ksize * self.ksize;
            let mut gw = vec![0.0; self.in_channels * k3];
            for ci in 0..self.in_channels {
                let src = input.channel(ci);
                for kz in 0..self.ksize {
                    let dz = kz as isize - pad;
                    for ky in 0..self.ksize {
                        let dy = ky as isize - pad;
                        for kx in 0..self.ksize {
                            let dx = kx as isize - pad;
                            let idx = ((ci * self.ksize + kz) * self.ksize + ky) * self.ksize + kx;
                            gw[idx] = shifted_dot(up, src, [nx, ny, nz], [dx, dy, dz]);
                        }
                    }
                }
            }
            (gw, up.iter().sum())
        });
        let mut grads = Conv3d::zeros(self.in_channels, self.out_channels, self.ksize)?;
        let k3 = self.ksize * self.ksize * self.ksize;
        for (co, (gw, gb)) in per_co.into_iter().enumerate() {
            let base = co * self.in_channels * k3;
            grads.weights[base..base + gw.len()].copy_from_slice(&gw);
            grads.bias[co] = gb;
        }
        Ok((grad_input, grads))
    }
}

/// `out[p] += w * src[p + d]` over all voxels where `p + d` is in bounds.
#[inline]
pub(crate) fn accumulate_shifted(out: &mut [f64], src: &[f64], dims: [usize; 3], d: [isize; 3], w: f64) {
    let [nx, ny, nz] = dims;
    let (x0, x1) = shift_range(nx, d[0]);
    let (y0, y1) = shift_range(ny, d[1]);
    let (z0, z1) = shift_range(nz, d[2]);
    for z in z0..z1 {
        let sz = (z as isize + d[2]) as usize;
        for y in y0..y1 {
            let sy = (y as isize + d[1]) as usize;
            let orow = z * ny * nx + y * nx;
            let sbase = (sz * ny * nx + sy * nx) as isize + d[0];
            let o = &mut out[orow + x0..orow + x1];
            let s = &src[(sbase + x0 as isize) as usize..(sbase + x1 as isize) as usize];
            for (ov, sv) in o.iter_mut().zip(s) {
                *ov += w * sv;
            }
        }
    }
}

/// `sum_p a[p] * b[p + d]` over all voxels where `p + d` is in bounds.
#[inline]
fn shifted_dot(a: &[f64], b: &[f64], dims: [usize; 3], d: [isize; 3]) -> f64 {
    let [nx, ny, nz] = dims;
    let (x0, x1) = shift_range(nx, d[0]);
    let (y0, y1) = shift_range(ny, d[1]);
    let (z0, z1) = shift_range(nz, d[2]);
    let mut acc = 0.0;
    for z in z0..z1 {
        let sz = (z as isize + d[2]) as usize;
        for y in y0..y1 {
            let sy = (y as isize + d[1]) as usize;
            let arow = z * ny * nx + y * nx;
            let bbase = (sz * ny * nx + sy * nx) as isize + d[0];
            let av = &a[arow + x0..arow + x1];
            let bv = &b[(bbase + x0 as isize) as usize..(bbase + x1 as isize) as usize];
            for (x, y) in av.iter().zip(bv) {
                acc += x * y;
            }
        }
    }
    acc
}

/// Index range `p` such that `0 <= p + d < n`.
#[inline]
fn shift_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = ((n as isize - d).min(n as isize)).max(0) as usize;
    (lo.min(hi), hi)
}

/// Element-wise max(0, x).
pub fn relu(input: &FeatureMap) -> FeatureMap {
    FeatureMap {
        channels: input.channels,
        dims: input.dims,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Backward of [`relu`]: passes upstream where the preactivation was > 0.
/// The subgradient at exactly zero is taken as zero.
pub fn relu_backward(preact: &FeatureMap, upstream: &FeatureMap) -> FeatureMap {
    debug_assert_eq!(preact.dims, upstream.dims);
    debug_assert_eq!(preact.channels, upstream.channels);
    FeatureMap {
        channels: preact.channels,
        dims: preact.dims,
        data: preact
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&p, &u)| if p > 0.0 { u } else { 0.0 })
            .collect(),
    }
}

/// 2x2x2 max pooling with stride 2. Also returns, per output voxel, the
/// within-channel linear index of the winning input voxel (ties go to the
/// lowest linear index) for use by [`maxpool2_backward`].
pub fn maxpool2(input: &FeatureMap) -> Result<(FeatureMap, Vec<u32>), NetError> {
    let [nx, ny, nz] = input.dims;
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(NetError::Shape(format!(
            "maxpool2 needs even dims, got {nx}x{ny}x{nz}"
        )));
    }
    let odims = [nx / 2, ny / 2, nz / 2];
    let ovoxels = odims[0] * odims[1] * odims[2];
    let mut out = FeatureMap::zeros(input.channels, odims);
    let mut indices = vec![0u32; input.channels * ovoxels];
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        let idx = &mut indices[c * ovoxels..(c + 1) * ovoxels];
        let mut o = 0;
        for z in 0..odims[2] {
            for y in 0..odims[1] {
                for x in 0..odims[0] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    // z, y, x window order scans lowest linear index first.
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let lin = (2 * z + dz) * ny * nx + (2 * y + dy) * nx + (2 * x + dx);
                                if src[lin] > best {
                                    best = src[lin];
                                    best_idx = lin;
                                }
                            }
                        }
                    }
                    dst[o] = best;
                    idx[o] = best_idx as u32;
                    o += 1;
                }
            }
        }
    }
    Ok((out, indices))
}

/// Backward of [`maxpool2`]: routes each upstream value to the voxel that
/// won its window.
pub fn maxpool2_backward(
    indices: &[u32],
    upstream: &FeatureMap,
    input_dims: [usize; 3],
) -> FeatureMap {
    let mut grad = FeatureMap::zeros(upstream.channels, input_dims);
    let ovoxels = upstream.voxels();
    for c in 0..upstream.channels {
        let up = upstream.channel(c);
        let idx = &indices[c * ovoxels..(c + 1) * ovoxels];
        let g = grad.channel_mut(c);
        for (o, &i) in idx.iter().enumerate() {
            g[i as usize] += up[o];
        }
    }
    grad
}

/// Per-axis trilinear taps for a factor-2 upsample: output voxel `i` samples
/// input coordinate `i/2 - 1/4` (half-voxel centres), clamped at the edges.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|i| {
            let s = 0.5 * i as f64 - 0.25;
            let i0 = s.floor();
            let t = s - i0;
            let clamp = |v: f64| (v.max(0.0) as usize).min(n - 1);
            (clamp(i0), clamp(i0 + 1.0), 1.0 - t, t)
        })
        .collect()
}

/// Trilinear upsampling by a factor of 2 per axis.
///
/// Linear on each axis with half-voxel alignment: a 1-D channel `[a, b]`
/// becomes `[a, 0.75a+0.25b, 0.25a+0.75b, b]`. Constants are preserved
/// exactly, so `maxpool2(upsample2(x)) == x` for constant `x`.
pub fn upsample2(input: &FeatureMap) -> FeatureMap {
    let [nx, ny, nz] = input.dims;
    let odims = [2 * nx, 2 * ny, 2 * nz];
    let tx = upsample_taps(nx);
    let ty = upsample_taps(ny);
    let tz = upsample_taps(nz);
    let channels = par::map_indexed(input.channels, |c| {
        let src = input.channel(c);
        let mut out = vec![0.0; odims[0] * odims[1] * odims[2]];
        let mut o = 0;
        for &(z0, z1, wz0, wz1) in &tz {
            for &(y0, y1, wy0, wy1) in &ty {
                let r00 = z0 * ny * nx + y0 * nx;
                let r01 = z0 * ny * nx + y1 * nx;
                let r10 = z1 * ny * nx + y0 * nx;
                let r11 = z1 * ny * nx + y1 * nx;
                for &(x0, x1, wx0, wx1) in &tx {
                    let c00 = wx0 * src[r00 + x0] + wx1 * src[r00 + x1];
                    let c01 = wx0 * src[r01 + x0] + wx1 * src[r01 + x1];
                    let c10 = wx0 * src[r10 + x0] + wx1 * src[r10 + x1];
                    let c11 = wx0 * src[r11 + x0] + wx1 * src[r11 + x1];
                    out[o] = wz0 * (wy0 * c00 + wy1 * c01) + wz1 * (wy0 * c10 + wy1 * c11);
                    o += 1;
                }
            }
        }
        out
    });
    FeatureMap::from_channels(odims, channels).expect("upsample output shape is consistent")
}

/// Backward of [`upsample2`]: the exact transpose, scattering each upstream
/// voxel onto its taps.
pub fn upsample2_backward(upstream: &FeatureMap, input_dims: [usize; 3]) -> FeatureMap {
    let [nx, ny, nz] = input_dims;
    debug_assert_eq!(upstream.dims, [2 * nx, 2 * ny, 2 * nz]);
    let tx = upsample_taps(nx);
    let ty = upsample_taps(ny);
    let tz = upsample_taps(nz);
    let channels = par::map_indexed(upstream.channels, |c| {
        let up = upstream.channel(c);
        let mut g = vec![0.0; nx * ny * nz];
        let mut o = 0;
        for &(z0, z1, wz0, wz1) in &tz {
            for &(y0, y1, wy0, wy1) in &ty {
                for &(x0, x1, wx0, wx1) in &tx {
                    let u = up[o];
                    o += 1;
                    g[z0 * ny * nx + y0 * nx + x0] += wz0 * wy0 * wx0 * u;
                    g[z0 * ny * nx + y0 * nx + x1] += wz0 * wy0 * wx1 * u;
                    g[z0 * ny * nx + y1 * nx + x0] += wz0 * wy1 * wx0 * u;
                    g[z0 * ny * nx + y1 * nx + x1] += wz0 * wy1 * wx1 * u;
                    g[z1 * ny * nx + y0 * nx + x0] += wz1 * wy0 * wx0 * u;
                    g[z1 * ny * nx + y0 * nx + x1] += wz1 * wy0 * wx1 * u;
                    g[z1 * ny * nx + y1 * nx + x0] += wz1 * wy1 * wx0 * u;
                    g[z1 * ny * nx + y1 * nx + x1] += wz1 * wy1 * wx1 * u;
                }
            }
        }
        g
    });
    FeatureMap::from_channels(input_dims, channels).expect("upsample grad shape is consistent")
}

/// Concatenates `a`'s channels followed by `b`'s; dims must match.
pub fn concat(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap, NetError> {
    if a.dims != b.dims {
        return Err(NetError::Shape(format!(
            "concat dims mismatch: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(FeatureMap {
        channels: a.channels + b.channels,
        dims: a.dims,
        data,
    })
}

/// Backward of [`concat`]: splits the upstream gradient back into the two
/// channel blocks.
pub fn concat_backward(upstream: &FeatureMap, a_channels: usize) -> (FeatureMap, FeatureMap) {
    let v = upstream.voxels();
    let split = a_channels * v;
    (
        FeatureMap {
            channels: a_channels,
            dims: upstream.dims,
            data: upstream.data[..split].to_vec(),
        },
        FeatureMap {
            channels: upstream.channels - a_channels,
            dims: upstream.dims,
            data: upstream.data[split..].to_vec(),
        },
    )
}
