//! Scratch diagnostic: closed-form ridge readout on frozen random features.
//! Not part of the library.
//!
//! Mirrors the forward pass with public ops to collect full-resolution
//! decoder activations, solves the optimal linear readout per channel, and
//! reports held-out argmax accuracy — an upper bound on what retraining the
//! readout alone could achieve.

use spinemark_core::config::PipelineConfig;
use spinemark_core::heatmap::HeatmapStack;
use spinemark_core::net::ops::{concat, maxpool2, relu, upsample2, FeatureMap};
use spinemark_core::net::{NetworkParams, NetworkSpec};
use spinemark_core::pipeline::volume_features;
use spinemark_core::synth::generate_dataset;

/// Full-resolution per-voxel features: dec_act[0], optionally concatenated
/// with upsampled dec_act[1].
fn features(params: &NetworkParams, input: &FeatureMap, d0_only: bool) -> FeatureMap {
    let e0 = relu(&params.enc[0].forward(input).unwrap());
    let (p0, _) = maxpool2(&e0).unwrap();
    let e1 = relu(&params.enc[1].forward(&p0).unwrap());
    let (p1, _) = maxpool2(&e1).unwrap();
    let bott = relu(&params.bottleneck.forward(&p1).unwrap());
    let cat1 = concat(&upsample2(&bott), &e1).unwrap();
    let d1 = relu(&params.dec[1].forward(&cat1).unwrap());
    let cat0 = concat(&upsample2(&d1), &e0).unwrap();
    let d0 = relu(&params.dec[0].forward(&cat0).unwrap());
    if d0_only {
        d0
    } else {
        concat(&d0, &upsample2(&d1)).unwrap()
    }
}

/// Solves (A + ridge I) w = b in place by Gaussian elimination.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>, ridge: f64) -> Vec<f64> {
    let n = b.len();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += ridge;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / p;
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut w = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * w[k];
        }
        w[row] = acc / a[row][row];
    }
    w
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train_n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(20);
    let widths: Vec<usize> = args
        .get(2)
        .map(|s| s.split(',').map(|w| w.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![8, 16]);
    let ridge: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let d0_only: bool = args.get(4).map(|s| s == "d0").unwrap_or(false);

    let mut cfg = PipelineConfig::default();
    cfg.widths = widths;
    let chain = cfg.chain().unwrap();
    let geometry = cfg.geometry().unwrap();
    let spine = cfg.spine_model().unwrap();
    let cases = generate_dataset(&spine, &geometry, cfg.sigma_mm, cfg.noise_sigma, train_n + 10);
    let spec = NetworkSpec::new(1, chain.len(), cfg.widths.clone()).unwrap();
    let params = spec.init_params(cfg.seed);
    let m = chain.len();

    // Accumulate normal equations over every voxel of every training case.
    let dim = if d0_only { cfg.widths[0] + 1 } else { cfg.widths[0] + cfg.widths[1] + 1 };
    let mut a = vec![vec![0.0f64; dim]; dim];
    let mut b = vec![vec![0.0f64; dim]; m];
    let mut f_row = vec![0.0f64; dim];
    for case in &cases[..train_n] {
        let f = features(&params, &volume_features(&case.volume), d0_only);
        let target =
            HeatmapStack::gaussian_targets(case.volume.geometry(), &case.landmarks, cfg.sigma_mm)
                .unwrap();
        let voxels = f.voxels();
        for x in 0..voxels {
            for c in 0..dim - 1 {
                f_row[c] = f.channel(c)[x];
            }
            f_row[dim - 1] = 1.0;
            for i in 0..dim {
                if f_row[i] == 0.0 {
                    continue;
                }
                for j in i..dim {
                    a[i][j] += f_row[i] * f_row[j];
                }
            }
            for (ch, bc) in b.iter_mut().enumerate() {
                let t = target.channel(ch).data()[x];
                if t != 0.0 {
                    for (i, bi) in bc.iter_mut().enumerate() {
                        *bi += f_row[i] * t;
                    }
                }
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            a[i][j] = a[j][i];
        }
    }

    let w: Vec<Vec<f64>> = (0..m).map(|c| solve(a.clone(), b[c].clone(), ridge)).collect();

    // Held-out evaluation: argmax of the ridge readout per channel.
    let mut errs = Vec::new();
    let mut rung = vec![(0.0f64, 0usize); m];
    let mut peaks = Vec::new();
    for case in &cases[train_n..] {
        let f = features(&params, &volume_features(&case.volume), d0_only);
        let voxels = f.voxels();
        for (c, mark) in case.landmarks.iter().enumerate() {
            if !mark.present {
                continue;
            }
            let mut best = (0usize, f64::NEG_INFINITY);
            for x in 0..voxels {
                let mut v = w[c][dim - 1];
                for k in 0..dim - 1 {
                    v += w[c][k] * f.channel(k)[x];
                }
                if v > best.1 {
                    best = (x, v);
                }
            }
            let g = *case.volume.geometry();
            let [nx, ny, _] = g.dims;
            let vox = [best.0 % nx, (best.0 / nx) % ny, best.0 / (nx * ny)];
            let wpos = g.voxel_to_world(vox);
            let d = (0..3)
                .map(|a| (wpos[a] - mark.position_mm[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            errs.push(d);
            peaks.push(best.1);
            rung[c].0 += d;
            rung[c].1 += 1;
        }
    }
    let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    let hit = errs.iter().filter(|e| **e <= 8.0).count();
    peaks.sort_by(|x, y| x.total_cmp(y));
    println!(
        "ridge readout: mean {mean:.2}mm hit {hit}/{} peaks [{:.4} {:.4} {:.4}]",
        errs.len(),
        peaks.first().unwrap_or(&0.0),
        peaks[peaks.len() / 2],
        peaks.last().unwrap_or(&0.0),
    );
    let rungs: Vec<String> = rung
        .iter()
        .map(|(s, n)| format!("{:.0}", s / (*n).max(1) as f64))
        .collect();
    println!("rung mm [{}]", rungs.join(" "));
}
