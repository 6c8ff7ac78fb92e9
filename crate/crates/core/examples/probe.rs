//! Scratch probe for acceptance-criteria tuning. Not part of the library.

use std::time::Instant;

use spinemark_core::config::PipelineConfig;
use spinemark_core::heatmap::HeatmapStack;
use spinemark_core::net::train::TrainSample;
use spinemark_core::net::{backward, forward, NetworkParams, NetworkSpec};
use spinemark_core::pipeline::{stack_from_features, volume_features};
use spinemark_core::synth::generate_dataset;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn layer_norms(p: &NetworkParams) -> String {
    let mut parts = Vec::new();
    for (i, c) in p.enc.iter().enumerate() {
        parts.push(format!("enc{i} {:.2e}", norm(&c.weights)));
    }
    parts.push(format!("bott {:.2e}", norm(&p.bottleneck.weights)));
    for (i, c) in p.dec.iter().enumerate() {
        parts.push(format!("dec{i} {:.2e}", norm(&c.weights)));
    }
    for (i, c) in p.branches.iter().enumerate() {
        parts.push(format!("br{i} {:.2e}", norm(&c.weights)));
    }
    parts.push(format!("fin {:.2e}", norm(&p.final_conv.weights)));
    parts.join(" ")
}

/// Fraction of enc-level-0 feature channels with any positive pre-activation.
fn live_enc0(params: &NetworkParams, input: &spinemark_core::net::ops::FeatureMap) -> (usize, usize) {
    let pre = params.enc[0].forward(input).unwrap();
    let live = (0..pre.channels)
        .filter(|&c| pre.channel(c).iter().any(|v| *v > 0.0))
        .count();
    (live, pre.channels)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(12);
    let train_n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(20);
    let noise: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(-1.0);
    let sigma: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(-1.0);
    let widths: Option<Vec<usize>> = args
        .get(6)
        .map(|s| s.split(',').map(|w| w.parse().unwrap()).collect());

    let mut cfg = PipelineConfig::default();
    if noise >= 0.0 {
        cfg.noise_sigma = noise;
    }
    if sigma > 0.0 {
        cfg.sigma_mm = sigma;
    }
    if let Some(w) = widths {
        cfg.widths = w;
    }
    let chain = cfg.chain().unwrap();
    let geometry = cfg.geometry().unwrap();
    let spine = cfg.spine_model().unwrap();
    let cases = generate_dataset(&spine, &geometry, cfg.sigma_mm, cfg.noise_sigma, train_n + 10);

    let spec = NetworkSpec::new(1, chain.len(), cfg.widths.clone()).unwrap();
    let samples: Vec<TrainSample> = cases[..train_n]
        .iter()
        .map(|case| {
            let target = HeatmapStack::gaussian_targets(
                case.volume.geometry(),
                &case.landmarks,
                cfg.sigma_mm,
            )
            .unwrap();
            TrainSample {
                input: volume_features(&case.volume),
                target: spinemark_core::pipeline::stack_features(&target),
            }
        })
        .collect();

    let mut params = spec.init_params(cfg.seed);
    let inv_n = 1.0 / samples.len() as f64;
    println!(
        "lr {lr}, epochs {epochs}, train {train_n}, widths {:?}, noise {}, sigma {}",
        cfg.widths, cfg.noise_sigma, cfg.sigma_mm
    );
    let t1 = Instant::now();
    for epoch in 0..epochs {
        let mut loss = 0.0;
        for s in &samples {
            let pass = forward(&params, &s.input).unwrap();
            let (l, g) = backward(&params, &pass, &s.input, &s.target).unwrap();
            loss += l * inv_n;
            params.add_scaled(&g, -lr);
        }
        if !loss.is_finite() {
            println!("  DIVERGED at epoch {epoch}");
            return;
        }
        let report_every = (epochs / 12).max(1);
        if epoch % report_every == 0 || epoch + 1 == epochs {
            // Unconditional argmax error over gt-present landmarks, plus the
            // peak value distribution for threshold calibration and per-rung
            // error breakdown.
            let mut errs = Vec::new();
            let mut peaks = Vec::new();
            let mut rung_err = vec![(0.0f64, 0usize); chain.len()];
            for case in &cases[train_n..] {
                let pass = forward(&params, &volume_features(&case.volume)).unwrap();
                let stack = stack_from_features(
                    chain.names().to_vec(),
                    *case.volume.geometry(),
                    &pass.final_out,
                )
                .unwrap();
                for (c, mark) in case.landmarks.iter().enumerate() {
                    if !mark.present {
                        continue;
                    }
                    let (arg, peak) = stack.channel(c).argmax();
                    peaks.push(peak);
                    let w = stack.geometry().voxel_to_world(arg);
                    let d = (0..3)
                        .map(|a| (w[a] - mark.position_mm[a]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    errs.push(d);
                    rung_err[c].0 += d;
                    rung_err[c].1 += 1;
                }
            }
            let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
            let hit = errs.iter().filter(|e| **e <= 8.0).count();
            peaks.sort_by(|a, b| a.total_cmp(b));
            let lo = peaks.first().copied().unwrap_or(0.0);
            let med = peaks.get(peaks.len() / 2).copied().unwrap_or(0.0);
            let hi = peaks.last().copied().unwrap_or(0.0);
            let (live, total) = live_enc0(&params, &samples[0].input);
            println!(
                "  epoch {epoch:4} loss {loss:.3e} mean {mean:6.2}mm hit {hit}/{} peaks [{lo:.4} {med:.4} {hi:.4}] live {live}/{total} {:.0?}",
                errs.len(),
                t1.elapsed()
            );
            let rungs: Vec<String> = rung_err
                .iter()
                .map(|(s, n)| format!("{:.0}", s / (*n).max(1) as f64))
                .collect();
            println!("    rung mm [{}]  |w| {}", rungs.join(" "), layer_norms(&params));
        }
    }
}
