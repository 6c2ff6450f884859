#![allow(dead_code)]

use barprune::netgraph::{build_network, hard_prune, GateMode, Network, NetworkSpec};
use barprune::{Result, Rng};

/// Comfortably above and below the death threshold (about -1.6).
pub const ALIVE: f32 = 3.0;
pub const DEAD: f32 = -5.0;

/// Non-trivial batch-norm scale, shift and running statistics, so folding
/// them into the pruned convolutions is actually exercised.
pub fn randomize_bn(net: &mut Network, rng: &mut Rng) {
    for (c, s) in net.convs.iter_mut().zip(net.bn.iter_mut()) {
        for v in c.gamma.iter_mut() {
            *v = rng.uniform_range(0.5, 1.5) as f32;
        }
        for v in c.beta.iter_mut() {
            *v = (0.3 * rng.normal()) as f32;
        }
        for v in s.mean.iter_mut() {
            *v = (0.3 * rng.normal()) as f32;
        }
        for v in s.var.iter_mut() {
            *v = rng.uniform_range(0.5, 2.0) as f32;
        }
    }
    for v in net.head_b.iter_mut() {
        *v = (0.1 * rng.normal()) as f32;
    }
}

fn fill(la: &mut [f32], rng: &mut Rng, p_alive: f64) {
    for v in la.iter_mut() {
        *v = if rng.uniform() < p_alive { rng.uniform_range(0.5, 4.0) } else { rng.uniform_range(-6.0, -2.0) } as f32;
    }
}

/// Random gate pattern: per-conv alive rates vary, a quarter of the blocks
/// lose their whole delta branch, some more lose one delta unit, and a
/// quarter of the pooling residuals are killed outright so the clamp has to
/// step in.
pub fn random_gates(net: &mut Network, rng: &mut Rng) {
    for phi in net.gates.iter_mut() {
        let p = [1.0, 0.7, 0.4, 0.1][rng.below(4)];
        fill(&mut phi.log_alpha, rng, p);
    }
    for b in net.layout.blocks.clone() {
        let u = rng.uniform();
        let killed: &[usize] = if u < 0.25 {
            &b.delta
        } else if u < 0.4 {
            &b.delta[rng.below(2)..][..1]
        } else {
            &[]
        };
        for &d in killed {
            net.gates[d].log_alpha.iter_mut().for_each(|v| *v = DEAD);
        }
        if let Some(r) = b.residual {
            if rng.uniform() < 0.25 {
                net.gates[r].log_alpha.iter_mut().for_each(|v| *v = rng.uniform_range(-6.0, -2.0) as f32);
            }
        }
    }
}

/// Pooling residuals whose every gate is dead, so only the clamp keeps
/// them alive.
pub fn clamped_residuals(net: &Network) -> usize {
    net.layout
        .blocks
        .iter()
        .filter_map(|b| b.residual)
        .filter(|&r| {
            let phi = &net.gates[r];
            phi.log_alpha.iter().all(|&v| v as f64 <= phi.hc.death_threshold())
        })
        .count()
}

pub fn random_images(spec: &NetworkSpec, n: usize, rng: &mut Rng) -> Vec<f32> {
    let len = n * spec.input_channels * spec.input_size * spec.input_size;
    (0..len).map(|_| rng.normal() as f32).collect()
}

/// Largest deviation between the dense gate-folded eval forward and the
/// hard-pruned graph on `images`.
pub fn pruned_deviation(net: &Network, images: &[f32]) -> Result<f64> {
    let z = net.inference_gates();
    let dense = net.predict(images, GateMode::Fixed(&z), 64)?;
    let pruned = hard_prune(net)?.predict(images, 64)?;
    Ok(dense.iter().zip(&pruned).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max))
}

pub fn random_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    let mut rng = Rng::new(seed);
    let mut net = build_network(spec, &mut rng)?;
    randomize_bn(&mut net, &mut rng);
    random_gates(&mut net, &mut rng);
    Ok(net)
}
