//! Manual throughput probe: `cargo test --test bench_throughput -- --ignored --nocapture`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use satflow::flowmatch::{train_step, TrainConfig, TrainItem, TrainState};
use satflow::numcore::Tensor;
use satflow::unet::{build, NetConfig, Sensor};

#[test]
#[ignore]
fn desk_scale_step_timing() {
    let net = NetConfig {
        base_channels: 16,
        channel_multipliers: vec![1, 2, 2],
        num_res_blocks: 2,
        attention_levels: None,
        bands: 6,
        embed_dim: 64,
    };
    println!("param count: {}", satflow::unet::param_count(&net).unwrap());
    let params = build::<f32>(&net, 1).unwrap();
    let mut state = TrainState::new(net, params, 1);
    let cfg = TrainConfig {
        batch_size: 2,
        grad_accum: 1,
        warmup_steps: 10,
        total_steps: 1000,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let items: Vec<TrainItem<f32>> = (0..4)
        .map(|_| TrainItem {
            x1: Tensor::randn(&[6, 64, 64], &mut rng),
            composites: (0..3).map(|_| Tensor::randn(&[6, 64, 64], &mut rng)).collect(),
            coarse: Tensor::randn(&[6, 64, 64], &mut rng),
            doy: 180,
            sensor: Sensor::OLI,
        })
        .collect();
    let refs: Vec<&TrainItem<f32>> = items.iter().take(cfg.batch_size).collect();
    // Warm up once, then time.
    train_step(&mut state, &refs, &cfg).unwrap();
    let n = 10;
    let start = std::time::Instant::now();
    for _ in 0..n {
        train_step(&mut state, &refs, &cfg).unwrap();
    }
    let dt = start.elapsed().as_secs_f64() / n as f64;
    println!(
        "batch {} micro-step: {:.3}s  ({:.1} samples/s, est. 2000 steps = {:.1} min)",
        cfg.batch_size,
        dt,
        cfg.batch_size as f64 / dt,
        2000.0 * dt / 60.0
    );

    // Forward-only timing for the same batch size.
    use satflow::numcore::Tape;
    use satflow::unet::{bind_params, forward_on_tape, MetaInputs};
    let metas = [
        MetaInputs { t: 0.4, doy: 180, sensor: Sensor::OLI, modis_available: true },
        MetaInputs { t: 0.6, doy: 180, sensor: Sensor::OLI, modis_available: true },
    ];
    let stack2 = |a: &Tensor<f32>, b: &Tensor<f32>| {
        let mut d = a.data().to_vec();
        d.extend_from_slice(b.data());
        Tensor::new(vec![2, 6, 64, 64], d).unwrap()
    };
    let x = stack2(&items[0].x1, &items[1].x1);
    let comp = stack2(&items[0].composites[0], &items[1].composites[0]);
    let coarse = stack2(&items[0].coarse, &items[1].coarse);
    let start = std::time::Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new();
        let binding = bind_params(&mut tape, &state.params, false);
        let xi = tape.leaf(x.clone(), false);
        let ci = tape.leaf(comp.clone(), false);
        let oi = tape.leaf(coarse.clone(), false);
        forward_on_tape(&mut tape, &binding, &state.net, xi, ci, oi, &metas).unwrap();
    }
    println!("forward-only: {:.3}s", start.elapsed().as_secs_f64() / n as f64);
}
