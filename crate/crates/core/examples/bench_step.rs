use std::time::Instant;

use scd_core::data::{generate_dataset, stack_images, SceneSpec};
use scd_core::graph::{Graph, Mode};
use scd_core::losses::{scd_loss, LossConfig, Targets};
use scd_core::model::{ModelConfig, ScdNet};
use scd_core::optim::{AdamW, AdamWConfig};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let (cs, cd, cm) = (args.first().copied().unwrap_or(64), args.get(1).copied().unwrap_or(256), args.get(2).copied().unwrap_or(256));
    let cfg = ModelConfig { channels_shallow: cs, channels_deep: cd, channels_msa: cm, ..ModelConfig::default() };
    let (net, mut store) = ScdNet::new::<f32>(cfg).unwrap();
    println!("params {}", ScdNet::total_count(&store));
    let samples = generate_dataset(&SceneSpec::default(), 8).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let targets = Targets::from_samples(&refs).unwrap();
    let (im1, im2) = stack_images(&refs).unwrap();
    let mut opt = AdamW::new(&store, AdamWConfig::default());
    for _ in 0..3 {
        let t = Instant::now();
        let (grads, rep) = {
            let g = Graph::new(&store, Mode::Train);
            let a = g.input(im1.clone());
            let b = g.input(im2.clone());
            let p = net.forward(&g, a, b).unwrap();
            let t1 = t.elapsed();
            let (loss, rep) = scd_loss(&g, &p, &targets, &LossConfig::default()).unwrap();
            let gr = g.backward(loss);
            println!("fwd {:?} total {:?}", t1, t.elapsed());
            (gr, rep)
        };
        opt.step(&mut store, &grads).unwrap();
        println!("step {:?} loss {:.4}", t.elapsed(), rep.total);
    }
}
