use scenemotion_core::model::{Forward, ModelBundle, ModelConfig};
use scenemotion_core::world::{generate_samples, DatasetConfig, SceneGenConfig};
use scenemotion_core::model::LossWeights;
use std::time::Instant;

fn main() {
    let dcfg = DatasetConfig {
        seed: 1,
        n_scenes: 2,
        actions: vec![scenemotion_core::body::ActionId::Walk],
        scene: SceneGenConfig { n_points: 2048, ..Default::default() },
        ..Default::default()
    };
    let samples = generate_samples(&dcfg).unwrap();
    let bundle = ModelBundle::new(ModelConfig::default(), 7).unwrap();
    let s = &samples[0];
    let t0 = Instant::now();
    let graph = bundle.build_graph(&s.cloud.coords).unwrap();
    println!("graph build: {:?}", t0.elapsed());

    // distill forward+backward
    let input = s.cloud.as_input_tensor();
    let targets = scenemotion_core::autodiff::Tensor::ones(&[2048, 64]);
    let cov = vec![true; 2048];
    for _ in 0..2 {
        let t0 = Instant::now();
        let fw = Forward::train(&bundle.params);
        let loss = bundle.distill_loss(&fw, &graph, &input, &targets, &cov).unwrap();
        let tf = t0.elapsed();
        let t1 = Instant::now();
        let _g = fw.grads_of(&loss).unwrap();
        println!("distill fwd: {:?}  bwd: {:?}", tf, t1.elapsed());
    }
    // full cVAE loss forward+backward
    let mut rng = scenemotion_core::rng::stream(0, "probe", &[]);
    for _ in 0..2 {
        let t0 = Instant::now();
        let fw = Forward::train(&bundle.params);
        let (loss, _br) = bundle.sample_loss(&fw, &graph, s, &LossWeights::default(), &mut rng).unwrap();
        let tf = t0.elapsed();
        let t1 = Instant::now();
        let _g = fw.grads_of(&loss).unwrap();
        println!("cvae fwd: {:?}  bwd: {:?}", tf, t1.elapsed());
    }
    // N=512 scale
    let dcfg = DatasetConfig {
        seed: 2,
        n_scenes: 1,
        actions: vec![scenemotion_core::body::ActionId::Walk],
        scene: SceneGenConfig { n_points: 512, ..Default::default() },
        ..Default::default()
    };
    let samples = generate_samples(&dcfg).unwrap();
    let s = &samples[0];
    let mut cfg = ModelConfig::default();
    cfg.cond_points = 64;
    let bundle = ModelBundle::new(cfg, 7).unwrap();
    let graph = bundle.build_graph(&s.cloud.coords).unwrap();
    for _ in 0..3 {
        let t0 = Instant::now();
        let fw = Forward::train(&bundle.params);
        let (loss, _br) = bundle.sample_loss(&fw, &graph, s, &LossWeights::default(), &mut rng).unwrap();
        let tf = t0.elapsed();
        let t1 = Instant::now();
        let _g = fw.grads_of(&loss).unwrap();
        println!("cvae512 fwd: {:?}  bwd: {:?}", tf, t1.elapsed());
    }
}
