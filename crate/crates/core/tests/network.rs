use duostream::graph::Graph;
use duostream::model::Branch;
use duostream::schedule::{diffuse_closed, diffuse_step};
use duostream::synthgen::procedural_toy_scene;
use duostream::tensor::Tensor;
use duostream::{losses, ImageBuffer, ModelConfig, Network, NoiseSchedule, RngState};

fn scenes(n: usize, size: usize) -> (Vec<ImageBuffer>, Vec<duostream::MaskBuffer>) {
    let mut rng = RngState::new(11, 0).rng();
    (0..n).map(|_| procedural_toy_scene(size, 2, &mut rng)).unzip()
}

#[test]
fn mask_loss_reaches_every_encoder_weight() {
    let cfg = ModelConfig::tiny();
    let net = Network::new(cfg, RngState::new(3, 0)).unwrap();
    let (images, masks) = scenes(2, cfg.image_size);
    let mut g = Graph::new();
    let x = g.input(Tensor::from_images(&images).unwrap());
    let pyr = net.encode(&mut g, x).unwrap();
    let pred = net.decode_mask(&mut g, &pyr).unwrap();
    let target = g.input(Tensor::from_masks(&masks).unwrap());
    let loss = losses::bce(&mut g, pred, target).unwrap();
    let grads = g.backward(loss).for_params(net.params().len());
    for (id, (name, _)) in net.params().iter().enumerate() {
        match Network::branch_of(name) {
            Branch::Encoder | Branch::MaskDecoder => {
                let grad = grads[id].as_ref().unwrap_or_else(|| panic!("{name} has no gradient"));
                assert!(grad.data().iter().any(|&v| v != 0.0), "{name} gradient is all zero");
            }
            Branch::ImageDecoder => assert!(grads[id].is_none(), "{name} should be untouched"),
        }
    }
}

#[test]
fn untrained_reconstruction_is_centred_and_deterministic() {
    let cfg = ModelConfig::tiny();
    let net = Network::new(cfg, RngState::new(5, 0)).unwrap();
    let (images, _) = scenes(3, cfg.image_size);
    let a = net.reconstruct(&images).unwrap();
    let b = net.reconstruct(&images).unwrap();
    assert_eq!(a, b);
    for (out, inp) in a.iter().zip(&images) {
        assert_eq!((out.height(), out.width(), out.channels()), (inp.height(), inp.width(), inp.channels()));
        let mean = out.data().iter().sum::<f64>() / out.data().len() as f64;
        assert!((0.3..0.7).contains(&mean), "mean {mean}");
    }
}

#[test]
fn one_step_from_zero_has_beta_variance() {
    let s = NoiseSchedule::cosine(50, 1e-4, 0.02).unwrap();
    let t = 30;
    let beta = s.beta(t).unwrap();
    let zero = ImageBuffer::filled(1000, 1000, 1, 0.0);
    let out = diffuse_step(&zero, t, &s, &mut RngState::new(8, 0).rng()).unwrap();
    let n = out.data().len() as f64;
    let mean = out.data().iter().sum::<f64>() / n;
    let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / beta - 1.0).abs() < 0.01, "variance {var} vs beta {beta}");
}

#[test]
fn first_closed_form_step_equals_markov_step() {
    let s = NoiseSchedule::cosine(1000, 1e-4, 0.02).unwrap();
    let (images, _) = scenes(1, 16);
    let a = diffuse_step(&images[0], 1, &s, &mut RngState::new(4, 0).rng()).unwrap();
    let b = diffuse_closed(&images[0], 1, &s, &mut RngState::new(4, 0).rng()).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-15);
    }
}
