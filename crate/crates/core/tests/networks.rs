use candle_core::{DType, Device, Tensor, Var};
use emvq::autonets::{Encoder, EncoderConfig, FusionDecoder, LatentPair, TopDecoder};
use emvq::model::quantize_map;
use emvq::nn::ParamStore;
use emvq::pixeldata::Raster;
use emvq::prior::{Prior, PriorConfig, TokenSequence};
use emvq::quantizer::{straight_through, Codebook};
use emvq::tokenstream::TokenGrid;
use emvq::trainer::train;
use emvq::{Checkpoint, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(n: usize, side: usize, seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..n * side * side).map(|_| rng.random_range(-0.5..0.5)).collect();
    Tensor::from_vec(v, (n, 1, side, side), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

#[test]
fn encode_decode_restores_tile_dims() {
    for tile in [64usize, 128, 256] {
        for s in 2u8..=5 {
            let mut ps = ParamStore::new(DType::F32, s as u64);
            let cfg = EncoderConfig { residual_blocks: 1, ..EncoderConfig::new(s, 4, 3) };
            let enc = Encoder::new(&mut ps, "e", cfg).unwrap();
            let dec = TopDecoder::new(&mut ps, "d", cfg).unwrap();
            let x = random_input(1, tile, 1, DType::F32);
            let z = enc.forward(&x).unwrap();
            let g = tile >> s;
            assert_eq!(z.dims(), &[1, 3, g, g], "tile {tile} stages {s}");
            let y = dec.forward(&z).unwrap();
            assert_eq!(y.dims(), &[1, 1, tile, tile], "tile {tile} stages {s}");
        }
    }
}

#[test]
fn fusion_restores_tile_dims() {
    for (top, bottom) in [(3u8, 2u8), (4, 2), (5, 3), (2, 1)] {
        let mut ps = ParamStore::new(DType::F32, 3);
        let tc = EncoderConfig::new(top, 4, 3);
        let bc = EncoderConfig::new(bottom, 4, 3);
        let fusion = FusionDecoder::new(&mut ps, "f", tc, bc).unwrap();
        let tile = 64;
        let pair = LatentPair {
            top: random_input(3, tile >> top, 2, DType::F32).repeat((1, 3, 1, 1)).unwrap(),
            bottom: Some(random_input(3, tile >> bottom, 3, DType::F32).repeat((1, 3, 1, 1)).unwrap()),
        };
        let y = fusion.forward(&pair).unwrap();
        assert_eq!(y.dims(), &[3, 1, tile, tile]);
    }
}

#[test]
fn decoder_is_deterministic() {
    let mut ps = ParamStore::new(DType::F32, 9);
    let cfg = EncoderConfig::new(3, 8, 4);
    let dec = TopDecoder::new(&mut ps, "d", cfg).unwrap();
    let z = random_input(2, 8, 4, DType::F32).repeat((1, 4, 1, 1)).unwrap();
    let a = dec.forward(&z).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let b = dec.forward(&z).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn gradient_reaches_encoder_through_quantizer() {
    let mut ps = ParamStore::new(DType::F32, 5);
    let cfg = EncoderConfig::new(2, 8, 4);
    let enc = Encoder::new(&mut ps, "enc", cfg).unwrap();
    let dec = TopDecoder::new(&mut ps, "dec", cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let book = Codebook::random(16, 4, 0.99, 1e-5, &mut rng).unwrap();
    let x = random_input(2, 16, 6, DType::F32);
    let z = enc.forward(&x).unwrap();
    let q = quantize_map(&z, &book).unwrap();
    let y = dec.forward(&straight_through(&z, &q.quantized).unwrap()).unwrap();
    let loss = y.sub(&x).unwrap().sqr().unwrap().mean_all().unwrap();
    let grads = loss.backward().unwrap();
    let mut seen = 0;
    for (name, var) in ps.entries() {
        if !name.starts_with("enc") {
            continue;
        }
        let g = grads.get(var.as_tensor()).expect("encoder parameter without gradient");
        let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(norm.is_finite());
        if norm > 0.0 {
            seen += 1;
        }
    }
    assert!(seen > 0, "no encoder parameter received gradient");
}

fn perturbed(var: &Var, index: usize, delta: f64) {
    let shape = var.as_tensor().shape().clone();
    let mut v = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    v[index] += delta;
    var.set(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap();
}

#[test]
fn autoencoder_gradient_matches_finite_differences() {
    let mut ps = ParamStore::new(DType::F64, 11);
    let cfg = EncoderConfig { residual_blocks: 1, ..EncoderConfig::new(2, 4, 3) };
    let enc = Encoder::new(&mut ps, "enc", cfg).unwrap();
    let dec = TopDecoder::new(&mut ps, "dec", cfg).unwrap();
    let x = random_input(1, 8, 12, DType::F64);
    let weight = random_input(1, 8, 13, DType::F64);
    let f = || -> Tensor {
        let y = dec.forward(&enc.forward(&x).unwrap()).unwrap();
        y.mul(&weight).unwrap().sum_all().unwrap()
    };
    let grads = f().backward().unwrap();
    let h = 1e-6;
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (name, var) in ps.entries() {
        let g = grads
            .get(var.as_tensor())
            .unwrap_or_else(|| panic!("{name} has no gradient"))
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for _ in 0..3 {
            let i = rng.random_range(0..g.len());
            perturbed(var, i, h);
            let up = f().to_scalar::<f64>().unwrap();
            perturbed(var, i, -2.0 * h);
            let down = f().to_scalar::<f64>().unwrap();
            perturbed(var, i, h);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1.0),
                "{name}[{i}]: analytic {} vs fd {fd}",
                g[i]
            );
            checked += 1;
        }
    }
    assert!(checked > 10);
}

fn prior_config() -> PriorConfig {
    PriorConfig {
        layers: 2,
        width: 16,
        heads: 2,
        top_codes: 8,
        bottom_codes: 8,
        top_dims: (2, 2),
        bottom_dims: (4, 4),
        seed: 3,
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, cfg: &PriorConfig) -> TokenSequence {
    let mut grid = |(r, c): (usize, usize), k: usize| {
        TokenGrid::new(r, c, (0..r * c).map(|_| rng.random_range(0..k as u32)).collect()).unwrap()
    };
    TokenSequence {
        top: grid(cfg.top_dims, cfg.top_codes),
        bottom: grid(cfg.bottom_dims, cfg.bottom_codes),
    }
}

#[test]
fn prior_logits_are_causal() {
    let cfg = prior_config();
    let prior = Prior::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seq = random_sequence(&mut rng, &cfg);
    let base = prior.bottom_logits(&seq).unwrap();
    for j in 0..cfg.bottom_len() {
        let mut changed = seq.clone();
        changed.bottom.tokens[j] = (changed.bottom.tokens[j] + 1) % cfg.bottom_codes as u32;
        let logits = prior.bottom_logits(&changed).unwrap();
        for i in 0..=j {
            let same = base[i].iter().zip(&logits[i]).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "logits at {i} changed after editing bottom token {j}");
        }
        if j + 1 < cfg.bottom_len() {
            assert_ne!(base[j + 1], logits[j + 1]);
        }
    }
    // Every bottom position sees the whole top grid.
    let mut changed = seq.clone();
    changed.top.tokens[cfg.top_len() - 1] ^= 1;
    let logits = prior.bottom_logits(&changed).unwrap();
    assert_ne!(base[0], logits[0]);
}

#[test]
fn prior_loss_starts_near_uniform_and_decreases() {
    let cfg = prior_config();
    let mut prior = Prior::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seqs: Vec<TokenSequence> = (0..4).map(|_| random_sequence(&mut rng, &cfg)).collect();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let initial = prior.loss_value(&refs).unwrap();
    assert!((initial - (cfg.bottom_codes as f64).ln()).abs() < 0.5);
    prior.train(&seqs, 60, 3e-3, 4).unwrap();
    assert!(prior.loss_value(&refs).unwrap() < initial * 0.8);
}

#[test]
fn trained_checkpoint_is_byte_stable() {
    let config = TrainConfig::parse(
        "levels=2\npair=2,1\nhidden_width=4\nembed_dim=3\ncodebook_size=8\nresidual_blocks=1\n\
         tile_size=16\nbatch_size=2\nmax_steps=4\nholdout_fraction=0\nseed=21\n",
    )
    .unwrap();
    let tiles: Vec<Raster> = (0..4)
        .map(|i| {
            let data = (0..256).map(|p| (((p * (i + 3)) % 17) as f32) / 17.0 - 0.5).collect();
            Raster::new(16, 16, data).unwrap()
        })
        .collect();
    let first = train(&config, &tiles, None).unwrap();
    assert!(first.aborted.is_none());
    assert_eq!(first.step_losses.len(), 4);
    let bytes = first.checkpoint.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let second = train(&config, &tiles, None).unwrap();
    assert_eq!(second.checkpoint.to_bytes().unwrap(), bytes, "same seed, different checkpoint");
}
