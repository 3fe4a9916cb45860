use deepmark_core::codec::{ChannelCodec, CodecConfig, RepetitionCodec};
use deepmark_core::config::{AttackSelection, RunConfig};
use deepmark_core::dataset::synth_image;
use deepmark_core::metrics::bit_accuracy_batch;
use deepmark_core::nn::ops::{mse, mse_grad};
use deepmark_core::nn::{Adam, Trainable};
use deepmark_core::rng::{SeedStream, StreamRole};
use deepmark_core::trainer::{held_out_eval, train_step, TrainState};
use deepmark_core::ImageTensor;
use ndarray::{Array2, Array4};
use rand::Rng;

fn covers(n: usize, s: usize, seed: u64) -> ImageTensor {
    let mut data = Array4::zeros((n, 3, s, s));
    for i in 0..n {
        let img = synth_image(seed + i as u64, s);
        data.slice_mut(ndarray::s![i, .., .., ..]).assign(&img.data.slice(ndarray::s![0, .., .., ..]));
    }
    ImageTensor { data }
}

#[test]
fn probe_decoder_memorizes_fixed_pairs() {
    // decoder-only supervised memorization of 8 image->message pairs
    let mut cfg = RunConfig::default().with_seed(1);
    cfg.codec = CodecConfig { msg_len: 4, redundant_len: 16, p_flip: 0.1, hidden: 16 };
    cfg.training.image_size = 16;
    cfg.training.watermark.image_size = 16;
    cfg.training.watermark.channels = 16;
    cfg.training.watermark.redundant_len = 16;
    cfg.training.attack = AttackSelection::Cnn;
    cfg.training.cnn_attack.channels = 8;
    cfg.training.cnn_attack.layers = 3;
    let codec = ChannelCodec::Repetition(RepetitionCodec::new(cfg.codec.clone()).unwrap());
    let mut state = TrainState::new(&cfg, &codec).unwrap();

    let imgs = covers(8, 16, 50);
    let mut rng = SeedStream::new(2, StreamRole::Messages);
    let targets = Array2::from_shape_fn((8, 16), |_| f64::from(rng.gen::<bool>()));
    let mut opt = Adam::new(1e-3);
    let mut last = f64::NAN;
    for step in 0..800 {
        state.model.decoder.zero_grad();
        let (logits, cache) = state.model.decoder.forward(&imgs.data);
        let loss = mse(&logits, &targets);
        let g = mse_grad(&logits, &targets);
        let _ = state.model.decoder.backward(&cache, &g);
        opt.step(&mut state.model.decoder);
        last = loss;
        if step % 200 == 0 { println!("dec-only step {step}: mse {loss:.5}"); }
    }
    let (logits, _) = state.model.decoder.forward(&imgs.data);
    let hard = logits.mapv(|v| f64::from(v > 0.5));
    let acc = bit_accuracy_batch(&hard, &targets);
    println!("decoder memorization acc {acc:.2}%, final mse {last:.6}");
    assert!(acc > 95.0, "decoder cannot even memorize: {acc}");
}

#[test]
fn probe_joint_easy_setting() {
    // full 30/120 message at 16x16, 32-image pool
    let mut cfg = RunConfig::default().with_seed(3);
    cfg.codec = CodecConfig { msg_len: 30, redundant_len: 120, p_flip: 0.1, hidden: 16 };
    cfg.training.image_size = 16;
    cfg.training.batch_size = 4;
    cfg.training.watermark.image_size = 16;
    cfg.training.watermark.channels = 8;
    cfg.training.watermark.redundant_len = 120;
    cfg.training.attack = AttackSelection::Cnn;
    cfg.training.cnn_attack.channels = 8;
    cfg.training.cnn_attack.layers = 3;
    let codec = ChannelCodec::Repetition(RepetitionCodec::new(cfg.codec.clone()).unwrap());
    let mut state = TrainState::new(&cfg, &codec).unwrap();
    let pool = covers(32, 16, 50);
    let probe = covers(16, 16, 600);
    let mut drng = SeedStream::new(8, StreamRole::DataOrder);
    for step in 0..2000 {
        let idx: Vec<usize> = (0..4).map(|_| drng.gen_range(0..32)).collect();
        let mut d = Array4::zeros((4, 3, 16, 16));
        for (bi, &i) in idx.iter().enumerate() {
            d.slice_mut(ndarray::s![bi, .., .., ..]).assign(&pool.data.slice(ndarray::s![i, .., .., ..]));
        }
        let batch = ImageTensor { data: d };
        let m = train_step(&mut state, &codec, &batch).unwrap();
        if step % 250 == 0 {
            let pool_ev = held_out_eval(&state.model, &codec, &pool, 9).unwrap();
            let ev = held_out_eval(&state.model, &codec, &probe, 9).unwrap();
            println!(
                "step {step}: batch {:.1}% pool {:.1}% heldout {:.1}% l_dec {:.4} l_enc {:.4}",
                m.bit_acc_clean, pool_ev.identity_bit_acc, ev.identity_bit_acc, m.loss_dec, m.loss_enc
            );
        }
    }
    let pool_ev = held_out_eval(&state.model, &codec, &pool, 9).unwrap();
    println!("final pool identity {:.2}%", pool_ev.identity_bit_acc);
}
