use aec_core::dsp::{convolve, mean_square, AudioBuffer};
use aec_core::harness::{cancel_files, stream_process, EngineConfig, EngineKind, StreamProcessor};
use aec_core::synth::{gen_rir, speech_shaped_noise};
use aec_core::unet::{save_weights, NetTopology, NetWeights, Network, Precision, ResidualConfig};
use aec_core::wav::write_wav;
use aec_core::{SAMPLE_RATE, STRIDE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn buffer(x: Vec<f64>) -> AudioBuffer {
    AudioBuffer::new(x, SAMPLE_RATE).unwrap()
}

fn echo_pair(len: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let far = speech_shaped_noise(len, seed);
    let near = speech_shaped_noise(len, seed + 100);
    let echo = convolve(&far, &gen_rir(120.0, 30.0, seed + 200).unwrap());
    let mic = near.iter().zip(&echo).map(|(s, d)| s + 0.5 * d).collect();
    (far, mic)
}

/// Runs raw strides (no delay compensation) and returns the concatenated
/// output.
fn raw_stream(proc: &mut StreamProcessor, far: &[f64], mic: &[f64]) -> Vec<f64> {
    proc.reset().unwrap();
    let mut out = vec![0.0; far.len() / STRIDE * STRIDE];
    for (i, chunk) in out.chunks_exact_mut(STRIDE).enumerate() {
        let r = i * STRIDE..(i + 1) * STRIDE;
        proc.process_stride(&far[r.clone()], &mic[r], chunk)
            .unwrap();
    }
    out
}

fn small_unet() -> NetWeights {
    let topo = NetTopology::new(3, 4, ResidualConfig::Conf2, 1).unwrap();
    NetWeights::new(Network::init(topo, 21).unwrap())
}

#[test]
fn output_wavs_are_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (far, mic) = echo_pair(3 * SAMPLE_RATE as usize + 123, 4);
    let (far_p, mic_p) = (dir.path().join("far.wav"), dir.path().join("mic.wav"));
    write_wav(&far_p, &buffer(far)).unwrap();
    write_wav(&mic_p, &buffer(mic)).unwrap();
    let w = dir.path().join("w.bin");
    save_weights(&w, &small_unet()).unwrap();

    let configs = [
        EngineConfig {
            weights: Some(w.clone()),
            ..EngineConfig::with_engine(EngineKind::Unet)
        },
        EngineConfig {
            weights: Some(w.clone()),
            precision: Precision::Fp16,
            ..EngineConfig::with_engine(EngineKind::Unet)
        },
        EngineConfig::with_engine(EngineKind::Pfblms),
        EngineConfig::with_engine(EngineKind::Passthrough),
    ];
    for (i, cfg) in configs.iter().enumerate() {
        let outs: Vec<Vec<u8>> = (0..2)
            .map(|run| {
                let p = dir.path().join(format!("out{i}_{run}.wav"));
                cancel_files(cfg, &far_p, &mic_p, &p, false).unwrap();
                std::fs::read(p).unwrap()
            })
            .collect();
        assert_eq!(
            outs[0], outs[1],
            "{:?} output differs between runs",
            cfg.engine
        );
        assert_eq!(
            outs[0].len(),
            44 + 2 * (3 * SAMPLE_RATE as usize / STRIDE) * STRIDE
        );
    }
}

/// An impulse added to the far end at stride `t` must leave every earlier
/// output stride untouched.
fn causality_probe(proc: &mut StreamProcessor, seed: u64) {
    let strides = 24;
    let (far, mic) = echo_pair(strides * STRIDE, seed);
    let base = raw_stream(proc, &far, &mic);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10 {
        let t = rng.gen_range(1..strides);
        let mut probe = far.clone();
        probe[t * STRIDE + rng.gen_range(0..STRIDE)] += 0.9;
        let out = raw_stream(proc, &probe, &mic);
        assert_eq!(
            out[..t * STRIDE],
            base[..t * STRIDE],
            "impulse at stride {t} leaked backwards"
        );
        assert_ne!(out, base, "impulse at stride {t} had no effect");
    }
}

#[test]
fn unet_stream_is_causal() {
    for precision in [Precision::Fp32, Precision::Fp16] {
        let cfg = EngineConfig {
            precision,
            ..EngineConfig::with_engine(EngineKind::Unet)
        };
        let mut proc = StreamProcessor::with_weights(&cfg, &small_unet()).unwrap();
        causality_probe(&mut proc, 5);
    }
}

#[test]
fn pfblms_stream_is_causal() {
    let mut proc = StreamProcessor::new(&EngineConfig::with_engine(EngineKind::Pfblms)).unwrap();
    causality_probe(&mut proc, 6);
}

#[test]
fn pfblms_stream_cancels_a_linear_echo() {
    let n = 10 * SAMPLE_RATE as usize;
    let far = speech_shaped_noise(n, 31);
    let mic = convolve(&far, &gen_rir(200.0, 40.0, 32).unwrap());
    let mut proc = StreamProcessor::new(&EngineConfig::with_engine(EngineKind::Pfblms)).unwrap();
    let out = stream_process(&mut proc, &buffer(far), &buffer(mic.clone())).unwrap();
    assert_eq!(out.len(), n);
    let tail = n - 2 * SAMPLE_RATE as usize;
    let erle = 10.0 * (mean_square(&mic[tail..]) / mean_square(&out.samples()[tail..])).log10();
    assert!(erle >= 20.0, "ERLE over the final 2 s is {erle:.2} dB");
}

#[test]
fn reset_restores_cold_start() {
    let (far, mic) = echo_pair(8 * STRIDE, 9);
    let (far2, mic2) = echo_pair(8 * STRIDE, 10);
    for cfg in [
        EngineConfig::with_engine(EngineKind::Unet),
        EngineConfig::with_engine(EngineKind::Pfblms),
        EngineConfig::with_engine(EngineKind::Passthrough),
    ] {
        let fresh = |cfg: &EngineConfig| match cfg.engine {
            EngineKind::Unet => StreamProcessor::with_weights(cfg, &small_unet()).unwrap(),
            _ => StreamProcessor::new(cfg).unwrap(),
        };
        let cold = raw_stream(&mut fresh(&cfg), &far, &mic);
        let mut proc = fresh(&cfg);
        raw_stream(&mut proc, &far2, &mic2);
        assert_eq!(raw_stream(&mut proc, &far, &mic), cold, "{:?}", cfg.engine);
    }
}
