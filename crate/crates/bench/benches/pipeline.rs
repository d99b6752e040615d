use criterion::{black_box, criterion_group, criterion_main, Criterion};

use speechleak::dsp::stft_power;
use speechleak::recon::nnls_mel_to_stft;
use speechleak::{
    db_to_power, extract_features, forward, griffin_lim, init_params, objective_and_input_grad, param_gradients,
    stoi, FeatureKind, FrontendConfig, GriffinLimConfig, Label, MagnitudeSpectrogram,
};
use speechleak_bench::{candidate, features, utterance};

fn frontend(c: &mut Criterion) {
    let wave = utterance();
    for kind in [FeatureKind::MelDb, FeatureKind::MfccCmvn] {
        let cfg = FrontendConfig::with_kind(kind);
        c.bench_function(&format!("extract_features/{kind}"), |b| {
            b.iter(|| extract_features(black_box(&wave), &cfg).unwrap())
        });
    }
}

fn model(c: &mut Criterion) {
    let params = init_params(0);
    let grid = features(FeatureKind::MelPower);
    let label = Label::from_word("yes").unwrap();
    c.bench_function("forward", |b| b.iter(|| forward(&params, black_box(&grid)).unwrap()));
    c.bench_function("param_gradients", |b| {
        b.iter(|| param_gradients(&params, black_box(&grid), label).unwrap())
    });
    let target = param_gradients(&params, &grid, label).unwrap();
    let cand = candidate(FeatureKind::MelPower);
    // One attack iteration minus the Adam step.
    c.bench_function("objective_and_input_grad", |b| {
        b.iter(|| objective_and_input_grad(black_box(&cand), &target, &params, label, 1e-3).unwrap())
    });
}

fn reconstruction(c: &mut Criterion) {
    let cfg = FrontendConfig::default();
    let fb = cfg.filterbank().unwrap();
    let mel = db_to_power(features(FeatureKind::MelDb).values());
    c.bench_function("nnls_mel_to_stft", |b| {
        b.iter(|| nnls_mel_to_stft(black_box(&mel), &fb).unwrap())
    });
    let mag = MagnitudeSpectrogram::new(stft_power(&utterance(), &cfg).unwrap().values.mapv(f64::sqrt)).unwrap();
    let glc = GriffinLimConfig::default();
    c.bench_function("griffin_lim/32", |b| b.iter(|| griffin_lim(black_box(&mag), &glc).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let x = utterance();
    let y = x.scaled(0.5);
    c.bench_function("stoi", |b| b.iter(|| stoi(black_box(&x), black_box(&y)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = frontend, model, reconstruction, metrics
}
criterion_main!(benches);
