use burstmtl::data::{derive_two, generate_synthetic, Dataset, Split, SynthConfig, CIRCUMPLEX};
use burstmtl::metrics::uar;
use rustfft::{num_complex::Complex, FftPlanner};

#[test]
fn class_counts_are_balanced() {
    let ds = generate_synthetic(&SynthConfig { n: 8000, sample_len: 8, ..Default::default() }).unwrap();
    let s = ds.summary();
    assert_eq!(s.count, 8000);
    for (t, &c) in s.type_counts.iter().enumerate() {
        assert!((900..=1100).contains(&c), "type {t}: {c}");
    }
    let train = s.split_counts[&Split::Train] as f64 / 8000.0;
    assert!((train - 0.7).abs() < 0.02, "{train}");
}

#[test]
fn labels_stay_in_range() {
    let ds = generate_synthetic(&SynthConfig { n: 10_000, sample_len: 4, seed: 3, ..Default::default() }).unwrap();
    ds.validate().unwrap();
    for s in &ds.samples {
        assert!(s.high.iter().chain(&s.two).all(|v| (0.0..=1.0).contains(v)));
        assert!(s.culture < 4 && s.type_label < 8);
    }
}

#[test]
fn every_class_appears_even_in_tiny_corpora() {
    let ds = generate_synthetic(&SynthConfig { n: 8, sample_len: 4, ..Default::default() }).unwrap();
    let mut seen: Vec<usize> = ds.samples.iter().map(|s| s.type_label).collect();
    seen.sort();
    assert_eq!(seen, (0..8).collect::<Vec<_>>());
}

#[test]
fn generation_is_seeded() {
    let cfg = SynthConfig { n: 50, sample_len: 32, ..Default::default() };
    let a = generate_synthetic(&cfg).unwrap();
    assert_eq!(a, generate_synthetic(&cfg).unwrap());
    assert_ne!(a, generate_synthetic(&SynthConfig { seed: 1, ..cfg }).unwrap());
}

fn spectrum(wave: &[f32], fft: &dyn rustfft::Fft<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = wave.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    fft.process(&mut buf);
    // 64 log-spaced bands between 100 Hz and 8 kHz
    let hz_per_bin = 16_000.0 / wave.len() as f64;
    let edges: Vec<usize> = (0..=64).map(|i| (100.0 * 80f64.powf(i as f64 / 64.0) / hz_per_bin) as usize).collect();
    let bands: Vec<f64> = edges
        .windows(2)
        .map(|w| buf[w[0]..w[1].max(w[0] + 1)].iter().map(|c| c.norm_sqr()).sum::<f64>().ln_1p())
        .collect();
    let norm = bands.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
    bands.iter().map(|b| b / norm).collect()
}

#[test]
fn types_are_separable_from_spectra() {
    let ds = generate_synthetic(&SynthConfig { n: 1000, seed: 5, ..Default::default() }).unwrap();
    let fft = FftPlanner::new().plan_fft_forward(ds.sample_len);
    let feats: Vec<Vec<f64>> = ds.samples.iter().map(|s| spectrum(&s.wave, fft.as_ref())).collect();
    let (fit, held) = (0..500, 500..1000);
    let mut centroids = vec![vec![0.0; 64]; 8];
    let mut counts = [0usize; 8];
    for i in fit {
        let t = ds.samples[i].type_label;
        counts[t] += 1;
        centroids[t].iter_mut().zip(&feats[i]).for_each(|(c, f)| *c += f);
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let truth: Vec<usize> = held.clone().map(|i| ds.samples[i].type_label).collect();
    let pred: Vec<usize> = held
        .map(|i| {
            let d = |c: &Vec<f64>| c.iter().zip(&feats[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (0..8).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap()
        })
        .collect();
    let score = uar(&truth, &pred, 8).unwrap();
    assert!(score > 0.9, "nearest-centroid UAR {score}");
}

#[test]
fn save_and_load_round_trip_bit_exact() {
    let ds = generate_synthetic(&SynthConfig { n: 40, sample_len: 256, seed: 9, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let [manifest, signals, summary] = ds.save(dir.path()).unwrap();
    assert!(summary.exists());
    let back = Dataset::load(&manifest, &signals, ds.dims, ds.sample_len).unwrap();
    assert_eq!(back.samples.len(), ds.samples.len());
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.split, b.split);
        assert_eq!((a.type_label, a.culture), (b.type_label, b.culture));
        assert!(a.high.iter().zip(&b.high).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.two.iter().zip(&b.two).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.wave.iter().zip(&b.wave).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn loading_refits_signal_length() {
    let ds = generate_synthetic(&SynthConfig { n: 10, sample_len: 100, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let [manifest, signals, _] = ds.save(dir.path()).unwrap();
    let short = Dataset::load(&manifest, &signals, ds.dims, 60).unwrap();
    assert!(short.samples.iter().all(|s| s.wave.len() == 60));
    assert_eq!(short.samples[0].wave[..], ds.samples[0].wave[..60]);
    let long = Dataset::load(&manifest, &signals, ds.dims, 150).unwrap();
    assert!(long.samples.iter().all(|s| s.wave[100..].iter().all(|&v| v == 0.0)));
}

#[test]
fn missing_signal_is_reported() {
    let ds = generate_synthetic(&SynthConfig { n: 10, sample_len: 16, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let [manifest, _, _] = ds.save(dir.path()).unwrap();
    let mut fewer = ds.clone();
    fewer.samples.pop();
    let other = tempfile::tempdir().unwrap();
    let [_, signals, _] = fewer.save(other.path()).unwrap();
    let err = Dataset::load(&manifest, &signals, ds.dims, 16).unwrap_err();
    assert!(err.to_string().contains(&ds.samples[9].id), "{err}");
}

#[test]
fn two_dim_targets_follow_ratings() {
    let neutral = derive_two(&[0.0; 10]).unwrap();
    assert_eq!(neutral, [0.5, 0.5]);
    let mut prev = derive_two(&[0.2; 10]).unwrap();
    // raise the ratings of the most aroused emotion step by step
    let top = (0..10).max_by(|&a, &b| CIRCUMPLEX[a][0].total_cmp(&CIRCUMPLEX[b][0])).unwrap();
    for k in 1..=10 {
        let mut high = [0.2; 10];
        high[top] = 0.2 + 0.08 * k as f64;
        let cur = derive_two(&high).unwrap();
        assert!(cur[0] > prev[0], "{cur:?} after {prev:?}");
        assert!(cur.iter().all(|v| (0.0..=1.0).contains(v)));
        prev = cur;
    }
    assert!(derive_two(&[0.5; 9]).is_err());
    assert!(derive_two(&[1.5; 10]).is_err());
}
