use std::f64::consts::TAU;

use proptest::prelude::*;

use super::io::{format_csv, parse_csv};
use super::*;

fn sine(freq: f64, rate: f64, n: usize, amp: f64) -> Vec<f64> {
    (0..n)
        .map(|t| amp * (TAU * freq * t as f64 / rate).sin())
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn central(x: &[f64]) -> &[f64] {
    let n = x.len();
    &x[n / 4..n - n / 4]
}

fn rec(c: usize, t: usize) -> Recording {
    let data = (0..c)
        .map(|ch| (0..t).map(|i| (ch * 1000 + i) as f64).collect())
        .collect();
    Recording::new(200.0, montage(c), data).unwrap()
}

#[test]
fn segment_two_channels() {
    let r = rec(2, 400);
    let g = segment_patches(&r, 200, &ElectrodeList::from_recordings([&r])).unwrap();
    assert_eq!(g.len(), 4);
    assert_eq!(g.slot_idx, vec![0, 1, 0, 1]);
    assert_eq!(g.channel_idx, vec![0, 0, 1, 1]);
}

#[test]
fn segment_drops_trailing_remainder() {
    let r = rec(1, 250);
    let g = segment_patches(&r, 200, &ElectrodeList::from_recordings([&r])).unwrap();
    assert_eq!(g.len(), 1);
    assert_eq!(g.patch(0), &r.data[0][..200]);
}

#[test]
fn segment_provenance_is_channel_major() {
    let r = rec(3, 600);
    let g = segment_patches(&r, 200, &ElectrodeList::from_recordings([&r])).unwrap();
    assert_eq!(g.len(), 9);
    for p in 0..9 {
        // independent index computation
        assert_eq!((g.channel_idx[p], g.slot_idx[p]), (p / 3, p % 3));
        assert_eq!(g.patch(p)[0], ((p / 3) * 1000 + (p % 3) * 200) as f64);
    }
}

#[test]
fn segment_rejects_short_recording() {
    let r = rec(1, 100);
    let err = segment_patches(&r, 200, &ElectrodeList::from_recordings([&r])).unwrap_err();
    assert!(matches!(err, crate::Error::Empty(_)));
}

#[test]
fn segment_uses_global_electrode_indices() {
    let r = rec(2, 400);
    let list = ElectrodeList(vec!["Cz".into(), r.channels[1].clone(), r.channels[0].clone()]);
    let g = segment_patches(&r, 200, &list).unwrap();
    assert_eq!(g.channel_idx, vec![2, 2, 1, 1]);
}

#[test]
fn windows_rebase_slots() {
    let r = rec(2, 1000);
    let g = segment_patches(&r, 100, &ElectrodeList::from_recordings([&r])).unwrap();
    let ws = g.windows(4);
    assert_eq!(ws.len(), 2);
    assert_eq!(ws[1].slot_idx, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    assert_eq!(ws[1].patch(0)[0], 400.0);
}

#[test]
fn alpha_passes_ten_hertz() {
    let x = sine(10.0, 200.0, 400, 1.0);
    let band = BandSpec::new("alpha", 8.0, Some(13.0));
    let y = bandpass(&x, &band, 200.0).unwrap();
    assert_eq!(y.len(), x.len());
    let ratio = rms(central(&y)) / rms(central(&x));
    assert!((ratio - 1.0).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn gamma_rejects_ten_hertz() {
    let x = sine(10.0, 200.0, 400, 1.0);
    let band = BandSpec::new("gamma", 30.0, None);
    let y = bandpass(&x, &band, 200.0).unwrap();
    assert!(rms(central(&y)) < 0.02 * rms(central(&x)));
}

#[test]
fn analytic_response_passband_and_stopband() {
    let f = Butterworth::bandpass(4, 8.0, 13.0, 200.0);
    let at = |hz: f64| f.response(TAU * hz / 200.0).norm();
    assert!((at(10.0) - 1.0).abs() < 0.01);
    // -3 dB at the edges
    assert!((at(8.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    assert!((at(13.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    assert!(at(40.0) < 1e-3);
}

#[test]
fn zero_in_zero_out() {
    for band in BandSpec::eeg_bands() {
        let y = bandpass(&[0.0; 128], &band, 200.0).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn band_edge_above_nyquist_is_rejected() {
    let band = BandSpec::new("beta", 13.0, Some(30.0));
    assert!(matches!(
        bandpass(&[0.0; 64], &band, 50.0),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn filter_is_linear() {
    let a = sine(5.0, 200.0, 300, 1.0);
    let b = sine(11.0, 200.0, 300, 0.7);
    let band = BandSpec::new("alpha", 8.0, Some(13.0));
    let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
    let fa = bandpass(&a, &band, 200.0).unwrap();
    let fb = bandpass(&b, &band, 200.0).unwrap();
    let fm = bandpass(&mix, &band, 200.0).unwrap();
    for i in 0..mix.len() {
        assert!((fm[i] - (2.0 * fa[i] - 3.0 * fb[i])).abs() < 1e-9);
    }
}

#[test]
fn in_band_leakage_is_small() {
    // a sinusoid centred in each band leaks little into the others
    let rate = 200.0;
    let centres = [2.0, 6.0, 10.5, 21.0, 60.0];
    let bands = BandSpec::eeg_bands();
    for (i, &f) in centres.iter().enumerate() {
        let x = sine(f, rate, 2000, 1.0);
        for (j, band) in bands.iter().enumerate() {
            if i == j {
                continue;
            }
            let y = bandpass(&x, band, rate).unwrap();
            let leak = rms(central(&y)) / rms(central(&x));
            assert!(leak < 0.05, "{f} Hz into {}: {leak}", band.name);
        }
    }
}

#[test]
fn synth_single_alpha_component_stays_in_alpha() {
    let band = BandSpec::new("alpha", 8.0, Some(13.0));
    let spec = SynthSpec {
        components: vec![BandComponents {
            band: band.clone(),
            count: 1,
            amplitude: (1.0, 1.0),
        }],
        noise_level: 0.0,
        duration: 4.0,
        sample_rate: 200.0,
        channels: 2,
        seed: 9,
    };
    let r = synth_generate(&spec).unwrap();
    for row in &r.data {
        let y = bandpass(row, &band, 200.0).unwrap();
        let kept = rms(central(&y)).powi(2) / rms(central(row)).powi(2);
        assert!(kept > 0.95, "kept {kept}");
    }
}

#[test]
fn synth_is_deterministic() {
    let spec = SynthSpec::all_bands(200.0, 3, 2.0, 42);
    assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
    let other = SynthSpec { seed: 43, ..spec.clone() };
    assert_ne!(synth_generate(&spec).unwrap(), synth_generate(&other).unwrap());
}

#[test]
fn synth_empty_spec_is_silent() {
    let spec = SynthSpec {
        components: vec![],
        noise_level: 0.0,
        duration: 1.0,
        sample_rate: 100.0,
        channels: 2,
        seed: 0,
    };
    let r = synth_generate(&spec).unwrap();
    assert!(r.data.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn synth_band_power_proportions() {
    // two bands with amplitude ratio 2:1 → power ratio 4:1
    let spec = SynthSpec {
        components: vec![
            BandComponents {
                band: BandSpec::new("theta", 4.0, Some(8.0)),
                count: 1,
                amplitude: (2.0, 2.0),
            },
            BandComponents {
                band: BandSpec::new("beta", 13.0, Some(30.0)),
                count: 1,
                amplitude: (1.0, 1.0),
            },
        ],
        noise_level: 0.0,
        duration: 8.0,
        sample_rate: 200.0,
        channels: 3,
        seed: 5,
    };
    let r = synth_generate(&spec).unwrap();
    for row in &r.data {
        let th = bandpass(row, &spec.components[0].band, 200.0).unwrap();
        let be = bandpass(row, &spec.components[1].band, 200.0).unwrap();
        let ratio = rms(central(&th)).powi(2) / rms(central(&be)).powi(2);
        assert!((ratio / 4.0 - 1.0).abs() < 0.1, "ratio {ratio}");
    }
}

#[test]
fn resample_same_rate_is_identity() {
    let r = synth_generate(&SynthSpec::all_bands(200.0, 2, 1.0, 1)).unwrap();
    assert_eq!(r.resample_linear(200.0).unwrap(), r);
}

#[test]
fn resample_upsampled_sinusoid_tracks_analytic() {
    let r = Recording::new(100.0, montage(1), vec![sine(2.0, 100.0, 200, 1.0)]).unwrap();
    let up = r.resample_linear(200.0).unwrap();
    assert_eq!(up.sample_rate, 200.0);
    let exact = sine(2.0, 200.0, up.samples(), 1.0);
    let dev = up.data[0]
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(dev < 0.02, "deviation {dev}");
}

#[test]
fn resample_constant_stays_constant() {
    let r = Recording::new(128.0, montage(2), vec![vec![3.25; 100], vec![-1.0; 100]]).unwrap();
    for rate in [50.0, 200.0, 333.0] {
        let o = r.resample_linear(rate).unwrap();
        assert!(o.data[0].iter().all(|v| (*v - 3.25).abs() < 1e-12));
        assert!(o.data[1].iter().all(|v| (*v + 1.0).abs() < 1e-12));
    }
}

#[test]
fn csv_parse_two_channels() {
    let r = synth_generate(&SynthSpec::all_bands(200.0, 2, 2.0, 3)).unwrap();
    let back = parse_csv(&format_csv(&r)).unwrap();
    assert_eq!(back.num_channels(), 2);
    assert_eq!(back.samples(), 400);
    assert_eq!(back, r);
}

#[test]
fn csv_channel_count_mismatch_names_line() {
    let text = "# rate=200 channels=a,b,c\n1,2\n3,4\n";
    let err = parse_csv(text).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn csv_rejects_non_finite_and_bad_header() {
    assert!(parse_csv("# rate=200 channels=a\nNaN\n").is_err());
    assert!(parse_csv("# rate=200 channels=a\ninf\n").is_err());
    assert!(parse_csv("rate=200 channels=a\n1\n").is_err());
    assert!(parse_csv("# rate=x channels=a\n1\n").is_err());
    assert!(parse_csv("# channels=a\n1\n").is_err());
}

#[test]
fn raw_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.f32");
    let p2 = dir.path().join("b.f32");
    let r = synth_generate(&SynthSpec::all_bands(200.0, 3, 1.5, 8)).unwrap();
    save_recording(&r, &p1, RecordingFormat::RawF32).unwrap();
    let back = load_recording(&p1, RecordingFormat::RawF32).unwrap();
    assert_eq!(back.channels, r.channels);
    for (a, b) in back.data.iter().flatten().zip(r.data.iter().flatten()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    save_recording(&back, &p2, RecordingFormat::RawF32).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn raw_rejects_truncated_payload() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.f32");
    let r = synth_generate(&SynthSpec::all_bands(200.0, 2, 1.0, 8)).unwrap();
    save_recording(&r, &p, RecordingFormat::RawF32).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&p, bytes).unwrap();
    assert!(load_recording(&p, RecordingFormat::RawF32).is_err());
}

#[test]
fn electrode_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("electrodes.txt");
    let list = ElectrodeList(montage(5));
    save_electrodes(&list, &p).unwrap();
    assert_eq!(load_electrodes(&p).unwrap(), list);
    std::fs::write(&p, "Cz\nFz\nCz\n").unwrap();
    assert!(load_electrodes(&p).is_err());
}

proptest! {
    #[test]
    fn segmentation_reassembles_prefix(c in 1usize..4, t in 16usize..300, w in 8usize..64) {
        prop_assume!(t >= w);
        let r = rec(c, t);
        let g = segment_patches(&r, w, &ElectrodeList::from_recordings([&r])).unwrap();
        let slots = t / w;
        for ch in 0..c {
            let joined: Vec<f64> = (0..g.len())
                .filter(|&p| g.channel_idx[p] == ch)
                .flat_map(|p| g.patch(p).to_vec())
                .collect();
            prop_assert_eq!(&joined[..], &r.data[ch][..slots * w]);
        }
    }
}
