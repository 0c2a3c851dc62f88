//! Monte-Carlo properties of the PHY and the session simulator.

use ncma::channel::{draw_channel, transmit, ChannelModel};
use ncma::demod::DEFAULT_ALPHA;
use ncma::erasure::{ErasureCode, Stream};
use ncma::phydec::{decode_single, modulate_packet, simulate_slot, undetected_errors, DecoderConfig};
use ncma::protocol::{run_session, SessionConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn single_user_fer(snr_db: f64, frames: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let code = ErasureCode::gf256(16, 4).unwrap();
    let mut errors = 0;
    for f in 0..frames {
        let index = f % code.n() + 1;
        let p = code.encode_packet(&code.random_message(Stream::A, &mut rng), index).unwrap();
        let x = modulate_packet(&p);
        let ch = draw_channel(snr_db, None, ChannelModel::FixedPhase, x.len(), &mut rng).unwrap();
        let rx = transmit(&x, None, &ch, &mut rng).unwrap();
        if decode_single(&rx, &ch, DEFAULT_ALPHA, index, Stream::A).as_ref() != Some(&p) {
            errors += 1;
        }
    }
    errors as f64 / frames as f64
}

#[test]
fn frame_error_rate_falls_with_snr() {
    let frames = 10_000;
    let snrs = [-4.0, -3.0, -2.0, -1.0, 0.0, 2.0];
    let fer: Vec<f64> = snrs.iter().enumerate().map(|(i, &s)| single_user_fer(s, frames, 50 + i as u64)).collect();
    for w in fer.windows(2) {
        // Three binomial standard errors of the larger rate.
        let slack = 3.0 * (w[0] * (1.0 - w[0]) / frames as f64).sqrt();
        assert!(w[1] <= w[0] + slack, "FER rose: {snrs:?} -> {fer:?}");
    }
    assert!(fer[0] > 0.05 && fer[fer.len() - 1] < 0.01, "{fer:?}");
}

#[test]
fn group_frequencies_follow_snr() {
    let snrs = [0.0, 3.0, 6.0, 9.0, 12.0];
    let freqs: Vec<_> = snrs
        .iter()
        .map(|&s| {
            let mut cfg = SessionConfig::two_user(s, s, 24, 16, Variant::NcmaRmud, 2000, 77);
            cfg.channel = ChannelModel::RayleighBlock { group: ChannelModel::DEFAULT_GROUP };
            run_session(&cfg).unwrap().0.group_frequencies().unwrap()
        })
        .collect();
    for w in freqs.windows(2) {
        assert!(w[1].ab + 0.02 >= w[0].ab, "Pr(AB) fell: {freqs:?}");
        assert!(w[1].none <= w[0].none + 0.02, "Pr(NONE) rose: {freqs:?}");
    }
    assert!(freqs[4].ab > freqs[0].ab + 0.2, "{freqs:?}");
}

/// Every packet the PHY hands to the MAC is compared with what was sent.
#[test]
fn crc_lets_no_corrupted_packet_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let code = ErasureCode::gf256(16, 4).unwrap();
    let cfg = DecoderConfig { mud: ncma::phydec::MudKind::RmudSic, ..DecoderConfig::default() };
    let (mut delivered, mut wrong) = (0, 0);
    for slot in 0..4000 {
        let index = slot % code.n() + 1;
        let pa = code.encode_packet(&code.random_message(Stream::A, &mut rng), index).unwrap();
        let pb = code.encode_packet(&code.random_message(Stream::B, &mut rng), index).unwrap();
        let snr = -2.0 + (slot % 9) as f64;
        let ch = draw_channel(snr, Some(snr), ChannelModel::FixedPhase, modulate_packet(&pa).len(), &mut rng).unwrap();
        let o = simulate_slot(&pa, &pb, &ch, &cfg, &mut rng).unwrap();
        delivered += [&o.decoded_a, &o.decoded_b, &o.decoded_x].iter().filter(|p| p.is_some()).count();
        wrong += undetected_errors(&o, &pa, &pb);
    }
    assert!(delivered > 4000, "{delivered}");
    assert_eq!(wrong, 0);
}

#[test]
fn sessions_report_no_undetected_errors() {
    for (i, snr) in [0.0, 5.0, 10.0].into_iter().enumerate() {
        let cfg = SessionConfig::two_user(snr, snr, 12, 8, Variant::NcmaRmudSic, 1500, 30 + i as u64);
        let stats = run_session(&cfg).unwrap().0;
        assert_eq!(stats.undetected_errors, 0, "{snr} dB");
        assert_eq!(stats.mac_conflicts, 0, "{snr} dB");
    }
}

#[test]
fn single_user_throughput_approaches_one() {
    let stats = run_session(&SessionConfig::two_user(15.0, 15.0, 24, 16, Variant::Su, 3000, 4)).unwrap().0;
    assert!((0.95..=1.0).contains(&stats.throughput), "{}", stats.throughput);
    assert!(stats.upper_bound.is_none());
}
