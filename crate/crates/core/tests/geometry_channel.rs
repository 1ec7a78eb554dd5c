use proptest::prelude::*;
use scdn_core::geometry_channel::*;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-300)
}

#[test]
fn los_probability_examples() {
    let c = ChannelParams::default();
    assert!(close(p_los(&c, PathClass::A2G, 11.95), 1.0 / 12.95, 1e-12));
    assert!(close(p_los(&c, PathClass::A2G, 90.0), 0.999_785_346_057_983_6, 1e-10));
    assert!(close(p_los(&c, PathClass::A2G, 0.0), 0.015_462_849_710_898_698, 1e-10));
}

#[test]
fn path_loss_examples() {
    let mut c = ChannelParams::default();
    c.a2g.excess_los = 1.0;
    let unit = c.light_speed / (4.0 * std::f64::consts::PI * c.carrier_freq);
    assert!(close(path_loss(&c, PathClass::A2G, unit, 1.0).unwrap(), 1.0, 1e-12));

    let c = ChannelParams::default();
    let a = path_loss(&c, PathClass::A2G, 37.0, 0.3).unwrap();
    let b = path_loss(&c, PathClass::A2G, 74.0, 0.3).unwrap();
    assert!(close(b / a, 4.0, 1e-12));

    // 2 GHz, 100 m, p = 0.5, 3 dB / 23 dB excess
    let v = path_loss(&c, PathClass::A2G, 100.0, 0.5).unwrap();
    assert!(close(v, 7_081_572_269.894_507, 1e-9));
    assert_eq!(path_loss(&c, PathClass::A2G, 0.0, 0.5), Err(ChannelError::ZeroDistance));
}

#[test]
fn rate_examples() {
    let c = ChannelParams::default();
    let pl = 1e9;
    assert_eq!(rate(&c, pl, 0.0), 0.0);
    let snr_one = pl * c.noise_power();
    assert!(close(rate(&c, pl, snr_one), c.bandwidth, 1e-12));
    assert!(close(rate(&c, pl, 3.0 * snr_one), 2.0 * c.bandwidth, 1e-12));
}

#[test]
fn link_state_examples() {
    let c = ChannelParams::default();
    let dev = Position3::new(10.0, 10.0, 0.0);
    let srv = Position3::new(10.0, 10.0, 50.0);
    let probe = link_state(&c, &srv, &dev, 0.01, 1000.0, 1.0).unwrap();
    assert_eq!(probe.path_class, PathClass::A2G);
    let t_max = 1000.0 / probe.rate;
    let at = link_state(&c, &srv, &dev, 0.01, 1000.0, t_max).unwrap();
    assert!(!at.failed);
    let below = link_state(&c, &srv, &dev, 0.01, 1000.0, t_max * (1.0 - 1e-9)).unwrap();
    assert!(below.failed);

    let off = link_state(&c, &srv, &dev, 0.0, 1000.0, 1.0).unwrap();
    assert_eq!(off.rate, 0.0);
    assert!(off.failed);

    let air = link_state(&c, &srv, &Position3::new(0.0, 0.0, 3.0), 0.01, 1000.0, 1.0).unwrap();
    assert_eq!(air.path_class, PathClass::A2A);
    assert_eq!(link_state(&c, &dev, &dev, 0.01, 1000.0, 1.0), Err(ChannelError::ZeroDistance));
}

#[test]
fn defaults_convert_decibels_once() {
    let c = ChannelParams::default();
    assert!(c.a2g.excess_nlos >= c.a2g.excess_los && c.a2g.excess_los >= 1.0);
    assert!(c.a2a.excess_nlos >= c.a2a.excess_los && c.a2a.excess_los >= 1.0);
    assert!(close(c.noise_power(), 10f64.powf(-20.4) * 2e6, 1e-12));
}

fn pos() -> impl Strategy<Value = Position3> {
    (0.0..1000.0f64, 0.0..1000.0f64, 0.0..100.0f64).prop_map(|(x, y, z)| Position3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn los_probability_increases_with_angle(a in 0.0..90.0f64, b in 0.0..90.0f64) {
        let c = ChannelParams::default();
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        for class in [PathClass::A2G, PathClass::A2A] {
            let (pl, ph) = (p_los(&c, class, lo), p_los(&c, class, hi));
            prop_assert!(pl <= ph);
            prop_assert!(pl > 0.0 && ph < 1.0);
        }
    }

    #[test]
    fn rate_monotone(d in 1.0..2000.0f64, k in 1.01..3.0f64, p in 1e-4..1.0f64) {
        let c = ChannelParams::default();
        let r = |d: f64, p: f64| rate(&c, path_loss(&c, PathClass::A2G, d, 0.5).unwrap(), p);
        prop_assert!(r(d * k, p) < r(d, p));
        prop_assert!(r(d, p * k) > r(d, p));
    }

    #[test]
    fn path_loss_between_pure_regimes(d in 1.0..2000.0f64, p in 0.0..1.0f64) {
        let c = ChannelParams::default();
        for class in [PathClass::A2G, PathClass::A2A] {
            let los = path_loss(&c, class, d, 1.0).unwrap();
            let mix = path_loss(&c, class, d, p).unwrap();
            let nlos = path_loss(&c, class, d, 0.0).unwrap();
            prop_assert!(los <= mix * (1.0 + 1e-12) && mix <= nlos * (1.0 + 1e-12));
        }
    }

    #[test]
    fn path_class_predicate(sz in prop_oneof![Just(0.0), 0.1..50.0f64], dz in prop_oneof![Just(0.0), 0.1..50.0f64]) {
        let s = Position3::new(1.0, 2.0, sz);
        let d = Position3::new(5.0, 7.0, dz);
        let expect = if sz > 0.0 && dz > 0.0 { PathClass::A2A } else { PathClass::A2G };
        prop_assert_eq!(path_class(&s, &d), expect);
        prop_assert_eq!(link_state(&ChannelParams::default(), &s, &d, 0.01, 1e3, 1.0).unwrap().path_class, expect);
    }

    #[test]
    fn distance_symmetric_and_angle_bounded(a in pos(), b in pos()) {
        prop_assert_eq!(euclidean_distance(&a, &b), euclidean_distance(&b, &a));
        if a != b {
            let t = elevation_angle_deg(&a, &b).unwrap();
            prop_assert!((0.0..=90.0).contains(&t));
        }
    }

    #[test]
    fn failure_flag_matches_delay(a in pos(), b in pos(), p in 0.0..0.1f64, t in 1e-7..1e-2f64) {
        prop_assume!(a != b);
        let l = link_state(&ChannelParams::default(), &a, &b, p, 1000.0, t).unwrap();
        prop_assert_eq!(l.failed, l.delay > t);
        prop_assert!(l.path_loss > 0.0);
        prop_assert!(p == 0.0 || l.rate > 0.0);
    }
}
