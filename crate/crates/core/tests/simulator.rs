use wban_core::sim::{run_experiment, sweep, ChannelPreset, ExperimentConfig, SweepAxis};

fn base(duration_s: f64) -> ExperimentConfig {
    ExperimentConfig {
        duration_s,
        ..Default::default()
    }
}

#[test]
fn lossless_preset() {
    let cfg = ExperimentConfig {
        channel: ChannelPreset::Flat(0.0),
        ..base(30.0)
    };
    let r = run_experiment(&cfg).unwrap();
    for l in &r.links {
        assert_eq!(l.counters.fer(), 0.0);
        assert_eq!(l.counters.per(), 0.0);
    }
}

#[test]
fn wireless_near_links_near_half_percent() {
    let cfg = ExperimentConfig {
        distances_m: vec![1.0, 2.0, 4.0, 1.0, 2.0, 4.0],
        ..base(600.0)
    };
    let t = run_experiment(&cfg).unwrap().totals();
    let sigma = (0.005f64 * 0.995 / t.s_frm as f64).sqrt();
    assert!((t.fer() - 0.005).abs() < 3.0 * sigma + 0.001, "fer {}", t.fer());
}

#[test]
fn fer_grows_with_distance() {
    let rows = sweep(&base(300.0), SweepAxis::Distance, &[1.0, 2.0, 5.0, 10.0]).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].counters.fer() >= w[0].counters.fer(), "{w:?}");
    }
}

#[test]
fn per_falls_with_retries() {
    let cfg = ExperimentConfig {
        distances_m: vec![10.0],
        ..base(120.0)
    };
    let rows = sweep(&cfg, SweepAxis::MaxRetries, &[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].counters.per() <= w[0].counters.per(), "{w:?}");
    }
    assert!(rows[0].counters.per() > 0.0);
}

#[test]
fn fer_grows_with_payload() {
    let cfg = ExperimentConfig {
        channel: ChannelPreset::Flat(1e-4),
        ..base(300.0)
    };
    let values = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0];
    let rows = sweep(&cfg, SweepAxis::PayloadLen, &values).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].counters.fer() >= w[0].counters.fer(), "{w:?}");
    }
}

#[test]
fn sweep_is_reproducible() {
    let values = [1.0, 5.0];
    let a = sweep(&base(5.0), SweepAxis::Distance, &values).unwrap();
    let b = sweep(&base(5.0), SweepAxis::Distance, &values).unwrap();
    assert_eq!(a, b);
}
