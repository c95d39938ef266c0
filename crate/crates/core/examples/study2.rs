use relnav::scenario::*;
use relnav::geometry::{KeypointModel, Quaternion, CameraModel};
use nalgebra::Vector3;

fn main() {
    let lr: f64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let mut cfg = ScenarioConfig::roe2();
    cfg.seed = 1;
    cfg.ost.lr = lr;
    cfg.ost.enabled = true;
    // probe views for generalization
    let model = KeypointModel::builtin();
    let cam = CameraModel::default();
    let probes: Vec<Quaternion> = (0..8).map(|i| {
        Quaternion::from_axis_angle(&Vector3::new(1.0, (i as f64)*0.7, 0.3), 0.5 + 0.31*i as f64)
    }).collect();
    let probe_err = |p: &relnav::predictor::PredictorParams, gap| -> f64 {
        probes.iter().map(|q| predictor_view_error(p, &model, &cam, gap, 18.0, q)).sum::<f64>() / probes.len() as f64
    };
    // run with a callback-ish approach: we don't have hooks, so replicate run loop? simpler: use checkpoints...
    // Quick approach: run scenario fully, but we can't see params mid-run. Instead run multiple durations.
    for frac in [0.35, 0.7, 1.0, 1.4, 2.0] {
        let mut c = cfg.clone();
        c.duration_orbits = frac;
        let log = run(&c).unwrap();
        let n = log.rows.len();
        let tail: Vec<f64> = log.rows[n.saturating_sub(100)..].iter().map(|r| r.flt_err.e_q).collect();
        let eq = tail.iter().sum::<f64>() / tail.len() as f64;
        let losses: Vec<f64> = log.rows.iter().filter(|r| r.ost_event).map(|r| r.ost_loss).collect();
        let lhead = if losses.len() > 5 { losses[..5].iter().sum::<f64>()/5.0 } else { f64::NAN };
        let ltail = if losses.len() > 5 { losses[losses.len()-5..].iter().sum::<f64>()/5.0 } else { f64::NAN };
        println!("dur={frac} events={} e_q_tail100={eq:.3} loss {lhead:.3}->{ltail:.3}", losses.len());
    }
    let _ = probe_err;
}
