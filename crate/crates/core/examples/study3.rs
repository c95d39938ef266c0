use relnav::scenario::*;
use relnav::predictor::GapModel;
fn main() {
    let m = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    for (label, mode, asnc) in [("oracle+asnc", TruthMode::Oracle, true),
                                ("stm+asnc", TruthMode::Stm, true),
                                ("stm-asnc", TruthMode::Stm, false),
                                ("oracle-asnc", TruthMode::Oracle, false)] {
        let mut fq = vec![]; let mut ft = vec![]; let mut fn_ = vec![];
        for seed in 1..=3u64 {
            let mut cfg = ScenarioConfig::roe2();
            cfg.seed = seed;
            cfg.gap = GapModel::zero();
            cfg.ost.enabled = false;
            cfg.truth_mode = mode;
            cfg.filter.asnc.enabled = asnc;
            let log = run(&cfg).unwrap();
            let s = log.summary.clone().unwrap();
            let nees_tail: f64 = log.rows[1185..].iter().map(|r| r.nees).sum::<f64>() / 1186.0;
            fq.push(s.e_q_ss_filter); ft.push(s.e_t_ss_filter); fn_.push(nees_tail);
        }
        println!("{label}: e_q_ss {:.3} deg, e_t_ss {:.4} m, nees {:.1}", m(&fq), m(&ft), m(&fn_));
    }
}
