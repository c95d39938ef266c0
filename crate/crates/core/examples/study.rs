use relnav::scenario::*;
fn main() {
    // args: freq lr amp wd aniso shear spread [roe1]
    let a: Vec<f64> = std::env::args().skip(1).take(7).map(|s| s.parse().unwrap()).collect();
    let roe1 = std::env::args().nth(8).is_some();
    let (freq, lr, amp, wd, aniso, shear, spread) = (a[0], a[1], a[2], a[3], a[4], a[5], a[6]);
    let mut on_q = vec![]; let mut off_q = vec![]; let mut on_t = vec![]; let mut off_t = vec![];
    for seed in 1..=5u64 {
        for ost in [false, true] {
            let mut cfg = if roe1 { ScenarioConfig::roe1() } else { ScenarioConfig::roe2() };
            cfg.seed = seed;
            cfg.gap.bias_freq = freq;
            cfg.gap.bias_amp = amp;
            cfg.gap.aniso = aniso;
            cfg.gap.shear = shear;
            cfg.gap.outlier_spread = spread;
            cfg.ost.lr = lr;
            cfg.ost.weight_decay = wd;
            cfg.ost.enabled = ost;
            let log = run(&cfg).unwrap();
            let s = log.summary.unwrap();
            if ost { on_q.push(s.e_q_ss_filter); on_t.push(s.e_t_ss_filter); }
            else { off_q.push(s.e_q_ss_filter); off_t.push(s.e_t_ss_filter); }
        }
    }
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| { let mu = m(v); (v.iter().map(|x|(x-mu).powi(2)).sum::<f64>()/(v.len()-1) as f64).sqrt() };
    println!("{} f={freq} lr={lr} amp={amp} wd={wd} an={aniso} sh={shear} sp={spread}: eq off {:.3}+-{:.3} on {:.3}+-{:.3} | et off {:.4}+-{:.4} on {:.4}+-{:.4}",
        if roe1 {"roe1"} else {"roe2"},
        m(&off_q), sd(&off_q), m(&on_q), sd(&on_q), m(&off_t), sd(&off_t), m(&on_t), sd(&on_t));
}
