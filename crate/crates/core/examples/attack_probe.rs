// scratch diagnostic, not part of the deliverable
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use wfarc_core::detector::*;
use wfarc_core::estimator::*;
use wfarc_core::geometry::Constellation;
use wfarc_core::observables::{AmbiguityLedger, Environment, ObservableSim};
use wfarc_core::scenario::*;
use wfarc_core::spoofing::*;

fn main() {
    let c = Constellation::gps_like();
    let cfg = ScenarioConfig {
        duration_s: 180.0, stop_until_s: 163.0, accel_mps2: 2.0, cruise_speed_mps: Some(12.0),
        dither: Default::default(), imu_grade: ImuGrade::Industrial, seeds: Seeds{trajectory:11,imu:12,observables:13},
        start_pos_m: [0.0;3], base_pos_m: [220.0,-160.0,4.0], lever_arm_m: [0.5,0.0,-1.2],
    };
    let sim = ObservableSim::new(&c, cfg.base_pos(), cfg.lever_arm());
    let grade = ImuGrade::Industrial.model();

    let truth = generate_trajectory(&cfg, cfg.seeds.trajectory).unwrap();
    let imu = synthesize_imu(&truth, &grade, cfg.seeds.imu).unwrap();
    let mut ledger = AmbiguityLedger::new();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seeds.observables);
    let mut epochs = Vec::new();
    for s in truth.iter().step_by(20).skip(1) {
        let (e,_) = sim.synthesize_epoch(s, &mut ledger, Environment::ShallowUrban, &mut rng).unwrap();
        epochs.push(e);
    }

    for shift in [-0.05f64, -0.10, -0.15] {
        let atk = TimestampAttack { start_t: 163.0, end_t: 175.0, shift_s: shift };
        let (spoofed, _) = apply_timestamp_shift(&epochs, &atk, &sim, &truth).unwrap();
        let init = NavState::at_truth(&truth[0], grade);
        let run = run_filter(&imu, &spoofed, init, &sim, &FilterConfig::new(grade)).unwrap();
        // per-epoch eps_phi around the attack start
        print!("shift {shift}: eps around onset:");
        for f in run.fixes.iter().filter(|f| f.t >= 162.4 && f.t <= 166.0) {
            print!(" {:.0}", f.eps_phi);
        }
        println!();
        let mut st = DetectorState::new(10, DetectorMode::Empirical, None);
        print!("  Psi:");
        for f in &run.fixes {
            st.update_wfarc(f);
            if f.t >= 162.8 && f.t <= 166.0 { print!(" {:.0}@{:.1}", st.psi(), f.t); }
        }
        println!();
        // null stats for threshold feel: max Psi before 163
        let mut st2 = DetectorState::new(10, DetectorMode::Empirical, None);
        let mut max_null: f64 = 0.0;
        let mut mean_eps = 0.0; let mut cnt = 0;
        for f in &run.fixes {
            st2.update_wfarc(f);
            if f.t < 163.0 { max_null = max_null.max(st2.psi()); mean_eps += f.eps_phi; cnt += 1; }
        }
        println!("  null: mean eps {:.1}, max Psi {:.0}", mean_eps/cnt as f64, max_null);
    }
}
