fn main() {
    let t0 = std::time::Instant::now();
    println!("== f32 suite (5 trials) ==");
    for e in msdb::gradsuite::run_suite::<f32>(5).unwrap() {
        println!("{:<28} trials={:<3} max_rel_err={:.3e} {}", e.name, e.trials, e.max_rel_err,
                 if e.max_rel_err < 1e-3 { "OK" } else { "FAIL" });
    }
    println!("f32 took {:.1?}", t0.elapsed());
    let t1 = std::time::Instant::now();
    println!("== f64 suite (5 trials) ==");
    for e in msdb::gradsuite::run_suite::<f64>(5).unwrap() {
        println!("{:<28} trials={:<3} max_rel_err={:.3e} {}", e.name, e.trials, e.max_rel_err,
                 if e.max_rel_err < 1e-6 { "OK" } else { "FAIL" });
    }
    println!("f64 took {:.1?}", t1.elapsed());
}
