use dynsurv::harness::{run_benchmark, BenchmarkOptions, CvPlan, LandmarkSpec};
use dynsurv::pipelines::{MethodKind, MethodSpec};

fn main() {
    let reps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let (data, report) = dynsurv::pbc2();
    println!("{report}");
    let methods: Vec<MethodSpec> = MethodKind::ALL.into_iter().map(MethodSpec::new).collect();
    let landmarks: Vec<LandmarkSpec> = [2.5, 3.0, 3.5].into_iter().map(|l| LandmarkSpec::yearly(l, 8.0)).collect();
    let start = std::time::Instant::now();
    let res = run_benchmark(&data, &methods, &landmarks, &CvPlan::new(5, reps, 2024), &BenchmarkOptions::default()).unwrap();
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    for m in &res.methods {
        for &l in &res.landmarks {
            println!(
                "{m:18} {l:4} C={:?} failed={} secs={:.3}",
                res.cindex(m, l).map(|c| (c * 1000.0).round() / 1000.0),
                res.n_failed(m, l),
                res.mean_fit_seconds(m, l).unwrap_or(f64::NAN)
            );
        }
    }
    print!("{}", res.failures_csv());
}
