//! Randomized comparison of the interior-point solver against the
//! enumeration oracle. Usage: `qp_fuzz [instances] [seed]`.

use safe_fbsde::qp::{qp_fuzz, QpSettings};

fn main() {
    let mut args = std::env::args().skip(1);
    let n = args.next().and_then(|a| a.parse().ok()).unwrap_or(1000);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let t = std::time::Instant::now();
    let r = qp_fuzz(n, seed, 1e-6, &QpSettings::default());
    println!("{}", serde_json::to_string_pretty(&r).unwrap());
    println!("elapsed {:.2?}", t.elapsed());
}
