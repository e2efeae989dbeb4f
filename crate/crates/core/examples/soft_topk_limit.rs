//! Soft top-k on one distance vector: as `ot_epsilon` shrinks the soft
//! indicator approaches the exact selection, while its sum stays at K.
//!
//! ```text
//! cargo run --example soft_topk_limit
//! ```

use adfa::soft_topk::{hard_topk, soft_topk, soft_topk_with_vjp, SoftTopKConfig};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> adfa::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d: Array1<f64> = (0..12).map(|_| rng.random_range(0.5..3.0)).collect();
    let k = 3;
    let hard = hard_topk(d.view(), k)?;
    println!("distances {:.2}", d);
    println!("hard      {:.2}", hard);

    for eps in [0.1, 0.03, 0.01, 0.001] {
        let cfg = SoftTopKConfig::default()
            .with_k(k)
            .with_ot_epsilon(eps)
            .with_budget(5000, 1e-9);
        let soft = soft_topk(d.view(), &cfg)?;
        let gap = (&soft.z - &hard).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        println!(
            "eps {eps:<6} sum {:.6}  max |soft - hard| {gap:.4}  iterations {}",
            soft.z.sum(),
            soft.iterations
        );
    }

    // gradient of sum(z * d) with respect to d
    let cfg = SoftTopKConfig::default().with_k(k);
    let (ind, grad) = soft_topk_with_vjp(d.view(), &cfg, d.view())?;
    let total = &ind.z + &grad;
    println!("d/dd sum(z * d) {:.3}", total);
    Ok(())
}
