//! Scratch diagnostic: attention sharpness and class purity after training.

use tap_core::data::{load_mnist_half, make_split, SplitViews};
use tap_core::graph::Graph;
use tap_core::model::{Patch, Variant};
use tap_core::stats;
use tap_core::tap::attention_weights;
use tap_core::train::{run_once_full, TrainConfig};

fn main() {
    let dir = std::env::args().nth(1).unwrap_or("/tmp/cal/d0".into());
    let ds = load_mnist_half::<f64>(
        format!("{dir}/mnist_half/images-idx3-ubyte"),
        format!("{dir}/mnist_half/labels-idx1-ubyte"),
    )
    .expect("corpus");
    let cfg = TrainConfig {
        seed: 17,
        ..TrainConfig::default()
    };

    for run_idx in 0..2usize {
        let (res, model, _) = run_once_full(&ds, Variant::Tap, &cfg, run_idx).expect("train");
        let tap = match &model.patch {
            Patch::Tap(tp) => tp,
            _ => unreachable!(),
        };

        // rebuild the same split to recover reference labels and eval rows
        let run_seed = stats::derive_seed(cfg.seed, "mc-run", run_idx as u64);
        let plan = make_split(
            ds.len(),
            stats::derive_seed(run_seed, "split", 0),
            cfg.n_labeled,
            cfg.n_reference,
        )
        .unwrap();
        let views = SplitViews::build(&ds, &plan, false).unwrap();

        let s = cfg.ref_batch;
        let zb = &views.reference_z()[..s * views.d_z()];
        let zy: Vec<usize> = plan.reference.iter().take(s).map(|&r| ds.label(r)).collect();

        // compute x1 (eval-mode first hidden layer) for the probe queries
        let nq = 200usize;
        let d = views.d_x();
        let xq = &views.eval_x()[..nq * d];
        let mut g = Graph::<f64>::new();
        let xn = g.leaf(xq, &[nq, d], false);
        let w1 = g.param(&model.l1_w);
        let b1 = g.param(&model.l1_b);
        let g1 = g.param(&model.ln1_gamma);
        let be1 = g.param(&model.ln1_beta);
        let h1 = g.matmul_nt(xn, w1);
        let h1 = g.add(h1, b1);
        let h1 = g.relu(h1);
        let x1n = g.layer_norm(h1, g1, be1, model.spec.ln_eps);
        let x1 = g.value(x1n).to_vec();
        let hdim = model.spec.hidden_dim;

        let mut ent_sum = 0.0;
        let mut pur_sum = 0.0;
        let mut logit_std_sum = 0.0;
        for qi in 0..nq {
            let q = &x1[qi * hdim..(qi + 1) * hdim];
            let w = attention_weights(tap, q, zb, s);
            let ent: f64 = -w
                .iter()
                .filter(|&&x| x > 0.0)
                .map(|&x| x * x.ln())
                .sum::<f64>();
            let y = views.eval_y()[qi];
            let pur: f64 = (0..s).filter(|&i| zy[i] == y).map(|i| w[i]).sum();
            ent_sum += ent;
            pur_sum += pur;
            let lw: Vec<f64> = w.iter().map(|&x| x.max(1e-300).ln()).collect();
            let m = stats::mean(&lw);
            logit_std_sum += (lw.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / s as f64).sqrt();
        }
        let wq_norm: f64 = tap.wq.data.iter().map(|&v| v * v).sum::<f64>().sqrt();
        let wk_norm: f64 = tap.wk.data.iter().map(|&v| v * v).sum::<f64>().sqrt();
        println!(
            "run {run_idx}: metric={:.4} entropy={:.3} (ln s = {:.3}) purity={:.3} (chance ~0.1) \
             logit_std={:.3} |Wq|={:.2} |Wk|={:.2}",
            res.final_metric,
            ent_sum / nq as f64,
            (s as f64).ln(),
            pur_sum / nq as f64,
            logit_std_sum / nq as f64,
            wq_norm,
            wk_norm,
        );
    }
}
