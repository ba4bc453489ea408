use super::*;
use crate::block::{block_forward, BranchParams};
use crate::numerics::check_gradients;

fn rand_tokens(b: usize, n: usize, d: usize, rng: &mut Rng) -> Tensor {
    Tensor::new(rng.normals(b * n * d, 1.0), &[b, n, d]).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn randomize_bank(layer: &mut RecursiveLayer, rng: &mut Rng) {
    let (r, d) = (layer.bank.rank(), layer.bank.dim());
    for ad in layer.bank.adapters.iter_mut() {
        for t in Target::ALL {
            let a = Tensor::param(rng.normals(r * d, 0.5), &[r, d]).unwrap();
            let b = Tensor::param(rng.normals(d * r, 0.5), &[d, r]).unwrap();
            ad.set(t, a, b);
        }
    }
}

struct Setup {
    block: MmditBlockParams,
    layer: RecursiveLayer,
    x: Tensor,
    c: Tensor,
    y: Tensor,
}

fn setup(d: usize, heads: usize, experts: usize, seed: u64) -> Setup {
    let mut rng = Rng::new(seed);
    let block = MmditBlockParams::random(d, heads, true, &mut rng).unwrap();
    let layer = RecursiveLayer::init(experts, 2, d, &mut rng).unwrap();
    let x = rand_tokens(2, 5, d, &mut rng);
    let c = rand_tokens(2, 3, d, &mut rng);
    let y = Tensor::new(rng.normals(2 * d, 1.0), &[2, d]).unwrap();
    Setup { block, layer, x, c, y }
}

fn run(s: &Setup, cfg: &RecursionConfig, mode: RoutingMode<'_>, trace: bool) -> RecursionOutput {
    recursive_block_forward(&s.x, Some(&s.c), &s.y, &s.block, &s.layer, cfg, mode, trace).unwrap()
}

#[test]
fn fresh_bank_matches_plain_block_bitwise() {
    for steps in [1, 2, 3] {
        let s = setup(8, 2, 3, 11);
        let (px, pc) = block_forward(&s.x, Some(&s.c), &s.y, &s.block).unwrap();
        let mut rng = Rng::new(5);
        let out = run(&s, &RecursionConfig::new(3, steps, 1.0), RoutingMode::Sample(&mut rng), false);
        assert_eq!(out.x.to_vec(), px.to_vec(), "steps {steps}");
        assert_eq!(out.c.unwrap().to_vec(), pc.unwrap().to_vec());
    }
}

#[test]
fn single_expert_single_step_is_merged_lora() {
    let mut s = setup(8, 2, 1, 3);
    randomize_bank(&mut s.layer, &mut Rng::new(9));
    let out = run(&s, &RecursionConfig::new(1, 1, 1.0), RoutingMode::Greedy, false);

    // Fold the low-rank update into the base weights: x·Aᵀ·Bᵀ = x·(BA)ᵀ.
    let ad = &s.layer.bank.adapters[0];
    let mut merged = s.block.clone();
    let fold = |w: &Tensor, t: Target| {
        w.add(&ad.a(t).transpose().unwrap().matmul(&ad.b(t).transpose().unwrap()).unwrap()).unwrap()
    };
    let BranchParams { wq, wk, wv, .. } = &s.block.x;
    merged.x.wq = fold(wq, Target::Q);
    merged.x.wk = fold(wk, Target::K);
    merged.x.wv = fold(wv, Target::V);
    let (px, pc) = block_forward(&s.x, Some(&s.c), &s.y, &merged).unwrap();
    assert!(max_abs_diff(&out.x.to_vec(), &px.to_vec()) < 1e-12);
    assert!(max_abs_diff(&out.c.unwrap().to_vec(), &pc.unwrap().to_vec()) < 1e-12);
}

/// Unrolls two steps by hand, applying each token's expert row by row.
#[test]
fn two_step_manual_unroll() {
    let mut s = setup(8, 2, 2, 21);
    randomize_bank(&mut s.layer, &mut Rng::new(4));
    let cfg = RecursionConfig::new(2, 2, 1.0);
    let forced = vec![vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 1], vec![1, 1, 0, 0, 0, 1, 0, 1, 0, 1]];
    let out = run(&s, &cfg, RoutingMode::Force(&forced), false);

    let d = 8;
    let m = s.block.modulation(&s.y).unwrap();
    let mx = &m.x;
    let mc = m.c.as_ref().unwrap();
    let xt = modulate(&s.x, &mx.alpha, &mx.beta).unwrap();
    let ct = modulate(&s.c, &mc.alpha, &mc.beta).unwrap();
    let cb = s.block.c.as_ref().unwrap();
    let text = Qkv { q: ct.matmul(&cb.wq).unwrap(), k: ct.matmul(&cb.wk).unwrap(), v: ct.matmul(&cb.wv).unwrap() };

    let lora_rows = |state: &Tensor, sel: &[usize], t: Target| -> Tensor {
        let rows = state.data().chunks(d).zip(sel).flat_map(|(row, &e)| {
            let ad = &s.layer.bank.adapters[e];
            let a = ad.a(t).data();
            let b = ad.b(t).data();
            let r = ad.rank;
            let h: Vec<f64> = (0..r).map(|k| (0..d).map(|j| a[k * d + j] * row[j]).sum()).collect();
            (0..d).map(move |o| (0..r).map(|k| b[o * r + k] * h[k]).sum::<f64>()).collect::<Vec<_>>()
        });
        Tensor::new(rows.collect(), state.shape()).unwrap()
    };

    let q1 = lora_rows(&xt, &forced[0], Target::Q);
    let k1 = lora_rows(&xt, &forced[0], Target::K);
    let v1 = lora_rows(&xt, &forced[0], Target::V);
    let (a1, _) = attend(&Qkv { q: q1, k: k1, v: v1 }, Some(&text), 2).unwrap();
    let s1 = a1.add(&xt).unwrap();

    let q2 = xt.matmul(&s.block.x.wq).unwrap().add(&lora_rows(&s1, &forced[1], Target::Q)).unwrap();
    let k2 = xt.matmul(&s.block.x.wk).unwrap().add(&lora_rows(&s1, &forced[1], Target::K)).unwrap();
    let v2 = xt.matmul(&s.block.x.wv).unwrap().add(&lora_rows(&s1, &forced[1], Target::V)).unwrap();
    let (a2, ac2) = attend(&Qkv { q: q2, k: k2, v: v2 }, Some(&text), 2).unwrap();
    let x1 = s.x.add(&mx.gamma.mul(&a2.matmul(&s.block.x.wo).unwrap()).unwrap()).unwrap();
    let c1 = s.c.add(&mc.gamma.mul(&ac2.unwrap().matmul(&cb.wo).unwrap()).unwrap()).unwrap();
    let x2 = mlp_residual(&x1, mx, &s.block.x).unwrap();
    let c2 = mlp_residual(&c1, mc, cb).unwrap();

    assert!(max_abs_diff(&out.x.to_vec(), &x2.to_vec()) < 1e-10);
    assert!(max_abs_diff(&out.c.unwrap().to_vec(), &c2.to_vec()) < 1e-10);
}

#[test]
fn counters_follow_step_count() {
    for experts in [1, 2, 5] {
        for steps in [1, 2, 5] {
            let s = setup(8, 2, experts, 2);
            let out = run(&s, &RecursionConfig::new(experts, steps, 1.0), RoutingMode::Greedy, false);
            let want = RecursionCounters {
                adapter_steps: steps,
                adapter_token_applications: steps * 10,
                base_projections: 1,
                residual_adds: steps - 1,
                text_qkv: 1,
            };
            assert_eq!(out.counters, want, "M={experts} T={steps}");
            assert_eq!(out.decisions.len(), steps);
        }
    }
}

#[test]
fn tracing_does_not_change_outputs() {
    let mut s = setup(8, 2, 3, 8);
    randomize_bank(&mut s.layer, &mut Rng::new(1));
    let cfg = RecursionConfig::new(3, 5, 0.7);
    let plain = run(&s, &cfg, RoutingMode::Sample(&mut Rng::new(3)), false);
    let traced = run(&s, &cfg, RoutingMode::Sample(&mut Rng::new(3)), true);
    assert_eq!(plain.x.to_vec(), traced.x.to_vec());
    let trace = traced.trace.unwrap();
    assert_eq!(trace.steps.len(), 5);
    for (i, st) in trace.steps.iter().enumerate() {
        assert_eq!(st.step, i + 1);
        assert_eq!(st.is_final, i == 4);
        assert_eq!(st.selected.len(), 10);
        assert!(st.selected.iter().all(|&e| e < 3));
        assert_eq!(st.soft_probs.len(), 30);
        assert_eq!(st.tokens.len(), 80);
        for row in st.soft_probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert!(plain.trace.is_none());
}

#[test]
fn intermediate_latents_carry_the_residual() {
    let mut s = setup(8, 2, 2, 13);
    randomize_bank(&mut s.layer, &mut Rng::new(2));
    let cfg = RecursionConfig::new(2, 3, 1.0);
    let mods = s.block.modulation(&s.y).unwrap();
    let ct = modulate(&s.c, &mods.c.as_ref().unwrap().alpha, &mods.c.as_ref().unwrap().beta).unwrap();
    let mut st = RecursionState::begin(&s.layer, &s.block, &cfg, &mods.x, &s.x, Some(&ct), Some(&s.y)).unwrap();
    let logits = st.next_logits().unwrap();
    let dec = st.decide(&logits, &mut RoutingMode::Greedy).unwrap();
    let before = st.latent.to_vec();
    st.advance(&dec, false).unwrap();
    // Undo the residual and compare with a direct attention over the adapter outputs.
    let lat = st.latent.sub(st.x_tilde()).unwrap();
    let x_in = Tensor::new(before, st.x_tilde().shape()).unwrap();
    let delta = dispatch_and_reassemble(&x_in, &dec.selected, 2, |m, rows| {
        let ad = &s.layer.bank.adapters[m];
        Tensor::concat(
            &[ad.lora_apply(Target::Q, rows)?, ad.lora_apply(Target::K, rows)?, ad.lora_apply(Target::V, rows)?],
            1,
        )
    })
    .unwrap();
    let text = text_qkv(Some(&ct), &s.block).unwrap();
    let (ax, _) = attend(
        &Qkv {
            q: delta.narrow(2, 0, 8).unwrap(),
            k: delta.narrow(2, 8, 8).unwrap(),
            v: delta.narrow(2, 16, 8).unwrap(),
        },
        text.as_ref(),
        2,
    )
    .unwrap();
    assert!(max_abs_diff(&lat.to_vec(), &ax.to_vec()) < 1e-12);
    assert_eq!(st.step, 1);
}

#[test]
fn gradients_reach_selected_experts_and_gate() {
    let mut s = setup(8, 2, 3, 17);
    randomize_bank(&mut s.layer, &mut Rng::new(6));
    let forced = vec![vec![0; 10], vec![1; 10]];
    let out = run(&s, &RecursionConfig::new(3, 2, 1.0), RoutingMode::Force(&forced), false);
    out.x.square().sum().backward().unwrap();
    let nonzero = |t: &Tensor| t.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0));
    for e in [0, 1] {
        for t in Target::ALL {
            assert!(nonzero(s.layer.bank.adapters[e].a(t)), "expert {e} {t:?}");
            assert!(nonzero(s.layer.bank.adapters[e].b(t)), "expert {e} {t:?}");
        }
    }
    for t in Target::ALL {
        assert!(!nonzero(s.layer.bank.adapters[2].a(t)));
    }
    assert!(nonzero(&s.layer.gate.out.weight));
    assert!(nonzero(&s.layer.gate.hidden.weight));
}

#[test]
fn token_permutation_is_consistent() {
    let mut s = setup(8, 2, 3, 23);
    randomize_bank(&mut s.layer, &mut Rng::new(7));
    let cfg = RecursionConfig::new(3, 3, 0.5);
    let mut rng = Rng::new(31);
    let noise: Vec<Vec<f64>> = (0..3).map(|_| (0..30).map(|_| rng.gumbel()).collect()).collect();
    let out = run(&s, &cfg, RoutingMode::Replay(&noise), false);

    // Reverse the tokens of each image, and the noise rows with them.
    let perm: Vec<usize> = (0..2).flat_map(|b| (0..5).rev().map(move |i| b * 5 + i)).collect();
    let px = s.x.reshape(&[10, 8]).unwrap().index_select(&perm).unwrap().reshape(&[2, 5, 8]).unwrap();
    let pnoise: Vec<Vec<f64>> =
        noise.iter().map(|g| perm.iter().flat_map(|&r| g[r * 3..r * 3 + 3].to_vec()).collect()).collect();
    let permuted = Setup { x: px, ..s };
    let pout = run(&permuted, &cfg, RoutingMode::Replay(&pnoise), false);
    let back = pout.x.reshape(&[10, 8]).unwrap().index_select(&perm).unwrap();
    assert!(max_abs_diff(&back.to_vec(), &out.x.to_vec()) < 1e-12);
    assert!(max_abs_diff(&pout.c.unwrap().to_vec(), &out.c.unwrap().to_vec()) < 1e-12);
}

#[test]
fn greedy_routing_is_deterministic_and_pooled_routes_per_image() {
    let mut s = setup(8, 2, 2, 29);
    randomize_bank(&mut s.layer, &mut Rng::new(8));
    let mut cfg = RecursionConfig::new(2, 2, 1.0);
    cfg.pooled = true;
    let a = run(&s, &cfg, RoutingMode::Greedy, true);
    let b = run(&s, &cfg, RoutingMode::Greedy, false);
    assert_eq!(a.x.to_vec(), b.x.to_vec());
    for d in &a.decisions {
        assert_eq!(d.rows(), 2);
    }
    for st in &a.trace.unwrap().steps {
        assert!(st.selected[..5].iter().all(|&e| e == st.selected[0]));
        assert!(st.selected[5..].iter().all(|&e| e == st.selected[5]));
    }
}

#[test]
fn config_validation() {
    let s = setup(8, 2, 2, 1);
    for cfg in [RecursionConfig::new(3, 2, 1.0), RecursionConfig::new(2, 0, 1.0), RecursionConfig::new(2, 2, 0.0)] {
        let r = recursive_block_forward(&s.x, Some(&s.c), &s.y, &s.block, &s.layer, &cfg, RoutingMode::Greedy, false);
        assert!(matches!(r, Err(TensorError::Config(_))));
    }
}

#[test]
fn balance_loss_of_output() {
    let s = setup(8, 2, 2, 1);
    let out = run(&s, &RecursionConfig::new(2, 3, 1.0), RoutingMode::Sample(&mut Rng::new(2)), false);
    let l = out.balance_loss().unwrap().item();
    assert!(l.is_finite() && l > 0.0);
    assert_eq!(out.expert_counts(2).iter().sum::<usize>(), 30);
}

/// The gate only receives a straight-through surrogate, so it is zeroed here to
/// keep that surrogate out of the inputs' gradients.
#[test]
fn finite_difference_gradients() {
    let mut s = setup(8, 2, 2, 41);
    s.layer.gate = GateNetwork::zeros(8, 2);
    let mut rng = Rng::new(12);
    let a: Vec<Tensor> = (0..2).map(|_| Tensor::new(rng.normals(16, 0.5), &[2, 8]).unwrap()).collect();
    let b: Vec<Tensor> = (0..2).map(|_| Tensor::new(rng.normals(16, 0.5), &[8, 2]).unwrap()).collect();
    let x = s.x.narrow(1, 0, 3).unwrap();
    let c = s.c.narrow(1, 0, 2).unwrap();
    let forced = vec![vec![0, 1, 1, 0, 0, 1], vec![1, 0, 1, 1, 0, 0]];
    let cfg = RecursionConfig::new(2, 2, 1.0);
    let report = check_gradients(
        &[x, c, a[0].clone(), b[0].clone(), a[1].clone(), b[1].clone()],
        |t| {
            let mut layer = s.layer.clone();
            for e in 0..2 {
                layer.bank.adapters[e].set(Target::Q, t[2 + 2 * e].clone(), t[3 + 2 * e].clone());
                layer.bank.adapters[e].set(Target::V, t[2 + 2 * e].clone(), t[3 + 2 * e].clone());
            }
            let out = recursive_block_forward(
                &t[0],
                Some(&t[1]),
                &s.y,
                &s.block,
                &layer,
                &cfg,
                RoutingMode::Force(&forced),
                false,
            )?;
            out.x.tanh().sum().add(&out.c.unwrap().square().mean())
        },
        1e-5,
    )
    .unwrap();
    assert!(report.worst() < 1e-4, "{report:?}");
}
