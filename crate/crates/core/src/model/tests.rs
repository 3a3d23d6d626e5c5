use super::*;
use crate::math;

fn tiny(use_rpa: bool) -> ModelConfig {
    ModelConfig {
        vocab: 13,
        d_model: 8,
        layers: 2,
        heads: 2,
        regimes: 3,
        experts: 3,
        top_k: 2,
        ff_mult: 2,
        dropout: 0.1,
        max_len: 8,
        use_rpa,
        ..ModelConfig::desk()
    }
}

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(vocab)).collect()
}

fn eval_logits(model: &Model, toks: &[usize], b: usize, t: usize) -> (Tensor, ForwardOutput) {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval(Rng::new(1), true).recording_attention();
    let out = model.forward(&mut tape, toks, b, t, &mut ctx).unwrap();
    (tape.value(out.logits).clone(), out)
}

#[test]
fn logits_have_batch_time_vocab_shape() {
    let m = Model::new(tiny(true), 3).unwrap();
    let (l, out) = eval_logits(&m, &tokens(12, 13, 1), 2, 6);
    assert_eq!(l.shape(), &[2, 6, 13]);
    assert_eq!(out.blocks.len(), 2);
    assert!(l.all_finite());
}

#[test]
fn attention_rows_are_causal_distributions() {
    for rpa in [true, false] {
        let mut m = Model::new(tiny(rpa), 5).unwrap();
        m.set_bias_scale(1.0);
        let (_, out) = eval_logits(&m, &tokens(16, 13, 2), 2, 8);
        for a in &out.attention {
            let t = 8;
            for (r, row) in a.data().chunks(t).enumerate() {
                let i = r % t;
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                if i == 0 {
                    assert_eq!(row[0], 1.0);
                }
            }
        }
    }
}

#[test]
fn single_position_attends_to_itself() {
    let m = Model::new(tiny(true), 5).unwrap();
    let (_, out) = eval_logits(&m, &[4, 7], 2, 1);
    for a in &out.attention {
        assert!(a.data().iter().all(|&v| v == 1.0));
    }
}

fn perturb_after(base: &[usize], cut: usize) -> Vec<usize> {
    let mut alt = base.to_vec();
    for v in alt.iter_mut().skip(cut) {
        *v = (*v + 5) % 13;
    }
    alt
}

#[test]
fn future_tokens_do_not_leak_through_positionwise_paths() {
    for rpa in [true, false] {
        let mut m = Model::new(tiny(rpa), 9).unwrap();
        // the prior and the value gate summarize the whole window; with both
        // neutralized every remaining path is positionwise or causal
        m.set_bias_scale(0.0);
        for b in m.blocks().to_vec() {
            let s = m.params().get(b.value_gamma).shape().to_vec();
            *m.params_mut().get_mut(b.value_gamma) = Tensor::zeros(&s);
        }
        let base = tokens(8, 13, 4);
        let (l0, _) = eval_logits(&m, &base, 1, 8);
        for cut in 1..8 {
            let (l1, _) = eval_logits(&m, &perturb_after(&base, cut), 1, 8);
            assert_eq!(&l0.data()[..cut * 13], &l1.data()[..cut * 13]);
        }
    }
}

#[test]
fn window_summaries_do_see_later_tokens() {
    let m = Model::new(tiny(true), 9).unwrap();
    let base = tokens(8, 13, 4);
    let (l0, _) = eval_logits(&m, &base, 1, 8);
    let (l1, _) = eval_logits(&m, &perturb_after(&base, 4), 1, 8);
    assert_ne!(&l0.data()[..13], &l1.data()[..13]);
}

#[test]
fn deterministic_mode_repeats_exactly() {
    let m = Model::new(tiny(true), 2).unwrap();
    let toks = tokens(16, 13, 3);
    let run = || {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train(Rng::new(77), 0.3, true);
        let out = m.forward(&mut tape, &toks, 2, 8, &mut ctx).unwrap();
        tape.value(out.logits).clone()
    };
    assert_eq!(run(), run());
    let noisy = |seed| {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train(Rng::new(seed), 0.3, false);
        let out = m.forward(&mut tape, &toks, 2, 8, &mut ctx).unwrap();
        tape.value(out.logits).clone()
    };
    assert_eq!(noisy(5), noisy(5));
    assert_ne!(noisy(5), noisy(6));
}

#[test]
fn zeroed_sublayers_leave_the_residual_stream() {
    let mut m = Model::new(tiny(true), 4).unwrap();
    let blocks = m.blocks().to_vec();
    for b in &blocks {
        let z = |m: &mut Model, id: ParamId| {
            let s = m.params().get(id).shape().to_vec();
            *m.params_mut().get_mut(id) = Tensor::zeros(&s);
        };
        z(&mut m, b.out_proj);
        for e in &b.experts {
            z(&mut m, e.w2);
            z(&mut m, e.b2);
        }
    }
    let toks = tokens(6, 13, 8);
    let (l, _) = eval_logits(&m, &toks, 1, 6);
    // logits = LN(embedding) W + b
    let p = m.params();
    let emb = p.get(p.find("embed").unwrap());
    let w = p.get(p.find("head.weight").unwrap());
    let hb = p.get(p.find("head.bias").unwrap());
    for (t, &tok) in toks.iter().enumerate() {
        let row = &emb.data()[tok * 8..(tok + 1) * 8];
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
        let xh: Vec<f64> = row.iter().map(|x| (x - mean) / (var + 1e-5).sqrt()).collect();
        for v in 0..13 {
            let want: f64 = (0..8).map(|j| xh[j] * w.at(&[j, v])).sum::<f64>() + hb.data()[v];
            assert!((l.at(&[0, t, v]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn untrained_perplexity_is_near_vocab() {
    let cfg = ModelConfig {
        max_len: 32,
        ..ModelConfig::desk()
    };
    let m = Model::new(cfg, 11).unwrap();
    let toks = tokens(4 * 33, 256, 12);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for row in toks.chunks(33) {
        x.extend_from_slice(&row[..32]);
        y.extend_from_slice(&row[1..]);
    }
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval(Rng::new(0), true);
    let out = m.forward(&mut tape, &x, 4, 32, &mut ctx).unwrap();
    let parts = lm_loss(&mut tape, &out, &y, m.config(), false, 0.0).unwrap();
    let ppl = math::exp(parts.ce());
    assert!((ppl / 256.0 - 1.0).abs() < 0.10, "ppl {ppl}");
}

#[test]
fn loss_parts_follow_the_definitions() {
    let cfg = ModelConfig {
        label_smooth: 0.0,
        ..tiny(true)
    };
    let m = Model::new(cfg.clone(), 1).unwrap();
    let x = tokens(8, 13, 1);
    let y = tokens(8, 13, 2);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval(Rng::new(0), true);
    let out = m.forward(&mut tape, &x, 1, 8, &mut ctx).unwrap();
    let p = lm_loss(&mut tape, &out, &y, &cfg, false, 0.0).unwrap();
    assert!((tape.value(p.loss).item() - p.ce_pure_sum).abs() < 1e-9);
    assert_eq!(p.tokens, 8);
    assert_eq!(p.entropy_penalty, 0.0);

    // memberships start near uniform, far above the 2% floor
    let p = lm_loss(&mut tape, &out, &y, &cfg, true, 0.3).unwrap();
    assert_eq!(p.entropy_penalty, 0.0);
    let bad = [0, 1, 13];
    let logits = Tensor::zeros(&[3, 13]);
    assert!(cross_entropy_pure(&logits, &bad).is_err());
}

#[test]
fn entropy_floor_engages_below_threshold() {
    let cfg = ModelConfig {
        ent_floor_eta: 2.0,
        ..tiny(true)
    };
    let m = Model::new(cfg.clone(), 1).unwrap();
    let x = tokens(8, 13, 1);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::train(Rng::new(0), 0.0, true);
    let out = m.forward(&mut tape, &x, 1, 8, &mut ctx).unwrap();
    let h = tape.value(out.mu_entropy).item();
    let p = lm_loss(&mut tape, &out, &x, &cfg, true, 0.2).unwrap();
    let want = 0.5 * 1.2 * (2.0 * math::ln(3.0) - h);
    assert!((p.entropy_penalty - want).abs() < 1e-12);
    assert!((tape.value(p.loss).item() - p.ce_smoothed_sum - want).abs() < 1e-9);
}

#[test]
fn uniform_logits_cost_log_vocab() {
    let ce = cross_entropy_pure(&Tensor::zeros(&[5, 4]), &[0, 1, 2, 3, 0]).unwrap();
    assert!((ce / 5.0 - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn single_expert_is_passed_through() {
    let cfg = ModelConfig {
        experts: 1,
        top_k: 1,
        dropout: 0.0,
        ..tiny(true)
    };
    let m = Model::new(cfg.clone(), 6).unwrap();
    let (_, out) = eval_logits(&m, &tokens(8, 13, 3), 1, 8);
    for b in &out.blocks {
        // the renormalization guard leaves usage at 1/(1 + 1e-6)
        assert!(b.lb_reg < 1.1e-12);
        assert!((b.expert_usage[0] - 1.0).abs() < 1.1e-6);
    }
}

#[test]
fn expert_usage_is_a_distribution() {
    let m = Model::new(tiny(false), 6).unwrap();
    let (_, out) = eval_logits(&m, &tokens(16, 13, 3), 2, 8);
    for b in &out.blocks {
        let s: f64 = b.expert_usage.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(b.lb_reg >= 0.0);
    }
}

#[test]
fn rejects_bad_inputs() {
    let m = Model::new(tiny(true), 1).unwrap();
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval(Rng::new(0), true);
    assert!(matches!(
        m.forward(&mut tape, &[0; 9], 1, 9, &mut ctx),
        Err(Error::SequenceTooLong { len: 9, max: 8 })
    ));
    assert!(matches!(
        m.forward(&mut tape, &[0, 99], 1, 2, &mut ctx),
        Err(Error::TokenOutOfRange { token: 99, .. })
    ));
    let bad = ModelConfig {
        heads: 3,
        ..tiny(true)
    };
    assert!(Model::new(bad, 0).is_err());
    let bad = ModelConfig {
        top_k: 4,
        ..tiny(true)
    };
    assert!(Model::new(bad, 0).is_err());
}

#[test]
fn eval_cache_reuses_priors() {
    let m = Model::new(tiny(true), 1).unwrap();
    let mut cache = BiasCache::new();
    cache.sync(m.params().fingerprint());
    let x = tokens(16, 13, 5);
    let mut first = None;
    for pass in 0..2 {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval(Rng::new(0), true).with_cache(&mut cache);
        let out = m.forward(&mut tape, &x, 2, 8, &mut ctx).unwrap();
        let c = ctx.counters;
        assert_eq!(c.attention_calls, 2);
        assert_eq!(c.bias_adds, 2);
        if pass == 0 {
            assert_eq!((c.bias_builds, c.cache_hits), (2, 0));
            first = Some(tape.value(out.logits).clone());
        } else {
            assert_eq!((c.bias_builds, c.cache_hits), (0, 2));
            assert_eq!(first.as_ref().unwrap(), tape.value(out.logits));
        }
    }
}

#[test]
fn per_head_gate_changes_only_the_gate() {
    let a = Model::new(tiny(true), 3).unwrap();
    let b = Model::new(
        ModelConfig {
            per_head_gate: true,
            ..tiny(true)
        },
        3,
    )
    .unwrap();
    assert_eq!(a.params().fingerprint(), b.params().fingerprint());
    let x = tokens(8, 13, 1);
    assert_ne!(eval_logits(&a, &x, 1, 8).0, eval_logits(&b, &x, 1, 8).0);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = ModelConfig::gradcheck();
    let m = Model::new(cfg, 21).unwrap();
    let x = tokens(8, 11, 1);
    let y = tokens(8, 11, 2);
    let r = gradient_check(&m, &x, &y, 2, 4, 1e-5, 1e-6).unwrap();
    assert!(r.max_rel_err < 1e-3, "{} at {}", r.max_rel_err, r.worst);
    assert_eq!(r.scalars, m.params().num_scalars());
}

#[test]
fn legacy_prior_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        use_rpa: false,
        ..ModelConfig::gradcheck()
    };
    let m = Model::new(cfg, 22).unwrap();
    let x = tokens(8, 11, 3);
    let y = tokens(8, 11, 4);
    let r = gradient_check(&m, &x, &y, 2, 4, 1e-5, 1e-6).unwrap();
    assert!(r.max_rel_err < 1e-3, "{} at {}", r.max_rel_err, r.worst);
}
