use super::*;
use crate::block::GatedBlockParams;
use crate::netconfig::{bundled_config, NetworkConfig};
use crate::network::build_network;

fn toy() -> NetworkConfig {
    bundled_config("toy_small").unwrap()
}

fn small_task(seed: u64) -> SyntheticTask {
    SyntheticTask { seed, image_size: 16, n_train: 256, n_val: 128, ..Default::default() }
}

/// Reads the queried quadrant's patch straight off the pixels.
fn oracle(task: &SyntheticTask, data: &Dataset<f64>, i: usize) -> usize {
    let q = (0..task.n_positions).find(|&j| data.questions.data()[i * task.n_positions + j] == 1.0).unwrap();
    let (r, c) = task.patch_origin(q);
    let px: Vec<f64> = (0..3).map(|ch| data.images.at4(i, ch, r, c)).collect();
    PALETTE.iter().position(|col| col.as_slice() == px.as_slice()).unwrap()
}

#[test]
fn dataset_is_deterministic_per_seed() {
    let (a, va) = generate_dataset::<f64>(&small_task(3)).unwrap();
    let (b, vb) = generate_dataset::<f64>(&small_task(3)).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(va.to_bytes(), vb.to_bytes());
    let (c, _) = generate_dataset::<f64>(&small_task(4)).unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn default_task_shapes() {
    let task = SyntheticTask { n_train: 8, n_val: 4, ..Default::default() };
    let (train, val) = generate_dataset::<f32>(&task).unwrap();
    assert_eq!(train.images.shape(), &[8, 3, 32, 32]);
    assert_eq!(train.questions.shape(), &[8, 4]);
    assert_eq!(val.len(), 4);
    assert_eq!(task.patch_size(), 8);
}

#[test]
fn labels_are_uniform() {
    let task = SyntheticTask { seed: 11, image_size: 8, n_train: 10_000, n_val: 0, ..Default::default() };
    let (data, _) = generate_dataset::<f32>(&task).unwrap();
    let mut counts = [0usize; 4];
    for &l in &data.labels {
        counts[l] += 1;
    }
    let n = data.len() as f64;
    let (expect, sigma) = (n / 4.0, (n * 0.25 * 0.75).sqrt());
    for &c in &counts {
        assert!((c as f64 - expect).abs() <= 3.0 * sigma, "{counts:?}");
    }
    // 3 degrees of freedom, 99.9% quantile
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    assert!(chi2 < 16.27, "chi2 {chi2}");
}

#[test]
fn oracle_reads_every_answer() {
    let task = small_task(5);
    let (data, _) = generate_dataset::<f64>(&task).unwrap();
    for i in 0..data.len() {
        assert_eq!(oracle(&task, &data, i), data.labels[i]);
    }
}

#[test]
fn background_differs_from_padding_and_colors() {
    let task = small_task(1);
    let (data, _) = generate_dataset::<f64>(&task).unwrap();
    // center pixel never lies in a patch
    assert_eq!(data.images.at4(0, 0, 8, 8), BACKGROUND);
    assert!(PALETTE.iter().flatten().all(|&v| v != BACKGROUND && v != 0.0));
}

#[test]
fn invalid_tasks() {
    assert!(generate_dataset::<f64>(&SyntheticTask { n_positions: 3, ..Default::default() }).is_err());
    assert!(generate_dataset::<f64>(&SyntheticTask { n_colors: 9, ..Default::default() }).is_err());
    assert!(generate_dataset::<f64>(&SyntheticTask { image_size: 10, ..Default::default() }).is_err());
}

#[test]
fn cross_entropy_value_and_gradient() {
    let logits = Tensor::<f64>::from_f64(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
    let (loss, grad, correct) = softmax_cross_entropy(&logits, &[1, 2]).unwrap();
    let second = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
    assert!((loss - (3f64.ln() + second) / 2.0).abs() < 1e-12);
    assert_eq!(correct, 1);
    let h = 1e-6;
    for i in 0..6 {
        let mut up = logits.clone();
        up.data_mut()[i] += h;
        let mut dn = logits.clone();
        dn.data_mut()[i] -= h;
        let num = (softmax_cross_entropy(&up, &[1, 2]).unwrap().0 - softmax_cross_entropy(&dn, &[1, 2]).unwrap().0)
            / (2.0 * h);
        assert!((num - grad.data()[i]).abs() < 1e-8);
    }
    assert!(softmax_cross_entropy(&logits, &[1, 3]).is_err());
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_ok());
    assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
}

#[test]
fn null_update_keeps_parameters_and_loss() {
    let task = SyntheticTask { n_train: 16, ..small_task(2) };
    let mut net = build_network::<f64>(&toy(), 1).unwrap();
    let before = net.parameter_bytes();
    let tcfg = TrainConfig { lr: 0.0, lambda: 0.0, batch_size: 16, steps: 4, ..Default::default() };
    let trace = train_loop(&mut net, &task, &tcfg).unwrap();
    let mut after = net.clone();
    // running statistics move; trainable tensors must not
    let mut fresh = build_network::<f64>(&toy(), 1).unwrap();
    for (a, b) in after.trainable_mut().into_iter().zip(fresh.trainable_mut()) {
        assert_eq!(a.data(), b.data());
    }
    assert_ne!(before, net.parameter_bytes());
    let l0 = trace.rows[0].loss;
    assert!(trace.rows.iter().all(|r| (r.loss - l0).abs() < 1e-12));
}

fn expert_params(b: &GatedBlockParams<f64>, e: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for c in b.group_channels(e) {
        v.extend_from_slice(&b.conv_reduce.weight.data()[c * b.in_channels()..(c + 1) * b.in_channels()]);
        let row = b.conv_conv.weight.len() / b.mid_channels();
        v.extend_from_slice(&b.conv_conv.weight.data()[c * row..(c + 1) * row]);
        for o in 0..b.out_channels() {
            v.push(b.conv_expand.weight.data()[o * b.mid_channels() + c]);
        }
        for bn in [&b.bn_reduce, &b.bn_mid] {
            v.extend([bn.gamma.data()[c], bn.beta.data()[c], bn.running_mean.data()[c], bn.running_var.data()[c]]);
        }
    }
    v
}

#[test]
fn unselected_experts_untouched_without_balance_loss() {
    let task = small_task(9);
    let (train, _) = generate_dataset::<f64>(&task).unwrap();
    let mut net = build_network::<f64>(&toy(), 4).unwrap();
    let before = net.clone();
    let tcfg = TrainConfig { lambda: 0.0, batch_size: 3, steps: 1, k: 1, ..Default::default() };
    let trace = train_on(&mut net, &train, None, &tcfg).unwrap();
    let imp = &trace.rows[0].importance[0];
    let mut batch_order: Vec<usize> = (0..train.len()).collect();
    batch_order.shuffle(&mut seeded(tcfg.seed));
    let batch = train.select(&batch_order[..3]).unwrap();
    let mut probe = before.clone();
    probe.set_k(1).unwrap();
    let out = network_forward(&probe, &batch.images, Some(&batch.questions), &mut MacCounter::new(), ExecMode::Sparse)
        .unwrap();
    let used: Vec<usize> = out.decisions[0].iter().flat_map(|d| d.selected.clone()).collect();
    let idle: Vec<usize> = (0..8).filter(|e| !used.contains(e)).collect();
    assert!(idle.len() >= 5, "{used:?}");
    assert_eq!(imp.len(), 8);
    for &e in &idle {
        assert_eq!(expert_params(&before.blocks[0], e), expert_params(&net.blocks[0], e), "expert {e}");
    }
    for e in used {
        assert_ne!(expert_params(&before.blocks[0], e), expert_params(&net.blocks[0], e), "expert {e}");
    }
}

#[test]
fn trace_is_reproducible_and_well_formed() {
    let task = small_task(6);
    let tcfg = TrainConfig { steps: 6, batch_size: 16, seed: 2, ..Default::default() };
    let run = || {
        let mut net = build_network::<f64>(&toy(), 6).unwrap();
        let trace = train_loop(&mut net, &task, &tcfg).unwrap();
        let mut csv = Vec::new();
        trace.write_csv(&mut csv).unwrap();
        (String::from_utf8(csv).unwrap(), net.parameter_bytes())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("step,loss,task_loss,balance_loss,acc,stage1.block0:importance[0],"));
    assert_eq!(lines[0].split(',').count(), 5 + 8);
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn importance_sums_to_batch_size() {
    let task = small_task(8);
    let mut net = build_network::<f64>(&toy(), 8).unwrap();
    let tcfg = TrainConfig { steps: 3, batch_size: 32, ..Default::default() };
    let trace = train_loop(&mut net, &task, &tcfg).unwrap();
    for r in &trace.rows {
        let s: f64 = r.importance[0].iter().sum();
        assert!((s - 32.0).abs() < 1e-9);
        assert!((r.loss - r.task_loss - 0.01 * r.balance_loss).abs() < 1e-12);
    }
}

#[test]
fn divergence_reports_step() {
    let task = small_task(1);
    let mut net = build_network::<f32>(&toy(), 1).unwrap();
    let tcfg = TrainConfig { lr: 1e30, steps: 50, batch_size: 16, ..Default::default() };
    match train_loop(&mut net, &task, &tcfg) {
        Err(Error::Diverged { step }) => assert!(step < 50),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn oversized_batch_is_rejected() {
    let task = SyntheticTask { n_train: 8, ..small_task(1) };
    let mut net = build_network::<f64>(&toy(), 1).unwrap();
    let tcfg = TrainConfig { batch_size: 16, steps: 1, ..Default::default() };
    assert!(train_loop(&mut net, &task, &tcfg).is_err());
}

#[test]
fn untrained_accuracy_is_chance() {
    let task = SyntheticTask { seed: 21, image_size: 16, n_train: 2000, n_val: 0, ..Default::default() };
    let (data, _) = generate_dataset::<f32>(&task).unwrap();
    let net = build_network::<f32>(&toy(), 21).unwrap();
    let r = evaluate(&net, &data, 2, ExecMode::Sparse).unwrap();
    assert!((r.accuracy - 0.25).abs() <= 0.05, "accuracy {}", r.accuracy);
}

#[test]
fn usage_histogram_counts_top_k() {
    let (data, _) = generate_dataset::<f64>(&small_task(4)).unwrap();
    let net = build_network::<f64>(&toy(), 4).unwrap();
    for k in [1, 3, 8] {
        let r = evaluate(&net, &data, k, ExecMode::Sparse).unwrap();
        assert_eq!(r.usage.len(), 1);
        assert_eq!(r.usage[0].iter().sum::<u64>(), (k * data.len()) as u64);
        assert!(r.gate_entropy[0] >= 0.0 && r.gate_entropy[0] <= 8f64.ln() + 1e-12);
    }
    assert!(evaluate(&net, &data, 9, ExecMode::Sparse).is_err());
}

#[test]
fn full_k_evaluation_matches_dense() {
    let (data, _) = generate_dataset::<f64>(&small_task(3)).unwrap();
    let mut net = build_network::<f64>(&toy(), 3).unwrap();
    let tcfg = TrainConfig { steps: 5, batch_size: 32, k: 8, ..Default::default() };
    train_on(&mut net, &data, None, &tcfg).unwrap();
    let sparse = predict(&net, &data, 8, ExecMode::Sparse).unwrap();
    let dense = predict(&net, &data, 8, ExecMode::Dense).unwrap();
    assert_eq!(sparse, dense);
    assert_eq!(
        evaluate(&net, &data, 8, ExecMode::Sparse).unwrap(),
        evaluate(&net, &data, 8, ExecMode::Dense).unwrap()
    );
}

#[test]
fn final_cv_squared_window() {
    let row = |b| TraceRow { step: 0, loss: 0.0, task_loss: 0.0, balance_loss: b, acc: 0.0, importance: vec![] };
    let trace = TrainingTrace {
        block_names: vec!["a".into(), "b".into()],
        rows: vec![row(10.0), row(2.0), row(4.0)],
        evals: vec![],
    };
    assert_eq!(trace.final_cv_squared(2), 1.5);
    assert_eq!(trace.final_cv_squared(100), 8.0 / 3.0);
}
