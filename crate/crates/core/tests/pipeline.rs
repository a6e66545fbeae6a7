use foura_core::adapter::{foura_forward, lora_forward, materialize_delta_w, AdapterLayer, GateMode, GateState, Transform};
use foura_core::analysis::{autocorrelation_decomposition, effective_rank_trace, spread_report, TraceIndex};
use foura_core::merge::{frozen_branch, merge_compatibility, merge_outputs, MergeSpec};
use foura_core::rng::Rng;
use foura_core::spectral::{Axis, TransformKind};
use foura_core::train::{run_matrix_fit, run_toy_denoise, Task, TrainConfig};
use foura_core::workbench::checkpoint::{adapters_to_checkpoint, checkpoint_to_adapters};
use foura_core::workbench::Checkpoint;
use foura_core::Matrix;

fn dct_matrix(k: usize) -> Matrix {
    Matrix::from_fn(k, k, |f, n| {
        let s = if f == 0 { (1.0 / k as f64).sqrt() } else { (2.0 / k as f64).sqrt() };
        s * (std::f64::consts::PI * (2 * n + 1) as f64 * f as f64 / (2 * k) as f64).cos()
    })
}

#[test]
fn embedding_axis_dct_is_a_reparameterized_lora() {
    // Rows transform as z·Cᵀ, so FouRA(A, B, mask) = LoRA(A·C, Cᵀ·B·diag(mask)).
    let mut rng = Rng::seed_from_u64(21);
    let (k, r) = (8, 3);
    let w0 = rng.gaussian_matrix(k, k, 0.5);
    let a = rng.gaussian_matrix(r, k, 1.0);
    let b = rng.gaussian_matrix(k, r, 1.0);
    let mask = [true, false, true];
    let mut gate = GateState::init(r, GateMode::Frozen, &mut rng, 0.1, 0.0);
    gate.frozen_mask = Some(mask.to_vec());
    let foura = AdapterLayer::foura(w0.clone(), a.clone(), b.clone(), 0.7, TransformKind::Dct, Axis::Embedding, Some(gate))
        .unwrap();

    let c = dct_matrix(k);
    let a2 = a.matmul(&c).unwrap();
    let b2 = c
        .transpose()
        .matmul(&b)
        .unwrap()
        .scale_columns(&mask.map(|m| if m { 1.0 } else { 0.0 }))
        .unwrap();
    let lora = AdapterLayer::lora(w0, a2, b2, 0.7).unwrap();

    let z = rng.gaussian_matrix(5, k, 1.0);
    let (y1, _) = foura_forward(&foura, &z).unwrap();
    let y2 = lora_forward(&lora, &z).unwrap();
    assert!(y1.max_abs_diff(&y2) < 1e-10);

    // Same spectrum, as an orthogonal conjugation must give.
    let s1 = spread_report(&materialize_delta_w(&foura, &mask).unwrap()).unwrap().sigmas;
    let s2 = spread_report(&materialize_delta_w(&lora, &[true; 3]).unwrap()).unwrap().sigmas;
    for (x, y) in s1.iter().zip(&s2) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn trained_checkpoint_round_trip_preserves_outputs() {
    let cfg = TrainConfig {
        steps: 300,
        lambda_entropy: 0.1,
        transform: Transform::Dft,
        axis: Axis::Token,
        ..TrainConfig::default()
    };
    let trace = run_matrix_fit(&cfg).unwrap();
    let ck = adapters_to_checkpoint(&[], &trace.final_layers, &trace.frozen_masks).unwrap();
    let set = checkpoint_to_adapters(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(set.layers, trace.final_layers);

    let z = Rng::seed_from_u64(2).gaussian_matrix(16, 32, 1.0);
    let before = frozen_branch(&trace.frozen_layers().unwrap()[0], &z).unwrap();
    let after = frozen_branch(&set.frozen_layers().unwrap()[0], &z).unwrap();
    assert_eq!(before, after);

    // Materialized ΔW acts like the frozen branch.
    let dw = materialize_delta_w(&set.layers[0], &set.frozen_masks[0]).unwrap();
    assert!(z.matmul(&dw).unwrap().max_abs_diff(&after) < 1e-9);

    let ac = autocorrelation_decomposition(&set.layers[0].w0, &dw, &z).unwrap();
    let out = z.matmul(&set.layers[0].w0.add(&dw).unwrap()).unwrap();
    let direct = out.matmul(&out.transpose()).unwrap();
    let sum = ac.base_term.add(&ac.adapter_term).unwrap().add(&ac.cross_term).unwrap();
    assert!(sum.max_abs_diff(&direct) < 1e-10);
}

#[test]
fn rank_trace_tables() {
    let fit = run_matrix_fit(&TrainConfig { steps: 20, ..TrainConfig::default() }).unwrap();
    let t = effective_rank_trace(&fit).unwrap();
    assert_eq!(t.index, TraceIndex::Step);
    assert_eq!(t.rows.len(), 20);

    let den = run_toy_denoise(&TrainConfig {
        task: Task::ToyDenoise,
        steps: 20,
        ..TrainConfig::default()
    })
    .unwrap();
    let t = effective_rank_trace(&den).unwrap();
    assert_eq!(t.index, TraceIndex::Timestep);
    for layer in 0..2 {
        assert_eq!(t.rows.iter().filter(|r| r.layer == layer).count(), 20);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn trained_foura_pairs_merge_more_compatibly() {
    let mut scores = [Vec::new(), Vec::new()];
    for (arm, foura) in [true, false].into_iter().enumerate() {
        for seed in 0..3u64 {
            let layers: Vec<AdapterLayer> = [200 + 2 * seed, 201 + 2 * seed]
                .iter()
                .map(|&target_seed| {
                    let cfg = TrainConfig {
                        seed,
                        target_seed,
                        tail_scale: 0.2,
                        lambda_entropy: 0.1,
                        transform: if foura { Transform::Dct } else { Transform::None },
                        gate_mode: if foura { Some(GateMode::Soft) } else { None },
                        ..TrainConfig::default()
                    };
                    run_matrix_fit(&cfg).unwrap().frozen_layers().unwrap().remove(0)
                })
                .collect();
            scores[arm].push(merge_compatibility(&layers[0], &layers[1], 8).unwrap());

            // The merged pair is still exactly the sum of branches.
            let z = Rng::seed_from_u64(seed).gaussian_matrix(4, 32, 1.0);
            let merged = merge_outputs(&MergeSpec::output_sum(vec![(&layers[0], 1.0), (&layers[1], 1.0)]), &z).unwrap();
            let expect = z
                .matmul(&layers[0].w0)
                .unwrap()
                .add(&frozen_branch(&layers[0], &z).unwrap())
                .unwrap()
                .add(&frozen_branch(&layers[1], &z).unwrap())
                .unwrap();
            assert!(merged.max_abs_diff(&expect) < 1e-12);
        }
    }
    assert!(
        median(scores[0].clone()) < median(scores[1].clone()),
        "FouRA {:?} vs LoRA {:?}",
        scores[0],
        scores[1]
    );
}
