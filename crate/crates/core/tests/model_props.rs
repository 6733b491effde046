use surfseq::model::{
    apply_corruption, mpp_loss, param_count, plan_corruption, CorruptionPlan, Head, Inputs, Mode, SiT, SiTConfig,
};
use surfseq::{SeedStream, Tensor};

fn randn(shape: &[usize], rng: &mut SeedStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Hand-expanded count of every tensor in the encoder, embedding and a
/// scalar head.
fn oracle_count(l: usize, d: usize, mlp: usize, patch_dim: usize, n: usize) -> usize {
    let embed = patch_dim * d + d + d + (n + 1) * d;
    let attn = 4 * (d * d + d);
    let ffn = d * mlp + mlp + mlp * d + d;
    let norms = 4 * d;
    embed + l * (attn + ffn + norms) + 2 * d + d + 1
}

#[test]
fn published_sizes_within_two_percent() {
    let tiny = SiTConfig::tiny(612, 320);
    let small = SiTConfig::small(612, 320);
    assert_eq!(param_count(&tiny), oracle_count(12, 192, 768, 612, 320));
    assert_eq!(param_count(&small), oracle_count(12, 384, 1536, 612, 320));
    let t = param_count(&tiny) as f64;
    let s = param_count(&small) as f64;
    assert!((t / 5.5e6 - 1.0).abs() < 0.02, "tiny {t}");
    assert!((s / 21.6e6 - 1.0).abs() < 0.02, "small {s}");
}

#[test]
fn tiny_forward_shapes() {
    let mut rng = SeedStream::new(5);
    let model = SiT::new(SiTConfig::tiny(612, 320), &mut rng).unwrap();
    assert_eq!(model.params.scalar_count(), param_count(&model.config));
    let x = randn(&[320, 612], &mut rng);
    let emb = model.embed(&x, &Inputs::default(), Mode::Eval, &mut rng).unwrap();
    assert_eq!(emb.shape(), &[321, 192]);
    let enc = model.encode(&emb, Mode::Eval, &mut rng).unwrap();
    assert_eq!(enc.shape(), &[321, 192]);
    let y = model.head_forward(&enc).unwrap();
    assert_eq!(y.shape(), &[1, 1]);
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = SeedStream::new(6);
    let model = SiT::new(SiTConfig::micro(10, 7), &mut rng).unwrap();
    let h = randn(&[8, 64], &mut rng);
    let (out, maps) = model.attention(&model.params.blocks[0], &h).unwrap();
    assert_eq!(out.shape(), &[8, 64]);
    assert_eq!(maps.len(), 2);
    for m in maps {
        for row in m.to_vec().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn categories(plan: &CorruptionPlan, n: usize) -> (usize, usize, usize, usize) {
    let selected = plan.mask.iter().filter(|&&m| m).count();
    let masked = (0..n).filter(|&i| plan.source[i] == n).count();
    let swapped = (0..n).filter(|&i| plan.source[i] != n && plan.source[i] != i).count();
    let untouched_selected = (0..n).filter(|&i| plan.mask[i] && plan.source[i] == i).count();
    assert!((0..n).all(|i| plan.mask[i] || plan.source[i] == i));
    (selected, masked, swapped, untouched_selected)
}

#[test]
fn corruption_counts_on_320() {
    for seed in 0..20 {
        let plan = plan_corruption(320, &mut SeedStream::new(seed)).unwrap();
        assert_eq!(categories(&plan, 320), (160, 128, 16, 16), "seed {seed}");
    }
}

#[test]
fn corruption_replaces_rows_as_planned() {
    let mut rng = SeedStream::new(8);
    let tokens = randn(&[10, 4], &mut rng);
    let mask_token = randn(&[1, 4], &mut rng);
    let plan = plan_corruption(10, &mut rng).unwrap();
    let out = apply_corruption(&tokens, &mask_token, &plan).unwrap().to_vec();
    let (t, m) = (tokens.to_vec(), mask_token.to_vec());
    for i in 0..10 {
        let want = if plan.source[i] == 10 {
            &m[..]
        } else {
            &t[plan.source[i] * 4..plan.source[i] * 4 + 4]
        };
        assert_eq!(&out[i * 4..i * 4 + 4], want);
    }
}

#[test]
fn loss_ignores_unmasked_targets_exactly() {
    let mut rng = SeedStream::new(9);
    let recon = Tensor::param(&[320, 6], (0..1920).map(|_| rng.normal()).collect()).unwrap();
    let target = randn(&[320, 6], &mut rng);
    let plan = plan_corruption(320, &mut rng).unwrap();
    let base = mpp_loss(&recon, &target, &plan.mask).unwrap().item();
    let mut perturbed = target.to_vec();
    for (i, row) in perturbed.chunks_mut(6).enumerate() {
        if !plan.mask[i] {
            row.iter_mut().for_each(|x| *x += 100.0 * rng.normal());
        }
    }
    let perturbed = Tensor::new(&[320, 6], perturbed).unwrap();
    let again = mpp_loss(&recon, &perturbed, &plan.mask).unwrap().item();
    assert_eq!(base.to_bits(), again.to_bits());

    recon.zero_grad();
    mpp_loss(&recon, &target, &plan.mask).unwrap().backward();
    let g = recon.grad().unwrap();
    for (i, row) in g.chunks(6).enumerate() {
        if plan.mask[i] {
            assert!(row.iter().any(|&x| x != 0.0));
        } else {
            assert!(row.iter().all(|&x| x == 0.0), "row {i}");
        }
    }
}

#[test]
fn corrupted_forward_runs_with_reconstruction_head() {
    let mut rng = SeedStream::new(10);
    let model = SiT::new(SiTConfig::micro(12, 20).with_head(Head::Reconstruction), &mut rng).unwrap();
    let x = randn(&[20, 12], &mut rng);
    let plan = plan_corruption(20, &mut rng).unwrap();
    let inputs = Inputs {
        corruption: Some(&plan),
        age_embedding: None,
    };
    let recon = model.forward(&x, &inputs, Mode::Train, &mut rng).unwrap();
    assert_eq!(recon.shape(), &[20, 12]);
    assert!(mpp_loss(&recon, &x, &plan.mask).unwrap().item().is_finite());
    let regression = SiT::new(SiTConfig::micro(12, 20), &mut rng).unwrap();
    assert!(regression.forward(&x, &inputs, Mode::Train, &mut rng).is_err());
}

#[test]
fn permutation_invariance_without_positions() {
    let mut rng = SeedStream::new(12);
    let model = SiT::new(SiTConfig::micro(9, 16), &mut rng).unwrap();
    model.params.pos_embed.set_data(vec![0.0; 17 * 64]).unwrap();
    let x = randn(&[16, 9], &mut rng).to_vec();
    let run = |data: Vec<f64>| {
        let t = Tensor::new(&[16, 9], data).unwrap();
        model.forward(&t, &Inputs::default(), Mode::Eval, &mut SeedStream::new(0)).unwrap().item()
    };
    let y = run(x.clone());
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..16).collect();
        rng.shuffle(&mut perm);
        let permuted: Vec<f64> = perm.iter().flat_map(|&p| x[p * 9..(p + 1) * 9].to_vec()).collect();
        worst = worst.max((run(permuted) - y).abs());
    }
    assert!(worst < 1e-9, "{worst:e}");
}

#[test]
fn positions_break_the_symmetry() {
    let mut rng = SeedStream::new(13);
    let model = SiT::new(SiTConfig::micro(9, 16), &mut rng).unwrap();
    let x = randn(&[16, 9], &mut rng).to_vec();
    let mut swapped = x.clone();
    for j in 0..9 {
        swapped.swap(j, 9 + j);
    }
    let run = |data: Vec<f64>| {
        let t = Tensor::new(&[16, 9], data).unwrap();
        model.forward(&t, &Inputs::default(), Mode::Eval, &mut SeedStream::new(0)).unwrap().item()
    };
    assert!((run(x) - run(swapped)).abs() > 1e-9);
}

#[test]
fn age_embedding_changes_the_output() {
    let mut rng = SeedStream::new(14);
    let mut cfg = SiTConfig::micro(9, 4);
    cfg.deconfound = true;
    let mut model = SiT::new(cfg, &mut rng).unwrap();
    let x = randn(&[4, 9], &mut rng);
    let emb = model.deconfound_embed(&[28.0, 40.0], Mode::Train).unwrap();
    assert_eq!(emb.shape(), &[2, 64]);
    let out = |row: usize| {
        let inputs = Inputs {
            corruption: None,
            age_embedding: Some(emb.slice_rows(row, row + 1).unwrap()),
        };
        model.forward(&x, &inputs, Mode::Eval, &mut SeedStream::new(0)).unwrap().item()
    };
    assert!((out(0) - out(1)).abs() > 1e-9);
    assert!(model.forward(&x, &Inputs::default(), Mode::Eval, &mut rng).is_err());
}
