//! Acceptance suite: one pass/fail line per criterion, exit status 1 if any
//! criterion fails. Tolerances and time limits are pinned below.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use netseg_core::extraction::{extract_net, ExtractionConfig};
use netseg_core::labels::{fuse_to_schema, Schema, BACKGROUND, ED, ET, NCR, NET};
use netseg_core::metrics::{dice, hausdorff, iou};
use netseg_core::morphology::{close, dilate, erode, open, Connectivity, StructuringElement};
use netseg_core::nifti::{decode, encode, Datatype};
use netseg_core::phantom::{generate, generate_cohort, GammaLaw, PhantomSpec};
use netseg_core::stats::{
    anova_oneway, fit_gamma, intensity_by_region, ks_test_gamma, partition_by_volume, tukey_hsd, Region, VolumeGroup,
};
use netseg_core::volume::{Grid, Mask, Modality, MultiModalRecord};
use netseg_neural::train::hard_dice_per_channel;
use netseg_neural::{
    parameter_report, train, FilterBlockKind, Graph, Network, NetworkConfig, PatchSampling, Sample, SegmentationModel,
    Tensor, TrainConfig, Var,
};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use statrs::distribution::{ContinuousCDF, StudentsT};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn random_mask(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Mask {
    let p: f64 = rng.random_range(0.0..0.6);
    let data = (0..shape.iter().product()).map(|_| rng.random::<f64>() < p).collect();
    Grid::new(shape, data).unwrap()
}

fn brute_directed(a: &Mask, b: &Mask, sp: [f64; 3]) -> Vec<f64> {
    let pts = |m: &Mask| (0..m.len()).filter(|&i| m.data()[i]).map(|i| m.coords(i)).collect::<Vec<_>>();
    let (pa, pb) = (pts(a), pts(b));
    pa.iter()
        .map(|p| {
            pb.iter()
                .map(|q| (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * sp[k]).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Linear interpolation between order statistics.
fn brute_percentile(mut v: Vec<f64>, pct: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < v.len() {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    } else {
        v[i]
    }
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hd_checked = 0;
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let shape = [rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8)];
        let (a, b) = (random_mask(&mut rng, shape), random_mask(&mut rng, shape));
        let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
        let (na, nb) = (a.count(), b.count());
        let want_dice = if na + nb == 0 { 1.0 } else { (2 * inter) as f64 / (na + nb) as f64 };
        let union = na + nb - inter;
        let want_iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let (d, j) = (dice(&a, &b).unwrap(), iou(&a, &b).unwrap());
        ensure(d == want_dice, || format!("case {case}: dice {d} vs {want_dice}"))?;
        ensure(j == want_iou, || format!("case {case}: iou {j} vs {want_iou}"))?;
        if na == 0 || nb == 0 {
            continue;
        }
        let sp = [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)];
        let (ab, ba) = (brute_directed(&a, &b, sp), brute_directed(&b, &a, sp));
        for pct in [100.0, 95.0] {
            let want = brute_percentile(ab.clone(), pct).max(brute_percentile(ba.clone(), pct));
            let got = hausdorff(&a, &b, sp, pct).unwrap();
            worst = worst.max((got - want).abs());
            ensure((got - want).abs() <= 1e-12, || format!("case {case}: HD{pct} {got} vs {want}"))?;
        }
        hd_checked += 1;
    }
    Ok(format!("1000 pairs, dice/iou exact, HD on {hd_checked} nonempty pairs, max |ΔHD| {worst:.1e}"))
}

// ---------------------------------------------------------------- 2

const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
const GRAD_FLOOR: f64 = 1e-6;

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_FLOOR)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Finite-difference check of every leaf entry of `build`'s scalar output.
fn check_primitive(name: &str, leaves: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) -> Result<f64, String> {
    let eval = |ls: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ls.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (mut g, vars, out) = eval(&leaves);
    g.backward(out).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let an = g.grad(vars[li]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; leaf.len()]);
        for j in 0..leaf.len() {
            let mut plus = leaves.clone();
            plus[li].data[j] += GRAD_H;
            let mut minus = leaves.clone();
            minus[li].data[j] -= GRAD_H;
            let (gp, _, op) = eval(&plus);
            let (gm, _, om) = eval(&minus);
            let fd = (gp.value(op).data[0] - gm.value(om).data[0]) / (2.0 * GRAD_H);
            let e = rel_err(fd, an[j]);
            worst = worst.max(e);
            ensure(e < GRAD_TOL, || format!("{name}: leaf {li}[{j}] fd {fd} vs analytic {}", an[j]))?;
        }
    }
    Ok(worst)
}

fn probe(g: &mut Graph, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..g.value(v).len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    g.weighted_sum(v, w).unwrap()
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let x = randn(&[1, 2, 4, 5, 6], &mut rng);
    let w3 = randn(&[3, 2, 3, 3, 3], &mut rng);
    let w1 = randn(&[3, 2, 1, 1, 1], &mut rng);
    for stride in [1, 2] {
        worst = worst.max(check_primitive(&format!("conv3d s{stride}"), vec![x.clone(), w3.clone()], |g, v| {
            let y = g.conv3d(v[0], v[1], stride).unwrap();
            probe(g, y, 10)
        })?);
    }
    worst = worst.max(check_primitive("conv3d 1x1", vec![x.clone(), w1], |g, v| {
        let y = g.conv3d(v[0], v[1], 1).unwrap();
        probe(g, y, 11)
    })?);
    let xs = randn(&[1, 2, 2, 3, 2], &mut rng);
    let wt = randn(&[2, 3, 3, 3, 3], &mut rng);
    worst = worst.max(check_primitive("conv3d_transpose", vec![xs, wt], |g, v| {
        let y = g.conv3d_transpose(v[0], v[1]).unwrap();
        probe(g, y, 12)
    })?);
    let b = randn(&[2], &mut rng);
    worst = worst.max(check_primitive("add_bias", vec![x.clone(), b], |g, v| {
        let y = g.add_bias(v[0], v[1]).unwrap();
        probe(g, y, 13)
    })?);
    let x2 = randn(&[1, 2, 4, 5, 6], &mut rng);
    worst = worst.max(check_primitive("add", vec![x.clone(), x2], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        probe(g, y, 14)
    })?);
    worst = worst.max(check_primitive("relu", vec![x.clone()], |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 15)
    })?);
    worst = worst.max(check_primitive("sigmoid", vec![x.clone()], |g, v| {
        let y = g.sigmoid(v[0]);
        probe(g, y, 16)
    })?);
    let x4 = randn(&[1, 4, 3, 3, 4], &mut rng);
    let (gamma, beta) = (randn(&[4], &mut rng), randn(&[4], &mut rng));
    for groups in [1, 2, 4] {
        worst = worst.max(check_primitive(
            &format!("group_norm g{groups}"),
            vec![x4.clone(), gamma.clone(), beta.clone()],
            |g, v| {
                let y = g.group_norm(v[0], v[1], v[2], groups).unwrap();
                probe(g, y, 17)
            },
        )?);
    }
    worst = worst.max(check_primitive("spatial_dropout", vec![x4.clone()], |g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let y = g.spatial_dropout(v[0], 0.5, true, &mut r).unwrap();
        probe(g, y, 18)
    })?);
    let p =
        Tensor::new(vec![1, 2, 2, 3, 4], (0..48).map(|i| 0.05 + 0.9 * ((i * 7 % 48) as f64 / 48.0)).collect()).unwrap();
    let target = Tensor::new(vec![1, 2, 2, 3, 4], (0..48).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect()).unwrap();
    worst =
        worst.max(check_primitive("soft_dice_loss", vec![p], |g, v| g.soft_dice_loss(v[0], &target, 1.0).unwrap())?);
    let primitives = worst;

    // whole network: every parameter tensor at a few entries, plus the input
    let cfg = NetworkConfig {
        levels: 2,
        base_filters: 4,
        block_kind: FilterBlockKind::PreActivation,
        dropout_rate: 0.2,
        upscaling_head: true,
        out_segments: 3,
        norm_groups: 2,
        input_shape: [4, 8, 16, 16],
    };
    let mut net = Network::new(cfg, 3).map_err(|e| e.to_string())?;
    let input = randn(&[1, 4, 8, 16, 16], &mut rng);
    let tgt_data = (0..3 * 16 * 32 * 32).map(|_| (rng.random::<f64>() < 0.3) as u8 as f64).collect();
    let target = Tensor::new(vec![1, 3, 16, 32, 32], tgt_data).unwrap();
    let loss_of = |net: &Network, x: &Tensor| -> (Graph, Vec<Var>, Var, Var) {
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let xv = g.param(x.clone());
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let out = net.forward(&mut g, &vars, xv, true, &mut r).unwrap();
        let loss = g.soft_dice_loss(out, &target, 1.0).unwrap();
        (g, vars, xv, loss)
    };
    let (mut g, vars, xv, loss) = loss_of(&net, &input);
    g.backward(loss).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut net_worst: f64 = 0.0;
    for pi in 0..net.params.len() {
        let an = g.grad(vars[pi]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; net.params[pi].data.len()]);
        let n = an.len();
        for j in [0, n / 2, n - 1] {
            let orig = net.params[pi].data[j];
            net.params[pi].data[j] = orig + GRAD_H;
            let (gp, _, _, lp) = loss_of(&net, &input);
            net.params[pi].data[j] = orig - GRAD_H;
            let (gm, _, _, lm) = loss_of(&net, &input);
            net.params[pi].data[j] = orig;
            let fd = (gp.value(lp).data[0] - gm.value(lm).data[0]) / (2.0 * GRAD_H);
            let e = rel_err(fd, an[j]);
            net_worst = net_worst.max(e);
            ensure(e < GRAD_TOL, || {
                format!("network param {}[{j}]: fd {fd} vs analytic {}", net.params[pi].spec.name, an[j])
            })?;
            checked += 1;
        }
    }
    let an = g.grad(xv).unwrap().to_vec();
    for j in (0..input.len()).step_by(97) {
        let mut xp = input.clone();
        xp.data[j] += GRAD_H;
        let mut xm = input.clone();
        xm.data[j] -= GRAD_H;
        let (gp, _, _, lp) = loss_of(&net, &xp);
        let (gm, _, _, lm) = loss_of(&net, &xm);
        let fd = (gp.value(lp).data[0] - gm.value(lm).data[0]) / (2.0 * GRAD_H);
        let e = rel_err(fd, an[j]);
        net_worst = net_worst.max(e);
        ensure(e < GRAD_TOL, || format!("network input[{j}]: fd {fd} vs analytic {}", an[j]))?;
        checked += 1;
    }
    Ok(format!(
        "primitives max rel err {primitives:.1e}; 2-level upscaling net on 4x8x16x16: {checked} entries, max rel err {net_worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 3

fn shape_contract() -> Outcome {
    let cfg = NetworkConfig { levels: 4, input_shape: [4, 16, 32, 32], ..NetworkConfig::default() };
    let out_segments = cfg.out_segments;
    let net = Network::new(cfg, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = net.predict(&randn(&[1, 4, 16, 32, 32], &mut rng)).map_err(|e| e.to_string())?;
    let want = vec![1, out_segments, 32, 64, 64];
    ensure(y.shape == want, || format!("output shape {:?}, expected {want:?}", y.shape))?;
    Ok(format!("4x16x32x32 -> {}x32x64x64", out_segments))
}

// ---------------------------------------------------------------- 4

/// Held-out Dice floors of the desk-scale substitute.
const DESK_MEAN_DICE: f64 = 0.80;
const DESK_NET_DICE: f64 = 0.5;

fn desk_scale_training() -> Outcome {
    let base = PhantomSpec { shape: [32, 64, 64], ..Default::default() };
    let cohort = generate_cohort(20, &base, None, 42).map_err(|e| e.to_string())?;
    let segs = Schema::Unified4Label.segments();
    let samples: Vec<Sample> = cohort.iter().map(|p| Sample::from_record(&p.record, &segs, 2).unwrap()).collect();
    let (train_set, held_out) = samples.split_at(16);
    let cfg = NetworkConfig {
        levels: 2,
        base_filters: 8,
        block_kind: FilterBlockKind::PreActivation,
        dropout_rate: 0.0,
        upscaling_head: true,
        out_segments: segs.len(),
        norm_groups: 4,
        input_shape: [4, 32, 64, 64],
    };
    let mut model = SegmentationModel::new(cfg, segs.clone(), 7).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        lr0: 3e-3,
        decay_per_epoch: 0.05,
        epochs: 20,
        batch_size: 1,
        patches: Some(PatchSampling { size: [16, 32, 32], per_sample: 1, foreground_fraction: 0.7 }),
        seed: 3,
        ..Default::default()
    };
    train(&mut model, train_set, &[], &tc).map_err(|e| e.to_string())?;
    let mut mean = vec![0.0; segs.len()];
    for s in held_out {
        let p = model.network.predict(&s.input).map_err(|e| e.to_string())?;
        for (m, d) in mean.iter_mut().zip(hard_dice_per_channel(&p, &s.target)) {
            *m += d / held_out.len() as f64;
        }
    }
    let by: BTreeMap<_, _> = segs.iter().zip(&mean).map(|(s, d)| (s.name(), *d)).collect();
    let etw = (by["ET"] + by["TC"] + by["WT"]) / 3.0;
    let detail = format!(
        "held-out Dice ET {:.3} TC {:.3} WT {:.3} (mean {etw:.3}), NET {:.3}",
        by["ET"], by["TC"], by["WT"], by["NET"]
    );
    ensure(etw >= DESK_MEAN_DICE && by["NET"] >= DESK_NET_DICE, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 5

const SALT_RATE: f64 = 0.05;

fn net_extraction() -> Outcome {
    let (mut pre_min, mut post_min, mut noisy_min) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..4 {
        let p = generate(&PhantomSpec { seed, ..Default::default() }).map_err(|e| e.to_string())?;
        let unified = p.record.labels.clone().unwrap();
        let planted = unified.mask_of(&[NET]);
        ensure(!unified.mask_of(&[NCR]).and(&planted).unwrap().any(), || "NCR and NET overlap".into())?;
        let l18 = fuse_to_schema(&unified, Schema::Brats2018).unwrap();
        // oracle predictions of a 2021-style model
        let tc = unified.mask_of(&[NCR, ET]);
        let et = unified.mask_of(&[ET]);
        let raw = ExtractionConfig { filter_sequence: vec![], ..Default::default() };
        let pre = extract_net("p", &l18, &tc, &et, &raw).map_err(|e| e.to_string())?;
        let post = extract_net("p", &l18, &tc, &et, &ExtractionConfig::default()).map_err(|e| e.to_string())?;
        pre_min = pre_min.min(dice(&pre.net_mask, &planted).unwrap());
        post_min = post_min.min(dice(&post.net_mask, &planted).unwrap());

        let mut noisy = l18.grid().clone();
        for v in noisy.data_mut() {
            if matches!(*v, BACKGROUND | ED) && rng.random::<f64>() < SALT_RATE {
                *v = NCR;
            }
        }
        let noisy = netseg_core::volume::LabelVolume::new(noisy, Schema::Brats2018).unwrap();
        let r = extract_net("p", &noisy, &tc, &et, &ExtractionConfig::default()).map_err(|e| e.to_string())?;
        noisy_min = noisy_min.min(dice(&r.net_mask, &planted).unwrap());
    }
    let detail = format!("min NET Dice: pre-filter {pre_min:.4}, post-filter {post_min:.4}, 5% salt {noisy_min:.4}");
    ensure(pre_min == 1.0 && post_min >= 0.95 && noisy_min >= 0.90, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

fn volume_grouping() -> Outcome {
    let mut total = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut volumes = BTreeMap::new();
        let mut planted = BTreeMap::new();
        for i in 0..8 {
            for (g, centre) in [(VolumeGroup::Low, 0.0), (VolumeGroup::Medium, 5000.0), (VolumeGroup::High, 90000.0)] {
                let v: f64 =
                    if centre == 0.0 { rng.random_range(0.0..30.0) } else { centre * rng.random_range(0.85..1.15) };
                let id = format!("{g:?}_{i}");
                volumes.insert(id.clone(), v.round() as usize);
                planted.insert(id, g);
            }
        }
        let part = partition_by_volume(&volumes, seed).map_err(|e| e.to_string())?;
        let wrong = planted.iter().filter(|(id, g)| part.groups.get(*id) != Some(g)).count();
        ensure(wrong == 0, || format!("seed {seed}: {wrong} misassigned"))?;
        total += volumes.len();
    }
    Ok(format!("10 seeds, {total} records, 0 misassigned"))
}

// ---------------------------------------------------------------- 7

fn gamma_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let law = Gamma::new(2.0, 3.0).unwrap();
    let xs: Vec<f64> = (0..100_000).map(|_| law.sample(&mut rng)).collect();
    let fit = fit_gamma(&xs).map_err(|e| e.to_string())?;
    let (ek, et) = ((fit.shape_k - 2.0).abs() / 2.0, (fit.scale_theta - 3.0).abs() / 3.0);
    ensure(ek < 0.02 && et < 0.02, || format!("k {} theta {}", fit.shape_k, fit.scale_theta))?;

    let base = PhantomSpec { shape: [32, 48, 48], ..Default::default() };
    let cohort = generate_cohort(200, &base, Some(GammaLaw { shape_k: 2.0, scale_theta: 1500.0 }), 17)
        .map_err(|e| e.to_string())?;
    let vols: Vec<f64> = cohort.iter().map(|p| p.truth.net_voxels as f64).collect();
    let cfit = fit_gamma(&vols).map_err(|e| e.to_string())?;
    let ks = ks_test_gamma(&vols, &cfit);
    ensure(ks.p_value > 0.01, || format!("phantom NET volumes reject the fitted gamma: KS p = {}", ks.p_value))?;
    Ok(format!(
        "k {:.4} theta {:.4} (errors {:.2}%, {:.2}%); 200 phantoms: fitted k {:.3}, KS p {:.3}",
        fit.shape_k,
        fit.scale_theta,
        100.0 * ek,
        100.0 * et,
        cfit.shape_k,
        ks.p_value
    ))
}

// ---------------------------------------------------------------- 8

fn anova_tukey() -> Outcome {
    let hand =
        anova_oneway(&[vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0], vec![3.0, 4.0, 5.0]]).map_err(|e| e.to_string())?;
    ensure(hand.f_statistic == 3.0 && hand.df_between == 2 && hand.df_within == 6, || {
        format!("F = {} df ({}, {})", hand.f_statistic, hand.df_between, hand.df_within)
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let alpha = 0.05;
    let mut rejections = 0;
    for case in 0..100 {
        let (n1, n2) = (rng.random_range(3..=15), rng.random_range(3..=15));
        let shift: f64 = rng.random_range(0.0..2.0);
        let a: Vec<f64> = (0..n1).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
        let b: Vec<f64> = (0..n2).map(|_| Normal::new(shift, 1.0).unwrap().sample(&mut rng)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ss = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        let df = (n1 + n2 - 2) as f64;
        let sp2 = (ss(&a) + ss(&b)) / df;
        let t = (mean(&a) - mean(&b)) / (sp2 * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
        let crit = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(1.0 - alpha / 2.0);
        let t_rejects = t.abs() > crit;
        let tk = tukey_hsd(&[a, b], alpha).map_err(|e| e.to_string())?;
        let tk_rejects = tk.pair(0, 1).unwrap().significant;
        ensure(t_rejects == tk_rejects, || {
            format!("dataset {case}: t-test {t_rejects}, Tukey {tk_rejects} (|t| {}, crit {crit})", t.abs())
        })?;
        rejections += t_rejects as usize;
    }

    let base = PhantomSpec { shape: [24, 40, 40], ..Default::default() };
    let records: Vec<MultiModalRecord> = generate_cohort(50, &base, None, 99)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| p.record.normalized().unwrap())
        .collect();
    let samples = intensity_by_region(&records);
    let net_idx = Region::ALL.iter().position(|r| *r == Region::Net).unwrap();
    let mut worst_p: f64 = 0.0;
    for m in [Modality::T1c, Modality::Flair] {
        let groups: Vec<Vec<f64>> = Region::ALL.iter().map(|r| samples[&m][r].clone()).collect();
        let a = anova_oneway(&groups).map_err(|e| e.to_string())?;
        ensure(a.p_value < 0.01, || format!("{m:?}: ANOVA p = {}", a.p_value))?;
        worst_p = worst_p.max(a.p_value);
        let t = tukey_hsd(&groups, 0.01).map_err(|e| e.to_string())?;
        for other in (0..groups.len()).filter(|&o| o != net_idx) {
            ensure(t.pair(net_idx, other).unwrap().significant, || {
                format!("{m:?}: NET vs {:?} not significant at 0.01", Region::ALL[other])
            })?;
        }
    }
    Ok(format!(
        "F = 3.0 (2, 6) exact; Tukey = t-test on 100 datasets ({rejections} rejections); phantom NET separable in T1C/FLAIR (max ANOVA p {worst_p:.1e}, Tukey at 0.01)"
    ))
}

// ---------------------------------------------------------------- 9

fn mask_strategy() -> impl Strategy<Value = (Mask, Mask)> {
    ([1usize..=7, 1usize..=7, 1usize..=7], 0.0f64..0.8).prop_flat_map(|(shape, p)| {
        let n = shape.iter().product::<usize>();
        (
            proptest::collection::vec(proptest::bool::weighted(p), n),
            proptest::collection::vec(proptest::bool::weighted(0.3), n),
        )
            .prop_map(move |(a, extra)| {
                let a = Grid::new(shape, a).unwrap();
                let b = a.or(&Grid::new(shape, extra).unwrap()).unwrap();
                (a, b)
            })
    })
}

fn pad(m: &Mask, r: usize, fill: bool) -> Mask {
    let s = m.shape();
    Grid::from_fn([s[0] + 2 * r, s[1] + 2 * r, s[2] + 2 * r], |c| {
        if (0..3).all(|a| c[a] >= r && c[a] < s[a] + r) {
            m.get([c[0] - r, c[1] - r, c[2] - r])
        } else {
            fill
        }
    })
}

fn unpad(m: &Mask, r: usize, shape: [usize; 3]) -> Mask {
    Grid::from_fn(shape, |c| m.get([c[0] + r, c[1] + r, c[2] + r]))
}

fn morphology_laws() -> Outcome {
    let elements: Vec<(StructuringElement, usize)> =
        [(Connectivity::Face, 1), (Connectivity::Edge, 1), (Connectivity::Vertex, 1), (Connectivity::Face, 2)]
            .into_iter()
            .map(|(c, r)| (StructuringElement::ball(c, r).unwrap(), r))
            .collect();
    let config = Config { cases: 500, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strategy = mask_strategy();
    for case in 0..500 {
        let (a, b) = strategy.new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let (se, r) = &elements[case % elements.len()];
        let sub = |x: &Mask, y: &Mask| x.is_subset_of(y).unwrap();
        let (o, c) = (open(&a, se), close(&a, se));
        ensure(open(&o, se) == o, || format!("case {case}: opening not idempotent"))?;
        ensure(close(&c, se) == c, || format!("case {case}: closing not idempotent"))?;
        ensure(sub(&erode(&a, se), &a) && sub(&o, &a), || format!("case {case}: erosion/opening not anti-extensive"))?;
        ensure(sub(&a, &dilate(&a, se)) && sub(&a, &c), || format!("case {case}: dilation/closing not extensive"))?;
        for (name, op) in [
            ("erode", erode as fn(&Mask, &StructuringElement) -> Mask),
            ("dilate", dilate),
            ("open", open),
            ("close", close),
        ] {
            ensure(sub(&op(&a, se), &op(&b, se)), || format!("case {case}: {name} not monotone"))?;
        }
        // outside the grid counts as background, so the complement is taken
        // over a margin of the element's radius
        let dual = unpad(&dilate(&pad(&a.not(), *r, true), se).not(), *r, a.shape());
        ensure(erode(&a, se) == dual, || format!("case {case}: erosion is not the dual of dilation"))?;
        let dual = unpad(&erode(&pad(&a.not(), *r, true), se).not(), *r, a.shape());
        ensure(dilate(&a, se) == dual, || format!("case {case}: dilation is not the dual of erosion"))?;
    }
    Ok("500 random masks, 4 elements: idempotence, (anti-)extensivity, monotonicity, duality".into())
}

// ---------------------------------------------------------------- 10

fn random_values(rng: &mut ChaCha8Rng, n: usize, dt: Datatype) -> Vec<f64> {
    (0..n)
        .map(|_| match dt {
            Datatype::U8 => rng.random_range(0..=255u8) as f64,
            Datatype::I16 => rng.random_range(i16::MIN..=i16::MAX) as f64,
            Datatype::F32 => {
                let v: f32 = f32::from_bits(rng.random());
                if v.is_finite() {
                    v as f64
                } else {
                    0.0
                }
            }
        })
        .collect()
}

fn nifti_io() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut valid = Vec::new();
    for case in 0..100 {
        let dt = [Datatype::U8, Datatype::I16, Datatype::F32][case % 3];
        let shape = [rng.random_range(1..=9), rng.random_range(1..=9), rng.random_range(1..=9)];
        let spacing = [rng.random_range(0.5..3.0f32) as f64, rng.random_range(0.5..3.0f32) as f64, 1.0];
        let data = random_values(&mut rng, shape.iter().product(), dt);
        let bytes = encode(shape, spacing, &data, dt).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("v{case}.nii"));
        std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
        let img = decode(&std::fs::read(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let same = img.data.len() == data.len() && img.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && img.shape == shape && img.spacing == spacing, || format!("case {case} ({dt:?}) not bit-exact"))?;
        ensure(img.header.datatype == dt, || format!("case {case}: datatype changed"))?;
        valid.push(bytes);
    }

    // malformed corpus: each case breaks one validated header field
    let mut cases = 0;
    let mut errors = 0;
    for i in 0..1200 {
        let mut buf = valid[i % valid.len()].clone();
        let put16 = |b: &mut Vec<u8>, at: usize, v: i16| b[at..at + 2].copy_from_slice(&v.to_le_bytes());
        match i % 8 {
            0 => buf[0..4].copy_from_slice(&rng.random_range(0..i32::MAX).wrapping_add(349).to_le_bytes()),
            1 => {
                let k = rng.random_range(344..348);
                buf[k] ^= rng.random_range(1..=255u8);
            }
            2 => put16(&mut buf, 40, [0, 8, -1, i16::MIN, 100][rng.random_range(0..5)]),
            3 => {
                let k = rng.random_range(1..=3);
                put16(&mut buf, 40 + 2 * k, -rng.random_range(0..=i16::MAX));
            }
            4 => put16(&mut buf, 70, [0, 1, 8, 64, 128, 256, 512, 768, -5][rng.random_range(0..9)]),
            5 => {
                let dt = i16::from_le_bytes([buf[70], buf[71]]);
                let bitpix = match dt {
                    2 => 8,
                    4 => 16,
                    _ => 32,
                };
                put16(&mut buf, 72, bitpix + rng.random_range(1..64));
            }
            6 => {
                let bad = [0.0f32, 100.0, -352.0, 352.5, f32::NAN, f32::INFINITY, 1e12][rng.random_range(0..7)];
                buf[108..112].copy_from_slice(&bad.to_le_bytes());
            }
            _ => {
                let keep = rng.random_range(0..buf.len());
                buf.truncate(keep);
            }
        }
        cases += 1;
        match std::panic::catch_unwind(|| decode(&buf)) {
            Err(_) => return Err(format!("fuzz case {i} panicked")),
            Ok(Ok(_)) => return Err(format!("fuzz case {i} (kind {}) decoded without error", i % 8)),
            Ok(Err(_)) => errors += 1,
        }
    }
    Ok(format!("100 volumes bit-exact (u8/i16/f32); {cases} malformed headers -> {errors} errors, 0 panics"))
}

// ---------------------------------------------------------------- 11

fn netseg(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out =
        Command::new(env!("CARGO_BIN_EXE_netseg")).current_dir(dir).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("`netseg {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

/// The whole workflow on a small cohort, with relative paths under `dir`.
fn pipeline(dir: &Path) -> Result<(), String> {
    let net = [
        "--levels",
        "2",
        "--base-filters",
        "4",
        "--norm-groups",
        "2",
        "--epochs",
        "2",
        "--patch",
        "8,16,16",
        "--lr",
        "3e-3",
    ];
    let common = ["--seed", "11", "--jobs", "2"];
    let steps: Vec<Vec<&str>> = vec![
        vec!["phantom", "--count", "6", "--shape", "16,32,32", "--out", "cohort"],
        vec!["compose", "--data", "cohort", "--to-schema", "brats2021", "--out", "c2021"],
        vec!["train", "--data", "c2021", "--schema", "brats2021", "--segments", "ET,TC,WT", "--out", "m2021"],
        vec!["compose", "--data", "cohort", "--to-schema", "brats2018", "--out", "c2018", "--format", "csv"],
        vec!["extract", "--data", "c2018", "--model", "m2021/model.json", "--out", "unified"],
        vec!["train", "--data", "unified", "--test-count", "2", "--out", "m4"],
        vec![
            "eval",
            "--data",
            "unified",
            "--model",
            "m4/model.json",
            "--test-count",
            "2",
            "--out",
            "eval",
            "--format",
            "csv",
        ],
        vec!["stats", "--data", "cohort", "--out", "stats"],
    ];
    for step in steps {
        let mut args = step.clone();
        if step[0] == "train" {
            args.extend(net);
        }
        args.extend(common);
        netseg(dir, &args)?;
    }
    Ok(())
}

fn collect_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (fa, fb) = (collect_files(a.path()), collect_files(b.path()));
    ensure(fa.keys().eq(fb.keys()), || "the two runs wrote different file sets".into())?;
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), || format!("differing artifacts: {differing:?}"))?;
    let bytes: usize = fa.values().map(Vec::len).sum();
    Ok(format!("8-step pipeline twice: {} artifacts, {bytes} bytes, identical", fa.len()))
}

// ---------------------------------------------------------------- 12

fn parameter_counts() -> Outcome {
    let mut lines = Vec::new();
    for levels in [5, 4] {
        let cfg = NetworkConfig { levels, ..NetworkConfig::default() };
        let r = parameter_report(&cfg).map_err(|e| e.to_string())?;
        ensure(r.count > 0 && r.reference.is_some() && r.delta.is_some(), || format!("incomplete report: {r:?}"))?;
        lines.push(r.line());
    }
    Ok(lines.join("; "))
}

// ----------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { id: 1, name: "metrics oracle equivalence", limit: secs(10), run: metrics_oracle },
        Criterion { id: 2, name: "gradient checks", limit: secs(120), run: gradient_checks },
        Criterion { id: 3, name: "shape contract", limit: secs(10), run: shape_contract },
        Criterion { id: 4, name: "desk-scale training Dice", limit: secs(15 * 60), run: desk_scale_training },
        Criterion { id: 5, name: "NET extraction correctness", limit: secs(60), run: net_extraction },
        Criterion { id: 6, name: "volume grouping", limit: secs(10), run: volume_grouping },
        Criterion { id: 7, name: "gamma fit recovery", limit: secs(30), run: gamma_recovery },
        Criterion { id: 8, name: "ANOVA / Tukey", limit: secs(30), run: anova_tukey },
        Criterion { id: 9, name: "morphology laws", limit: secs(30), run: morphology_laws },
        Criterion { id: 10, name: "NIfTI I/O", limit: secs(60), run: nifti_io },
        Criterion { id: 11, name: "CLI determinism", limit: None, run: determinism },
        Criterion { id: 12, name: "parameter-count diagnostic", limit: None, run: parameter_counts },
    ];
    // `cargo test -- <filter>` runs only criteria whose id or name matches
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.id.to_string() == *f || c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(d), Some(limit)) if took > limit => Err(format!("{d}; took {took:.1?}, limit {limit:?}")),
            (o, _) => o,
        };
        let budget = c.limit.map(|l| format!(" / {l:?}")).unwrap_or_default();
        match outcome {
            Ok(detail) => println!("PASS  [{:>2}] {}: {detail} ({took:.1?}{budget})", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL  [{:>2}] {}: {detail} ({took:.1?}{budget})", c.id, c.name);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
