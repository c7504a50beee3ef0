// scratch diagnostics: train the acceptance fixture once, cache it, probe
use ndarray::{Array1, Array2};
use std::path::Path;
use zdc_corrvae::dataset::*;
use zdc_corrvae::eval::*;
use zdc_corrvae::infer::*;
use zdc_corrvae::model::*;
use zdc_corrvae::props::*;
use zdc_corrvae::train::*;

fn main() {
    let dir = Path::new("/tmp/zdcfix");
    std::fs::create_dir_all(dir).unwrap();
    let full = synthesize_toy_dataset(5000, &ToyShowerConfig::default(), 0).unwrap();
    let (train_ds, val, test) = split_dataset(&full, (0.8, 0.1, 0.1), 0).unwrap();
    let ckpt_path = dir.join("checkpoint.zdc1");
    let trained = if ckpt_path.exists() {
        println!("loading cached checkpoint");
        load_checkpoint(&ckpt_path).unwrap()
    } else {
        let spec = PropertySpec::default();
        let cfg = ModelConfig { architecture: Backbone::Mlp, ..Default::default() };
        let mask = MaskMatrix::identity_prefix(spec.len(), cfg.dim_w);
        let tcfg = TrainConfig { epochs: 40, ..Default::default() };
        let (t, _) = train_with_validation(
            &train_ds, Some(&val), &cfg, &spec, &mask, &tcfg,
            &LossWeights::default(), ImageTransform::Identity, Some(&ckpt_path),
            |e| println!("epoch {:2}: recon {:8.2} kl_w {:6.2} kl_z {:6.2} prop {:.5} val_recon {:8.2} val_prop {:.5} ({:.1}s)",
                e.epoch, e.recon, e.kl_w, e.kl_z, e.prop, e.val_recon, e.val_prop, e.seconds),
        ).unwrap();
        t
    };

    // criterion 6 numbers
    let val_mse = reconstruction_mse_over(&val, &trained).unwrap();
    let baseline = mean_image_baseline_mse(&train_ds, &val).unwrap();
    println!("\n[c6] val recon MSE {val_mse:.3} vs 0.5*baseline {:.3}", 0.5 * baseline);
    let model = &trained.model;
    let spec = &model.property_spec;
    let mut abs_err = vec![0.0f64; 2];
    for r in &test.records {
        let pre = trained.preprocess_image(&r.image);
        let (w_mean, _) = model.encode_image_w(&pre).unwrap();
        let preds = model.property_decode(&w_mean);
        let targets = property_vector(&r.image, spec).unwrap();
        for k in 0..2 { abs_err[k] += (preds[k] as f64 - targets[k]).abs(); }
    }
    println!("[c6] property MAE: x {:.4}, y {:.4} (<= 0.1)", abs_err[0] / test.len() as f64, abs_err[1] / test.len() as f64);

    // posterior w scale: what w values does the encoder actually produce?
    let mut w1_vals = vec![]; let mut com_targets = vec![];
    for r in test.records.iter().take(300) {
        let pre = trained.preprocess_image(&r.image);
        let (w_mean, _) = model.encode_image_w(&pre).unwrap();
        w1_vals.push(w_mean[0] as f64);
        com_targets.push(property_vector(&r.image, spec).unwrap()[0]);
    }
    let wmin = w1_vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let wmax = w1_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("[posterior] w1 range over test: [{wmin:.2}, {wmax:.2}], corr(w1, com_x) = {:.3}",
        pearson(&w1_vals, &com_targets));

    // criterion 7 microscope: one target sweep
    let wopt = WOptimizerConfig::default();
    for t in [-0.6f64, -0.3, 0.0, 0.3, 0.6] {
        let opt = optimize_w(model, &[t, 0.0], &wopt).unwrap();
        let preds = model.property_decode(&opt.w);
        // decode with a few z, measure com
        let record = &test.records[3];
        let c = model.encode_particle_c(&trained.normalized_particle(&record.particle)).unwrap();
        let mut cxs = vec![]; let mut cys = vec![];
        for zi in 0..4 {
            use rand::SeedableRng;
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42 + zi);
            let z = Array1::from_shape_fn(model.config.dim_z, |_| { let v: f64 = StandardNormal.sample(&mut rng); v as f32 });
            let img = trained.postprocess_image(&model.decode(&opt.w, &z, &c).unwrap());
            if let Ok((cx, cy)) = center_of_mass(&img) { cxs.push(cx); cys.push(cy); }
        }
        let mcx = cxs.iter().sum::<f64>() / cxs.len().max(1) as f64;
        let mcy = cys.iter().sum::<f64>() / cys.len().max(1) as f64;
        println!("[c7] target x {t:+.1}: w = {:?}, head pred ({:+.3}, {:+.3}), prop_mse {:.2e}, target px {:.1}, measured CoM ({:.1}, {:.1})",
            opt.w.iter().map(|v| format!("{v:+.2}")).collect::<Vec<_>>().join(","),
            preds[0], preds[1], opt.property_mse, (t + 1.0) * 21.5, mcx, mcy);
    }

    // criterion 12 probe: double save byte diff
    let c1 = dir.join("p1.zdc1");
    let c2 = dir.join("p2.zdc1");
    save_checkpoint(&trained, &c1).unwrap();
    let reloaded = load_checkpoint(&c1).unwrap();
    save_checkpoint(&reloaded, &c2).unwrap();
    let b1 = std::fs::read(&c1).unwrap();
    let b2 = std::fs::read(&c2).unwrap();
    if b1 == b2 { println!("[c12] double save identical"); }
    else {
        println!("[c12] sizes {} vs {}", b1.len(), b2.len());
        for (i, (x, y)) in b1.iter().zip(b2.iter()).enumerate() {
            if x != y {
                let lo = i.saturating_sub(60);
                println!("[c12] first diff at {i}:\n  a: {}\n  b: {}",
                    String::from_utf8_lossy(&b1[lo..(i + 60).min(b1.len())]),
                    String::from_utf8_lossy(&b2[lo..(i + 60).min(b2.len())]));
                break;
            }
        }
    }
}
