// scratch calibration across all criterion-relevant metrics
use atnbreak_core::attack::{attack, AttackConfig, LossMode};
use atnbreak_core::eval::*;
use atnbreak_core::vit::{init_params, ViTConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);

    let cfg = ViTConfig::default();
    let data = SyntheticDataset::new(DatasetSpec::default()).unwrap();
    let mut params = init_params(&cfg, 7).unwrap();
    let tcfg = TrainConfig { epochs, batch_size: 16, ..TrainConfig::default() };
    let t0 = Instant::now();
    let report = train(&cfg, &mut params, &data, &tcfg).unwrap();
    println!("epochs={epochs} train {:?} val {:.3} dense {:?}", t0.elapsed(), report.val_accuracy, report.val_dense_accuracy);

    let acfg = AttackConfig::default(); // comb
    let t1 = Instant::now();
    let cls = attack_success_rate_classification(&cfg, &params, &data, n, &acfg).unwrap();
    println!("comb ASR {:.3} (n={}) control {:.3}  [{:?}]", cls.asr.value, cls.eligible, cls.control_asr.value, t1.elapsed());

    // per-class flips
    for mode in [LossMode::Embedding, LossMode::Attention] {
        let acfg = AttackConfig { loss_mode: mode, ..AttackConfig::default() };
        let mut per_class = [[0usize; 2]; 4];
        let mut i = 0; let mut eligible = 0;
        while eligible < n && i < 500 {
            let s = data.sample(Split::Val, i); i += 1;
            if predict_class(&cfg, &params, &s.image).unwrap() != s.label { continue; }
            eligible += 1;
            let r = attack(&s.image, &params, &cfg, &acfg).unwrap();
            let adv: Vec<f64> = s.image.values().iter().zip(r.z_star.values()).map(|(a,b)| a+b).collect();
            let advt = atnbreak_core::tensor::Tensor::new(s.image.shape().to_vec(), adv).unwrap();
            let flip = predict_class(&cfg, &params, &advt).unwrap() != s.label;
            per_class[s.label][flip as usize] += 1;
        }
        println!("mode {mode:?} per-class [kept,flipped]: {:?}", per_class);
    }

    let t2 = Instant::now();
    let emb_cfg = AttackConfig { loss_mode: LossMode::Embedding, ..AttackConfig::default() };
    let ret = retrieval_success_at_k(&cfg, &params, &data, 32, &[1, 5], &emb_cfg).unwrap();
    println!("retrieval emb: s@1 {:.3} s@5 {:.3} (ctrl {:.3}) [{:?}]", ret.success[0].value, ret.success[1].value, ret.control_success[0].value, t2.elapsed());
    let atn_cfg = AttackConfig { loss_mode: LossMode::Attention, ..AttackConfig::default() };
    let ret_a = retrieval_success_at_k(&cfg, &params, &data, 32, &[1], &atn_cfg).unwrap();
    println!("retrieval atn: s@1 {:.3}", ret_a.success[0].value);

    let t3 = Instant::now();
    let dense = dense_degradation(&cfg, &params, &data, n, &atn_cfg).unwrap();
    println!("dense atn: clean {:.3} attacked {:.3} drop {:.3} ctrl {:.3} miou {:.3}->{:.3} [{:?}]",
        dense.clean.token_accuracy, dense.attacked.token_accuracy, dense.accuracy_drop,
        dense.control.token_accuracy, dense.clean.miou, dense.attacked.miou, t3.elapsed());
}
