// scratch: disk-class attack stall diagnosis
use atnbreak_core::attack::{attack, AttackConfig, LossMode};
use atnbreak_core::eval::*;
use atnbreak_core::tensor::{Tape, Tensor};
use atnbreak_core::vit::{forward, init_params, ViTConfig};

fn logits(cfg: &ViTConfig, p: &atnbreak_core::vit::ViTParams, img: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    forward(&mut tape, img, p, cfg, false).unwrap().logits.unwrap().values().to_vec()
}
fn margin(l: &[f64], label: usize) -> f64 {
    let other = l.iter().enumerate().filter(|(i, _)| *i != label).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    l[label] - other
}

fn main() {
    let cfg = ViTConfig::default();
    let data = SyntheticDataset::new(DatasetSpec::default()).unwrap();
    let mut params = init_params(&cfg, 7).unwrap();
    let tcfg = TrainConfig { epochs: 4, batch_size: 16, ..TrainConfig::default() };
    let rep = train(&cfg, &mut params, &data, &tcfg).unwrap();
    eprintln!("val {:.3}", rep.val_accuracy);
    // disk and checker samples only
    for i in [2usize, 3, 6, 7, 10, 11] {
        let s = data.sample(Split::Val, i);
        if classify_logits(&logits(&cfg, &params, &s.image)) != s.label { continue; }
        for (name, acfg) in [
            ("comb-zero", AttackConfig::default()),
            ("comb-rand", AttackConfig { random_init: true, seed: 11, ..AttackConfig::default() }),
            ("emb-zero ", AttackConfig { loss_mode: LossMode::Embedding, ..AttackConfig::default() }),
            ("emb-rand ", AttackConfig { loss_mode: LossMode::Embedding, random_init: true, seed: 11, ..AttackConfig::default() }),
            ("comb-500 ", AttackConfig { iterations: 500, ..AttackConfig::default() }),
        ] {
            let r = attack(&s.image, &params, &cfg, &acfg).unwrap();
            let adv: Vec<f64> = s.image.values().iter().zip(r.z_star.values()).map(|(a, b)| a + b).collect();
            let advt = Tensor::new(s.image.shape().to_vec(), adv).unwrap();
            let al = logits(&cfg, &params, &advt);
            let t = &r.trace;
            println!("class {} {} dist {:6.2} margin {:+.2} l_emb@[60,120,250] {:.2}/{:.2}/{:.2}",
                s.label, name, r.final_embedding_distance, margin(&al, s.label),
                t[59].l_emb, t[119.min(t.len()-1)].l_emb, t.last().unwrap().l_emb);
        }
    }
}
