use musal::data::{generate_synthetic, SampleKind, SampleRecord, SyntheticSpec};
use musal::metrics::{mean_f_measure, mean_mae};
use musal::mlm::BranchPolicy;
use musal::trainer::{Preset, TrainConfig, Trainer};
use std::time::Instant;

#[test]
fn overfit_probe() {
    let samples = generate_synthetic(&SyntheticSpec { count: 8, seed: 7, ..SyntheticSpec::default() }).unwrap();
    let sal: Vec<SampleRecord> = samples.iter().map(|s| SampleRecord {
        id: s.id.clone(), image: s.image.clone(), target: s.mask.clone(), kind: SampleKind::Saliency,
    }).collect();
    let edge: Vec<SampleRecord> = samples.iter().map(|s| SampleRecord {
        id: s.id.clone(), image: s.edge_image.clone(), target: s.edge_map.clone(), kind: SampleKind::Edge,
    }).collect();
    let cfg = TrainConfig { max_steps: 500, seed: 7, ..TrainConfig::tiny(Preset::AllsupEdMlm) };
    let mut t = Trainer::new(&cfg).unwrap();
    let start = Instant::now();
    let mut evaluate = |t: &Trainer, step: u64| {
        let preds: Vec<_> = sal.iter().map(|r| t.predict(&r.image, BranchPolicy::Fixed(0)).unwrap().saliency).collect();
        let gts: Vec<_> = sal.iter().map(|r| r.target.clone()).collect();
        let f = mean_f_measure(&preds, &gts).unwrap();
        let m = mean_mae(&preds, &gts).unwrap();
        eprintln!("step {step}: F={f:.4} MAE={m:.4} elapsed={:.0}s", start.elapsed().as_secs_f64());
        (f, m)
    };
    let pairing = musal::data::PairedBatches::new(8, 8, 7).unwrap();
    let d0 = t.net.student_disagreement(&sal[0].image).unwrap();
    eprintln!("initial disagreement: {d0:?}");
    for step in 0..500u64 {
        let (si, ei) = pairing.pair_at(step);
        let b = t.train_step(&sal[si], &edge[ei]).unwrap();
        if step % 50 == 49 {
            let (f, m) = evaluate(&t, step + 1);
            eprintln!("   loss total={:.4} l_s={:.4} l_e={:.4} l_mim={:.6} l_dec={:.4}", b.total, b.l_s, b.l_e, b.l_mimicry, b.l_dec);
            if f >= 0.95 && m <= 0.04 { eprintln!("early exit at {}", step + 1); break; }
        }
    }
    let dz = t.net.student_disagreement(&sal[0].image).unwrap();
    eprintln!("final disagreement: {dz:?}");
    eprintln!("ratios: {:?}", d0.iter().zip(&dz).map(|(a, b)| b / a.max(1e-300)).collect::<Vec<_>>());
}
