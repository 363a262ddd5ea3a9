use headdiv_core::attention::{HeadMechanism, ScaleMode};
use headdiv_core::diversity::DiversityKind;
use headdiv_core::task::SyntheticTaskSpec;
use headdiv_core::train::{train, TrainConfig};
use std::time::Instant;

fn toy(seed: u64, lambda: f64, kind: Option<DiversityKind>, steps: usize) -> TrainConfig {
    TrainConfig {
        layers: 3,
        heads: 4,
        model_dim: 32,
        head_dim: 8,
        mechanisms: vec![HeadMechanism::SoftmaxFull],
        diversity_kind: kind,
        lambda,
        scale_mode: ScaleMode::Paper,
        steps,
        batch_size: 16,
        learning_rate: 0.05,
        seed,
        log_interval: 250,
        task: SyntheticTaskSpec {
            seq_len: 24,
            vocab: 16,
            offsets: vec![-3, 2],
            num_train: 256,
            num_eval: 64,
        },
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("copy");
    match mode {
        "copy" => {
            let mut cfg = toy(1, 0.0, None, 500);
            cfg.layers = 1;
            cfg.heads = 2;
            cfg.model_dim = 16;
            cfg.head_dim = 4;
            cfg.task = SyntheticTaskSpec {
                seq_len: 8,
                vocab: 8,
                offsets: vec![0],
                num_train: 128,
                num_eval: 32,
            };
            cfg.batch_size = 8;
            cfg.log_interval = 100;
            let t = Instant::now();
            let run = train(&cfg).unwrap();
            println!("copy task: {:?} elapsed", t.elapsed());
            for m in &run.metrics {
                println!(
                    "  step {:4} task_loss {:.4} acc {:.4}",
                    m.step, m.task_loss, m.eval_accuracy
                );
            }
        }
        "toy" => {
            let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
            let lambda: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.0);
            let kind = match args.get(4).map(String::as_str) {
                Some("a") => Some(DiversityKind::AttentionProb),
                Some("q") => Some(DiversityKind::Query),
                _ => None,
            };
            let t = Instant::now();
            let run = train(&toy(seed, lambda, kind, 3000)).unwrap();
            println!(
                "toy seed={seed} lambda={lambda} kind={kind:?}: {:?} elapsed",
                t.elapsed()
            );
            for m in &run.metrics {
                println!(
                    "  step {:4} loss {:.4} acc {:.4} | divY {:.4} divA {:.4} divQ {:.4} divK {:.4} divV {:.4}",
                    m.step, m.task_loss, m.eval_accuracy,
                    m.diversity.context, m.diversity.attention,
                    m.diversity.query, m.diversity.key, m.diversity.value
                );
            }
            println!("  gradsim {:.6} final_acc {:.4}", run.grad_similarity, run.final_eval_accuracy);
        }
        _ => eprintln!("unknown mode"),
    }
}
