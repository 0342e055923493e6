//! scratch: zoo construction and attack budget vs criteria 5/9 (not shipped)
use qaa::experiment::*;
use qaa::report::TransferReport;
use std::collections::BTreeMap;

fn cross(r: &TransferReport, sub: &str, own: &str) -> f64 {
    r.row(sub, "mim").unwrap().mean_over(|t| !t.starts_with(own)).unwrap()
}

fn main() {
    let variant = std::env::var("V").unwrap_or("B".into());
    let seed: u64 = std::env::var("S").ok().and_then(|x| x.parse().ok()).unwrap_or(11);
    let mut cfg = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        dataset: DatasetConfig::Synth { classes: 10, n_train: 10_000, n_eval: 512, height: 8, width: 8, sigma: 0.1 },
        architectures: vec!["convnet-a".into(), "convnet-b".into()],
        bitwidths: vec![32, 8, 4, 3, 2],
        train: TrainSettings::default(),
        attacks: vec![AttackConfig::mim(16.0 / 255.0, 10)],
        substitutes: vec![
            SubstituteConfig::Plain { arch: "convnet-a".into(), bitwidth: 32 },
            SubstituteConfig::Plain { arch: "convnet-a".into(), bitwidth: 2 },
            SubstituteConfig::Plain { arch: "convnet-b".into(), bitwidth: 32 },
            SubstituteConfig::Plain { arch: "convnet-b".into(), bitwidth: 2 },
            SubstituteConfig::Qaa { arch: "convnet-a".into() },
        ],
        diagnostics: DiagnosticsConfig { examples: 64, distance_matrix: false, bn_stats: false, ..Default::default() },
        seed,
        eval_examples: 256,
        adversarial_targets: false,
    };
    match variant.as_str() {
        "B" => { cfg.train.qat_from_scratch = true; cfg.train.qat_epochs = 3; cfg.train.qat_epochs_low_bit = 5; }
        "C" => { cfg.attacks = vec![AttackConfig::mim(16.0/255.0, 20)]; }
        "D" => { cfg.train.qat_from_scratch = true; cfg.train.qat_epochs = 3; cfg.train.qat_epochs_low_bit = 5;
                 cfg.attacks = vec![AttackConfig::mim(16.0/255.0, 20)]; }
        _ => {}
    }
    let dir = std::env::temp_dir().join(format!("qaa_probe_{variant}_{seed}"));
    let _ = std::fs::remove_dir_all(&dir);
    let out = run_experiment(&cfg, &dir).unwrap();
    let r = &out.report;
    let a2 = cross(r, "convnet-a-w2", "convnet-a");
    let a32 = cross(r, "convnet-a-w32", "convnet-a");
    let b2 = cross(r, "convnet-b-w2", "convnet-b");
    let b32 = cross(r, "convnet-b-w32", "convnet-b");
    let qaa = cross(r, "convnet-a-qaa", "convnet-a");
    let o1_8 = r.row("convnet-a-w32", "mim").unwrap().cell("convnet-a-w8").unwrap().asr.unwrap();
    let o1_2 = r.row("convnet-a-w32", "mim").unwrap().cell("convnet-a-w2").unwrap().asr.unwrap();
    // alignment from diagnostics.csv
    let text = std::fs::read_to_string(dir.join("diagnostics.csv")).unwrap();
    let mut align: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() == 6 && c[2] == "gradient_cosine" {
            if let Ok(v) = c[5].parse::<f64>() {
                let e = align.entry(c[0].to_string()).or_insert((0.0, 0));
                e.0 += v; e.1 += 1;
            }
        }
    }
    let mean = |k: &str| { let e = &align[k]; e.0 / e.1 as f64 };
    println!("V={variant} seed={seed}: c5 2bit={:.1} vs 32bit={:.1} ({}) | obs1 {o1_8:.0}>{o1_2:.0}={} | qaa={qaa:.1}>max={} | c9 qaa={:.4} w32={:.4} ({})",
        (a2+b2)/2.0, (a32+b32)/2.0, (a2+b2) > (a32+b32),
        o1_8 > o1_2,
        qaa > a2.max(a32),
        mean("convnet-a-qaa"), mean("convnet-a-w32"), mean("convnet-a-qaa") >= mean("convnet-a-w32"));
    let _ = std::fs::remove_dir_all(&dir);
}
