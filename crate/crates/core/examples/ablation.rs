//! Runs toy ablation variants and prints one line per run.
//!
//! Usage: ablation <steps> <seeds> <variant>...
//!
//! `TOY`, `SYNTH` and `TRAIN` may hold JSON objects whose fields override
//! the toy spec, synthesis settings and toy training settings.

use cmems::synthesis::SynthesisConfig;
use cmems::toybench::{toy_train_config, AblationSetup, ToySpec, Variant};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn overridden<T: Serialize + DeserializeOwned>(base: T, var: &str) -> T {
    let Ok(text) = std::env::var(var) else {
        return base;
    };
    let mut v = serde_json::to_value(base).unwrap();
    let patch: serde_json::Value = serde_json::from_str(&text).expect("override is a JSON object");
    for (k, x) in patch.as_object().expect("override is a JSON object") {
        v[k] = x.clone();
    }
    serde_json::from_value(v).expect("override fits the target type")
}

fn main() -> cmems::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let num = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let mut full = overridden(toy_train_config(), "TRAIN");
    full.max_iter = num(0, full.max_iter);
    let spec = overridden(ToySpec::default(), "TOY");
    let synth = overridden(SynthesisConfig::default(), "SYNTH");
    let seeds: Vec<u64> = (0..num(1, 1)).collect();
    let variants: Vec<Variant> = if args.len() > 2 {
        args[2..].iter().map(|s| Variant::parse(s)).collect::<cmems::Result<_>>()?
    } else {
        Variant::COMPONENTS.to_vec()
    };
    let setup = AblationSetup::new(&spec, &synth, full)?;
    for v in variants {
        for &s in &seeds {
            let (row, _) = setup.run(v, s)?;
            println!(
                "{:<26} seed {} dsc {:.4} per-class {:?} loss {:.3} {:.1}s",
                v.name(),
                s,
                row.dsc_avg,
                row.per_class_dsc.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                row.final_l_total,
                row.seconds
            );
        }
    }
    Ok(())
}
