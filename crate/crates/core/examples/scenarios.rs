//! Run the built-in scenarios, or a scenario file given on the command line.

use zta::harness::scenario::{builtin, builtin_names, run_isolated};
use zta::harness::Scenario;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let scenarios: Vec<Scenario> = match std::env::args().nth(1) {
        Some(file) => vec![Scenario::from_json(&std::fs::read_to_string(file)?)?],
        None => builtin_names().filter_map(builtin).collect(),
    };
    let mut failed = 0;
    for s in &scenarios {
        let report = run_isolated(s).await?;
        println!("{report}");
        failed += usize::from(!report.passed());
    }
    if failed > 0 {
        anyhow::bail!("{failed} scenario(s) failed");
    }
    Ok(())
}
