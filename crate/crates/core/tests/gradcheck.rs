use sarcasm_core::verify::gradcheck_suite;
use sarcasm_tensor::GradCheckOptions;

#[test]
fn every_check_in_the_suite_passes() {
    let outcomes = gradcheck_suite(0, &GradCheckOptions::default());
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name.as_str())
        .collect();
    assert!(failed.is_empty(), "failed checks: {failed:?}");
    assert!(outcomes.iter().any(|o| o.name == "model/full"));
}
