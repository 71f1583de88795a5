use ebpmse::mse::MseVariant;
use ebpmse::sim::{run_study, Design, Scenario, SimConfig};

#[test]
fn noninformative_mean_mse_is_nearly_unbiased() {
    let mut c = SimConfig::new(Design::Noninformative { areas: 100, r_sigma: 1.0 });
    c.replicates = 500;
    c.l = 50;
    c.b = 30;
    c.population_size = 50;
    c.standard = false;
    c.parameters = vec!["mean".into()];
    let res = run_study(&c).unwrap();
    assert!(res.dropped.is_empty(), "{:?}", res.dropped);
    let rb = res.rb("mean", Scenario::Pooled, MseVariant::NoBc).unwrap().unwrap();
    // percent
    assert!(rb.abs() < 10.0, "RB(noBC) = {rb}%");
}
