use slrf_core::gradcheck::{self, GradcheckOptions};

#[test]
fn tiny_config_gradients_match_finite_differences() {
    let report = gradcheck::run(&GradcheckOptions::default()).unwrap();
    for g in &report.groups {
        println!("{:<12} rel_err {:.3e} over {} coords ({} skipped)", g.group, g.rel_err, g.coordinates, g.skipped);
    }
    println!("elapsed {:?}", report.elapsed);
    assert!(report.pass());
    assert!(report.elapsed.as_secs_f64() < 60.0);
}

#[test]
fn corrupted_group_is_detected() {
    let opts = GradcheckOptions { corrupt: Some("color".into()), ..GradcheckOptions::default() };
    let report = gradcheck::run(&opts).unwrap();
    let color = report.groups.iter().find(|g| g.group == "color").unwrap();
    assert!(!color.pass);
    assert!(report.groups.iter().filter(|g| g.group != "color").all(|g| g.pass));
}
