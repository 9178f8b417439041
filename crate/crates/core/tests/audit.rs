use failaudit::audit::{audit_dataset, cmd_audit, AuditConfig};
use failaudit::records::{write_records_file, FactorSchema};
use failaudit::synth::{generate, SynthConfig};
use failaudit::ErrorKind;

const TABLE2: &str = include_str!("../../../configs/table2_proportions.toml");

fn small_config(iterations: usize) -> AuditConfig {
    let mut config = AuditConfig::from_toml_str(&format!("iterations = {iterations}\nseed = 3\n")).unwrap();
    config.overall_min_size = 200;
    config.stratum_min_size = 100;
    config.rate_test_min_size = 200;
    config
}

fn cohort(n: usize) -> failaudit::records::Dataset {
    let mut synth = SynthConfig::from_toml_str(TABLE2).unwrap();
    synth.cohort_size = n;
    generate(&synth).unwrap()
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let data = cohort(3000);
    let schema = FactorSchema::mammography();
    let config = small_config(30);
    let a = audit_dataset(&data, &schema, &config).unwrap().artifacts().unwrap();
    let b = audit_dataset(&data, &schema, &config).unwrap().artifacts().unwrap();
    assert_eq!(a, b);
    let names: Vec<String> = a.iter().map(|(p, _)| p.to_string_lossy().into_owned()).collect();
    for expected in ["report.txt", "report.json", "overall.csv", "subgroups.csv", "fn_risk.csv", "fp_risk.csv"] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    assert!(names.iter().any(|n| n.starts_with("roc/")));
    assert!(names.iter().any(|n| n.starts_with("bootstrap/")));

    let mut other = config.clone();
    other.seed = 4;
    let c = audit_dataset(&data, &schema, &other).unwrap().artifacts().unwrap();
    assert_ne!(a, c);
}

#[test]
fn report_covers_every_subgroup() {
    let report = audit_dataset(&cohort(3000), &FactorSchema::mammography(), &small_config(20)).unwrap();
    assert_eq!(report.fn_risk.rows.len(), 14);
    assert_eq!(report.fp_risk.rows.len(), 8);
    let text = report.render_text();
    for label in ["BI-RADS density D", ">70y/o", "Calcification", "seed"] {
        assert!(text.contains(label), "{label}");
    }
    let json: serde_json::Value = serde_json::from_slice(
        &report.artifacts().unwrap().into_iter().find(|(p, _)| p.ends_with("report.json")).unwrap().1,
    )
    .unwrap();
    assert_eq!(json["header"]["seed"], 3);
}

#[test]
fn empty_input_is_an_input_error_with_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.csv");
    write_records_file(&[], &input).unwrap();
    let mut config = small_config(10);
    config.input = Some(input);
    let err = cmd_audit(&config).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Input);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn unknown_config_key_is_named() {
    let err = AuditConfig::from_toml_str("iterations = 10\nbogus_key = 1\n").unwrap_err();
    assert!(err.to_string().contains("bogus_key"), "{err}");
    let err = AuditConfig::from_toml_str("ci = \"wilson\"\n").and_then(|c| c.validate()).unwrap_err();
    assert!(err.to_string().contains("ci"), "{err}");
}
